use std::collections::BTreeMap;
use std::path::Path;

use common::small_config;
use rcmae_lab::harness::{run_experiment, Experiment};

mod common;

fn csv_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv" || e == "ckpt"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn every_experiment_reruns_byte_identically() {
    for experiment in Experiment::ALL {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sa = run_experiment(&small_config(experiment, a.path())).unwrap();
        let sb = run_experiment(&small_config(experiment, b.path())).unwrap();
        assert!(sa.failed_seeds.is_empty(), "{:?}", sa.failed_seeds);
        let name = experiment.as_str();
        let (fa, fb) = (csv_bytes(&a.path().join(name)), csv_bytes(&b.path().join(name)));
        assert!(!fa.is_empty(), "{name}: no files");
        assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
        for (file, bytes) in &fa {
            assert!(bytes == &fb[file], "{name}/{file} differs between runs");
        }
        assert_eq!(sa.per_seed, sb.per_seed);
    }
}

#[test]
fn seeds_change_the_output() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&small_config(Experiment::LinearProbeSuite, dir.path())).unwrap();
    let files = csv_bytes(&dir.path().join("linear_probe_suite"));
    let a = &files["seed3.csv"];
    let b = &files["seed11.csv"];
    let body = |v: &[u8]| String::from_utf8_lossy(v).lines().skip(2).collect::<Vec<_>>().join("\n");
    assert_ne!(body(a), body(b));
}

#[test]
fn seed_results_do_not_depend_on_the_seed_list() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = small_config(Experiment::ShallowProbeSuite, a.path());
    ca.seeds = vec![11];
    let cb = small_config(Experiment::ShallowProbeSuite, b.path());
    run_experiment(&ca).unwrap();
    run_experiment(&cb).unwrap();
    let name = "shallow_probe_suite";
    assert_eq!(csv_bytes(&a.path().join(name))["seed11.csv"], csv_bytes(&b.path().join(name))["seed11.csv"]);
}
