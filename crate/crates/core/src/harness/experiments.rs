//! Per-seed execution of each experiment. Every random draw comes from a
//! labelled substream of `Rng::new(seed)`, so a seed's output is a pure
//! function of the configuration.

use crate::datasets::{build_gaussian_mixture, build_image_corpus, normalized_targets, VectorDataset};
use crate::deep_lab::train::train_step as mae_train_step;
use crate::deep_lab::{
    run_deep_probe_subset, shallow::run_shallow_probe, shallow::shallow_train_step, MaeTrainer, RcMaeMode, ShallowNet,
    StepMetrics, TinyMae,
};
use crate::error::Result;
use crate::linalg::{DenseMatrix, DenseVector};
use crate::linear_lab::{
    batch_losses, batch_recon_grad, check_cons_bound, check_recon_bound, covariance_fixed_point, draw_pair, run_probe,
    sample_batch, train_step as linear_train_step, verify_prop1, GradientHistory, LinearPair, ProbeCase, ProbeRecord,
};
use crate::rng::Rng;

use super::config::{Experiment, ExperimentConfig};
use super::table::{fmt_f64, Schema, Table};

/// Tables (and optional binary artifacts) produced for one seed. The
/// string is a file-name suffix, empty for the main table.
#[derive(Debug, Default)]
pub struct SeedOutput {
    pub tables: Vec<(String, Table)>,
    pub blobs: Vec<(String, Vec<u8>)>,
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let root = Rng::new(seed);
    let tag = |t: Table| t.tag("experiment", config.experiment.as_str()).tag("seed", seed);
    let mut out = SeedOutput::default();
    match config.experiment {
        Experiment::Prop1Verify | Experiment::BoundsCheck => {
            out.tables.push((String::new(), tag(linear_trace(config, &root)?)));
        }
        Experiment::LinearProbeSuite => out.tables.push((String::new(), tag(linear_probes(config, &root)?))),
        Experiment::ShallowProbeSuite => out.tables.push((String::new(), tag(shallow_probes(config, &root)?))),
        Experiment::CovarianceCheck => {
            let (fit, trace) = covariance(config, &root)?;
            out.tables.push(("_fit".into(), tag(fit)));
            out.tables.push((String::new(), tag(trace)));
        }
        Experiment::RcmaeTrain => {
            let (table, trainer) = rcmae_train(config, &root, config.rcmae.mode)?;
            out.tables.push((String::new(), tag(table)));
            let mut ckpt = Vec::new();
            trainer.model.write_checkpoint(&mut ckpt)?;
            out.blobs.push(("_final.ckpt".into(), ckpt));
        }
        Experiment::RcmaeProbeSuite => out.tables.push((String::new(), tag(rcmae_probes(config, &root)?))),
        Experiment::SVsDCompare => {
            for mode in [RcMaeMode::RcmaeS, RcMaeMode::RcmaeD] {
                let (table, _) = rcmae_train(config, &root, mode)?;
                let table = tag(table).tag("variant", mode.as_str()).tag("burn_in", config.burn_in);
                out.tables.push((format!("_{}", mode.as_str()), table));
            }
        }
    }
    Ok(out)
}

fn dataset(config: &ExperimentConfig, root: &Rng) -> Result<VectorDataset> {
    build_gaussian_mixture(&config.data, &root.substream("data"))
}

fn linear_pair(config: &ExperimentConfig, root: &Rng) -> Result<LinearPair> {
    let l = &config.linear;
    LinearPair::random(config.data.dim, l.init_std, l.alpha, l.lr, l.momentum, &mut root.substream("init"))
}

fn bool_cell(b: bool) -> String {
    u8::from(b).to_string()
}

/// Plain-SGD training with the identity and both bounds checked after every
/// step on a fresh masked input.
fn linear_trace(config: &ExperimentConfig, root: &Rng) -> Result<Table> {
    let l = &config.linear;
    let data = dataset(config, root)?;
    let mut pair = linear_pair(config, root)?;
    let mut history = GradientHistory::new(l.iterations);
    let train = root.substream("train");
    let check = root.substream("check");
    let mut table = Table::new(Schema::LinearTrace);
    for step in 0..l.iterations {
        let batch = sample_batch(&data, l.batch_size, l.mask_ratio, &mut train.substream_indexed("batch", step as u64))?;
        let (loss_r, loss_c) = batch_losses(&pair, &batch)?;
        let g = linear_train_step(&mut pair, &mut history, batch, l.mode.uses_momentum())?;
        let (_, xt) = draw_pair(&data, l.mask_ratio, &mut check.substream_indexed("x", step as u64))?;
        let delta = verify_prop1(&pair, &history, &xt)?;
        let cb = check_cons_bound(&pair, &history, &xt)?;
        let rb = check_recon_bound(&pair, &history, &xt)?;
        table.push(vec![
            pair.step.to_string(),
            fmt_f64(loss_r),
            fmt_f64(loss_c),
            fmt_f64(g.frobenius_norm()),
            fmt_f64(delta),
            fmt_f64(cb.lhs),
            fmt_f64(cb.rhs),
            bool_cell(cb.holds()),
            fmt_f64(rb.lhs),
            fmt_f64(rb.rhs),
            bool_cell(rb.holds()),
        ]);
    }
    Ok(table)
}

/// Running per-case sums of probe records.
#[derive(Default)]
struct CaseMeans {
    sums: [[f64; 5]; 3],
    counts: [usize; 3],
}

impl CaseMeans {
    fn add(&mut self, r: &ProbeRecord) {
        let i = r.case as usize;
        let vals = [r.norm_recon, r.norm_cons, r.cos_prev_full_vs_cons, r.cos_recon_vs_cons, r.input_similarity];
        for (s, v) in self.sums[i].iter_mut().zip(vals) {
            *s += v;
        }
        self.counts[i] += 1;
    }

    fn emit(&self, step: usize, table: &mut Table) {
        for case in ProbeCase::ALL {
            let i = case as usize;
            let n = self.counts[i].max(1) as f64;
            let mut row = vec![step.to_string(), case.as_str().to_string()];
            row.extend(self.sums[i].iter().map(|s| fmt_f64(s / n)));
            table.push(row);
        }
    }
}

/// Index pair `(i, j)` with `j != i`.
fn two_points(n: usize, rng: &mut Rng) -> (usize, usize) {
    let i = rng.below(n);
    if n < 2 {
        return (i, i);
    }
    let mut j = rng.below(n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

/// Runs `probe` for every case from a shared stream state so the cases
/// share the first input's mask.
fn probe_cases(rng: &Rng, mut probe: impl FnMut(ProbeCase, &mut Rng) -> Result<ProbeRecord>, acc: &mut CaseMeans) -> Result<()> {
    for case in ProbeCase::ALL {
        acc.add(&probe(case, &mut rng.clone())?);
    }
    Ok(())
}

fn linear_probes(config: &ExperimentConfig, root: &Rng) -> Result<Table> {
    let l = &config.linear;
    let data = dataset(config, root)?;
    let mut pair = linear_pair(config, root)?;
    let mut history = GradientHistory::new(1);
    let train = root.substream("train");
    let probes = root.substream("probe");
    let momentum = l.mode.uses_momentum();
    let mut table = Table::new(Schema::Probe);
    for step in 0..l.iterations {
        let batch = sample_batch(&data, l.batch_size, l.mask_ratio, &mut train.substream_indexed("batch", step as u64))?;
        linear_train_step(&mut pair, &mut history, batch, momentum)?;
        let round = probes.substream_indexed("step", step as u64);
        let mut acc = CaseMeans::default();
        for k in 0..l.probe_batch {
            let mut r = round.substream_indexed("point", k as u64);
            let (i, j) = two_points(data.len(), &mut r);
            let (x, other) = (&data.points[i], &data.points[j]);
            probe_cases(&r, |case, rng| run_probe(&pair, x, other, case, l.mask_ratio, momentum, rng), &mut acc)?;
        }
        acc.emit(pair.step, &mut table);
    }
    Ok(table)
}

fn shallow_probes(config: &ExperimentConfig, root: &Rng) -> Result<Table> {
    let s = &config.shallow;
    let data = dataset(config, root)?;
    let mut net = ShallowNet::random(
        config.data.dim,
        s.hidden,
        s.activation,
        s.alpha,
        s.lr,
        s.momentum,
        &mut root.substream("init"),
    )?;
    let train = root.substream("train");
    let probes = root.substream("probe");
    let momentum = s.mode.uses_momentum();
    let mut table = Table::new(Schema::Probe);
    for step in 0..s.iterations {
        let batch = sample_batch(&data, s.batch_size, s.mask_ratio, &mut train.substream_indexed("batch", step as u64))?;
        shallow_train_step(&mut net, &batch, momentum)?;
        let round = probes.substream_indexed("step", step as u64);
        let mut acc = CaseMeans::default();
        for k in 0..s.probe_batch {
            let mut r = round.substream_indexed("point", k as u64);
            let (i, j) = two_points(data.len(), &mut r);
            let (x, other) = (&data.points[i], &data.points[j]);
            probe_cases(&r, |case, rng| run_shallow_probe(&net, x, other, case, s.mask_ratio, momentum, rng), &mut acc)?;
        }
        acc.emit(net.step, &mut table);
    }
    Ok(table)
}

fn mean_recon_loss(s: &DenseMatrix, batch: &[(DenseVector, DenseVector)]) -> Result<f64> {
    let mut acc = 0.0;
    for (x, xt) in batch {
        let r = s.matvec(xt)?.sub(x);
        acc += 0.5 * r.dot(&r);
    }
    Ok(acc / batch.len() as f64)
}

/// The Monte-Carlo solution, then plain SGD on the reconstruction loss with
/// the distance of the iterate and of its per-epoch average to the solution.
fn covariance(config: &ExperimentConfig, root: &Rng) -> Result<(Table, Table)> {
    let c = &config.covariance;
    let ratio = config.linear.mask_ratio;
    let data = dataset(config, root)?;
    let fit = covariance_fixed_point(&data, ratio, c.samples, &root.substream("covariance"))?;
    let norm_star = fit.s_star.frobenius_norm();
    let mut fit_table = Table::new(Schema::CovarianceFit);
    fit_table.push(vec![
        fit.samples.to_string(),
        fmt_f64(fit.residual_abs),
        fmt_f64(fit.residual_rel),
        bool_cell(fit.pinv_truncated),
        fmt_f64(norm_star),
    ]);

    let mut s = linear_pair(config, root)?.student;
    let dist = |m: &DenseMatrix| -> Result<f64> { Ok(m.sub(&fit.s_star)?.frobenius_norm()) };
    let mut trace = Table::new(Schema::Covariance);
    let d0 = dist(&s)?;
    trace.push(vec!["0".into(), "0".into(), fmt_f64(f64::NAN), fmt_f64(d0), fmt_f64(d0), fmt_f64(norm_star)]);
    let train = root.substream("train");
    let mut step = 0u64;
    for epoch in 1..=c.epochs {
        let mut avg = DenseMatrix::zeros(s.rows(), s.cols());
        let mut loss = 0.0;
        for _ in 0..c.steps_per_epoch {
            let batch = sample_batch(&data, c.batch_size, ratio, &mut train.substream_indexed("batch", step))?;
            loss += mean_recon_loss(&s, &batch)?;
            let g = batch_recon_grad(&s, &batch)?;
            s.axpy(-c.lr, &g)?;
            avg.axpy(1.0 / c.steps_per_epoch as f64, &s)?;
            step += 1;
        }
        trace.push(vec![
            epoch.to_string(),
            step.to_string(),
            fmt_f64(loss / c.steps_per_epoch as f64),
            fmt_f64(dist(&s)?),
            fmt_f64(dist(&avg)?),
            fmt_f64(norm_star),
        ]);
    }
    Ok((fit_table, trace))
}

fn corpus(config: &ExperimentConfig, root: &Rng) -> Result<(Vec<DenseMatrix>, Vec<DenseMatrix>)> {
    let tokens = build_image_corpus(&config.corpus, &root.substream("data"))?;
    let targets = tokens.iter().map(normalized_targets).collect::<Result<Vec<_>>>()?;
    Ok((tokens, targets))
}

fn trainer(config: &ExperimentConfig, root: &Rng) -> Result<MaeTrainer> {
    Ok(MaeTrainer::new(TinyMae::new(config.mae.clone(), &mut root.substream("init"))?))
}

fn metrics_row(m: &StepMetrics) -> Vec<String> {
    vec![
        m.step.to_string(),
        fmt_f64(m.loss_r),
        fmt_f64(m.loss_c),
        fmt_f64(m.norm_recon),
        fmt_f64(m.norm_cons),
        fmt_f64(m.norm_total),
        fmt_f64(m.cos_recon_vs_cons),
    ]
}

/// A full training run in `mode`. Runs in different modes share the
/// initialisation, the batches and the student's masks.
fn rcmae_train(config: &ExperimentConfig, root: &Rng, mode: RcMaeMode) -> Result<(Table, MaeTrainer)> {
    let (tokens, targets) = corpus(config, root)?;
    let mut tr = trainer(config, root)?;
    let cfg = crate::deep_lab::RcMaeConfig {
        mode,
        ..config.rcmae.clone()
    };
    let train = root.substream("train");
    let mut table = Table::new(Schema::Training);
    for _ in 0..cfg.iterations {
        let m = mae_train_step(&mut tr, &tokens, &targets, &cfg, &train)?;
        table.push(metrics_row(&m));
    }
    Ok((table, tr))
}

/// Warm-up training, then `probe.rounds` rounds of `probe.batch` probes
/// separated by `probe.every` further steps.
fn rcmae_probes(config: &ExperimentConfig, root: &Rng) -> Result<Table> {
    let (tokens, targets) = corpus(config, root)?;
    let mut tr = trainer(config, root)?;
    let cfg = &config.rcmae;
    let train = root.substream("train");
    for _ in 0..cfg.iterations {
        mae_train_step(&mut tr, &tokens, &targets, cfg, &train)?;
    }
    let prefix = (!config.probe.params.is_empty()).then_some(config.probe.params.as_str());
    let probes = root.substream("probe");
    let mut table = Table::new(Schema::Probe);
    for round in 0..config.probe.rounds {
        if round > 0 {
            for _ in 0..config.probe.every {
                mae_train_step(&mut tr, &tokens, &targets, cfg, &train)?;
            }
        }
        let rr = probes.substream_indexed("round", round as u64);
        let mut acc = CaseMeans::default();
        for k in 0..config.probe.batch {
            let mut r = rr.substream_indexed("point", k as u64);
            let (i, j) = two_points(tokens.len(), &mut r);
            let (a, b) = ((&tokens[i], &targets[i]), (&tokens[j], &targets[j]));
            probe_cases(&r, |case, rng| run_deep_probe_subset(&tr, cfg, a, b, case, prefix, rng), &mut acc)?;
        }
        acc.emit(tr.step, &mut table);
    }
    Ok(table)
}
