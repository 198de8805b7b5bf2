//! Finite-difference oracles shared by the gradient and acceptance tests.

#![allow(dead_code)]

use std::path::Path;

use rcmae_lab::datasets::{build_image_corpus, normalized_targets, ImageCorpusSpec};
use rcmae_lab::deep_lab::shallow::{shallow_grads, Activation, ShallowNet};
use rcmae_lab::deep_lab::train::{batch_grads, batch_objective, combined, record_batch, Sample};
use rcmae_lab::deep_lab::{MaeArch, TinyMae};
use rcmae_lab::linear_lab::masked_input;
use rcmae_lab::masking::{draw_mask, draw_mask_pair, MaskMode, MaskPair};
use rcmae_lab::harness::{Experiment, ExperimentConfig};
use rcmae_lab::{DenseMatrix, DenseVector, Rng};

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error and the number of checked coordinates.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub worst: f64,
}

pub struct MaeFixture {
    pub model: TinyMae,
    pub tokens: Vec<DenseMatrix>,
    pub targets: Vec<DenseMatrix>,
    pub masks: Vec<MaskPair>,
}

impl MaeFixture {
    /// Two images under different student/teacher masks and a teacher
    /// pushed away from the student so both losses are live.
    pub fn new(seed: u64) -> Self {
        let rng = Rng::new(seed);
        let spec = ImageCorpusSpec {
            n_images: 2,
            ..ImageCorpusSpec::default()
        };
        let tokens = build_image_corpus(&spec, &rng.substream("data")).unwrap();
        let targets = tokens.iter().map(|t| normalized_targets(t).unwrap()).collect();
        let mut model = TinyMae::new(MaeArch::default(), &mut rng.substream("init")).unwrap();
        let mut noise = rng.substream("teacher");
        for t in &mut model.teacher {
            for v in t.as_mut_slice() {
                *v += 0.05 * noise.standard_normal();
            }
        }
        let (mut s, mut t) = (rng.substream("s"), rng.substream("t"));
        let masks = (0..2)
            .map(|_| draw_mask_pair(16, 0.75, MaskMode::Different, &mut s, &mut t).unwrap())
            .collect();
        Self {
            model,
            tokens,
            targets,
            masks,
        }
    }

    pub fn batch(&self) -> Vec<Sample<'_>> {
        (0..2)
            .map(|i| Sample {
                tokens: &self.tokens[i],
                targets: &self.targets[i],
                masks: &self.masks[i],
            })
            .collect()
    }
}

/// Tape gradient of `L_r + L_c` on TinyMae against central differences at
/// `samples` uniformly drawn student coordinates.
pub fn mae_fd(seed: u64, samples: usize, h: f64, floor: f64) -> FdReport {
    let fx = MaeFixture::new(seed);
    let batch = fx.batch();
    let g = combined(&batch_grads(&fx.model, &batch, true).unwrap(), 1.0);
    let sizes: Vec<usize> = fx.model.student.iter().map(DenseMatrix::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = Rng::new(seed).substream("coords");
    let mut worst = 0.0f64;
    let mut model = fx.model.clone();
    for _ in 0..samples {
        let mut flat = rng.below(total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let orig = model.student[p].as_slice()[flat];
        model.student[p].as_mut_slice()[flat] = orig + h;
        let up = batch_objective(&model, &batch, 1.0).unwrap();
        model.student[p].as_mut_slice()[flat] = orig - h;
        let down = batch_objective(&model, &batch, 1.0).unwrap();
        model.student[p].as_mut_slice()[flat] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_error(g[p].as_slice()[flat], numeric, floor));
    }
    FdReport { checked: samples, worst }
}

/// Largest teacher adjoint after backward passes from both losses.
pub fn mae_teacher_adjoint_max(seed: u64) -> f64 {
    let fx = MaeFixture::new(seed);
    let lt = record_batch(&fx.model, &fx.batch(), true).unwrap();
    let teacher = lt.teacher.as_ref().unwrap();
    let mut max = 0.0f64;
    for out in [lt.loss_r, lt.loss_c.unwrap()] {
        let g = lt.tape.backward(out).unwrap();
        for &t in teacher {
            max = max.max(g.wrt(t).max_abs());
        }
    }
    max
}

pub fn shallow_fixture(seed: u64, activation: Activation) -> (ShallowNet, DenseVector, DenseVector) {
    let mut rng = Rng::new(seed);
    let mut net = ShallowNet::random(8, 12, activation, 0.9, 0.01, 0.0, &mut rng).unwrap();
    net.c = net.c.map(|v| 0.9 * v + 0.02);
    net.d = net.d.map(|v| 1.1 * v - 0.01);
    let x = DenseVector::from_vec((0..8).map(|_| rng.standard_normal()).collect());
    let mask = draw_mask(8, 0.5, &mut rng).unwrap();
    let xt = masked_input(&x, &mask).unwrap();
    (net, xt, x)
}

/// Hand-derived shallow gradient of `L_r + L_c` against central differences
/// on every coordinate of both student layers.
pub fn shallow_fd(seed: u64, activation: Activation, h: f64, floor: f64) -> FdReport {
    let (net, xt, x) = shallow_fixture(seed, activation);
    let g = shallow_grads(&net, &xt, &x).unwrap().total().unwrap();
    let loss = |n: &ShallowNet| {
        let s = shallow_grads(n, &xt, &x).unwrap();
        s.loss_r + s.loss_c
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for layer in 0..2 {
        let len = if layer == 0 { net.a.len() } else { net.b.len() };
        for k in 0..len {
            let mut up = net.clone();
            let mut down = net.clone();
            let (pu, pd, a) = if layer == 0 {
                (&mut up.a, &mut down.a, g.a.as_slice()[k])
            } else {
                (&mut up.b, &mut down.b, g.b.as_slice()[k])
            };
            pu.as_mut_slice()[k] += h;
            pd.as_mut_slice()[k] -= h;
            let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
            worst = worst.max(rel_error(a, numeric, floor));
            checked += 1;
        }
    }
    FdReport { checked, worst }
}

/// Shrinks every experiment to a few seconds.
pub fn small_config(experiment: Experiment, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::defaults(experiment);
    c.out_dir = out.to_path_buf();
    c.seeds = vec![3, 11];
    for (k, v) in [
        ("data.points_per_cluster", "10"),
        ("linear.iterations", "15"),
        ("linear.probe_batch", "3"),
        ("covariance.samples", "2000"),
        ("covariance.epochs", "2"),
        ("covariance.steps_per_epoch", "20"),
        ("shallow.hidden", "6"),
        ("shallow.iterations", "8"),
        ("shallow.probe_batch", "2"),
        ("corpus.n_images", "6"),
        ("rcmae.iterations", "6"),
        ("rcmae.batch_size", "2"),
        ("probe.rounds", "2"),
        ("probe.every", "2"),
        ("probe.batch", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}
