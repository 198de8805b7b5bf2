//! RC-MAE training: reconstruction plus consistency against the EMA teacher,
//! SGD with momentum on the student, then the teacher update.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{contract, LabError, Result};
use crate::linalg::DenseMatrix;
use crate::masking::{draw_mask_pair, MaskMode, MaskPair};
use crate::rng::Rng;

use super::mae::{forward_on_tape, masked_loss_on_tape, param_leaves, TinyMae};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RcMaeMode {
    MaeOnly,
    RcmaeS,
    RcmaeD,
}

impl RcMaeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RcMaeMode::MaeOnly => "mae_only",
            RcMaeMode::RcmaeS => "rcmae_s",
            RcMaeMode::RcmaeD => "rcmae_d",
        }
    }

    pub fn mask_mode(self) -> MaskMode {
        match self {
            RcMaeMode::RcmaeD => MaskMode::Different,
            _ => MaskMode::Same,
        }
    }
}

impl std::str::FromStr for RcMaeMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mae_only" => Ok(Self::MaeOnly),
            "rcmae_s" => Ok(Self::RcmaeS),
            "rcmae_d" => Ok(Self::RcmaeD),
            other => Err(format!("unknown mode `{other}` (expected mae_only|rcmae_s|rcmae_d)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcMaeConfig {
    pub mask_ratio: f64,
    pub mode: RcMaeMode,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub consistency_weight: f64,
}

impl Default for RcMaeConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            mode: RcMaeMode::RcmaeS,
            alpha: 0.999,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            iterations: 2000,
            consistency_weight: 1.0,
        }
    }
}

impl RcMaeConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "RcMaeConfig";
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(contract(op, format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(contract(op, format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(contract(op, "need lr > 0, momentum in [0, 1), weight_decay >= 0"));
        }
        if self.batch_size == 0 {
            return Err(contract(op, "batch_size must be positive"));
        }
        if !(self.consistency_weight >= 0.0) {
            return Err(contract(op, "consistency_weight must be non-negative"));
        }
        Ok(())
    }
}

/// Model plus optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeTrainer {
    pub model: TinyMae,
    pub velocity: Vec<DenseMatrix>,
    pub step: usize,
}

impl MaeTrainer {
    pub fn new(model: TinyMae) -> Self {
        let velocity = model.student.iter().map(|p| DenseMatrix::zeros(p.rows(), p.cols())).collect();
        Self {
            model,
            velocity,
            step: 0,
        }
    }
}

/// One batch element: tokens, normalised targets and the mask pair.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub tokens: &'a DenseMatrix,
    pub targets: &'a DenseMatrix,
    pub masks: &'a MaskPair,
}

/// Student gradients, kept per loss so their geometry can be compared.
#[derive(Clone, Debug)]
pub struct BatchGrads {
    pub loss_r: f64,
    pub loss_c: f64,
    pub recon: Vec<DenseMatrix>,
    /// `None` when the teacher is not consulted.
    pub cons: Option<Vec<DenseMatrix>>,
}

/// Flattened view over a parameter-shaped gradient list.
pub fn flatten(grads: &[DenseMatrix]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.as_slice().iter().copied()).collect()
}

pub fn grad_norm(grads: &[DenseMatrix]) -> f64 {
    grads.iter().map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

pub fn grad_cosine(a: &[DenseMatrix], b: &[DenseMatrix]) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).sum::<f64>())
        .sum();
    let (na, nb) = (grad_norm(a), grad_norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// A recorded batch objective: parameter leaves and the two loss nodes.
pub struct LossTape {
    pub tape: Tape,
    pub student: Vec<NodeId>,
    /// Teacher leaves, behind a stop-gradient.
    pub teacher: Option<Vec<NodeId>>,
    pub loss_r: NodeId,
    pub loss_c: Option<NodeId>,
}

/// Records batch-mean `L_r` and, when `with_teacher`, `L_c` on one tape.
pub fn record_batch(model: &TinyMae, batch: &[Sample<'_>], with_teacher: bool) -> Result<LossTape> {
    if batch.is_empty() {
        return Err(contract("record_batch", "empty batch"));
    }
    let mut tape = Tape::new();
    let student = param_leaves(&mut tape, &model.student);
    let teacher = if with_teacher {
        Some(param_leaves(&mut tape, &model.teacher))
    } else {
        None
    };
    let mut lr_nodes = Vec::with_capacity(batch.len());
    let mut lc_nodes = Vec::with_capacity(batch.len());
    for s in batch {
        let y = forward_on_tape(&mut tape, &student, model, s.tokens, &s.masks.student)?;
        let target = tape.leaf(s.targets.clone());
        lr_nodes.push(masked_loss_on_tape(&mut tape, y, target, &s.masks.student)?);
        if let Some(pt) = &teacher {
            let yt = forward_on_tape(&mut tape, pt, model, s.tokens, &s.masks.teacher)?;
            let yt = tape.stop_grad(yt);
            lc_nodes.push(masked_loss_on_tape(&mut tape, y, yt, &s.masks.student)?);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mean_of = |tape: &mut Tape, nodes: &[NodeId]| -> Result<NodeId> {
        let mut acc = nodes[0];
        for &n in &nodes[1..] {
            acc = tape.add(acc, n)?;
        }
        Ok(tape.scale(acc, scale))
    };
    let loss_r = mean_of(&mut tape, &lr_nodes)?;
    let loss_c = if with_teacher {
        Some(mean_of(&mut tape, &lc_nodes)?)
    } else {
        None
    };
    Ok(LossTape {
        tape,
        student,
        teacher,
        loss_r,
        loss_c,
    })
}

/// Batch-mean `L_r` and (optionally) `L_c` with separate student gradients.
pub fn batch_grads(model: &TinyMae, batch: &[Sample<'_>], with_teacher: bool) -> Result<BatchGrads> {
    let lt = record_batch(model, batch, with_teacher)?;
    let mut gr = lt.tape.backward(lt.loss_r)?;
    let recon = lt.student.iter().map(|&p| gr.take(p)).collect();
    let (loss_c, cons) = match lt.loss_c {
        Some(lc) => {
            let mut gc = lt.tape.backward(lc)?;
            (lt.tape.scalar(lc), Some(lt.student.iter().map(|&p| gc.take(p)).collect()))
        }
        None => (0.0, None),
    };
    Ok(BatchGrads {
        loss_r: lt.tape.scalar(lt.loss_r),
        loss_c,
        recon,
        cons,
    })
}

/// `L_r + w·L_c` as a value, for finite-difference checks.
pub fn batch_objective(model: &TinyMae, batch: &[Sample<'_>], weight: f64) -> Result<f64> {
    let lt = record_batch(model, batch, weight != 0.0)?;
    Ok(lt.tape.scalar(lt.loss_r) + lt.loss_c.map_or(0.0, |c| weight * lt.tape.scalar(c)))
}

/// `L_r + w·L_c` summed into one gradient list.
pub fn combined(grads: &BatchGrads, weight: f64) -> Vec<DenseMatrix> {
    match &grads.cons {
        Some(c) if weight != 0.0 => grads
            .recon
            .iter()
            .zip(c)
            .map(|(r, c)| {
                let mut g = r.clone();
                g.add_assign_unchecked(&c.scale(weight));
                g
            })
            .collect(),
        _ => grads.recon.clone(),
    }
}

/// `v ← μ v + (g + wd·θ)`, `θ ← θ - λ v`.
pub fn momentum_step(trainer: &mut MaeTrainer, grad: &[DenseMatrix], config: &RcMaeConfig) {
    let (mu, lr, wd) = (config.momentum, config.lr, config.weight_decay);
    for ((p, v), g) in trainer.model.student.iter_mut().zip(&mut trainer.velocity).zip(grad) {
        for ((pv, vv), gv) in p.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(g.as_slice()) {
            *vv = mu * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    trainer.step += 1;
}

/// Per-step training statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_r: f64,
    pub loss_c: f64,
    pub norm_recon: f64,
    pub norm_cons: f64,
    pub norm_total: f64,
    pub cos_recon_vs_cons: f64,
}

fn check_finite(trainer: &MaeTrainer, g: &BatchGrads, total: &[DenseMatrix]) -> Result<()> {
    let params_ok = trainer.model.student.iter().all(DenseMatrix::is_finite);
    if g.loss_r.is_finite() && g.loss_c.is_finite() && params_ok && total.iter().all(DenseMatrix::is_finite) {
        return Ok(());
    }
    let max_param = trainer
        .model
        .student
        .iter()
        .map(|p| p.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .fold(0.0f64, f64::max);
    Err(LabError::NonFinite {
        step: trainer.step,
        detail: format!(
            "loss_r={} loss_c={} |grad_r|={} |grad_total|={} max|θ_s|={}",
            g.loss_r,
            g.loss_c,
            grad_norm(&g.recon),
            grad_norm(total),
            max_param
        ),
    })
}

/// Gradient step on explicit samples, then the EMA update.
pub fn train_step_on(trainer: &mut MaeTrainer, batch: &[Sample<'_>], config: &RcMaeConfig) -> Result<StepMetrics> {
    let use_teacher = config.mode != RcMaeMode::MaeOnly;
    let g = batch_grads(&trainer.model, batch, use_teacher)?;
    let total = combined(&g, config.consistency_weight);
    check_finite(trainer, &g, &total)?;
    let metrics = StepMetrics {
        step: trainer.step,
        loss_r: g.loss_r,
        loss_c: g.loss_c,
        norm_recon: grad_norm(&g.recon),
        norm_cons: g.cons.as_deref().map_or(0.0, grad_norm),
        norm_total: grad_norm(&total),
        cos_recon_vs_cons: g.cons.as_deref().map_or(0.0, |c| grad_cosine(&g.recon, c)),
    };
    momentum_step(trainer, &total, config);
    if use_teacher {
        trainer.model.ema_update(config.alpha);
    }
    Ok(metrics)
}

/// Draws the batch and its masks for `trainer.step` from labelled
/// substreams of `rng`, so the student's masks do not depend on the mode.
pub fn draw_batch(
    n_images: usize,
    n_tokens: usize,
    step: usize,
    config: &RcMaeConfig,
    rng: &Rng,
) -> Result<Vec<(usize, MaskPair)>> {
    if n_images == 0 {
        return Err(contract("draw_batch", "empty corpus"));
    }
    let mut brng = rng.substream_indexed("batch", step as u64);
    let mut srng = rng.substream_indexed("student_masks", step as u64);
    let mut trng = rng.substream_indexed("teacher_masks", step as u64);
    (0..config.batch_size)
        .map(|_| {
            let i = brng.below(n_images);
            let masks = draw_mask_pair(n_tokens, config.mask_ratio, config.mode.mask_mode(), &mut srng, &mut trng)?;
            Ok((i, masks))
        })
        .collect()
}

/// One training iteration over `tokens`/`targets` (parallel lists).
pub fn train_step(
    trainer: &mut MaeTrainer,
    tokens: &[DenseMatrix],
    targets: &[DenseMatrix],
    config: &RcMaeConfig,
    rng: &Rng,
) -> Result<StepMetrics> {
    if tokens.len() != targets.len() {
        return Err(contract("train_step", "tokens and targets differ in length"));
    }
    let drawn = draw_batch(tokens.len(), trainer.model.arch.n_tokens, trainer.step, config, rng)?;
    let batch: Vec<Sample<'_>> = drawn
        .iter()
        .map(|(i, m)| Sample {
            tokens: &tokens[*i],
            targets: &targets[*i],
            masks: m,
        })
        .collect();
    train_step_on(trainer, &batch, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build_image_corpus, normalized_targets, ImageCorpusSpec};
    use crate::deep_lab::mae::MaeArch;
    use crate::masking::MaskSpec;

    fn corpus() -> (Vec<DenseMatrix>, Vec<DenseMatrix>) {
        let spec = ImageCorpusSpec {
            n_images: 12,
            ..ImageCorpusSpec::default()
        };
        let tokens = build_image_corpus(&spec, &Rng::new(1)).unwrap();
        let targets = tokens.iter().map(|t| normalized_targets(t).unwrap()).collect();
        (tokens, targets)
    }

    fn trainer(seed: u64) -> MaeTrainer {
        MaeTrainer::new(TinyMae::new(MaeArch::default(), &mut Rng::new(seed)).unwrap())
    }

    fn config(mode: RcMaeMode) -> RcMaeConfig {
        RcMaeConfig {
            mode,
            batch_size: 3,
            alpha: 0.9,
            ..RcMaeConfig::default()
        }
    }

    #[test]
    fn mae_only_leaves_teacher_untouched() {
        let (tok, tgt) = corpus();
        let mut t = trainer(2);
        let teacher = t.model.teacher.clone();
        let m = train_step(&mut t, &tok, &tgt, &config(RcMaeMode::MaeOnly), &Rng::new(3)).unwrap();
        assert_eq!(t.model.teacher, teacher);
        assert_ne!(t.model.student, teacher);
        assert_eq!((m.loss_c, m.norm_cons), (0.0, 0.0));
    }

    #[test]
    fn ema_contract_holds_after_each_step() {
        let (tok, tgt) = corpus();
        let mut t = trainer(4);
        let cfg = config(RcMaeMode::RcmaeD);
        let rng = Rng::new(5);
        for _ in 0..3 {
            let before = t.model.teacher.clone();
            train_step(&mut t, &tok, &tgt, &cfg, &rng).unwrap();
            for ((tn, tp), s) in t.model.teacher.iter().zip(&before).zip(&t.model.student) {
                for ((a, b), c) in tn.as_slice().iter().zip(tp.as_slice()).zip(s.as_slice()) {
                    assert!((a - (cfg.alpha * b + (1.0 - cfg.alpha) * c)).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_weight_matches_mae_only_trajectory() {
        let (tok, tgt) = corpus();
        let rng = Rng::new(6);
        let mut plain = trainer(7);
        let mut weighted = plain.clone();
        let mut cfg = config(RcMaeMode::RcmaeD);
        cfg.consistency_weight = 0.0;
        for _ in 0..4 {
            train_step(&mut plain, &tok, &tgt, &config(RcMaeMode::MaeOnly), &rng).unwrap();
            train_step(&mut weighted, &tok, &tgt, &cfg, &rng).unwrap();
        }
        assert_eq!(plain.model.student, weighted.model.student);
        assert_eq!(plain.velocity, weighted.velocity);
    }

    #[test]
    fn modes_agree_when_masks_coincide() {
        let (tok, tgt) = corpus();
        let m = MaskSpec::from_masked(16, &[0, 2, 5, 6, 7, 9, 11, 12, 13, 14, 15, 3]).unwrap();
        let same = MaskPair::same(m.clone());
        let diff = MaskPair {
            student: m.clone(),
            teacher: m,
            mode: MaskMode::Different,
        };
        let mut a = trainer(8);
        let mut b = a.clone();
        // one warm-up step so that the teacher differs from the student
        let warm = [Sample {
            tokens: &tok[1],
            targets: &tgt[1],
            masks: &same,
        }];
        train_step_on(&mut a, &warm, &config(RcMaeMode::RcmaeS)).unwrap();
        train_step_on(&mut b, &warm, &config(RcMaeMode::RcmaeS)).unwrap();
        let ma = train_step_on(
            &mut a,
            &[Sample { tokens: &tok[0], targets: &tgt[0], masks: &same }],
            &config(RcMaeMode::RcmaeS),
        )
        .unwrap();
        let mb = train_step_on(
            &mut b,
            &[Sample { tokens: &tok[0], targets: &tgt[0], masks: &diff }],
            &config(RcMaeMode::RcmaeD),
        )
        .unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_gets_no_adjoint() {
        let (tok, tgt) = corpus();
        let mut t = trainer(9);
        train_step(&mut t, &tok, &tgt, &config(RcMaeMode::RcmaeS), &Rng::new(1)).unwrap();
        let masks = draw_batch(12, 16, 0, &config(RcMaeMode::RcmaeD), &Rng::new(2)).unwrap();
        let batch: Vec<_> = masks
            .iter()
            .map(|(i, m)| Sample { tokens: &tok[*i], targets: &tgt[*i], masks: m })
            .collect();
        let mut lt = record_batch(&t.model, &batch, true).unwrap();
        let total = lt.tape.add(lt.loss_r, lt.loss_c.unwrap()).unwrap();
        let g = lt.tape.backward(total).unwrap();
        assert!(lt.tape.scalar(lt.loss_c.unwrap()) > 0.0);
        assert!(lt.teacher.unwrap().iter().all(|&p| g.get(p).is_none()));
        assert!(lt.student.iter().any(|&p| g.get(p).is_some()));
    }

    #[test]
    fn divergence_is_reported() {
        let (tok, tgt) = corpus();
        let mut t = trainer(10);
        t.model.student[0].as_mut_slice()[0] = 1e308;
        let mut cfg = config(RcMaeMode::RcmaeS);
        cfg.lr = 1e10;
        let mut err = None;
        for _ in 0..5 {
            if let Err(e) = train_step(&mut t, &tok, &tgt, &cfg, &Rng::new(1)) {
                err = Some(e);
                break;
            }
        }
        assert!(matches!(err, Some(LabError::NonFinite { .. })));
    }

    #[test]
    fn config_validation() {
        let mut c = RcMaeConfig::default();
        assert!(c.validate().is_ok());
        c.mask_ratio = 1.0;
        assert!(c.validate().is_err());
    }
}
