//! Linear student/teacher system with closed-form gradients.
//!
//! The student `S` and teacher `T` are `d x (d+1)` matrices acting on a
//! masked input augmented with a constant 1 (the bias column). Per sample:
//!
//! * reconstruction gradient `∇L_r = (S x̃ - x) x̃ᵀ`
//! * consistency gradient `∇L_c = (S - T) x̃ x̃ᵀ` (teacher held constant)
//!
//! With plain SGD and `T₀ = S₀` the EMA recursion telescopes to
//! `S⁽ᵗ⁾ - T⁽ᵗ⁾ = -λ Σ_{i=1..t} αⁱ ∇L⁽ᵗ⁻ⁱ⁾`, which [`verify_prop1`] checks
//! against a recorded [`GradientHistory`].

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::datasets::VectorDataset;
use crate::error::{contract, LabError, Result};
use crate::linalg::{cosine, DenseMatrix, DenseVector};
use crate::masking::{apply_vector_mask, draw_mask, MaskSpec};
use crate::rng::Rng;

/// Slack allowed on the triangle-inequality bounds.
pub const BOUND_SLACK: f64 = 1e-9;

/// Student, teacher and optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPair {
    pub student: DenseMatrix,
    pub teacher: DenseMatrix,
    pub initial_student: DenseMatrix,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub velocity: DenseMatrix,
    pub step: usize,
    momentum_used: bool,
}

impl LinearPair {
    /// Teacher starts as an exact copy of `student`.
    pub fn new(student: DenseMatrix, alpha: f64, lr: f64, momentum: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(contract("LinearPair::new", format!("alpha {alpha} outside (0, 1)")));
        }
        if !(lr > 0.0) {
            return Err(contract("LinearPair::new", format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(contract("LinearPair::new", format!("momentum {momentum} outside [0, 1)")));
        }
        let (r, c) = student.shape();
        Ok(Self {
            teacher: student.clone(),
            initial_student: student.clone(),
            student,
            alpha,
            lr,
            momentum,
            velocity: DenseMatrix::zeros(r, c),
            step: 0,
            momentum_used: false,
        })
    }

    /// `dim x (dim+1)` student with entries `N(0, init_std²)`.
    pub fn random(dim: usize, init_std: f64, alpha: f64, lr: f64, momentum: f64, rng: &mut Rng) -> Result<Self> {
        let s = DenseMatrix::from_fn(dim, dim + 1, |_, _| init_std * rng.standard_normal());
        Self::new(s, alpha, lr, momentum)
    }

    pub fn trained_with_momentum(&self) -> bool {
        self.momentum_used
    }
}

/// Masked input with the constant bias component appended (never masked).
pub fn masked_input(x: &DenseVector, mask: &MaskSpec) -> Result<DenseVector> {
    Ok(apply_vector_mask(x, mask)?.augmented(1.0))
}

fn check_shapes(op: &'static str, s: &DenseMatrix, x_tilde: &DenseVector, out_len: Option<usize>) -> Result<()> {
    if s.cols() != x_tilde.len() || out_len.is_some_and(|n| n != s.rows()) {
        return Err(contract(
            op,
            format!(
                "S is {}x{}, x̃ has length {}, target length {:?}",
                s.rows(),
                s.cols(),
                x_tilde.len(),
                out_len
            ),
        ));
    }
    Ok(())
}

/// `S x̃ x̃ᵀ - x x̃ᵀ`, the gradient of `½‖S x̃ - x‖²`.
pub fn recon_grad(s: &DenseMatrix, x_tilde: &DenseVector, x: &DenseVector) -> Result<DenseMatrix> {
    check_shapes("recon_grad", s, x_tilde, Some(x.len()))?;
    let resid = s.matvec(x_tilde)?.sub(x);
    Ok(DenseMatrix::outer(&resid, x_tilde))
}

/// `(S - T) x̃ x̃ᵀ`, the gradient of `½‖S x̃ - StopGrad(T x̃)‖²` in `S`.
pub fn cons_grad(s: &DenseMatrix, t: &DenseMatrix, x_tilde: &DenseVector) -> Result<DenseMatrix> {
    check_shapes("cons_grad", s, x_tilde, None)?;
    let diff = s.sub(t)?;
    Ok(DenseMatrix::outer(&diff.matvec(x_tilde)?, x_tilde))
}

/// `∇L_r + ∇L_c` for one sample.
pub fn full_grad(pair: &LinearPair, x_tilde: &DenseVector, x: &DenseVector) -> Result<DenseMatrix> {
    let mut g = recon_grad(&pair.student, x_tilde, x)?;
    g.axpy(1.0, &cons_grad(&pair.student, &pair.teacher, x_tilde)?)?;
    Ok(g)
}

/// Plain: `S ← S - λ g`. Momentum: `v ← μ v + g; S ← S - λ v`.
pub fn sgd_step(pair: &mut LinearPair, grad: &DenseMatrix, use_momentum: bool) -> Result<()> {
    if grad.shape() != pair.student.shape() {
        return Err(contract("sgd_step", format!("gradient {:?} for student {:?}", grad.shape(), pair.student.shape())));
    }
    if use_momentum {
        let mu = pair.momentum;
        for (v, g) in pair.velocity.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *v = mu * *v + g;
        }
        pair.student.axpy(-pair.lr, &pair.velocity)?;
        pair.momentum_used = true;
    } else {
        pair.student.axpy(-pair.lr, grad)?;
    }
    pair.step += 1;
    Ok(())
}

/// `T ← α T + (1 - α) S`.
pub fn ema_update(pair: &mut LinearPair) {
    let a = pair.alpha;
    for (t, s) in pair.teacher.as_mut_slice().iter_mut().zip(pair.student.as_slice()) {
        *t = a * *t + (1.0 - a) * s;
    }
}

/// One recorded optimiser step.
#[derive(Clone, Debug)]
pub struct HistoryRecord {
    pub step: usize,
    /// Full gradient `∇L` used for the step (batch mean).
    pub grad: DenseMatrix,
    /// `(x, x̃)` for each sample in the batch.
    pub inputs: Vec<(DenseVector, DenseVector)>,
}

/// Ring buffer of past gradients, oldest first.
#[derive(Clone, Debug)]
pub struct GradientHistory {
    records: VecDeque<HistoryRecord>,
    capacity: usize,
}

impl GradientHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            records: VecDeque::with_capacity(capacity.min(4096)),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, rec: HistoryRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(rec);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn records(&self) -> impl Iterator<Item = &HistoryRecord> {
        self.records.iter()
    }

    /// Gradient recorded for step `t - i` (1-based lag `i`).
    fn lagged(&self, t: usize, i: usize) -> &DenseMatrix {
        &self.records[t - i].grad
    }
}

/// Batch-mean losses `½‖S x̃ - x‖²` and `½‖(S - T) x̃‖²`.
pub fn batch_losses(pair: &LinearPair, batch: &[(DenseVector, DenseVector)]) -> Result<(f64, f64)> {
    let diff = pair.student.sub(&pair.teacher)?;
    let (mut lr, mut lc) = (0.0, 0.0);
    for (x, xt) in batch {
        let r = pair.student.matvec(xt)?.sub(x);
        let c = diff.matvec(xt)?;
        lr += 0.5 * r.dot(&r);
        lc += 0.5 * c.dot(&c);
    }
    let n = batch.len().max(1) as f64;
    Ok((lr / n, lc / n))
}

/// Mean of `∇L_r + ∇L_c` over a batch of `(x, x̃)` pairs.
pub fn batch_grad(pair: &LinearPair, batch: &[(DenseVector, DenseVector)]) -> Result<DenseMatrix> {
    if batch.is_empty() {
        return Err(contract("batch_grad", "empty batch"));
    }
    let mut g = DenseMatrix::zeros(pair.student.rows(), pair.student.cols());
    for (x, xt) in batch {
        g.axpy(1.0, &full_grad(pair, xt, x)?)?;
    }
    Ok(g.scale(1.0 / batch.len() as f64))
}

/// Gradient step, EMA update, history append. Returns the gradient used.
pub fn train_step(
    pair: &mut LinearPair,
    history: &mut GradientHistory,
    batch: Vec<(DenseVector, DenseVector)>,
    use_momentum: bool,
) -> Result<DenseMatrix> {
    let g = batch_grad(pair, &batch)?;
    let step = pair.step;
    sgd_step(pair, &g, use_momentum)?;
    ema_update(pair);
    history.push(HistoryRecord {
        step,
        grad: g.clone(),
        inputs: batch,
    });
    Ok(g)
}

fn require_exact_history(op: &'static str, pair: &LinearPair, history: &GradientHistory) -> Result<()> {
    if pair.trained_with_momentum() {
        return Err(LabError::MomentumTrained(op));
    }
    let complete = history.len() == pair.step
        && history.records.front().is_none_or(|r| r.step == 0);
    if !complete {
        return Err(LabError::HistoryTruncated {
            held: history.len(),
            steps: pair.step,
        });
    }
    Ok(())
}

/// `g x̃ x̃ᵀ` computed as `(g x̃) x̃ᵀ`.
fn project(g: &DenseMatrix, x_tilde: &DenseVector) -> Result<DenseMatrix> {
    Ok(DenseMatrix::outer(&g.matvec(x_tilde)?, x_tilde))
}

/// `-λ (Σ_{i=1..t} αⁱ ∇L⁽ᵗ⁻ⁱ⁾) x̃ x̃ᵀ` from the recorded history.
pub fn history_cons_grad(pair: &LinearPair, history: &GradientHistory, x_tilde: &DenseVector) -> Result<DenseMatrix> {
    require_exact_history("history_cons_grad", pair, history)?;
    check_shapes("history_cons_grad", &pair.student, x_tilde, None)?;
    let t = pair.step;
    let mut acc = DenseMatrix::zeros(pair.student.rows(), pair.student.cols());
    for i in 1..=t {
        acc.axpy(pair.alpha.powi(i as i32), history.lagged(t, i))?;
    }
    project(&acc.scale(-pair.lr), x_tilde)
}

/// Max-abs deviation between `cons_grad(S, T, x̃)` and its history expansion.
pub fn verify_prop1(pair: &LinearPair, history: &GradientHistory, x_tilde: &DenseVector) -> Result<f64> {
    let expansion = history_cons_grad(pair, history, x_tilde)?;
    let direct = cons_grad(&pair.student, &pair.teacher, x_tilde)?;
    Ok(direct.sub(&expansion)?.max_abs())
}

/// Two sides of a triangle-inequality bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + BOUND_SLACK
    }
}

/// `‖∇L_c‖ ≤ Σ αⁱ λ ‖∇L⁽ᵗ⁻ⁱ⁾ x̃ x̃ᵀ‖`.
pub fn check_cons_bound(pair: &LinearPair, history: &GradientHistory, x_tilde: &DenseVector) -> Result<BoundCheck> {
    require_exact_history("check_cons_bound", pair, history)?;
    let lhs = cons_grad(&pair.student, &pair.teacher, x_tilde)?.frobenius_norm();
    let t = pair.step;
    let mut rhs = 0.0;
    for i in 1..=t {
        rhs += pair.alpha.powi(i as i32) * pair.lr * project(history.lagged(t, i), x_tilde)?.frobenius_norm();
    }
    Ok(BoundCheck { lhs, rhs })
}

/// `‖Σ λ ∇L⁽ᵗ⁻ⁱ⁾ x̃ x̃ᵀ‖ ≤ Σ λ ‖∇L⁽ᵗ⁻ⁱ⁾ x̃ x̃ᵀ‖`: the history part of `∇L_r`,
/// with no decaying coefficients.
pub fn check_recon_bound(pair: &LinearPair, history: &GradientHistory, x_tilde: &DenseVector) -> Result<BoundCheck> {
    require_exact_history("check_recon_bound", pair, history)?;
    let t = pair.step;
    let mut sum = DenseMatrix::zeros(pair.student.rows(), pair.student.cols());
    let mut rhs = 0.0;
    for i in 1..=t {
        let term = project(history.lagged(t, i), x_tilde)?.scale(pair.lr);
        rhs += term.frobenius_norm();
        sum.axpy(1.0, &term)?;
    }
    Ok(BoundCheck {
        lhs: sum.frobenius_norm(),
        rhs,
    })
}

/// Result of the covariance fixed-point estimate.
#[derive(Clone, Debug, Serialize)]
pub struct CovarianceFit {
    #[serde(skip)]
    pub s_star: DenseMatrix,
    /// `‖mean_k ∇L_r(S*; x_k, x̃_k)‖_F` over the fresh evaluation batch.
    pub residual_abs: f64,
    /// `residual_abs / mean_k ‖∇L_r(S*; x_k, x̃_k)‖_F`.
    pub residual_rel: f64,
    /// Pseudo-inverse dropped at least one eigenvalue below the cutoff.
    pub pinv_truncated: bool,
    pub samples: usize,
}

pub const PINV_CUTOFF: f64 = 1e-10;

/// A uniformly drawn point and its masked, bias-augmented input.
pub fn draw_pair(dataset: &VectorDataset, mask_ratio: f64, rng: &mut Rng) -> Result<(DenseVector, DenseVector)> {
    if dataset.is_empty() {
        return Err(contract("draw_pair", "empty dataset"));
    }
    let x = dataset.points[rng.below(dataset.len())].clone();
    let m = draw_mask(x.len(), mask_ratio, rng)?;
    let xt = masked_input(&x, &m)?;
    Ok((x, xt))
}

/// `size` independent draws of [`draw_pair`].
pub fn sample_batch(dataset: &VectorDataset, size: usize, mask_ratio: f64, rng: &mut Rng) -> Result<Vec<(DenseVector, DenseVector)>> {
    (0..size).map(|_| draw_pair(dataset, mask_ratio, rng)).collect()
}

/// Batch-mean `∇L_r` alone (the plain MAE objective).
pub fn batch_recon_grad(s: &DenseMatrix, batch: &[(DenseVector, DenseVector)]) -> Result<DenseMatrix> {
    if batch.is_empty() {
        return Err(contract("batch_recon_grad", "empty batch"));
    }
    let mut g = DenseMatrix::zeros(s.rows(), s.cols());
    for (x, xt) in batch {
        g.axpy(1.0, &recon_grad(s, xt, x)?)?;
    }
    Ok(g.scale(1.0 / batch.len() as f64))
}

/// Monte-Carlo estimate of `S* = Σ_{x,x̃} Σ_{x̃,x̃}⁺` and the expected
/// reconstruction gradient at `S*` on an independent batch of the same size.
pub fn covariance_fixed_point(
    dataset: &VectorDataset,
    mask_ratio: f64,
    samples: usize,
    rng: &Rng,
) -> Result<CovarianceFit> {
    if dataset.is_empty() || samples == 0 {
        return Err(contract("covariance_fixed_point", "need data and a positive sample count"));
    }
    let d = dataset.dim();
    let mut fit_rng = rng.substream("fit");
    let mut cross = DenseMatrix::zeros(d, d + 1);
    let mut auto = DenseMatrix::zeros(d + 1, d + 1);
    for _ in 0..samples {
        let (x, xt) = draw_pair(dataset, mask_ratio, &mut fit_rng)?;
        for r in 0..d {
            let row = cross.row_mut(r);
            for (c, o) in row.iter_mut().enumerate() {
                *o += x[r] * xt[c];
            }
        }
        for r in 0..=d {
            let row = auto.row_mut(r);
            for (c, o) in row.iter_mut().enumerate() {
                *o += xt[r] * xt[c];
            }
        }
    }
    let n = samples as f64;
    let cross = cross.scale(1.0 / n);
    let auto = auto.scale(1.0 / n);
    let (pinv, pinv_truncated) = auto.symmetric_pinv(PINV_CUTOFF)?;
    let s_star = cross.matmul(&pinv)?;

    let mut eval_rng = rng.substream("eval");
    let mut mean_grad = DenseMatrix::zeros(d, d + 1);
    let mut mean_norm = 0.0;
    for _ in 0..samples {
        let (x, xt) = draw_pair(dataset, mask_ratio, &mut eval_rng)?;
        let g = recon_grad(&s_star, &xt, &x)?;
        mean_norm += g.frobenius_norm() / n;
        mean_grad.axpy(1.0 / n, &g)?;
    }
    let residual_abs = mean_grad.frobenius_norm();
    Ok(CovarianceFit {
        s_star,
        residual_abs,
        residual_rel: if mean_norm > 0.0 { residual_abs / mean_norm } else { 0.0 },
        pinv_truncated,
        samples,
    })
}

/// Input sequences of the probe protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeCase {
    /// `(x̃, x̃)`: the same masked input twice.
    Same,
    /// `(x̃, x̃′)`: the same input under a fresh mask.
    Similar,
    /// `(x̃, x̂)`: an independent input.
    Different,
}

impl ProbeCase {
    pub const ALL: [ProbeCase; 3] = [ProbeCase::Same, ProbeCase::Similar, ProbeCase::Different];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeCase::Same => "same",
            ProbeCase::Similar => "similar",
            ProbeCase::Different => "different",
        }
    }
}

impl std::str::FromStr for ProbeCase {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "same" => Ok(Self::Same),
            "similar" => Ok(Self::Similar),
            "different" => Ok(Self::Different),
            other => Err(format!("unknown probe case `{other}`")),
        }
    }
}

/// Gradient statistics from one probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub case: ProbeCase,
    pub norm_recon: f64,
    pub norm_cons: f64,
    /// cos(∇L⁽ᵗ⁾ on input 1, ∇L_c⁽ᵗ⁺¹⁾ on input 2)
    pub cos_prev_full_vs_cons: f64,
    /// cos(∇L_r, ∇L_c) on input 2
    pub cos_recon_vs_cons: f64,
    /// cos(input 1, input 2) of the masked model inputs
    pub input_similarity: f64,
}

/// One step plus EMA update on input 1, then `∇L_r`, `∇L_c` on input 2.
///
/// `rng` supplies the masks in a fixed order (input-1 mask, then the mask the
/// case needs), so cloning one `rng` across cases shares the input-1 mask.
/// The live `pair` is never modified.
pub fn run_probe(
    pair: &LinearPair,
    x: &DenseVector,
    other: &DenseVector,
    case: ProbeCase,
    mask_ratio: f64,
    use_momentum: bool,
    rng: &mut Rng,
) -> Result<ProbeRecord> {
    let m1 = draw_mask(x.len(), mask_ratio, rng)?;
    let xt1 = masked_input(x, &m1)?;
    let (xt2, x2) = match case {
        ProbeCase::Same => (xt1.clone(), x.clone()),
        ProbeCase::Similar => {
            let m2 = draw_mask(x.len(), mask_ratio, rng)?;
            (masked_input(x, &m2)?, x.clone())
        }
        ProbeCase::Different => {
            let m3 = draw_mask(other.len(), mask_ratio, rng)?;
            (masked_input(other, &m3)?, other.clone())
        }
    };
    probe_on_inputs(pair, (&x, &xt1), (&x2, &xt2), case, use_momentum)
}

/// Probe with explicit inputs `(x, x̃)` for both positions of the sequence.
pub fn probe_on_inputs(
    pair: &LinearPair,
    first: (&DenseVector, &DenseVector),
    second: (&DenseVector, &DenseVector),
    case: ProbeCase,
    use_momentum: bool,
) -> Result<ProbeRecord> {
    let mut probe = pair.clone();
    let g1 = full_grad(&probe, first.1, first.0)?;
    sgd_step(&mut probe, &g1, use_momentum)?;
    ema_update(&mut probe);
    let r = recon_grad(&probe.student, second.1, second.0)?;
    let c = cons_grad(&probe.student, &probe.teacher, second.1)?;
    Ok(ProbeRecord {
        case,
        norm_recon: r.frobenius_norm(),
        norm_cons: c.frobenius_norm(),
        cos_prev_full_vs_cons: cosine(g1.as_slice(), c.as_slice()),
        cos_recon_vs_cons: cosine(r.as_slice(), c.as_slice()),
        input_similarity: cosine(first.1.as_slice(), second.1.as_slice()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::from_slice(x)
    }

    #[test]
    fn recon_grad_hand_value() {
        let g = recon_grad(&DenseMatrix::identity(2), &v(&[1.0, 0.0]), &v(&[1.0, 2.0])).unwrap();
        assert_eq!(g, DenseMatrix::from_rows(&[&[0.0, 0.0], &[-2.0, 0.0]]));
    }

    #[test]
    fn recon_grad_vanishes_at_exact_fit() {
        // S = x x̃ᵀ (x̃ x̃ᵀ)⁺ = x x̃ᵀ / ‖x̃‖²
        let x = v(&[0.5, -1.0, 2.0]);
        let xt = v(&[1.0, 0.0, 3.0]);
        let s = DenseMatrix::outer(&x, &xt).scale(1.0 / xt.dot(&xt));
        assert!(recon_grad(&s, &xt, &x).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let s = DenseMatrix::zeros(2, 3);
        assert!(recon_grad(&s, &v(&[1.0, 2.0]), &v(&[1.0, 2.0])).is_err());
        assert!(cons_grad(&s, &DenseMatrix::zeros(2, 2), &v(&[1.0, 2.0, 3.0])).is_err());
        let mut pair = LinearPair::new(s, 0.9, 0.1, 0.0).unwrap();
        assert!(sgd_step(&mut pair, &DenseMatrix::zeros(3, 3), false).is_err());
    }

    #[test]
    fn cons_grad_zero_cases() {
        let s = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(cons_grad(&s, &s, &v(&[1.0, -1.0])).unwrap().max_abs(), 0.0);
        let t = DenseMatrix::identity(2);
        assert_eq!(cons_grad(&s, &t, &v(&[0.0, 0.0])).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn constructor_validates() {
        let s = DenseMatrix::zeros(2, 3);
        assert!(LinearPair::new(s.clone(), 1.0, 0.1, 0.0).is_err());
        assert!(LinearPair::new(s.clone(), 0.5, 0.0, 0.0).is_err());
        let p = LinearPair::new(s, 0.5, 0.1, 0.97).unwrap();
        assert_eq!(p.student, p.teacher);
    }

    #[test]
    fn sgd_modes() {
        let s = DenseMatrix::from_rows(&[&[1.0, 2.0]]);
        let mut p = LinearPair::new(s.clone(), 0.9, 1.0, 0.97).unwrap();
        let g = DenseMatrix::from_rows(&[&[0.25, -0.5]]);
        sgd_step(&mut p, &g, false).unwrap();
        assert_eq!(p.student, s.sub(&g).unwrap());
        assert!(!p.trained_with_momentum());

        let mut m = LinearPair::new(s.clone(), 0.9, 0.1, 0.97).unwrap();
        m.velocity = DenseMatrix::from_rows(&[&[1.0, -2.0]]);
        sgd_step(&mut m, &DenseMatrix::zeros(1, 2), true).unwrap();
        assert_eq!(m.velocity, DenseMatrix::from_rows(&[&[0.97, -1.94]]));
        assert!(m.trained_with_momentum());
        assert_eq!(m.step, 1);
    }

    #[test]
    fn ema_fixed_point_and_expansion() {
        let s0 = DenseMatrix::from_rows(&[&[1.0, -1.0]]);
        let mut p = LinearPair::new(s0.clone(), 0.9, 1.0, 0.0).unwrap();
        ema_update(&mut p);
        assert_eq!(p.teacher, p.student);

        let grads = [
            DenseMatrix::from_rows(&[&[0.3, 0.1]]),
            DenseMatrix::from_rows(&[&[-0.2, 0.4]]),
            DenseMatrix::from_rows(&[&[0.05, -0.7]]),
        ];
        let mut students = vec![s0.clone()];
        let mut p = LinearPair::new(s0.clone(), 0.9, 1.0, 0.0).unwrap();
        for g in &grads {
            sgd_step(&mut p, g, false).unwrap();
            ema_update(&mut p);
            students.push(p.student.clone());
        }
        // T⁽³⁾ = Σ_{i=0..2} αⁱ(1-α) S⁽³⁻ⁱ⁾ + α³ S⁽⁰⁾
        let a: f64 = 0.9;
        let mut expect = students[0].scale(a.powi(3));
        for i in 0..3 {
            expect.axpy(a.powi(i) * (1.0 - a), &students[3 - i as usize]).unwrap();
        }
        assert!(p.teacher.sub(&expect).unwrap().max_abs() <= 1e-14);
    }

    #[test]
    fn prop1_refuses_momentum_and_truncation() {
        let mut rng = Rng::new(0);
        let mut p = LinearPair::random(3, 0.1, 0.9, 0.01, 0.9, &mut rng).unwrap();
        let mut h = GradientHistory::new(10);
        let xt = v(&[1.0, 2.0, 0.0, 1.0]);
        let batch = vec![(v(&[1.0, 2.0, 3.0]), xt.clone())];
        train_step(&mut p, &mut h, batch.clone(), true).unwrap();
        assert!(matches!(verify_prop1(&p, &h, &xt), Err(LabError::MomentumTrained(_))));

        let mut p = LinearPair::random(3, 0.1, 0.9, 0.01, 0.9, &mut rng).unwrap();
        let mut h = GradientHistory::new(2);
        for _ in 0..3 {
            train_step(&mut p, &mut h, batch.clone(), false).unwrap();
        }
        assert!(matches!(verify_prop1(&p, &h, &xt), Err(LabError::HistoryTruncated { .. })));
    }

    #[test]
    fn prop1_trivial_at_step_zero() {
        let p = LinearPair::random(3, 0.1, 0.9, 0.01, 0.0, &mut Rng::new(1)).unwrap();
        let h = GradientHistory::new(4);
        assert_eq!(verify_prop1(&p, &h, &v(&[1.0, 1.0, 1.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn cons_grad_antisymmetric() {
        let mut rng = Rng::new(4);
        let s = DenseMatrix::from_fn(3, 4, |_, _| rng.standard_normal());
        let t = DenseMatrix::from_fn(3, 4, |_, _| rng.standard_normal());
        let xt = v(&[0.3, -1.0, 0.0, 1.0]);
        assert_eq!(
            cons_grad(&s, &t, &xt).unwrap(),
            cons_grad(&t, &s, &xt).unwrap().scale(-1.0)
        );
    }

    #[test]
    fn probe_same_case_with_vanishing_alpha_has_no_consistency() {
        let mut rng = Rng::new(2);
        let p = LinearPair::random(4, 0.1, 1e-300, 0.01, 0.0, &mut rng).unwrap();
        let x = v(&[1.0, -2.0, 0.5, 3.0]);
        let rec = run_probe(&p, &x, &x, ProbeCase::Same, 0.5, false, &mut rng).unwrap();
        assert_eq!(rec.norm_cons, 0.0);
        assert!((rec.input_similarity - 1.0).abs() < 1e-15);
    }

    #[test]
    fn probe_orthogonal_different_input_gets_no_fresh_correction() {
        // T₀ = S₀, so after one step S − T = −αλ g₁ and ∇L_c on x̂ is
        // −αλ (g₁ x̂) x̂ᵀ with g₁ x̂ ∝ (x̃₁ᵀ x̂) = 0.
        let mut rng = Rng::new(6);
        let p = LinearPair::random(3, 0.2, 0.9, 0.05, 0.0, &mut rng).unwrap();
        let x1 = v(&[1.0, 2.0, 0.0]);
        let xt1 = v(&[1.0, 0.0, 0.0, 0.0]);
        let x2 = v(&[0.0, 3.0, -1.0]);
        let xt2 = v(&[0.0, 3.0, -1.0, 0.0]);
        assert_eq!(xt1.dot(&xt2), 0.0);
        let rec = probe_on_inputs(&p, (&x1, &xt1), (&x2, &xt2), ProbeCase::Different, false).unwrap();
        assert!(rec.norm_cons < 1e-15, "{}", rec.norm_cons);
        assert!(rec.norm_recon > 0.0);
    }

    #[test]
    fn probe_leaves_live_pair_untouched() {
        let mut rng = Rng::new(3);
        let p = LinearPair::random(4, 0.1, 0.9, 0.01, 0.97, &mut rng).unwrap();
        let snapshot = p.clone();
        let x = v(&[1.0, 2.0, 3.0, 4.0]);
        let y = v(&[-1.0, 0.0, 2.0, 1.0]);
        for case in ProbeCase::ALL {
            run_probe(&p, &x, &y, case, 0.5, true, &mut rng).unwrap();
        }
        assert_eq!(p, snapshot);
    }
}
