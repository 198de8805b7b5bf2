//! Single-hidden-layer student `Bσ(Ax̃)` with teacher `Dσ(Cx̃)`.
//!
//! `A` acts on the bias-augmented masked input, so its last column is the
//! hidden bias. Gradients are back-propagated by hand.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::linalg::{cosine, DenseMatrix, DenseVector};
use crate::linear_lab::{masked_input, ProbeCase, ProbeRecord};
use crate::masking::draw_mask;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "gelu" => Ok(Self::Gelu),
            other => Err(format!("unknown activation `{other}` (expected tanh|gelu)")),
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_K * (z + GELU_C * z * z * z)).tanh()),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Gelu => {
                let t = (GELU_K * (z + GELU_C * z * z * z)).tanh();
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * z * z)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShallowNet {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub c: DenseMatrix,
    pub d: DenseMatrix,
    pub activation: Activation,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub velocity_a: DenseMatrix,
    pub velocity_b: DenseMatrix,
    pub step: usize,
}

impl ShallowNet {
    /// Teacher starts as a copy of `(a, b)`.
    pub fn new(a: DenseMatrix, b: DenseMatrix, activation: Activation, alpha: f64, lr: f64, momentum: f64) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(contract("ShallowNet::new", format!("A is {:?} but B is {:?}", a.shape(), b.shape())));
        }
        if !(alpha > 0.0 && alpha < 1.0) || !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(contract(
                "ShallowNet::new",
                format!("need alpha in (0,1), lr > 0, momentum in [0,1); got {alpha}, {lr}, {momentum}"),
            ));
        }
        Ok(Self {
            velocity_a: DenseMatrix::zeros(a.rows(), a.cols()),
            velocity_b: DenseMatrix::zeros(b.rows(), b.cols()),
            c: a.clone(),
            d: b.clone(),
            a,
            b,
            activation,
            alpha,
            lr,
            momentum,
            step: 0,
        })
    }

    /// `A: hidden x (dim+1)`, `B: dim x hidden`, scaled by fan-in.
    pub fn random(dim: usize, hidden: usize, activation: Activation, alpha: f64, lr: f64, momentum: f64, rng: &mut Rng) -> Result<Self> {
        let sa = 1.0 / ((dim + 1) as f64).sqrt();
        let sb = 1.0 / (hidden as f64).sqrt();
        let a = DenseMatrix::from_fn(hidden, dim + 1, |_, _| sa * rng.standard_normal());
        let b = DenseMatrix::from_fn(dim, hidden, |_, _| sb * rng.standard_normal());
        Self::new(a, b, activation, alpha, lr, momentum)
    }

    pub fn input_dim(&self) -> usize {
        self.a.cols()
    }
}

/// `Bσ(Ax̃)`, or `Dσ(Cx̃)` for the teacher.
pub fn shallow_forward(net: &ShallowNet, x_tilde: &DenseVector, use_teacher: bool) -> Result<DenseVector> {
    let (first, second) = if use_teacher { (&net.c, &net.d) } else { (&net.a, &net.b) };
    if first.cols() != x_tilde.len() {
        return Err(contract("shallow_forward", format!("x̃ of length {} for A {:?}", x_tilde.len(), first.shape())));
    }
    let z = first.matvec(x_tilde)?;
    let h = DenseVector::from_vec(z.as_slice().iter().map(|&v| net.activation.apply(v)).collect());
    second.matvec(&h)
}

/// Gradients of one loss with respect to the student's `A` and `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl LayerGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.a.as_slice().to_vec();
        v.extend_from_slice(self.b.as_slice());
        v
    }

    pub fn norm(&self) -> f64 {
        (self.a.frobenius_norm().powi(2) + self.b.frobenius_norm().powi(2)).sqrt()
    }

    fn add(&self, other: &LayerGrads) -> Result<LayerGrads> {
        Ok(LayerGrads {
            a: self.a.add(&other.a)?,
            b: self.b.add(&other.b)?,
        })
    }
}

/// Reconstruction and consistency parts of the per-sample gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ShallowGrads {
    pub recon: LayerGrads,
    pub cons: LayerGrads,
    pub loss_r: f64,
    pub loss_c: f64,
}

impl ShallowGrads {
    pub fn total(&self) -> Result<LayerGrads> {
        self.recon.add(&self.cons)
    }
}

/// Hand backprop of `½‖Bσ(Ax̃) - x‖² + ½‖Bσ(Ax̃) - StopGrad(Dσ(Cx̃))‖²`.
pub fn shallow_grads(net: &ShallowNet, x_tilde: &DenseVector, x: &DenseVector) -> Result<ShallowGrads> {
    if net.a.cols() != x_tilde.len() || net.b.rows() != x.len() {
        return Err(contract(
            "shallow_grads",
            format!("x̃ {} and x {} for A {:?}, B {:?}", x_tilde.len(), x.len(), net.a.shape(), net.b.shape()),
        ));
    }
    let z = net.a.matvec(x_tilde)?;
    let h = DenseVector::from_vec(z.as_slice().iter().map(|&v| net.activation.apply(v)).collect());
    let y = net.b.matvec(&h)?;
    let y_teacher = shallow_forward(net, x_tilde, true)?;

    let back = |dy: &DenseVector| -> Result<LayerGrads> {
        let db = DenseMatrix::outer(dy, &h);
        let bt_dy = net.b.transpose().matvec(dy)?;
        let dz = DenseVector::from_vec(
            bt_dy
                .as_slice()
                .iter()
                .zip(z.as_slice())
                .map(|(g, &zv)| g * net.activation.derivative(zv))
                .collect(),
        );
        Ok(LayerGrads {
            a: DenseMatrix::outer(&dz, x_tilde),
            b: db,
        })
    };
    let dy_r = y.sub(x);
    let dy_c = y.sub(&y_teacher);
    Ok(ShallowGrads {
        loss_r: 0.5 * dy_r.dot(&dy_r),
        loss_c: 0.5 * dy_c.dot(&dy_c),
        recon: back(&dy_r)?,
        cons: back(&dy_c)?,
    })
}

/// Same optimiser rule as the linear model, applied to `A` and `B`.
pub fn shallow_sgd_step(net: &mut ShallowNet, grad: &LayerGrads, use_momentum: bool) -> Result<()> {
    if grad.a.shape() != net.a.shape() || grad.b.shape() != net.b.shape() {
        return Err(contract("shallow_sgd_step", "gradient shapes do not match the student"));
    }
    if use_momentum {
        let mu = net.momentum;
        for (v, g) in net.velocity_a.as_mut_slice().iter_mut().zip(grad.a.as_slice()) {
            *v = mu * *v + g;
        }
        for (v, g) in net.velocity_b.as_mut_slice().iter_mut().zip(grad.b.as_slice()) {
            *v = mu * *v + g;
        }
        net.a.axpy(-net.lr, &net.velocity_a)?;
        net.b.axpy(-net.lr, &net.velocity_b)?;
    } else {
        net.a.axpy(-net.lr, &grad.a)?;
        net.b.axpy(-net.lr, &grad.b)?;
    }
    net.step += 1;
    Ok(())
}

pub fn shallow_ema_update(net: &mut ShallowNet) {
    let al = net.alpha;
    for (t, s) in net.c.as_mut_slice().iter_mut().zip(net.a.as_slice()) {
        *t = al * *t + (1.0 - al) * s;
    }
    for (t, s) in net.d.as_mut_slice().iter_mut().zip(net.b.as_slice()) {
        *t = al * *t + (1.0 - al) * s;
    }
}

/// Batch-mean gradient step followed by the EMA update. Returns mean losses.
pub fn shallow_train_step(net: &mut ShallowNet, batch: &[(DenseVector, DenseVector)], use_momentum: bool) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(contract("shallow_train_step", "empty batch"));
    }
    let mut acc = LayerGrads {
        a: DenseMatrix::zeros(net.a.rows(), net.a.cols()),
        b: DenseMatrix::zeros(net.b.rows(), net.b.cols()),
    };
    let (mut lr, mut lc) = (0.0, 0.0);
    for (x, xt) in batch {
        let g = shallow_grads(net, xt, x)?;
        let t = g.total()?;
        acc.a.axpy(1.0, &t.a)?;
        acc.b.axpy(1.0, &t.b)?;
        lr += g.loss_r;
        lc += g.loss_c;
    }
    let n = batch.len() as f64;
    let mean = LayerGrads {
        a: acc.a.scale(1.0 / n),
        b: acc.b.scale(1.0 / n),
    };
    shallow_sgd_step(net, &mean, use_momentum)?;
    shallow_ema_update(net);
    Ok((lr / n, lc / n))
}

/// The linear probe protocol on the shallow network.
pub fn run_shallow_probe(
    net: &ShallowNet,
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
        ProbeCase::Similar => (masked_input(x, &draw_mask(x.len(), mask_ratio, rng)?)?, x.clone()),
        ProbeCase::Different => (masked_input(other, &draw_mask(other.len(), mask_ratio, rng)?)?, other.clone()),
    };
    let mut probe = net.clone();
    let g1 = shallow_grads(&probe, &xt1, x)?.total()?;
    shallow_sgd_step(&mut probe, &g1, use_momentum)?;
    shallow_ema_update(&mut probe);
    let g2 = shallow_grads(&probe, &xt2, &x2)?;
    let (r, c) = (g2.recon.flat(), g2.cons.flat());
    Ok(ProbeRecord {
        case,
        norm_recon: g2.recon.norm(),
        norm_cons: g2.cons.norm(),
        cos_prev_full_vs_cons: cosine(&g1.flat(), &c),
        cos_recon_vs_cons: cosine(&r, &c),
        input_similarity: cosine(xt1.as_slice(), xt2.as_slice()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn net(activation: Activation, seed: u64) -> ShallowNet {
        let mut rng = Rng::new(seed);
        let mut n = ShallowNet::random(5, 7, activation, 0.9, 0.1, 0.0, &mut rng).unwrap();
        // separate the teacher from the student
        n.c = n.c.map(|v| v * 0.8 + 0.01);
        n.d = n.d.map(|v| v * 1.1 - 0.02);
        n
    }

    fn inputs(seed: u64) -> (DenseVector, DenseVector) {
        let mut rng = Rng::new(seed);
        let x = DenseVector::from_vec((0..5).map(|_| rng.standard_normal()).collect());
        let m = draw_mask(5, 0.4, &mut rng).unwrap();
        (masked_input(&x, &m).unwrap(), x)
    }

    #[test]
    fn zero_first_layer_gives_constant_output() {
        let mut n = net(Activation::Gelu, 1);
        n.a = DenseMatrix::zeros(7, 6);
        let (xt, _) = inputs(2);
        let y1 = shallow_forward(&n, &xt, false).unwrap();
        let y2 = shallow_forward(&n, &xt.scale(3.0), false).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn tiny_weights_linearise() {
        let mut n = net(Activation::Tanh, 3);
        n.a = n.a.scale(1e-4);
        let (xt, _) = inputs(4);
        let y = shallow_forward(&n, &xt, false).unwrap();
        let lin = n.b.matmul(&n.a).unwrap().matvec(&xt).unwrap();
        // tanh(z) = z - z³/3 + ...
        let err = y.sub(&lin).as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn matches_tape_autodiff() {
        for act in [Activation::Tanh, Activation::Gelu] {
            let n = net(act, 5);
            let (xt, x) = inputs(6);
            let g = shallow_grads(&n, &xt, &x).unwrap();

            let mut tape = Tape::new();
            let a = tape.leaf(n.a.clone());
            let b = tape.leaf(n.b.clone());
            let xin = tape.leaf(DenseMatrix::from_vec(6, 1, xt.as_slice().to_vec()).unwrap());
            let z = tape.matmul(a, xin).unwrap();
            let h = match act {
                Activation::Tanh => tape.tanh(z),
                Activation::Gelu => tape.gelu(z),
            };
            let y = tape.matmul(b, h).unwrap();
            let target = tape.leaf(DenseMatrix::from_vec(5, 1, x.as_slice().to_vec()).unwrap());
            let yt = shallow_forward(&n, &xt, true).unwrap();
            let teacher = tape.leaf(DenseMatrix::from_vec(5, 1, yt.into_vec()).unwrap());
            let teacher = tape.stop_grad(teacher);
            // squared_error is a mean over 5 entries; ½‖·‖² = 2.5 · mean
            let lr = tape.squared_error(y, target).unwrap();
            let lc = tape.squared_error(y, teacher).unwrap();
            let lr = tape.scale(lr, 2.5);
            let lc = tape.scale(lc, 2.5);
            let total = tape.add(lr, lc).unwrap();
            let grads = tape.backward(total).unwrap();
            let t = g.total().unwrap();
            assert!(grads.wrt(a).sub(&t.a).unwrap().max_abs() < 1e-12);
            assert!(grads.wrt(b).sub(&t.b).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn matches_central_differences() {
        let n = net(Activation::Gelu, 7);
        let (xt, x) = inputs(8);
        let g = shallow_grads(&n, &xt, &x).unwrap().total().unwrap();
        let loss = |n: &ShallowNet| {
            let y = shallow_forward(n, &xt, false).unwrap();
            let yt = shallow_forward(n, &xt, true).unwrap();
            let r = y.sub(&x);
            let c = y.sub(&yt);
            0.5 * r.dot(&r) + 0.5 * c.dot(&c)
        };
        let h = 1e-6;
        for which in 0..2 {
            let len = if which == 0 { n.a.len() } else { n.b.len() };
            for k in 0..len {
                let (mut p, mut m) = (n.clone(), n.clone());
                let (pp, mm, an) = if which == 0 {
                    (&mut p.a, &mut m.a, g.a.as_slice()[k])
                } else {
                    (&mut p.b, &mut m.b, g.b.as_slice()[k])
                };
                pp.as_mut_slice()[k] += h;
                mm.as_mut_slice()[k] -= h;
                let num = (loss(&p) - loss(&m)) / (2.0 * h);
                let rel = (num - an).abs() / an.abs().max(num.abs()).max(1e-6);
                assert!(rel <= 1e-5, "param {which}/{k}: {an} vs {num}");
            }
        }
    }

    #[test]
    fn identical_teacher_has_no_consistency_gradient() {
        let mut n = net(Activation::Tanh, 9);
        n.c = n.a.clone();
        n.d = n.b.clone();
        let (xt, x) = inputs(10);
        let g = shallow_grads(&n, &xt, &x).unwrap();
        assert_eq!(g.cons.norm(), 0.0);
        assert_eq!(g.loss_c, 0.0);
    }

    #[test]
    fn probe_same_case_with_vanishing_alpha_has_no_consistency() {
        let mut n = net(Activation::Tanh, 11);
        n.alpha = 1e-300;
        let mut rng = Rng::new(12);
        let x = DenseVector::from_vec((0..5).map(|_| rng.standard_normal()).collect());
        let rec = run_shallow_probe(&n, &x, &x, ProbeCase::Same, 0.4, false, &mut rng).unwrap();
        assert!(rec.norm_cons < 1e-12);
    }
}
