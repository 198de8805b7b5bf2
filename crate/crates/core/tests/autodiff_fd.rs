//! Reverse-mode gradients of randomly composed graphs against central
//! differences.

use rcmae_lab::autodiff::{NodeId, Tape};
use rcmae_lab::{DenseMatrix, Rng};

const N: usize = 3;
const H: f64 = 1e-6;
const TOL: f64 = 1e-5;
/// Relative errors are taken against `max(|analytic|, |numeric|, FLOOR)`.
const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
enum Op {
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize),
    Scale(usize, f64),
    Tanh(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm(usize),
    Transpose(usize),
    GatherScatter(usize, Vec<usize>, Vec<usize>),
}

/// Leaves: three `N x N` matrices, then `gamma`, `beta` and a bias row.
struct Graph {
    ops: Vec<Op>,
    loss_target: DenseMatrix,
    mean_of: usize,
}

fn random_graph(rng: &mut Rng) -> Graph {
    let depth = 3 + rng.below(6);
    let mut ops = Vec::new();
    for k in 0..depth {
        let pool = 3 + k;
        let a = rng.below(pool);
        let b = rng.below(pool);
        let op = match rng.below(10) {
            0 => Op::MatMul(a, b),
            1 => Op::Add(a, b),
            2 => Op::AddRow(a),
            3 => Op::Scale(a, rng.uniform(-2.0, 2.0)),
            4 => Op::Tanh(a),
            5 => Op::Gelu(a),
            6 => Op::Softmax(a),
            7 => Op::LayerNorm(a),
            8 => Op::Transpose(a),
            _ => {
                let k = 1 + rng.below(2 * N);
                let gather: Vec<usize> = (0..k).map(|_| rng.below(N)).collect();
                let scatter = rng.subset(N, k.min(N));
                Op::GatherScatter(a, gather[..scatter.len()].to_vec(), scatter)
            }
        };
        ops.push(op);
    }
    let loss_target = DenseMatrix::from_fn(N, N, |_, _| rng.uniform(-1.0, 1.0));
    let mean_of = rng.below(3 + depth);
    Graph { ops, loss_target, mean_of }
}

fn random_leaves(rng: &mut Rng) -> Vec<DenseMatrix> {
    let mut leaves: Vec<DenseMatrix> = (0..3).map(|_| DenseMatrix::from_fn(N, N, |_, _| rng.uniform(-1.0, 1.0))).collect();
    for _ in 0..3 {
        leaves.push(DenseMatrix::from_fn(1, N, |_, _| rng.uniform(-1.0, 1.0)));
    }
    leaves
}

/// Records the graph; returns the leaf ids and the scalar output.
fn record(tape: &mut Tape, g: &Graph, leaves: &[DenseMatrix]) -> (Vec<NodeId>, NodeId) {
    let ids: Vec<NodeId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
    let (gamma, beta, row) = (ids[3], ids[4], ids[5]);
    let mut pool: Vec<NodeId> = ids[..3].to_vec();
    for op in &g.ops {
        let next = match op {
            Op::MatMul(a, b) => tape.matmul(pool[*a], pool[*b]).unwrap(),
            Op::Add(a, b) => tape.add(pool[*a], pool[*b]).unwrap(),
            Op::AddRow(a) => tape.add(pool[*a], row).unwrap(),
            Op::Scale(a, s) => tape.scale(pool[*a], *s),
            Op::Tanh(a) => tape.tanh(pool[*a]),
            Op::Gelu(a) => tape.gelu(pool[*a]),
            Op::Softmax(a) => tape.softmax_rows(pool[*a]),
            Op::LayerNorm(a) => tape.layer_norm(pool[*a], gamma, beta).unwrap(),
            Op::Transpose(a) => tape.transpose(pool[*a]),
            Op::GatherScatter(a, gather, scatter) => {
                let g = tape.gather_rows(pool[*a], gather).unwrap();
                tape.scatter_rows(g, scatter, N).unwrap()
            }
        };
        pool.push(next);
    }
    let target = tape.leaf(g.loss_target.clone());
    let last = *pool.last().unwrap();
    let se = tape.squared_error(last, target).unwrap();
    let m = tape.mean(pool[g.mean_of]).unwrap();
    let total = tape.add(se, m).unwrap();
    (ids, total)
}

fn value(g: &Graph, leaves: &[DenseMatrix]) -> f64 {
    let mut tape = Tape::new();
    let (_, out) = record(&mut tape, g, leaves);
    tape.scalar(out)
}

fn worst_rel_error(g: &Graph, leaves: &[DenseMatrix]) -> f64 {
    let mut tape = Tape::new();
    let (ids, out) = record(&mut tape, g, leaves);
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (li, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id);
        for k in 0..leaves[li].len() {
            let mut plus = leaves.to_vec();
            plus[li].as_mut_slice()[k] += H;
            let mut minus = leaves.to_vec();
            minus[li].as_mut_slice()[k] -= H;
            let numeric = (value(g, &plus) - value(g, &minus)) / (2.0 * H);
            let a = analytic.as_slice()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn random_graphs_match_central_differences() {
    let mut rng = Rng::new(2024);
    let graphs = 120;
    for i in 0..graphs {
        let g = random_graph(&mut rng);
        let leaves = random_leaves(&mut rng);
        let err = worst_rel_error(&g, &leaves);
        assert!(err <= TOL, "graph {i} {:?}: relative error {err:e}", g.ops);
    }
}

#[test]
fn stop_grad_blocks_every_path() {
    let mut rng = Rng::new(5);
    let mut tape = Tape::new();
    let a = tape.leaf(DenseMatrix::from_fn(N, N, |_, _| rng.uniform(-1.0, 1.0)));
    let b = tape.leaf(DenseMatrix::from_fn(N, N, |_, _| rng.uniform(-1.0, 1.0)));
    let hb = tape.tanh(b);
    let frozen = tape.stop_grad(hb);
    let prod = tape.matmul(a, frozen).unwrap();
    let loss = tape.squared_error(prod, a).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(b).is_none_or(|g| g.max_abs() == 0.0));
    assert!(grads.wrt(a).max_abs() > 0.0);
}
