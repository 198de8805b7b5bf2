//! Seeded, counter-based random streams with labelled substreams, plus the
//! Gaussian and Wishart samplers used by the data generators.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{contract, Result};
use crate::linalg::{DenseMatrix, DenseVector};

/// Deterministic random stream.
///
/// A stream is identified by its seed and the chain of labels used to derive
/// it, so drawing more numbers from one substream never shifts another.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    path: u64,
    inner: ChaCha8Rng,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_path(seed, FNV_OFFSET)
    }

    fn with_path(seed: u64, path: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&path.to_le_bytes());
        key[16..24].copy_from_slice(b"rcmaelab");
        Self {
            seed,
            path,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this one's identity and `label`.
    /// The parent's position is irrelevant.
    pub fn substream(&self, label: &str) -> Rng {
        let path = fnv1a(fnv1a(self.path, b"/"), label.as_bytes());
        Self::with_path(self.seed, path)
    }

    /// Like [`Rng::substream`] with a numeric label (per-step or per-item streams).
    pub fn substream_indexed(&self, label: &str, index: u64) -> Rng {
        let path = fnv1a(fnv1a(fnv1a(self.path, b"/"), label.as_bytes()), &index.to_le_bytes());
        Self::with_path(self.seed, path)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[low, high)`.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        if low == high {
            return low;
        }
        self.inner.random_range(low..high)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn chi_squared(&mut self, dof: f64) -> f64 {
        ChiSquared::new(dof)
            .expect("positive degrees of freedom")
            .sample(&mut self.inner)
    }

    /// Uniformly random `k`-subset of `0..n`, returned sorted.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        // partial Fisher-Yates
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        let mut chosen = idx[..k.min(n)].to_vec();
        chosen.sort_unstable();
        chosen
    }
}

/// Draws `mean + L z` with `z ~ N(0, I)` and `L` lower-triangular.
pub fn sample_gaussian(rng: &mut Rng, mean: &DenseVector, cov_chol: &DenseMatrix) -> Result<DenseVector> {
    let n = mean.len();
    if cov_chol.shape() != (n, n) {
        return Err(contract(
            "sample_gaussian",
            format!("factor is {}x{} for mean of length {n}", cov_chol.rows(), cov_chol.cols()),
        ));
    }
    if !cov_chol.is_lower_triangular() {
        return Err(contract("sample_gaussian", "covariance factor is not lower-triangular"));
    }
    if (0..n).any(|i| cov_chol.get(i, i) < 0.0) {
        return Err(contract("sample_gaussian", "negative diagonal in covariance factor"));
    }
    let z: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let mut out = mean.clone();
    for r in 0..n {
        let row = cov_chol.row(r);
        let mut s = 0.0;
        for c in 0..=r {
            s += row[c] * z[c];
        }
        out[r] += s;
    }
    Ok(out)
}

/// Wishart(diag(scale_diag), dof) via the Bartlett decomposition `L A Aᵀ Lᵀ`.
pub fn sample_wishart(rng: &mut Rng, scale_diag: &DenseVector, dof: usize) -> Result<DenseMatrix> {
    let p = scale_diag.len();
    if dof < p {
        return Err(contract(
            "sample_wishart",
            format!("{dof} degrees of freedom for dimension {p}"),
        ));
    }
    if scale_diag.as_slice().iter().any(|&s| !(s > 0.0)) {
        return Err(contract("sample_wishart", "scale diagonal must be positive"));
    }
    let mut a = DenseMatrix::zeros(p, p);
    for i in 0..p {
        a.set(i, i, rng.chi_squared((dof - i) as f64).sqrt());
        for j in 0..i {
            a.set(i, j, rng.standard_normal());
        }
    }
    // L = diag(sqrt(scale)), so (L A)_{ij} = sqrt(s_i) A_{ij}
    let la = DenseMatrix::from_fn(p, p, |i, j| scale_diag[i].sqrt() * a.get(i, j));
    let mut w = la.matmul_rhs_t(&la);
    // exact symmetry
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (w.get(i, j) + w.get(j, i));
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    Ok(w)
}
