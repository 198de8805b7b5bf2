//! Synthetic data: the Gaussian-mixture vectors used by the linear and
//! shallow models, and a corpus of small structured images for the tiny MAE.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{contract, LabError, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::rng::{sample_gaussian, sample_wishart, Rng};

/// Recipe for a mixture of Gaussian clusters with Wishart covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub dim: usize,
    pub n_clusters: usize,
    pub points_per_cluster: usize,
    pub mean_range: (f64, f64),
    pub wishart_scale_range: (f64, f64),
    pub wishart_dof: usize,
    /// Subtract the empirical mean after sampling.
    pub center: bool,
}

impl Default for GaussianMixtureSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            n_clusters: 10,
            points_per_cluster: 100,
            mean_range: (-3.0, 3.0),
            wishart_scale_range: (0.25, 0.35),
            wishart_dof: 48,
            center: true,
        }
    }
}

impl GaussianMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let op = "GaussianMixtureSpec";
        if self.dim == 0 || self.n_clusters == 0 || self.points_per_cluster == 0 {
            return Err(contract(op, "dim, n_clusters and points_per_cluster must be positive"));
        }
        let (ml, mh) = self.mean_range;
        let (sl, sh) = self.wishart_scale_range;
        if !(ml <= mh) || !(sl <= sh) {
            return Err(contract(op, "range bounds must satisfy low <= high"));
        }
        if !(sl > 0.0) {
            return Err(contract(op, "wishart scale must be positive"));
        }
        if self.wishart_dof < self.dim {
            return Err(contract(op, format!("wishart_dof {} < dim {}", self.wishart_dof, self.dim)));
        }
        Ok(())
    }
}

/// Labelled set of equal-length vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorDataset {
    pub points: Vec<DenseVector>,
    pub cluster_ids: Vec<usize>,
}

impl VectorDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, DenseVector::len)
    }

    pub fn mean(&self) -> DenseVector {
        let mut m = DenseVector::zeros(self.dim());
        for p in &self.points {
            for (a, b) in m.as_mut_slice().iter_mut().zip(p.as_slice()) {
                *a += b;
            }
        }
        m.scale(1.0 / self.len().max(1) as f64)
    }

    /// Empirical second-moment matrix `E[x xᵀ]`.
    pub fn second_moment(&self) -> DenseMatrix {
        let d = self.dim();
        let mut m = DenseMatrix::zeros(d, d);
        for p in &self.points {
            m.axpy(1.0, &DenseMatrix::outer(p, p)).expect("shapes agree");
        }
        m.scale(1.0 / self.len().max(1) as f64)
    }

    pub fn to_entries(&self) -> Vec<(String, DenseMatrix)> {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.len() * d);
        for p in &self.points {
            data.extend_from_slice(p.as_slice());
        }
        let points = DenseMatrix::from_vec(self.len(), d, data).expect("rectangular");
        let ids = DenseMatrix::from_fn(self.len(), 1, |r, _| self.cluster_ids[r] as f64);
        vec![("points".into(), points), ("cluster_ids".into(), ids)]
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        container::write_container(w, &self.to_entries())
    }

    pub fn read_binary<R: std::io::Read>(r: R) -> Result<Self> {
        let entries = container::read_container(r)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m)
                .ok_or_else(|| LabError::Container(format!("missing entry `{name}`")))
        };
        let points = find("points")?;
        let ids = find("cluster_ids")?;
        if ids.rows() != points.rows() {
            return Err(LabError::Container("label count does not match point count".into()));
        }
        Ok(Self {
            points: (0..points.rows())
                .map(|r| DenseVector::from_slice(points.row(r)))
                .collect(),
            cluster_ids: ids.as_slice().iter().map(|&v| v as usize).collect(),
        })
    }

    /// `cluster_id,x0,x1,...` with a header row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["cluster_id".to_string()];
        header.extend((0..self.dim()).map(|i| format!("x{i}")));
        out.write_record(&header)?;
        for (p, id) in self.points.iter().zip(&self.cluster_ids) {
            let mut rec = vec![id.to_string()];
            rec.extend(p.as_slice().iter().map(|v| format!("{v:e}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Samples the cluster mixture; see [`GaussianMixtureSpec`].
pub fn build_gaussian_mixture(spec: &GaussianMixtureSpec, rng: &Rng) -> Result<VectorDataset> {
    spec.validate()?;
    let d = spec.dim;
    let mut points = Vec::with_capacity(spec.n_clusters * spec.points_per_cluster);
    let mut cluster_ids = Vec::with_capacity(points.capacity());
    for k in 0..spec.n_clusters {
        let mut crng = rng.substream_indexed("cluster", k as u64);
        let mean = DenseVector::from_vec(
            (0..d)
                .map(|_| crng.uniform(spec.mean_range.0, spec.mean_range.1))
                .collect(),
        );
        let chol = draw_covariance_factor(spec, &mut crng)?;
        for _ in 0..spec.points_per_cluster {
            points.push(sample_gaussian(&mut crng, &mean, &chol)?);
            cluster_ids.push(k);
        }
    }
    let mut ds = VectorDataset {
        points,
        cluster_ids,
    };
    if spec.center {
        let mean = ds.mean();
        for p in &mut ds.points {
            *p = p.sub(&mean);
        }
    }
    Ok(ds)
}

fn draw_covariance_factor(spec: &GaussianMixtureSpec, rng: &mut Rng) -> Result<DenseMatrix> {
    let (lo, hi) = spec.wishart_scale_range;
    let mut last_err = None;
    // one resample on failure, then give up
    for _ in 0..2 {
        let scale = DenseVector::from_vec((0..spec.dim).map(|_| rng.uniform(lo, hi)).collect());
        let sigma = sample_wishart(rng, &scale, spec.wishart_dof)?;
        match sigma.cholesky() {
            Ok(l) => return Ok(l),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("loop ran"))
}

/// Content family for synthetic images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageGenerator {
    GaussianBlobs,
    SinusoidalTextures,
    Mixed,
}

impl std::str::FromStr for ImageGenerator {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian_blobs" => Ok(Self::GaussianBlobs),
            "sinusoidal_textures" => Ok(Self::SinusoidalTextures),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!("unknown generator `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCorpusSpec {
    pub n_images: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub generator: ImageGenerator,
}

impl Default for ImageCorpusSpec {
    fn default() -> Self {
        Self {
            n_images: 256,
            channels: 1,
            height: 16,
            width: 16,
            patch_size: 4,
            generator: ImageGenerator::Mixed,
        }
    }
}

impl ImageCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let op = "ImageCorpusSpec";
        if self.n_images == 0 || self.channels == 0 || self.patch_size == 0 {
            return Err(contract(op, "n_images, channels and patch_size must be positive"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(contract(op, "image must be non-empty"));
        }
        if self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(contract(
                op,
                format!(
                    "{}x{} image is not divisible into {}-pixel patches",
                    self.height, self.width, self.patch_size
                ),
            ));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Channel-major image, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Splits an image into non-overlapping `p x p` patches, one row per patch in
/// raster order; each row is laid out `(py, px, channel)`.
pub fn patchify(img: &Image, p: usize) -> Result<DenseMatrix> {
    if p == 0 || img.height % p != 0 || img.width % p != 0 {
        return Err(contract(
            "patchify",
            format!("{}x{} image, patch size {p}", img.height, img.width),
        ));
    }
    let (gh, gw) = (img.height / p, img.width / p);
    let dim = p * p * img.channels;
    let mut out = DenseMatrix::zeros(gh * gw, dim);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            for py in 0..p {
                for px in 0..p {
                    for c in 0..img.channels {
                        row[(py * p + px) * img.channels + c] = img.at(c, gy * p + py, gx * p + px);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &DenseMatrix, channels: usize, height: usize, width: usize, p: usize) -> Result<Image> {
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(contract("unpatchify", "geometry not divisible by patch size"));
    }
    let (gh, gw) = (height / p, width / p);
    if tokens.shape() != (gh * gw, p * p * channels) {
        return Err(contract(
            "unpatchify",
            format!("token matrix {:?} for {gh}x{gw} patches", tokens.shape()),
        ));
    }
    let mut data = vec![0.0; channels * height * width];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = tokens.row(gy * gw + gx);
            for py in 0..p {
                for px in 0..p {
                    for c in 0..channels {
                        data[(c * height + gy * p + py) * width + gx * p + px] =
                            row[(py * p + px) * channels + c];
                    }
                }
            }
        }
    }
    Ok(Image {
        channels,
        height,
        width,
        data,
    })
}

fn render_blobs(spec: &ImageCorpusSpec, rng: &mut Rng) -> Image {
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let n_blobs = 1 + rng.below(3);
    let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..n_blobs)
        .map(|_| {
            let cy = rng.uniform(0.0, h as f64);
            let cx = rng.uniform(0.0, w as f64);
            let sigma = rng.uniform(1.5, 0.25 * h.min(w) as f64 + 1.5);
            let amp = (0..ch).map(|_| rng.uniform(0.4, 1.0)).collect();
            (cy, cx, sigma, amp)
        })
        .collect();
    let mut data = vec![0.0; ch * h * w];
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = blobs
                    .iter()
                    .map(|(cy, cx, s, amp)| {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        amp[c] * (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum();
                data[(c * h + y) * w + x] = v.min(1.0);
            }
        }
    }
    Image {
        channels: ch,
        height: h,
        width: w,
        data,
    }
}

fn render_sinusoid(spec: &ImageCorpusSpec, rng: &mut Rng) -> Image {
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let freq = rng.uniform(0.2, 0.9);
    let angle = rng.uniform(0.0, std::f64::consts::PI);
    let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let contrast = rng.uniform(0.5, 1.0);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut data = vec![0.0; ch * h * w];
    for c in 0..ch {
        let shift = 0.3 * c as f64;
        for y in 0..h {
            for x in 0..w {
                let u = freq * (x as f64 * ca + y as f64 * sa) + phase + shift;
                data[(c * h + y) * w + x] = 0.5 + 0.5 * contrast * u.sin();
            }
        }
    }
    Image {
        channels: ch,
        height: h,
        width: w,
        data,
    }
}

/// Renders `n_images` images, one labelled substream per image.
pub fn render_images(spec: &ImageCorpusSpec, rng: &Rng) -> Result<Vec<Image>> {
    spec.validate()?;
    Ok((0..spec.n_images)
        .map(|i| {
            let mut irng = rng.substream_indexed("image", i as u64);
            let blobs = match spec.generator {
                ImageGenerator::GaussianBlobs => true,
                ImageGenerator::SinusoidalTextures => false,
                ImageGenerator::Mixed => irng.below(2) == 0,
            };
            if blobs {
                render_blobs(spec, &mut irng)
            } else {
                render_sinusoid(spec, &mut irng)
            }
        })
        .collect())
}

/// Renders and patchifies a corpus: each image becomes an `N x (P²·C)` matrix.
pub fn build_image_corpus(spec: &ImageCorpusSpec, rng: &Rng) -> Result<Vec<DenseMatrix>> {
    render_images(spec, rng)?
        .iter()
        .map(|img| patchify(img, spec.patch_size))
        .collect()
}

pub const PATCH_NORM_EPS: f64 = 1e-6;

fn normalize_slice(patch: &[f64], out: &mut [f64]) {
    if patch.iter().all(|&v| v == patch[0]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + PATCH_NORM_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(patch) {
        *o = (v - mean) * inv;
    }
}

/// `(patch - mean) / sqrt(var + 1e-6)`.
pub fn patch_normalize(patch: &DenseVector) -> Result<DenseVector> {
    if patch.len() < 2 {
        return Err(contract("patch_normalize", "patch needs at least two values"));
    }
    let mut out = DenseVector::zeros(patch.len());
    normalize_slice(patch.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// Row-wise [`patch_normalize`] over a token matrix.
pub fn normalized_targets(tokens: &DenseMatrix) -> Result<DenseMatrix> {
    if tokens.cols() < 2 {
        return Err(contract("normalized_targets", "patches need at least two values"));
    }
    let mut out = DenseMatrix::zeros(tokens.rows(), tokens.cols());
    for r in 0..tokens.rows() {
        normalize_slice(tokens.row(r), out.row_mut(r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mixture_has_a_thousand_centered_points() {
        let spec = GaussianMixtureSpec::default();
        let ds = build_gaussian_mixture(&spec, &Rng::new(0)).unwrap();
        assert_eq!(ds.len(), 1000);
        assert_eq!(ds.dim(), 32);
        let m = ds.mean();
        assert!(m.as_slice().iter().all(|v| v.abs() <= 1e-12), "{m:?}");
        assert!(ds.points.iter().all(DenseVector::is_finite));
    }

    #[test]
    fn degenerate_spec_collapses_to_origin() {
        let spec = GaussianMixtureSpec {
            dim: 4,
            n_clusters: 3,
            points_per_cluster: 10,
            mean_range: (0.0, 0.0),
            wishart_scale_range: (1e-14, 1e-14),
            wishart_dof: 6,
            center: false,
        };
        let ds = build_gaussian_mixture(&spec, &Rng::new(4)).unwrap();
        for p in &ds.points {
            assert!(p.as_slice().iter().all(|v| v.abs() < 1e-5));
        }
    }

    #[test]
    fn dof_below_dim_is_rejected() {
        let spec = GaussianMixtureSpec {
            wishart_dof: 10,
            ..Default::default()
        };
        assert!(build_gaussian_mixture(&spec, &Rng::new(0)).is_err());
    }

    #[test]
    fn corpus_geometry() {
        let spec = ImageCorpusSpec {
            n_images: 3,
            ..Default::default()
        };
        let corpus = build_image_corpus(&spec, &Rng::new(1)).unwrap();
        assert_eq!(corpus.len(), 3);
        for t in &corpus {
            assert_eq!(t.shape(), (16, 16));
            assert!(t.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let bad = ImageCorpusSpec {
            height: 15,
            ..Default::default()
        };
        assert!(build_image_corpus(&bad, &Rng::new(1)).is_err());
    }

    #[test]
    fn patchify_roundtrip_is_exact() {
        let spec = ImageCorpusSpec {
            n_images: 4,
            channels: 3,
            height: 8,
            width: 12,
            patch_size: 4,
            generator: ImageGenerator::Mixed,
        };
        for img in render_images(&spec, &Rng::new(8)).unwrap() {
            let tokens = patchify(&img, 4).unwrap();
            assert_eq!(tokens.shape(), (6, 48));
            assert_eq!(unpatchify(&tokens, 3, 8, 12, 4).unwrap(), img);
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let spec = ImageCorpusSpec::default();
        assert_eq!(
            build_image_corpus(&spec, &Rng::new(5)).unwrap(),
            build_image_corpus(&spec, &Rng::new(5)).unwrap()
        );
    }

    #[test]
    fn constant_patch_normalizes_to_zero() {
        let p = DenseVector::from_vec(vec![0.7; 16]);
        assert!(patch_normalize(&p).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(patch_normalize(&DenseVector::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn normalized_patch_statistics_and_idempotence() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let p = DenseVector::from_vec((0..16).map(|_| rng.standard_normal()).collect());
            let n = patch_normalize(&p).unwrap();
            let mean = n.as_slice().iter().sum::<f64>() / 16.0;
            let var = n.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-12);
            assert!((var - 1.0).abs() <= 1e-4);
            let again = patch_normalize(&n).unwrap();
            assert!(again.sub(&n).as_slice().iter().all(|d| d.abs() <= 1e-5));
        }
    }

    #[test]
    fn renormalization_shift_is_bounded_by_epsilon_over_variance() {
        // second pass rescales by (v/(v+ε) + ε)^(-1/2) ≈ 1 + ε(1-v)/(2v)
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let p = DenseVector::from_vec((0..16).map(|_| rng.uniform(0.0, 1.0)).collect());
            let mean = p.as_slice().iter().sum::<f64>() / 16.0;
            let var = p.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            let n = patch_normalize(&p).unwrap();
            let again = patch_normalize(&n).unwrap();
            for (a, b) in again.as_slice().iter().zip(n.as_slice()) {
                assert!((a - b).abs() <= b.abs() * PATCH_NORM_EPS / var + 1e-12);
            }
        }
    }
}
