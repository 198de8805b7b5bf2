//! Tiny masked autoencoder: pre-LN single-head transformer encoder over the
//! visible tokens, a narrower decoder over all positions with a learned mask
//! token, and a linear head back to patch pixels.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::container;
use crate::error::{contract, LabError, Result};
use crate::linalg::DenseMatrix;
use crate::masking::MaskSpec;
use crate::rng::Rng;

/// Architecture sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeArch {
    pub n_tokens: usize,
    pub patch_dim: usize,
    pub enc_width: usize,
    pub enc_depth: usize,
    pub dec_width: usize,
    pub dec_depth: usize,
    pub mlp_ratio: usize,
    /// Std of the weight initialisation is `init_gain / sqrt(fan_in)`.
    pub init_gain: f64,
}

impl Default for MaeArch {
    fn default() -> Self {
        Self {
            n_tokens: 16,
            patch_dim: 16,
            enc_width: 32,
            enc_depth: 2,
            dec_width: 16,
            dec_depth: 1,
            mlp_ratio: 2,
            init_gain: 1.0,
        }
    }
}

impl MaeArch {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.patch_dim == 0 || self.enc_width == 0 || self.dec_width == 0 || self.mlp_ratio == 0 {
            return Err(contract("MaeArch", "all sizes must be positive"));
        }
        if !(self.init_gain > 0.0) {
            return Err(contract("MaeArch", "init_gain must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Named positions of every tensor in a flat parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeLayout {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    patch_w: usize,
    patch_b: usize,
    enc_pos: usize,
    enc_blocks: Vec<BlockIdx>,
    enc_norm_g: usize,
    enc_norm_b: usize,
    dec_w: usize,
    dec_b: usize,
    mask_token: usize,
    dec_pos: usize,
    dec_blocks: Vec<BlockIdx>,
    dec_norm_g: usize,
    dec_norm_b: usize,
    out_w: usize,
    out_b: usize,
}

enum Init {
    Weight,
    Zeros,
    Ones,
    SinCos,
    Small,
}

struct Builder<'a> {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    tensors: Vec<DenseMatrix>,
    gain: f64,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let m = match init {
            Init::Weight => {
                let s = self.gain / (rows as f64).sqrt();
                DenseMatrix::from_fn(rows, cols, |_, _| s * self.rng.standard_normal())
            }
            Init::Zeros => DenseMatrix::zeros(rows, cols),
            Init::Ones => DenseMatrix::filled(rows, cols, 1.0),
            Init::SinCos => sincos_positions(rows, cols),
            Init::Small => DenseMatrix::from_fn(rows, cols, |_, _| 0.02 * self.rng.standard_normal()),
        };
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    fn block(&mut self, prefix: &str, w: usize, ratio: usize) -> BlockIdx {
        let h = w * ratio;
        BlockIdx {
            ln1_g: self.add(format!("{prefix}.ln1.gamma"), 1, w, Init::Ones),
            ln1_b: self.add(format!("{prefix}.ln1.beta"), 1, w, Init::Zeros),
            wq: self.add(format!("{prefix}.attn.wq"), w, w, Init::Weight),
            wk: self.add(format!("{prefix}.attn.wk"), w, w, Init::Weight),
            wv: self.add(format!("{prefix}.attn.wv"), w, w, Init::Weight),
            wo: self.add(format!("{prefix}.attn.wo"), w, w, Init::Weight),
            ln2_g: self.add(format!("{prefix}.ln2.gamma"), 1, w, Init::Ones),
            ln2_b: self.add(format!("{prefix}.ln2.beta"), 1, w, Init::Zeros),
            w1: self.add(format!("{prefix}.mlp.w1"), w, h, Init::Weight),
            b1: self.add(format!("{prefix}.mlp.b1"), 1, h, Init::Zeros),
            w2: self.add(format!("{prefix}.mlp.w2"), h, w, Init::Weight),
            b2: self.add(format!("{prefix}.mlp.b2"), 1, w, Init::Zeros),
        }
    }
}

/// Fixed 1-D sine/cosine table, used to initialise the learned positions.
pub fn sincos_positions(n: usize, width: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n, width, |p, c| {
        let k = (c / 2) as f64;
        let freq = 1.0 / 10_000f64.powf(2.0 * k / width as f64);
        if c % 2 == 0 {
            (p as f64 * freq).sin()
        } else {
            (p as f64 * freq).cos()
        }
    })
}

fn build(arch: &MaeArch, rng: &mut Rng) -> (MaeLayout, Vec<DenseMatrix>) {
    let (n, pd, we, wd, r) = (arch.n_tokens, arch.patch_dim, arch.enc_width, arch.dec_width, arch.mlp_ratio);
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        tensors: Vec::new(),
        gain: arch.init_gain,
        rng,
    };
    let patch_w = b.add("patch_embed.w".into(), pd, we, Init::Weight);
    let patch_b = b.add("patch_embed.b".into(), 1, we, Init::Zeros);
    let enc_pos = b.add("encoder.pos".into(), n, we, Init::SinCos);
    let enc_blocks = (0..arch.enc_depth).map(|i| b.block(&format!("encoder.block{i}"), we, r)).collect();
    let enc_norm_g = b.add("encoder.norm.gamma".into(), 1, we, Init::Ones);
    let enc_norm_b = b.add("encoder.norm.beta".into(), 1, we, Init::Zeros);
    let dec_w = b.add("decoder.embed.w".into(), we, wd, Init::Weight);
    let dec_b = b.add("decoder.embed.b".into(), 1, wd, Init::Zeros);
    let mask_token = b.add("decoder.mask_token".into(), 1, wd, Init::Small);
    let dec_pos = b.add("decoder.pos".into(), n, wd, Init::SinCos);
    let dec_blocks = (0..arch.dec_depth).map(|i| b.block(&format!("decoder.block{i}"), wd, r)).collect();
    let dec_norm_g = b.add("decoder.norm.gamma".into(), 1, wd, Init::Ones);
    let dec_norm_b = b.add("decoder.norm.beta".into(), 1, wd, Init::Zeros);
    let out_w = b.add("output_proj.w".into(), wd, pd, Init::Weight);
    let out_b = b.add("output_proj.b".into(), 1, pd, Init::Zeros);
    let layout = MaeLayout {
        names: b.names,
        shapes: b.shapes,
        patch_w,
        patch_b,
        enc_pos,
        enc_blocks,
        enc_norm_g,
        enc_norm_b,
        dec_w,
        dec_b,
        mask_token,
        dec_pos,
        dec_blocks,
        dec_norm_g,
        dec_norm_b,
        out_w,
        out_b,
    };
    (layout, b.tensors)
}

impl MaeLayout {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Indices of the two positional tables (encoder, decoder).
    pub fn positional(&self) -> (usize, usize) {
        (self.enc_pos, self.dec_pos)
    }

    pub fn mask_token(&self) -> usize {
        self.mask_token
    }
}

/// Student `θ_s` and EMA teacher `θ_t`, stored as parallel tensor lists.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyMae {
    pub arch: MaeArch,
    pub layout: MaeLayout,
    pub student: Vec<DenseMatrix>,
    pub teacher: Vec<DenseMatrix>,
}

impl TinyMae {
    pub fn new(arch: MaeArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let (layout, student) = build(&arch, rng);
        Ok(Self {
            arch,
            layout,
            teacher: student.clone(),
            student,
        })
    }

    pub fn params(&self, teacher: bool) -> &[DenseMatrix] {
        if teacher {
            &self.teacher
        } else {
            &self.student
        }
    }

    pub fn param_count(&self) -> usize {
        self.student.iter().map(DenseMatrix::len).sum()
    }

    pub fn patch_embed(&self) -> &DenseMatrix {
        &self.student[self.layout.patch_w]
    }

    pub fn output_proj(&self) -> &DenseMatrix {
        &self.student[self.layout.out_w]
    }

    /// `T ← α T + (1 - α) S` on every tensor.
    pub fn ema_update(&mut self, alpha: f64) {
        for (t, s) in self.teacher.iter_mut().zip(&self.student) {
            for (tv, sv) in t.as_mut_slice().iter_mut().zip(s.as_slice()) {
                *tv = alpha * *tv + (1.0 - alpha) * sv;
            }
        }
    }

    /// Entries `student.<name>` and `teacher.<name>` for the binary container.
    pub fn to_entries(&self) -> Vec<(String, DenseMatrix)> {
        let mut out = Vec::with_capacity(2 * self.student.len());
        for (prefix, set) in [("student", &self.student), ("teacher", &self.teacher)] {
            for (name, m) in self.layout.names.iter().zip(set) {
                out.push((format!("{prefix}.{name}"), m.clone()));
            }
        }
        out
    }

    pub fn write_checkpoint<W: std::io::Write>(&self, w: W) -> Result<()> {
        container::write_container(w, &self.to_entries())
    }

    /// Loads parameters into a model of the given architecture.
    pub fn read_checkpoint<R: std::io::Read>(arch: MaeArch, r: R) -> Result<Self> {
        let mut model = Self::new(arch, &mut Rng::new(0))?;
        let entries = container::read_container(r)?;
        for (prefix, teacher) in [("student", false), ("teacher", true)] {
            for i in 0..model.layout.len() {
                let key = format!("{prefix}.{}", model.layout.names[i]);
                let m = entries
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, m)| m)
                    .ok_or_else(|| LabError::Container(format!("missing entry `{key}`")))?;
                if m.shape() != model.layout.shapes[i] {
                    return Err(LabError::Container(format!("entry `{key}` has shape {:?}", m.shape())));
                }
                if teacher {
                    model.teacher[i] = m.clone();
                } else {
                    model.student[i] = m.clone();
                }
            }
        }
        Ok(model)
    }
}

/// Records every tensor as a tape leaf.
pub fn param_leaves(tape: &mut Tape, params: &[DenseMatrix]) -> Vec<NodeId> {
    params.iter().map(|p| tape.leaf(p.clone())).collect()
}

fn block(tape: &mut Tape, p: &[NodeId], b: &BlockIdx, x: NodeId, width: usize) -> Result<NodeId> {
    let h = tape.layer_norm(x, p[b.ln1_g], p[b.ln1_b])?;
    let q = tape.matmul(h, p[b.wq])?;
    let k = tape.matmul(h, p[b.wk])?;
    let v = tape.matmul(h, p[b.wv])?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (width as f64).sqrt());
    let attn = tape.softmax_rows(scores);
    let ctx = tape.matmul(attn, v)?;
    let o = tape.matmul(ctx, p[b.wo])?;
    let x = tape.add(x, o)?;
    let h = tape.layer_norm(x, p[b.ln2_g], p[b.ln2_b])?;
    let m = tape.matmul(h, p[b.w1])?;
    let m = tape.add(m, p[b.b1])?;
    let m = tape.gelu(m);
    let m = tape.matmul(m, p[b.w2])?;
    let m = tape.add(m, p[b.b2])?;
    tape.add(x, m)
}

/// Records the forward pass for one image and returns the `N x patch_dim`
/// reconstruction node. `p` are leaves from [`param_leaves`].
pub fn forward_on_tape(
    tape: &mut Tape,
    p: &[NodeId],
    model: &TinyMae,
    tokens: &DenseMatrix,
    mask: &MaskSpec,
) -> Result<NodeId> {
    let (arch, l) = (&model.arch, &model.layout);
    if tokens.rows() != mask.total() || tokens.rows() != arch.n_tokens || tokens.cols() != arch.patch_dim {
        return Err(contract(
            "mae_forward",
            format!(
                "tokens {:?} with a mask over {} for a {}x{} model",
                tokens.shape(),
                mask.total(),
                arch.n_tokens,
                arch.patch_dim
            ),
        ));
    }
    let n = arch.n_tokens;
    let visible = mask.visible();
    let masked = mask.masked();

    let input = tape.leaf(tokens.clone());
    let input = tape.gather_rows(input, visible)?;
    let pos = tape.gather_rows(p[l.enc_pos], visible)?;
    let mut x = tape.matmul(input, p[l.patch_w])?;
    x = tape.add(x, p[l.patch_b])?;
    x = tape.add(x, pos)?;
    for b in &l.enc_blocks {
        x = block(tape, p, b, x, arch.enc_width)?;
    }
    let z = tape.layer_norm(x, p[l.enc_norm_g], p[l.enc_norm_b])?;

    let mut y = tape.matmul(z, p[l.dec_w])?;
    y = tape.add(y, p[l.dec_b])?;
    y = tape.scatter_rows(y, visible, n)?;
    if !masked.is_empty() {
        let fill = tape.gather_rows(p[l.mask_token], &vec![0; masked.len()])?;
        let fill = tape.scatter_rows(fill, masked, n)?;
        y = tape.add(y, fill)?;
    }
    y = tape.add(y, p[l.dec_pos])?;
    for b in &l.dec_blocks {
        y = block(tape, p, b, y, arch.dec_width)?;
    }
    y = tape.layer_norm(y, p[l.dec_norm_g], p[l.dec_norm_b])?;
    let out = tape.matmul(y, p[l.out_w])?;
    tape.add(out, p[l.out_b])
}

/// Reconstruction `Ŷ` of every token from the visible ones.
pub fn mae_forward(model: &TinyMae, tokens: &DenseMatrix, mask: &MaskSpec, use_teacher: bool) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let p = param_leaves(&mut tape, model.params(use_teacher));
    let out = forward_on_tape(&mut tape, &p, model, tokens, mask)?;
    Ok(tape.value(out).clone())
}

fn masked_mse(op: &'static str, a: &DenseMatrix, b: &DenseMatrix, mask: &MaskSpec) -> Result<f64> {
    if a.shape() != b.shape() || a.rows() != mask.total() {
        return Err(contract(op, format!("{:?} vs {:?} over a mask of {}", a.shape(), b.shape(), mask.total())));
    }
    if mask.masked().is_empty() {
        return Err(LabError::EmptyMask(op));
    }
    let mut s = 0.0;
    for &r in mask.masked() {
        for (x, y) in a.row(r).iter().zip(b.row(r)) {
            s += (x - y) * (x - y);
        }
    }
    Ok(s / (mask.masked().len() * a.cols()) as f64)
}

/// Mean over masked patches of the per-element squared error.
pub fn recon_loss(y_hat: &DenseMatrix, targets: &DenseMatrix, mask: &MaskSpec) -> Result<f64> {
    masked_mse("recon_loss", y_hat, targets, mask)
}

/// Same statistic between student and teacher reconstructions, on the
/// student's masked set.
pub fn consistency_loss(y_student: &DenseMatrix, y_teacher: &DenseMatrix, mask_student: &MaskSpec) -> Result<f64> {
    masked_mse("consistency_loss", y_student, y_teacher, mask_student)
}

/// Tape form of the masked loss; `target` may be a constant or stop-grad node.
pub fn masked_loss_on_tape(tape: &mut Tape, y_hat: NodeId, target: NodeId, mask: &MaskSpec) -> Result<NodeId> {
    if mask.masked().is_empty() {
        return Err(LabError::EmptyMask("masked loss"));
    }
    let a = tape.gather_rows(y_hat, mask.masked())?;
    let b = tape.gather_rows(target, mask.masked())?;
    tape.squared_error(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::draw_mask;

    fn model(seed: u64) -> TinyMae {
        TinyMae::new(MaeArch::default(), &mut Rng::new(seed)).unwrap()
    }

    fn tokens(seed: u64) -> DenseMatrix {
        let mut rng = Rng::new(seed);
        DenseMatrix::from_fn(16, 16, |_, _| rng.uniform(0.0, 1.0))
    }

    #[test]
    fn output_shape_is_fixed() {
        let m = model(1);
        let t = tokens(2);
        for ratio in [0.0, 0.25, 0.75, 0.9375] {
            let mask = draw_mask(16, ratio, &mut Rng::new(3)).unwrap();
            assert_eq!(mae_forward(&m, &t, &mask, false).unwrap().shape(), (16, 16));
        }
    }

    #[test]
    fn zero_ratio_uses_every_token() {
        let m = model(4);
        let t = tokens(5);
        let mask = MaskSpec::from_masked(16, &[]).unwrap();
        let mut tape = Tape::new();
        let p = param_leaves(&mut tape, &m.student);
        let out = forward_on_tape(&mut tape, &p, &m, &t, &mask).unwrap();
        let loss = tape.mean(out).unwrap();
        let g = tape.backward(loss).unwrap();
        // no mask token is inserted, so it gets no gradient
        assert!(g.get(p[m.layout.mask_token()]).is_none());
        // every encoder position is used
        assert!(g.wrt(p[m.layout.positional().0]).as_slice().chunks(32).all(|r| r.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn token_count_mismatch_is_rejected() {
        let m = model(6);
        let mask = draw_mask(15, 0.5, &mut Rng::new(0)).unwrap();
        assert!(mae_forward(&m, &tokens(1), &mask, false).is_err());
    }

    #[test]
    fn permuting_tokens_and_positions_permutes_output() {
        let m = model(7);
        let t = tokens(8);
        let mask = draw_mask(16, 0.75, &mut Rng::new(9)).unwrap();
        let y = mae_forward(&m, &t, &mask, false).unwrap();

        let mut shuffled: Vec<usize> = (0..16).collect();
        shuffled.rotate_left(5);
        shuffled.swap(0, 11);
        let inv = {
            let mut inv = vec![0; 16];
            for (new, &old) in shuffled.iter().enumerate() {
                inv[old] = new;
            }
            inv
        };
        let permute = |a: &DenseMatrix| DenseMatrix::from_fn(a.rows(), a.cols(), |r, c| a.get(shuffled[r], c));
        let mut pm = m.clone();
        let (ep, dp) = m.layout.positional();
        pm.student[ep] = permute(&m.student[ep]);
        pm.student[dp] = permute(&m.student[dp]);
        let pmask: Vec<usize> = mask.masked().iter().map(|&i| inv[i]).collect();
        let pmask = MaskSpec::from_masked(16, &pmask).unwrap();
        let py = mae_forward(&pm, &permute(&t), &pmask, false).unwrap();
        assert!(py.sub(&permute(&y)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn losses_only_see_masked_rows() {
        let t = tokens(11);
        let y = tokens(12);
        let mask = MaskSpec::from_masked(16, &[0, 3, 9]).unwrap();
        let base = recon_loss(&y, &t, &mask).unwrap();
        let mut moved = y.clone();
        for &r in mask.visible() {
            moved.row_mut(r).iter_mut().for_each(|v| *v += 100.0);
        }
        assert_eq!(recon_loss(&moved, &t, &mask).unwrap().to_bits(), base.to_bits());
        assert_eq!(consistency_loss(&moved, &y, &mask).unwrap(), 0.0);
        assert_eq!(recon_loss(&t, &t, &mask).unwrap(), 0.0);
        assert!(matches!(
            recon_loss(&y, &t, &MaskSpec::from_masked(16, &[]).unwrap()),
            Err(LabError::EmptyMask(_))
        ));
    }

    #[test]
    fn single_masked_patch_with_constant_error() {
        let t = DenseMatrix::zeros(4, 4);
        let mut y = t.clone();
        y.row_mut(2).iter_mut().for_each(|v| *v = 0.3);
        let mask = MaskSpec::from_masked(4, &[2]).unwrap();
        assert!((recon_loss(&y, &t, &mask).unwrap() - 0.09).abs() < 1e-16);
    }

    #[test]
    fn tape_loss_matches_value_loss() {
        let m = model(13);
        let t = tokens(14);
        let mask = draw_mask(16, 0.75, &mut Rng::new(15)).unwrap();
        let y = mae_forward(&m, &t, &mask, false).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(y.clone());
        let b = tape.leaf(t.clone());
        let l = masked_loss_on_tape(&mut tape, a, b, &mask).unwrap();
        assert!((tape.scalar(l) - recon_loss(&y, &t, &mask).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = model(16);
        m.teacher[0] = m.teacher[0].scale(0.5);
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = TinyMae::read_checkpoint(MaeArch::default(), &buf[..]).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn layout_covers_every_tensor() {
        let m = model(17);
        assert_eq!(m.layout.len(), m.student.len());
        assert!(m.layout.index_of("decoder.mask_token").is_some());
        assert!(m.param_count() > 10_000);
    }
}
