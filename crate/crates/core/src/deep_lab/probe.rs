//! The gradient probe on TinyMae with token-level masks.

use crate::error::{contract, Result};
use crate::linalg::{cosine, DenseMatrix};
use crate::linear_lab::{ProbeCase, ProbeRecord};
use crate::masking::{draw_mask, MaskPair, MaskSpec};
use crate::rng::Rng;

use super::train::{batch_grads, combined, flatten, grad_norm, momentum_step, MaeTrainer, RcMaeConfig, Sample};

/// Tokens with the masked rows zeroed, flattened.
fn masked_tokens(tokens: &DenseMatrix, mask: &MaskSpec) -> Vec<f64> {
    let mut out = tokens.clone();
    for &r in mask.masked() {
        out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
    }
    out.into_vec()
}

/// One image as `(tokens, normalised targets)`.
pub type ProbeImage<'a> = (&'a DenseMatrix, &'a DenseMatrix);

/// Step plus EMA on input 1 of a cloned trainer, then `∇L_r`, `∇L_c` on
/// input 2. The teacher sees the student's mask throughout.
///
/// Masks are drawn from `rng` in a fixed order (input-1 mask, then the one
/// the case needs) so cloning `rng` across cases shares the first mask.
pub fn run_deep_probe(
    trainer: &MaeTrainer,
    config: &RcMaeConfig,
    image: ProbeImage<'_>,
    other: ProbeImage<'_>,
    case: ProbeCase,
    rng: &mut Rng,
) -> Result<ProbeRecord> {
    run_deep_probe_subset(trainer, config, image, other, case, None, rng)
}

/// [`run_deep_probe`] with norms and cosines restricted to parameters whose
/// names start with `prefix` (e.g. `"encoder."`). The update itself always
/// uses every parameter.
pub fn run_deep_probe_subset(
    trainer: &MaeTrainer,
    config: &RcMaeConfig,
    image: ProbeImage<'_>,
    other: ProbeImage<'_>,
    case: ProbeCase,
    prefix: Option<&str>,
    rng: &mut Rng,
) -> Result<ProbeRecord> {
    let keep: Vec<bool> = trainer
        .model
        .layout
        .names()
        .iter()
        .map(|n| prefix.is_none_or(|p| n.starts_with(p)))
        .collect();
    if !keep.iter().any(|k| *k) {
        return Err(contract("run_deep_probe", format!("no parameter matches `{}`", prefix.unwrap_or(""))));
    }
    let pick = |g: &[DenseMatrix]| -> Vec<DenseMatrix> {
        g.iter().zip(&keep).filter(|(_, k)| **k).map(|(m, _)| m.clone()).collect()
    };
    let n = trainer.model.arch.n_tokens;
    let m1 = MaskPair::same(draw_mask(n, config.mask_ratio, rng)?);
    let (second, m2) = match case {
        ProbeCase::Same => (image, m1.clone()),
        ProbeCase::Similar => (image, MaskPair::same(draw_mask(n, config.mask_ratio, rng)?)),
        ProbeCase::Different => (other, MaskPair::same(draw_mask(n, config.mask_ratio, rng)?)),
    };
    let mut probe = trainer.clone();
    let first = [Sample {
        tokens: image.0,
        targets: image.1,
        masks: &m1,
    }];
    let g1 = combined(&batch_grads(&probe.model, &first, true)?, config.consistency_weight);
    momentum_step(&mut probe, &g1, config);
    probe.model.ema_update(config.alpha);

    let at = [Sample {
        tokens: second.0,
        targets: second.1,
        masks: &m2,
    }];
    let g2 = batch_grads(&probe.model, &at, true)?;
    let cons = pick(&g2.cons.expect("teacher consulted"));
    let recon = pick(&g2.recon);
    let (r, c) = (flatten(&recon), flatten(&cons));
    Ok(ProbeRecord {
        case,
        norm_recon: grad_norm(&recon),
        norm_cons: grad_norm(&cons),
        cos_prev_full_vs_cons: cosine(&flatten(&pick(&g1)), &c),
        cos_recon_vs_cons: cosine(&r, &c),
        input_similarity: cosine(
            &masked_tokens(image.0, &m1.student),
            &masked_tokens(second.0, &m2.student),
        ),
    })
}
