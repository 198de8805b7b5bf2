//! Random masks over vector components and patch tokens.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::linalg::DenseVector;
use crate::rng::Rng;

/// A partition of `0..total` into masked and visible indices (both sorted).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    total: usize,
    masked_idx: Vec<usize>,
    visible_idx: Vec<usize>,
}

impl MaskSpec {
    /// Builds a mask from an explicit masked set.
    pub fn from_masked(total: usize, masked: &[usize]) -> Result<Self> {
        let mut flags = vec![false; total];
        for &i in masked {
            if i >= total || flags[i] {
                return Err(contract("MaskSpec::from_masked", format!("index {i} out of range or repeated")));
            }
            flags[i] = true;
        }
        Ok(Self::from_flags(&flags))
    }

    fn from_flags(flags: &[bool]) -> Self {
        let (mut masked_idx, mut visible_idx) = (Vec::new(), Vec::new());
        for (i, &m) in flags.iter().enumerate() {
            if m {
                masked_idx.push(i);
            } else {
                visible_idx.push(i);
            }
        }
        Self {
            total: flags.len(),
            masked_idx,
            visible_idx,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Realised masked fraction.
    pub fn ratio(&self) -> f64 {
        self.masked_idx.len() as f64 / self.total as f64
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked_idx
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible_idx
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked_idx.binary_search(&i).is_ok()
    }

    /// Binary keep-vector `m` (1 = visible).
    pub fn keep_vector(&self) -> DenseVector {
        let mut m = DenseVector::from_vec(vec![1.0; self.total]);
        for &i in &self.masked_idx {
            m[i] = 0.0;
        }
        m
    }
}

/// Number of masked units: `round(ratio * total)`, halves away from zero.
pub fn masked_count(total: usize, ratio: f64) -> usize {
    ((ratio * total as f64).round() as usize).min(total)
}

/// Uniformly random mask with `round(ratio * total)` masked units.
pub fn draw_mask(total: usize, ratio: f64, rng: &mut Rng) -> Result<MaskSpec> {
    if total == 0 {
        return Err(contract("draw_mask", "total must be positive"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(contract("draw_mask", format!("ratio {ratio} outside [0, 1]")));
    }
    let k = masked_count(total, ratio);
    let masked = rng.subset(total, k);
    MaskSpec::from_masked(total, &masked)
}

/// `x ⊙ m`: masked components set to zero.
pub fn apply_vector_mask(x: &DenseVector, mask: &MaskSpec) -> Result<DenseVector> {
    if x.len() != mask.total {
        return Err(contract(
            "apply_vector_mask",
            format!("vector of length {} with mask over {}", x.len(), mask.total),
        ));
    }
    let mut out = x.clone();
    for &i in &mask.masked_idx {
        out[i] = 0.0;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Same,
    Different,
}

impl std::str::FromStr for MaskMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "same" => Ok(Self::Same),
            "different" => Ok(Self::Different),
            other => Err(format!("unknown mask mode `{other}` (expected same|different)")),
        }
    }
}

/// Student and teacher masks for one input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPair {
    pub student: MaskSpec,
    pub teacher: MaskSpec,
    pub mode: MaskMode,
}

impl MaskPair {
    pub fn same(mask: MaskSpec) -> Self {
        Self {
            teacher: mask.clone(),
            student: mask,
            mode: MaskMode::Same,
        }
    }
}

/// `Same` shares one draw; `Different` draws twice, independently.
///
/// The student draw always comes from `student_rng`; the teacher draw in
/// `Different` mode comes from `teacher_rng`, so the student's mask sequence
/// does not depend on the mode.
pub fn draw_mask_pair(
    total: usize,
    ratio: f64,
    mode: MaskMode,
    student_rng: &mut Rng,
    teacher_rng: &mut Rng,
) -> Result<MaskPair> {
    let student = draw_mask(total, ratio, student_rng)?;
    let teacher = match mode {
        MaskMode::Same => student.clone(),
        MaskMode::Different => draw_mask(total, ratio, teacher_rng)?,
    };
    Ok(MaskPair {
        student,
        teacher,
        mode,
    })
}
