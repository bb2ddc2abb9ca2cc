//! Evenly spaced index selection and the layer-mapping strategies built on it.
//!
//! `evenly_spaced_indices(m, n)` picks m of n indices so that the first and
//! last are always kept and the interior is as uniform as integer rounding
//! allows: index k maps to round(k * (n-1) / (m-1)), with half-integers
//! rounded down. `uniform_select` applies that rule along every axis of a
//! tensor at once, which is the whole "uniform selection" baseline.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An evenly spaced choice of `target` indices out of `source`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSelection {
    source: usize,
    target: usize,
    indices: Vec<usize>,
}

impl IndexSelection {
    pub fn evenly_spaced(target: usize, source: usize) -> Result<IndexSelection> {
        let indices = evenly_spaced_indices(target, source)?;
        Ok(IndexSelection { source, target, indices })
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Round to nearest, with exact half-integers rounded down.
fn round_half_down(x: f64) -> usize {
    (x + 0.5 - 1e-9).floor() as usize
}

/// Pick `target` evenly spaced indices from `0..source`.
///
/// For target >= 2 the result always starts at 0 and ends at source - 1 and is
/// strictly increasing; target == 1 picks index 0.
pub fn evenly_spaced_indices(target: usize, source: usize) -> Result<Vec<usize>> {
    if target < 1 {
        return Err(Error::invalid("cannot select zero indices".to_string()));
    }
    if target > source {
        return Err(Error::invalid(format!(
            "cannot select {} indices from {}",
            target, source
        )));
    }
    if target == 1 {
        return Ok(vec![0]);
    }
    let step = (source - 1) as f64 / (target - 1) as f64;
    Ok((0..target).map(|k| round_half_down(k as f64 * step)).collect())
}

/// Shrink a tensor to `target_shape` by evenly spaced selection on every axis.
pub fn uniform_select(t: &Tensor, target_shape: &[usize]) -> Result<Tensor> {
    if target_shape.len() != t.shape().len() {
        return Err(Error::shape(format!(
            "uniform_select rank mismatch: {:?} -> {:?}",
            t.shape(),
            target_shape
        )));
    }
    let mut out = t.clone();
    for (axis, (&tgt, &src)) in target_shape.iter().zip(t.shape()).enumerate() {
        if tgt > src {
            return Err(Error::invalid(format!(
                "uniform_select cannot grow axis {} from {} to {}",
                axis, src, tgt
            )));
        }
        if tgt == src {
            continue;
        }
        let idx = evenly_spaced_indices(tgt, src)?;
        out = out.gather(axis, &idx)?;
    }
    Ok(out)
}

/// Which teacher blocks a student inherits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerStrategy {
    /// Transfer embeddings only; every block starts random.
    EmbedOnly,
    /// k evenly spaced student blocks (always including block 0) mapped to
    /// k evenly spaced teacher blocks.
    TopK(usize),
    /// Block 0 from teacher block 0 plus the last block from the teacher's last.
    TopPlusLast,
    /// Every student block i from teacher block i.
    FirstN,
}

impl LayerStrategy {
    pub fn name(&self) -> String {
        match self {
            LayerStrategy::EmbedOnly => "embed-only".to_string(),
            LayerStrategy::TopK(1) => "top".to_string(),
            LayerStrategy::TopK(k) => format!("{}-even", k),
            LayerStrategy::TopPlusLast => "top+last".to_string(),
            LayerStrategy::FirstN => "first-n".to_string(),
        }
    }
}

impl std::str::FromStr for LayerStrategy {
    type Err = Error;

    /// Inverse of `name`: "embed-only", "top", "top+last", "first-n", or
    /// "{k}-even".
    fn from_str(s: &str) -> Result<LayerStrategy> {
        match s {
            "embed-only" => Ok(LayerStrategy::EmbedOnly),
            "top" => Ok(LayerStrategy::TopK(1)),
            "top+last" => Ok(LayerStrategy::TopPlusLast),
            "first-n" => Ok(LayerStrategy::FirstN),
            other => {
                if let Some(k) = other.strip_suffix("-even") {
                    if let Ok(k) = k.parse::<usize>() {
                        if k >= 1 {
                            return Ok(LayerStrategy::TopK(k));
                        }
                    }
                }
                Err(Error::invalid(format!(
                    "unknown layer strategy {:?}; expected embed-only, top, top+last, first-n, or {{k}}-even",
                    other
                )))
            }
        }
    }
}

/// A validated (student block -> teacher block) mapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSelection {
    n_student: usize,
    n_teacher: usize,
    pairs: Vec<(usize, usize)>,
}

impl LayerSelection {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn n_student(&self) -> usize {
        self.n_student
    }

    pub fn n_teacher(&self) -> usize {
        self.n_teacher
    }

    /// Teacher block mapped to student block `i`, if any.
    pub fn teacher_for(&self, student_block: usize) -> Option<usize> {
        self.pairs.iter().find(|(s, _)| *s == student_block).map(|(_, t)| *t)
    }
}

/// Build the block mapping for a strategy. Student blocks in the result are
/// distinct and increasing, teacher blocks increasing, all in range.
pub fn select_layers(
    strategy: LayerStrategy,
    n_student: usize,
    n_teacher: usize,
) -> Result<LayerSelection> {
    if n_student < 1 || n_teacher < n_student {
        return Err(Error::invalid(format!(
            "need 1 <= student blocks ({}) <= teacher blocks ({})",
            n_student, n_teacher
        )));
    }
    let pairs = match strategy {
        LayerStrategy::EmbedOnly => Vec::new(),
        LayerStrategy::TopK(k) => {
            if k < 1 || k > n_student {
                return Err(Error::invalid(format!(
                    "cannot map {} blocks of a {}-block student",
                    k, n_student
                )));
            }
            let students = evenly_spaced_indices(k, n_student)?;
            let teachers = evenly_spaced_indices(k, n_teacher)?;
            students.into_iter().zip(teachers).collect()
        }
        LayerStrategy::TopPlusLast => {
            if n_student < 2 {
                return Err(Error::invalid(
                    "top+last needs a student with at least 2 blocks".to_string(),
                ));
            }
            vec![(0, 0), (n_student - 1, n_teacher - 1)]
        }
        LayerStrategy::FirstN => (0..n_student).map(|i| (i, i)).collect(),
    };
    Ok(LayerSelection { n_student, n_teacher, pairs })
}
