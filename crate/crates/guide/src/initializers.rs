//! Student initialization from a teacher checkpoint.
//!
//! Four constructions, all deterministic in (teacher, student config,
//! layer selection, seed):
//!
//! - `guide_init`: fit an orthonormal projection M by PCA of the row-stacked
//!   teacher embedding and positional tables, project both tables into the
//!   student width, absorb M into the Q/K/V weights of the block mapped to
//!   student block 0 (that block reads the projected stream directly), and
//!   fill every later mapped block by structure-aware index selection. The
//!   unembedding and all unmapped blocks keep their seeded random draw.
//! - `uniform_init`: evenly spaced index selection on every axis, applied
//!   model-wide (embeddings, mapped blocks, and the unembedding). With
//!   identical dimensions every index set is the identity, so the student
//!   reproduces the teacher exactly.
//! - `lowrank_embed_init`: the truncated SVD factor U * diag(sigma), the
//!   Frobenius-optimal rank-d_S factorization of the embedding Gram matrix
//!   (Eckart-Young). Everything except the embedding table stays random.
//! - `random_student`: the seeded random baseline, wrapped to produce a
//!   report like the others.
//!
//! Tensors not derived from the teacher take exactly the values
//! `checkpoint::random_init` would produce at the same seed, so runs that
//! differ only in method share their random tensors at equal seeds.

use std::fmt::Write as _;

use crate::checkpoint::{random_init, BlockWeights, Checkpoint, ModelConfig};
use crate::error::{Error, Result};
use crate::linalg::{self, Axis, Matrix};
use crate::selection::{evenly_spaced_indices, LayerSelection};
use crate::tensor::Tensor;

/// Orthonormal basis of the leading principal directions of the teacher's
/// stacked embedding rows; maps teacher width to student width.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    matrix: Matrix,
    residual: Vec<f64>,
}

impl PcaProjection {
    /// The d_T x d_S projection. Columns are orthonormal.
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Singular values discarded by the width truncation, largest first.
    pub fn residual_spectrum(&self) -> &[f64] {
        &self.residual
    }
}

/// Fits the projection: thin SVD of the (vocab + ctx) x d_T row-stack of the
/// embedding and positional tables; the projection is the first `d_s` right
/// singular vectors.
pub fn pca_projection(embed: &Tensor, pos: &Tensor, d_s: usize) -> Result<PcaProjection> {
    let e = embed.to_matrix()?;
    let p = pos.to_matrix()?;
    if e.cols() != p.cols() {
        return Err(Error::shape(format!(
            "embedding width {} differs from positional width {}",
            e.cols(),
            p.cols()
        )));
    }
    let stacked = Matrix::concat_rows(&[&e, &p])?;
    let k = stacked.rows().min(stacked.cols());
    if d_s == 0 || d_s > k {
        return Err(Error::invalid(format!(
            "cannot extract {} principal directions from a {}x{} table",
            d_s,
            stacked.rows(),
            stacked.cols()
        )));
    }
    let svd = linalg::svd(&stacked)?;
    Ok(PcaProjection {
        matrix: svd.v.slice_cols(0..d_s)?,
        residual: svd.sigma[d_s..].to_vec(),
    })
}

/// Where one student tensor's values came from.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorOrigin {
    /// Seeded random draw.
    Random,
    /// Constant one fill (norm gains).
    Ones,
    /// Teacher tensor times the fitted projection.
    Projected { source: String },
    /// Index-gathered from a teacher tensor; one index set per gathered axis.
    Selected { source: String, indices: Vec<Vec<usize>> },
    /// Projected on the width axis, then index-gathered on the head axes.
    ProjectedSelected { source: String, indices: Vec<Vec<usize>> },
}

impl TensorOrigin {
    pub fn is_teacher_derived(&self) -> bool {
        matches!(
            self,
            TensorOrigin::Projected { .. }
                | TensorOrigin::Selected { .. }
                | TensorOrigin::ProjectedSelected { .. }
        )
    }

    fn describe(&self) -> String {
        let axes = |indices: &[Vec<usize>]| {
            indices.iter().map(|ix| ix.len().to_string()).collect::<Vec<_>>().join("x")
        };
        match self {
            TensorOrigin::Random => "random".to_string(),
            TensorOrigin::Ones => "ones".to_string(),
            TensorOrigin::Projected { source } => format!("projected from {}", source),
            TensorOrigin::Selected { source, indices } => {
                format!("selected from {} (axes {})", source, axes(indices))
            }
            TensorOrigin::ProjectedSelected { source, indices } => {
                format!("projected from {} then selected (axes {})", source, axes(indices))
            }
        }
    }
}

/// Audit trail of an initialization: what every student tensor was filled
/// with, plus the spectrum the width truncation discarded (when a spectral
/// fit was involved).
#[derive(Debug, Clone)]
pub struct InitReport {
    method: String,
    layers: Option<LayerSelection>,
    entries: Vec<(String, TensorOrigin)>,
    residual_spectrum: Vec<f64>,
}

impl InitReport {
    pub fn method(&self) -> &str {
        &self.method
    }

    pub fn layers(&self) -> Option<&LayerSelection> {
        self.layers.as_ref()
    }

    pub fn entries(&self) -> &[(String, TensorOrigin)] {
        &self.entries
    }

    pub fn origin(&self, tensor: &str) -> Option<&TensorOrigin> {
        self.entries.iter().find(|(n, _)| n == tensor).map(|(_, o)| o)
    }

    pub fn residual_spectrum(&self) -> &[f64] {
        &self.residual_spectrum
    }

    /// Every tensor of a `cfg`-shaped checkpoint must be accounted for
    /// exactly once, in canonical order.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Checkpoint::expected_shapes(cfg);
        if expected.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "report covers {} tensors, model has {}",
                self.entries.len(),
                expected.len()
            )));
        }
        for ((want, _), (got, _)) in expected.iter().zip(&self.entries) {
            if want != got {
                return Err(Error::invalid(format!(
                    "report entry {:?} does not match expected tensor {:?}",
                    got, want
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method: {}", self.method);
        if let Some(l) = &self.layers {
            if l.pairs().is_empty() {
                let _ = writeln!(s, "blocks: none mapped");
            } else {
                let parts: Vec<String> =
                    l.pairs().iter().map(|(st, te)| format!("{} <- {}", st, te)).collect();
                let _ = writeln!(s, "blocks: {}", parts.join(", "));
            }
        }
        if !self.residual_spectrum.is_empty() {
            let tail = self.residual_spectrum.iter().map(|v| v * v).sum::<f64>().sqrt();
            let _ = writeln!(
                s,
                "discarded spectrum: {} values, largest {:.6}, l2 {:.6}",
                self.residual_spectrum.len(),
                self.residual_spectrum[0],
                tail
            );
        }
        let _ = writeln!(s, "tensors:");
        for (name, origin) in &self.entries {
            let _ = writeln!(s, "  {:<18} {}", name, origin.describe());
        }
        s
    }
}

fn check_dims(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    student.validate()?;
    let le = [
        ("width", student.dim, teacher.dim),
        ("heads", student.n_heads, teacher.n_heads),
        ("head dim", student.head_dim, teacher.head_dim),
        ("ffn", student.ffn, teacher.ffn),
        ("blocks", student.n_blocks, teacher.n_blocks),
    ];
    for (what, s, t) in le {
        if s > t {
            return Err(Error::ConfigMismatch(format!(
                "student {} {} exceeds teacher's {}",
                what, s, t
            )));
        }
    }
    if student.vocab != teacher.vocab {
        return Err(Error::ConfigMismatch(format!(
            "vocab differs: student {}, teacher {}",
            student.vocab, teacher.vocab
        )));
    }
    if student.ctx != teacher.ctx {
        return Err(Error::ConfigMismatch(format!(
            "context length differs: student {}, teacher {}",
            student.ctx, teacher.ctx
        )));
    }
    Ok(())
}

fn check_layers(layers: &LayerSelection, teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    if layers.n_student() != student.n_blocks || layers.n_teacher() != teacher.n_blocks {
        return Err(Error::ConfigMismatch(format!(
            "layer selection built for {} student / {} teacher blocks, models have {} / {}",
            layers.n_student(),
            layers.n_teacher(),
            student.n_blocks,
            teacher.n_blocks
        )));
    }
    Ok(())
}

/// Evenly spaced index sets for each structural axis.
struct AxisIndices {
    d: Vec<usize>,
    f: Vec<usize>,
    h: Vec<usize>,
    e: Vec<usize>,
}

impl AxisIndices {
    fn build(teacher: &ModelConfig, student: &ModelConfig) -> Result<AxisIndices> {
        Ok(AxisIndices {
            d: evenly_spaced_indices(student.dim, teacher.dim)?,
            f: evenly_spaced_indices(student.ffn, teacher.ffn)?,
            h: evenly_spaced_indices(student.n_heads, teacher.n_heads)?,
            e: evenly_spaced_indices(student.head_dim, teacher.head_dim)?,
        })
    }
}

/// Structure-aware index selection of one whole block: Q/K/V gathered at
/// (width, head, head-dim), the output projection at (head, head-dim, width),
/// the MLP at its width and hidden axes, norms and biases along their single
/// axis.
fn selected_block(
    tb: &BlockWeights,
    teacher: &ModelConfig,
    student: &ModelConfig,
    ix: &AxisIndices,
) -> Result<BlockWeights> {
    let (dt, ht, et) = (teacher.dim, teacher.n_heads, teacher.head_dim);
    let ds = student.dim;
    let qkv = |w: &Tensor| -> Result<Tensor> {
        w.reshape(vec![dt, ht, et])?
            .gather(0, &ix.d)?
            .gather(1, &ix.h)?
            .gather(2, &ix.e)?
            .reshape(vec![ds, ds])
    };
    Ok(BlockWeights {
        wq: qkv(&tb.wq)?,
        wk: qkv(&tb.wk)?,
        wv: qkv(&tb.wv)?,
        wo: tb
            .wo
            .reshape(vec![ht, et, dt])?
            .gather(0, &ix.h)?
            .gather(1, &ix.e)?
            .gather(2, &ix.d)?
            .reshape(vec![ds, ds])?,
        w1: tb.w1.gather(0, &ix.d)?.gather(1, &ix.f)?,
        b1: tb.b1.gather(0, &ix.f)?,
        w2: tb.w2.gather(0, &ix.f)?.gather(1, &ix.d)?,
        b2: tb.b2.gather(0, &ix.d)?,
        norm_attn: tb.norm_attn.gather(0, &ix.d)?,
        norm_mlp: tb.norm_mlp.gather(0, &ix.d)?,
    })
}

/// Block transfer for the block that reads the projected embedding stream:
/// Q/K/V absorb the projection on their input axis (then head gathers);
/// everything else is the same structure-aware selection. Norm gains stay at
/// one.
fn guided_block(
    tb: &BlockWeights,
    teacher: &ModelConfig,
    student: &ModelConfig,
    ix: &AxisIndices,
    m: &Matrix,
) -> Result<BlockWeights> {
    let mt = m.transpose();
    let head_cols: Vec<usize> = ix
        .h
        .iter()
        .flat_map(|&h| ix.e.iter().map(move |&e| h * teacher.head_dim + e))
        .collect();
    let absorb = |w: &Tensor| -> Result<Tensor> {
        let projected = mt.matmul(&w.to_matrix()?)?;
        Ok(Tensor::from_matrix(&projected.gather(Axis::Cols, &head_cols)?))
    };
    let plain = selected_block(tb, teacher, student, ix)?;
    Ok(BlockWeights {
        wq: absorb(&tb.wq)?,
        wk: absorb(&tb.wk)?,
        wv: absorb(&tb.wv)?,
        norm_attn: Tensor::filled(vec![student.dim], 1.0),
        norm_mlp: Tensor::filled(vec![student.dim], 1.0),
        ..plain
    })
}

fn block_tensor_names(i: usize) -> [String; 10] {
    [
        format!("block.{}.wq", i),
        format!("block.{}.wk", i),
        format!("block.{}.wv", i),
        format!("block.{}.wo", i),
        format!("block.{}.w1", i),
        format!("block.{}.b1", i),
        format!("block.{}.w2", i),
        format!("block.{}.b2", i),
        format!("block.{}.norm1", i),
        format!("block.{}.norm2", i),
    ]
}

fn push_random_block(entries: &mut Vec<(String, TensorOrigin)>, i: usize) {
    let names = block_tensor_names(i);
    for (j, name) in names.into_iter().enumerate() {
        let origin = if j >= 8 { TensorOrigin::Ones } else { TensorOrigin::Random };
        entries.push((name, origin));
    }
}

fn push_selected_block(
    entries: &mut Vec<(String, TensorOrigin)>,
    student_block: usize,
    teacher_block: usize,
    ix: &AxisIndices,
) {
    let names = block_tensor_names(student_block);
    let src = |leaf: &str| format!("block.{}.{}", teacher_block, leaf);
    let sel = |leaf: &str, indices: Vec<Vec<usize>>| TensorOrigin::Selected {
        source: src(leaf),
        indices,
    };
    let per_tensor: [TensorOrigin; 10] = [
        sel("wq", vec![ix.d.clone(), ix.h.clone(), ix.e.clone()]),
        sel("wk", vec![ix.d.clone(), ix.h.clone(), ix.e.clone()]),
        sel("wv", vec![ix.d.clone(), ix.h.clone(), ix.e.clone()]),
        sel("wo", vec![ix.h.clone(), ix.e.clone(), ix.d.clone()]),
        sel("w1", vec![ix.d.clone(), ix.f.clone()]),
        sel("b1", vec![ix.f.clone()]),
        sel("w2", vec![ix.f.clone(), ix.d.clone()]),
        sel("b2", vec![ix.d.clone()]),
        sel("norm1", vec![ix.d.clone()]),
        sel("norm2", vec![ix.d.clone()]),
    ];
    for (name, origin) in names.into_iter().zip(per_tensor) {
        entries.push((name, origin));
    }
}

fn push_guided_block(
    entries: &mut Vec<(String, TensorOrigin)>,
    student_block: usize,
    teacher_block: usize,
    ix: &AxisIndices,
) {
    let names = block_tensor_names(student_block);
    let src = |leaf: &str| format!("block.{}.{}", teacher_block, leaf);
    let heads = vec![ix.h.clone(), ix.e.clone()];
    let sel = |leaf: &str, indices: Vec<Vec<usize>>| TensorOrigin::Selected {
        source: src(leaf),
        indices,
    };
    let per_tensor: [TensorOrigin; 10] = [
        TensorOrigin::ProjectedSelected { source: src("wq"), indices: heads.clone() },
        TensorOrigin::ProjectedSelected { source: src("wk"), indices: heads.clone() },
        TensorOrigin::ProjectedSelected { source: src("wv"), indices: heads },
        sel("wo", vec![ix.h.clone(), ix.e.clone(), ix.d.clone()]),
        sel("w1", vec![ix.d.clone(), ix.f.clone()]),
        sel("b1", vec![ix.f.clone()]),
        sel("w2", vec![ix.f.clone(), ix.d.clone()]),
        sel("b2", vec![ix.d.clone()]),
        TensorOrigin::Ones,
        TensorOrigin::Ones,
    ];
    for (name, origin) in names.into_iter().zip(per_tensor) {
        entries.push((name, origin));
    }
}

/// PCA-guided transfer. See the module docs for the construction.
pub fn guide_init(
    teacher: &Checkpoint,
    student: &ModelConfig,
    layers: &LayerSelection,
    seed: u64,
) -> Result<(Checkpoint, InitReport)> {
    teacher.validate()?;
    check_dims(&teacher.config, student)?;
    check_layers(layers, &teacher.config, student)?;

    let proj = pca_projection(&teacher.embed, &teacher.pos, student.dim)?;
    let m = proj.matrix();
    let ix = AxisIndices::build(&teacher.config, student)?;

    let mut ck = random_init(*student, seed)?;
    ck.tokenizer = teacher.tokenizer.clone();
    let mut entries = Vec::new();

    ck.embed = Tensor::from_matrix(&teacher.embed.to_matrix()?.matmul(m)?);
    entries.push(("embed".to_string(), TensorOrigin::Projected { source: "embed".to_string() }));
    ck.pos = Tensor::from_matrix(&teacher.pos.to_matrix()?.matmul(m)?);
    entries.push(("pos".to_string(), TensorOrigin::Projected { source: "pos".to_string() }));

    for sb in 0..student.n_blocks {
        match layers.teacher_for(sb) {
            Some(tb) if sb == 0 => {
                ck.blocks[sb] = guided_block(&teacher.blocks[tb], &teacher.config, student, &ix, m)?;
                push_guided_block(&mut entries, sb, tb, &ix);
            }
            Some(tb) => {
                ck.blocks[sb] = selected_block(&teacher.blocks[tb], &teacher.config, student, &ix)?;
                push_selected_block(&mut entries, sb, tb, &ix);
            }
            None => push_random_block(&mut entries, sb),
        }
    }
    entries.push(("unembed".to_string(), TensorOrigin::Random));

    let report = InitReport {
        method: "guide".to_string(),
        layers: Some(layers.clone()),
        entries,
        residual_spectrum: proj.residual.clone(),
    };
    report.validate(student)?;
    ck.validate()?;
    Ok((ck, report))
}

/// Model-wide evenly spaced index selection.
pub fn uniform_init(
    teacher: &Checkpoint,
    student: &ModelConfig,
    layers: &LayerSelection,
    seed: u64,
) -> Result<(Checkpoint, InitReport)> {
    teacher.validate()?;
    check_dims(&teacher.config, student)?;
    check_layers(layers, &teacher.config, student)?;

    let ix = AxisIndices::build(&teacher.config, student)?;
    let vocab_all: Vec<usize> = (0..student.vocab).collect();

    let mut ck = random_init(*student, seed)?;
    ck.tokenizer = teacher.tokenizer.clone();
    let mut entries = Vec::new();

    ck.embed = teacher.embed.gather(1, &ix.d)?;
    entries.push((
        "embed".to_string(),
        TensorOrigin::Selected {
            source: "embed".to_string(),
            indices: vec![vocab_all.clone(), ix.d.clone()],
        },
    ));
    ck.pos = teacher.pos.gather(1, &ix.d)?;
    entries.push((
        "pos".to_string(),
        TensorOrigin::Selected {
            source: "pos".to_string(),
            indices: vec![(0..student.ctx).collect(), ix.d.clone()],
        },
    ));

    for sb in 0..student.n_blocks {
        match layers.teacher_for(sb) {
            Some(tb) => {
                ck.blocks[sb] = selected_block(&teacher.blocks[tb], &teacher.config, student, &ix)?;
                push_selected_block(&mut entries, sb, tb, &ix);
            }
            None => push_random_block(&mut entries, sb),
        }
    }

    ck.unembed = teacher.unembed.gather(0, &ix.d)?;
    entries.push((
        "unembed".to_string(),
        TensorOrigin::Selected {
            source: "unembed".to_string(),
            indices: vec![ix.d.clone(), vocab_all],
        },
    ));

    let report = InitReport {
        method: "uniform".to_string(),
        layers: Some(layers.clone()),
        entries,
        residual_spectrum: Vec::new(),
    };
    report.validate(student)?;
    ck.validate()?;
    Ok((ck, report))
}

/// Truncated-spectrum embedding transfer: E_S = U_{d_S} diag(sigma_{1..d_S})
/// from the SVD of the teacher embedding, which minimizes the Frobenius
/// distance of E_S E_S^T to the teacher's embedding Gram matrix over all
/// rank-d_S candidates. The Gram matrix itself is never materialized.
pub fn lowrank_embed_init(
    teacher: &Checkpoint,
    student: &ModelConfig,
    seed: u64,
) -> Result<(Checkpoint, InitReport)> {
    teacher.validate()?;
    check_dims(&teacher.config, student)?;

    let e_t = teacher.embed.to_matrix()?;
    let k = e_t.rows().min(e_t.cols());
    if student.dim > k {
        return Err(Error::ConfigMismatch(format!(
            "student width {} exceeds the {} spectral directions of a {}x{} embedding",
            student.dim,
            k,
            e_t.rows(),
            e_t.cols()
        )));
    }
    let svd = linalg::svd(&e_t)?;
    let mut e_s = svd.u.slice_cols(0..student.dim)?;
    for i in 0..e_s.rows() {
        for j in 0..student.dim {
            e_s.set(i, j, e_s.get(i, j) * svd.sigma[j]);
        }
    }

    let mut ck = random_init(*student, seed)?;
    ck.tokenizer = teacher.tokenizer.clone();
    ck.embed = Tensor::from_matrix(&e_s);

    let mut entries =
        vec![("embed".to_string(), TensorOrigin::Projected { source: "embed".to_string() })];
    entries.push(("pos".to_string(), TensorOrigin::Random));
    for sb in 0..student.n_blocks {
        push_random_block(&mut entries, sb);
    }
    entries.push(("unembed".to_string(), TensorOrigin::Random));

    let report = InitReport {
        method: "lowrank-embed".to_string(),
        layers: None,
        entries,
        residual_spectrum: svd.sigma[student.dim..].to_vec(),
    };
    report.validate(student)?;
    ck.validate()?;
    Ok((ck, report))
}

/// Seeded random student, reported in the same shape as the transfer methods.
pub fn random_student(cfg: &ModelConfig, seed: u64) -> Result<(Checkpoint, InitReport)> {
    let ck = random_init(*cfg, seed)?;
    let mut entries = vec![
        ("embed".to_string(), TensorOrigin::Random),
        ("pos".to_string(), TensorOrigin::Random),
    ];
    for sb in 0..cfg.n_blocks {
        push_random_block(&mut entries, sb);
    }
    entries.push(("unembed".to_string(), TensorOrigin::Random));
    let report = InitReport {
        method: "random".to_string(),
        layers: None,
        entries,
        residual_spectrum: Vec::new(),
    };
    report.validate(cfg)?;
    Ok((ck, report))
}
