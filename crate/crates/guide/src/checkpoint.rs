//! Model configuration, named weight tensors, and the checkpoint file format.
//!
//! File layout (all integers little-endian):
//!   - 8-byte magic `GUIDECK1`
//!   - u32 header byte length
//!   - UTF-8 header: `key=value` config lines followed by one
//!     `tensor=<name>;<dtype>;<d0>x<d1>[x...];<offset>` line per tensor
//!   - zero padding up to the payload base (the first 64-byte boundary after
//!     the header), then raw little-endian f32 payloads; every tensor offset
//!     is relative to the payload base and 64-byte aligned
//!
//! Saving is deterministic: the same checkpoint always produces the same
//! bytes, so byte equality is a usable identity check.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;
use std::path::Path;

const MAGIC: &[u8; 8] = b"GUIDECK1";
const ALIGN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Residual stream width d.
    pub dim: usize,
    /// Number of transformer blocks.
    pub n_blocks: usize,
    /// Attention heads per block.
    pub n_heads: usize,
    /// Per-head projection width; dim = n_heads * head_dim.
    pub head_dim: usize,
    /// Hidden width of the MLP.
    pub ffn: usize,
    /// Vocabulary size.
    pub vocab: usize,
    /// Maximum context length (rows of the positional table).
    pub ctx: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("dim", self.dim),
            ("blocks", self.n_blocks),
            ("heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("ctx", self.ctx),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid(format!("config field {} must be positive", name)));
            }
        }
        if self.dim != self.n_heads * self.head_dim {
            return Err(Error::invalid(format!(
                "dim ({}) must equal heads ({}) * head_dim ({})",
                self.dim, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// Total number of stored weights.
    pub fn param_count(&self) -> usize {
        let block = 3 * self.dim * self.dim   // wq wk wv
            + self.dim * self.dim             // wo
            + self.dim * self.ffn + self.ffn  // w1 b1
            + self.ffn * self.dim + self.dim  // w2 b2
            + 2 * self.dim;                   // norm scales
        self.vocab * self.dim + self.ctx * self.dim + self.n_blocks * block + self.dim * self.vocab
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dim={} blocks={} heads={} head_dim={} ffn={} vocab={} ctx={}",
            self.dim, self.n_blocks, self.n_heads, self.head_dim, self.ffn, self.vocab, self.ctx
        )
    }
}

/// Weights of one transformer block.
///
/// Attention projections are stored d x (heads * head_dim) with head-major
/// columns: head i owns columns [i * head_dim, (i+1) * head_dim).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// RMS-norm scale applied to the block input before attention.
    pub norm_attn: Tensor,
    /// RMS-norm scale applied to the attention output before the MLP.
    pub norm_mlp: Tensor,
}

impl BlockWeights {
    /// All-zero block of the right shapes (norm scales start at one).
    pub fn zeros(cfg: &ModelConfig) -> BlockWeights {
        let d = cfg.dim;
        let f = cfg.ffn;
        BlockWeights {
            wq: Tensor::zeros(vec![d, d]),
            wk: Tensor::zeros(vec![d, d]),
            wv: Tensor::zeros(vec![d, d]),
            wo: Tensor::zeros(vec![d, d]),
            w1: Tensor::zeros(vec![d, f]),
            b1: Tensor::zeros(vec![f]),
            w2: Tensor::zeros(vec![f, d]),
            b2: Tensor::zeros(vec![d]),
            norm_attn: Tensor::filled(vec![d], 1.0),
            norm_mlp: Tensor::filled(vec![d], 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Token embedding table, vocab x dim.
    pub embed: Tensor,
    /// Positional table, ctx x dim.
    pub pos: Tensor,
    pub blocks: Vec<BlockWeights>,
    /// Output head, dim x vocab (untied from the embedding).
    pub unembed: Tensor,
    /// Number of optimizer steps this model has been trained for.
    pub step: u64,
    /// Fingerprint of the tokenizer the model was trained with.
    pub tokenizer: String,
}

impl Checkpoint {
    /// All-zero model (norm scales zero too; useful for shape plumbing tests).
    pub fn zeros(cfg: ModelConfig) -> Result<Checkpoint> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for _ in 0..cfg.n_blocks {
            let mut b = BlockWeights::zeros(&cfg);
            b.norm_attn = Tensor::zeros(vec![cfg.dim]);
            b.norm_mlp = Tensor::zeros(vec![cfg.dim]);
            blocks.push(b);
        }
        Ok(Checkpoint {
            config: cfg,
            embed: Tensor::zeros(vec![cfg.vocab, cfg.dim]),
            pos: Tensor::zeros(vec![cfg.ctx, cfg.dim]),
            blocks,
            unembed: Tensor::zeros(vec![cfg.dim, cfg.vocab]),
            step: 0,
            tokenizer: format!("byte:m={}", cfg.vocab),
        })
    }

    /// Named tensors in canonical storage order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 + 10 * self.blocks.len() + 1);
        out.push(("embed".to_string(), &self.embed));
        out.push(("pos".to_string(), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block.{}.wq", i), &b.wq));
            out.push((format!("block.{}.wk", i), &b.wk));
            out.push((format!("block.{}.wv", i), &b.wv));
            out.push((format!("block.{}.wo", i), &b.wo));
            out.push((format!("block.{}.w1", i), &b.w1));
            out.push((format!("block.{}.b1", i), &b.b1));
            out.push((format!("block.{}.w2", i), &b.w2));
            out.push((format!("block.{}.b2", i), &b.b2));
            out.push((format!("block.{}.norm1", i), &b.norm_attn));
            out.push((format!("block.{}.norm2", i), &b.norm_mlp));
        }
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Expected shape of every tensor for a config, in storage order.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.dim;
        let f = cfg.ffn;
        let mut out = Vec::new();
        out.push(("embed".to_string(), vec![cfg.vocab, d]));
        out.push(("pos".to_string(), vec![cfg.ctx, d]));
        for i in 0..cfg.n_blocks {
            out.push((format!("block.{}.wq", i), vec![d, d]));
            out.push((format!("block.{}.wk", i), vec![d, d]));
            out.push((format!("block.{}.wv", i), vec![d, d]));
            out.push((format!("block.{}.wo", i), vec![d, d]));
            out.push((format!("block.{}.w1", i), vec![d, f]));
            out.push((format!("block.{}.b1", i), vec![f]));
            out.push((format!("block.{}.w2", i), vec![f, d]));
            out.push((format!("block.{}.b2", i), vec![d]));
            out.push((format!("block.{}.norm1", i), vec![d]));
            out.push((format!("block.{}.norm2", i), vec![d]));
        }
        out.push(("unembed".to_string(), vec![d, cfg.vocab]));
        out
    }

    /// Check config consistency, tensor shapes, and finiteness.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::expected_shapes(&self.config);
        let actual = self.tensors();
        if expected.len() != actual.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, config implies {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((en, es), (an, at)) in expected.iter().zip(&actual) {
            if en != an {
                return Err(Error::shape(format!("tensor order: expected {}, found {}", en, an)));
            }
            if es != at.shape() {
                return Err(Error::shape(format!(
                    "tensor {}: shape {:?}, config implies {:?}",
                    an,
                    at.shape(),
                    es
                )));
            }
            if !at.is_finite() {
                return Err(Error::invalid(format!("tensor {} has non-finite entries", an)));
            }
        }
        Ok(())
    }

    /// Serialize to the checkpoint format. Deterministic.
    pub fn save_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let tensors = self.tensors();

        // Payload offsets relative to the payload base, each 64-byte aligned.
        let mut offsets = Vec::with_capacity(tensors.len());
        let mut cursor = 0usize;
        for (_, t) in &tensors {
            offsets.push(cursor);
            cursor = align_up(cursor + 4 * t.numel(), ALIGN);
        }

        let mut header = String::new();
        header.push_str(&format!("dim={}\n", self.config.dim));
        header.push_str(&format!("blocks={}\n", self.config.n_blocks));
        header.push_str(&format!("heads={}\n", self.config.n_heads));
        header.push_str(&format!("head_dim={}\n", self.config.head_dim));
        header.push_str(&format!("ffn={}\n", self.config.ffn));
        header.push_str(&format!("vocab={}\n", self.config.vocab));
        header.push_str(&format!("ctx={}\n", self.config.ctx));
        header.push_str(&format!("step={}\n", self.step));
        header.push_str(&format!("tokenizer={}\n", self.tokenizer));
        for ((name, t), off) in tensors.iter().zip(&offsets) {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor={};f32;{};{}\n", name, dims.join("x"), off));
        }
        let header = header.into_bytes();
        if header.len() > u32::MAX as usize {
            return Err(Error::invalid("checkpoint header too large".to_string()));
        }

        let payload_base = align_up(MAGIC.len() + 4 + header.len(), ALIGN);
        let total = payload_base + cursor.max(
            offsets
                .last()
                .zip(tensors.last())
                .map(|(o, (_, t))| o + 4 * t.numel())
                .unwrap_or(0),
        );
        let mut out = vec![0u8; total];
        out[..8].copy_from_slice(MAGIC);
        out[8..12].copy_from_slice(&(header.len() as u32).to_le_bytes());
        out[12..12 + header.len()].copy_from_slice(&header);
        for ((_, t), off) in tensors.iter().zip(&offsets) {
            let at = payload_base + off;
            for (i, &v) in t.data().iter().enumerate() {
                out[at + 4 * i..at + 4 * i + 4].copy_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.save_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        if bytes.len() < 12 {
            return Err(corrupt("file shorter than magic and header length"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(corrupt("truncated header"));
        }
        let header = std::str::from_utf8(&bytes[12..12 + header_len])
            .map_err(|_| corrupt("header is not UTF-8"))?;

        let mut dim = None;
        let mut n_blocks = None;
        let mut n_heads = None;
        let mut head_dim = None;
        let mut ffn = None;
        let mut vocab = None;
        let mut ctx = None;
        let mut step = None;
        let mut tokenizer = None;
        let mut records: Vec<(String, Vec<usize>, usize)> = Vec::new();

        for line in header.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| corrupt(&format!("header line without '=': {:?}", line)))?;
            let parse = |v: &str| -> Result<usize> {
                v.parse::<usize>().map_err(|_| corrupt(&format!("bad number {:?}", v)))
            };
            match key {
                "dim" => dim = Some(parse(value)?),
                "blocks" => n_blocks = Some(parse(value)?),
                "heads" => n_heads = Some(parse(value)?),
                "head_dim" => head_dim = Some(parse(value)?),
                "ffn" => ffn = Some(parse(value)?),
                "vocab" => vocab = Some(parse(value)?),
                "ctx" => ctx = Some(parse(value)?),
                "step" => {
                    step = Some(
                        value
                            .parse::<u64>()
                            .map_err(|_| corrupt(&format!("bad step {:?}", value)))?,
                    )
                }
                "tokenizer" => tokenizer = Some(value.to_string()),
                "tensor" => {
                    let mut parts = value.split(';');
                    let name = parts.next().ok_or_else(|| corrupt("tensor record missing name"))?;
                    let dtype = parts.next().ok_or_else(|| corrupt("tensor record missing dtype"))?;
                    if dtype != "f32" {
                        return Err(corrupt(&format!("unsupported dtype {:?}", dtype)));
                    }
                    let shape_s =
                        parts.next().ok_or_else(|| corrupt("tensor record missing shape"))?;
                    let off_s =
                        parts.next().ok_or_else(|| corrupt("tensor record missing offset"))?;
                    if parts.next().is_some() {
                        return Err(corrupt("tensor record has trailing fields"));
                    }
                    let shape = shape_s
                        .split('x')
                        .map(parse)
                        .collect::<Result<Vec<usize>>>()?;
                    records.push((name.to_string(), shape, parse(off_s)?));
                }
                other => return Err(corrupt(&format!("unknown header key {:?}", other))),
            }
        }

        let missing = |what: &str| corrupt(&format!("header missing {}", what));
        let config = ModelConfig {
            dim: dim.ok_or_else(|| missing("dim"))?,
            n_blocks: n_blocks.ok_or_else(|| missing("blocks"))?,
            n_heads: n_heads.ok_or_else(|| missing("heads"))?,
            head_dim: head_dim.ok_or_else(|| missing("head_dim"))?,
            ffn: ffn.ok_or_else(|| missing("ffn"))?,
            vocab: vocab.ok_or_else(|| missing("vocab"))?,
            ctx: ctx.ok_or_else(|| missing("ctx"))?,
        };
        config.validate().map_err(|e| corrupt(&format!("bad config: {}", e)))?;
        let step = step.ok_or_else(|| missing("step"))?;
        let tokenizer = tokenizer.ok_or_else(|| missing("tokenizer"))?;

        // Declared records must match the config-implied layout exactly.
        let expected = Self::expected_shapes(&config);
        if records.len() != expected.len() {
            return Err(corrupt(&format!(
                "config implies {} tensors, header declares {}",
                expected.len(),
                records.len()
            )));
        }
        for ((en, es), (an, ashape, _)) in expected.iter().zip(&records) {
            if en != an || es != ashape {
                return Err(corrupt(&format!(
                    "tensor {} declared {:?}, config implies {} {:?}",
                    an, ashape, en, es
                )));
            }
        }

        let payload_base = align_up(12 + header_len, ALIGN);
        let mut tensors: Vec<Tensor> = Vec::with_capacity(records.len());
        for (name, shape, off) in &records {
            if off % ALIGN != 0 {
                return Err(corrupt(&format!("tensor {} offset {} not aligned", name, off)));
            }
            let numel: usize = shape.iter().product();
            let start = payload_base + off;
            let end = start + 4 * numel;
            if end > bytes.len() {
                return Err(corrupt(&format!("tensor {} payload truncated", name)));
            }
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                let b: [u8; 4] = bytes[start + 4 * i..start + 4 * i + 4].try_into().unwrap();
                let v = f32::from_le_bytes(b);
                if !v.is_finite() {
                    return Err(corrupt(&format!("tensor {} has non-finite entries", name)));
                }
                data.push(v);
            }
            tensors.push(Tensor::new(shape.clone(), data)?);
        }

        let mut it = tensors.into_iter();
        let embed = it.next().unwrap();
        let pos = it.next().unwrap();
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            blocks.push(BlockWeights {
                wq: it.next().unwrap(),
                wk: it.next().unwrap(),
                wv: it.next().unwrap(),
                wo: it.next().unwrap(),
                w1: it.next().unwrap(),
                b1: it.next().unwrap(),
                w2: it.next().unwrap(),
                b2: it.next().unwrap(),
                norm_attn: it.next().unwrap(),
                norm_mlp: it.next().unwrap(),
            });
        }
        let unembed = it.next().unwrap();

        let ckpt = Checkpoint { config, embed, pos, blocks, unembed, step, tokenizer };
        ckpt.validate().map_err(|e| corrupt(&format!("invalid content: {}", e)))?;
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Self::load_bytes(&bytes)
    }

    /// FNV-1a hash of the serialized bytes; cheap identity for change checks.
    pub fn content_hash(&self) -> Result<u64> {
        let bytes = self.save_bytes()?;
        let mut h: u64 = 0xcbf29ce484222325;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        Ok(h)
    }
}

fn align_up(x: usize, a: usize) -> usize {
    x.div_ceil(a) * a
}

/// Standard deviation of the random-init draw for a tensor, by name.
/// Projection and embedding tensors use 1/sqrt(dim); the MLP down-projection
/// uses 1/sqrt(ffn) since its fan-in is the hidden width.
fn init_std(name: &str, cfg: &ModelConfig) -> Option<f64> {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "embed" | "pos" | "wq" | "wk" | "wv" | "wo" | "w1" | "unembed" => {
            Some(1.0 / (cfg.dim as f64).sqrt())
        }
        "w2" => Some(1.0 / (cfg.ffn as f64).sqrt()),
        "b1" | "b2" | "norm1" | "norm2" => None,
        _ => None,
    }
}

/// Fill one tensor with a truncated normal draw: samples with |z| > 2 standard
/// deviations are rejected and redrawn.
pub(crate) fn fill_truncated_normal(t: &mut Tensor, std: f64, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                *v = (z * std) as f32;
                break;
            }
        }
    }
}

/// Fresh random model: truncated normal weights, zero biases, unit norm scales.
pub fn random_init(cfg: ModelConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut ckpt = Checkpoint::zeros(cfg)?;
    for b in &mut ckpt.blocks {
        b.norm_attn = Tensor::filled(vec![cfg.dim], 1.0);
        b.norm_mlp = Tensor::filled(vec![cfg.dim], 1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Walk tensors in storage order so the draw sequence is part of the format.
    let names: Vec<String> = ckpt.tensors().iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let Some(std) = init_std(&name, &cfg) else { continue };
        let t = match name.as_str() {
            "embed" => &mut ckpt.embed,
            "pos" => &mut ckpt.pos,
            "unembed" => &mut ckpt.unembed,
            other => {
                let mut parts = other.split('.');
                parts.next();
                let idx: usize = parts.next().unwrap().parse().unwrap();
                let leaf = parts.next().unwrap();
                let b = &mut ckpt.blocks[idx];
                match leaf {
                    "wq" => &mut b.wq,
                    "wk" => &mut b.wk,
                    "wv" => &mut b.wv,
                    "wo" => &mut b.wo,
                    "w1" => &mut b.w1,
                    "w2" => &mut b.w2,
                    _ => unreachable!(),
                }
            }
        };
        fill_truncated_normal(t, std, &mut rng);
    }
    Ok(ckpt)
}
