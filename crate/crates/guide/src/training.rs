//! Optimizer, learning-rate schedule, the training loop with optional
//! frozen-teacher distillation, and perplexity evaluation.
//!
//! The optimizer is adaptive moments with decoupled weight decay; decay is
//! applied only to matrix-shaped tensors, never to biases or norm gains.
//! The schedule is a linear warmup over the first 5% of steps followed by a
//! cosine decay to 10% of the peak rate. Gradients are clipped at a global
//! norm of 1.0 and every clipped step is counted, so loss-spike frequency
//! stays observable across initialization methods.
//!
//! Everything here is deterministic given the input checkpoints and the
//! stream seeds; there is no trainer-side randomness.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::{Checkpoint, ModelConfig};
use crate::corpus::BatchStream;
use crate::error::{Error, Result};
use crate::transformer::{forward, loss_and_grads, next_token_nll, Model, Params};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.95;
const ADAM_EPS: f64 = 1e-8;
const WEIGHT_DECAY: f64 = 0.01;
const CLIP_NORM: f64 = 1.0;
const LR_FLOOR_FRACTION: f64 = 0.1;

/// Hyperparameters of one training run. Batch size and data order belong to
/// the streams; nothing here is random.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Linear warmup length; `None` resolves to steps / 20.
    pub warmup_steps: Option<usize>,
    /// Distillation weight. `Some` requires a teacher.
    pub distill_alpha: Option<f64>,
    /// Evaluate every this many optimizer steps (plus step 0 and the end).
    pub eval_every: usize,
    /// Held-out batches consumed per evaluation, capped at one epoch.
    pub eval_batches: usize,
}

impl TrainConfig {
    pub fn new(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            lr,
            warmup_steps: None,
            distill_alpha: None,
            eval_every: 100,
            eval_batches: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid(format!("bad learning rate {}", self.lr)));
        }
        if self.eval_every == 0 || self.eval_batches == 0 {
            return Err(Error::invalid("eval_every and eval_batches must be nonzero"));
        }
        if let Some(a) = self.distill_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!(
                    "distillation weight {} outside [0, 1]",
                    a
                )));
            }
        }
        Ok(())
    }

    fn resolved_warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.steps / 20)
    }

    /// Learning rate applied at optimizer step `step` (1-based). Linear ramp
    /// to the peak over the warmup, then cosine from the peak down to the
    /// floor, reached exactly at the final step.
    pub fn lr_at(&self, step: usize) -> f64 {
        debug_assert!(step >= 1 && step <= self.steps);
        let t = step - 1;
        let warmup = self.resolved_warmup();
        if t < warmup {
            return self.lr * (t + 1) as f64 / warmup as f64;
        }
        let floor = LR_FLOOR_FRACTION * self.lr;
        let span = self.steps.saturating_sub(1).saturating_sub(warmup).max(1);
        let progress = ((t - warmup) as f64 / span as f64).min(1.0);
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One evaluation point. `train_loss` is the total loss of the optimizer
/// step that preceded the evaluation, absent at step 0. `clip_events` counts
/// clipped steps since the start of the run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    pub eval_ppl: f64,
    pub clip_events: u64,
}

/// Loss decomposition at a logged step; kept in memory for auditing, not
/// persisted in the CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub total: f64,
    pub pred: f64,
    pub distill: f64,
}

/// Trajectory of one training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
    breakdowns: Vec<LossBreakdown>,
    alpha: Option<f64>,
    steps: u64,
}

impl MetricLog {
    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn breakdowns(&self) -> &[LossBreakdown] {
        &self.breakdowns
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn final_record(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    pub fn summary(&self) -> String {
        let alpha = match self.alpha {
            Some(a) => format!("{a}"),
            None => "none".to_string(),
        };
        match self.records.last() {
            Some(r) => format!(
                "steps={} alpha={} final_eval_loss={:.6} final_eval_ppl={:.6} clip_events={}",
                self.steps, alpha, r.eval_loss, r.eval_ppl, r.clip_events
            ),
            None => format!("steps={} alpha={} (no records)", self.steps, alpha),
        }
    }

    /// Rows in evaluation order plus a trailing summary comment.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,train_loss,eval_loss,eval_ppl,clip_events\n");
        for r in &self.records {
            let train = match r.train_loss {
                Some(v) => format!("{:.6}", v),
                None => String::new(),
            };
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{}",
                r.step, train, r.eval_loss, r.eval_ppl, r.clip_events
            );
        }
        let _ = writeln!(s, "# summary: {}", self.summary());
        s
    }

    /// Parses what `to_csv` wrote. Loss breakdowns are not persisted and come
    /// back empty.
    pub fn from_csv(text: &str) -> Result<MetricLog> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty metric csv"))?;
        if header.trim() != "step,train_loss,eval_loss,eval_ppl,clip_events" {
            return Err(Error::invalid(format!("unexpected metric header {:?}", header)));
        }
        let mut log = MetricLog::default();
        for line in lines {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                for token in rest.split_whitespace() {
                    if let Some(v) = token.strip_prefix("alpha=") {
                        log.alpha = if v == "none" {
                            None
                        } else {
                            Some(v.parse::<f64>().map_err(|_| {
                                Error::invalid(format!("bad alpha {:?} in summary", v))
                            })?)
                        };
                    } else if let Some(v) = token.strip_prefix("steps=") {
                        log.steps = v
                            .parse::<u64>()
                            .map_err(|_| Error::invalid(format!("bad steps {:?} in summary", v)))?;
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::invalid(format!("bad metric row {:?}", line)));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad number {:?} in metric row", s)))
            };
            log.records.push(MetricRecord {
                step: fields[0]
                    .parse::<u64>()
                    .map_err(|_| Error::invalid(format!("bad step {:?}", fields[0])))?,
                train_loss: if fields[1].is_empty() { None } else { Some(num(fields[1])?) },
                eval_loss: num(fields[2])?,
                eval_ppl: num(fields[3])?,
                clip_events: fields[4]
                    .parse::<u64>()
                    .map_err(|_| Error::invalid(format!("bad clip count {:?}", fields[4])))?,
            });
        }
        for pair in log.records.windows(2) {
            if pair[1].step <= pair[0].step {
                return Err(Error::invalid("metric rows out of step order"));
            }
        }
        Ok(log)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<MetricLog> {
        let text = std::fs::read_to_string(path)?;
        MetricLog::from_csv(&text)
    }
}

/// Share of the baseline-to-teacher perplexity gap the student closed,
/// in percent. Exceeds 100 when the student beats the teacher, negative
/// when it trails the baseline.
pub fn gap_reduction(student_ppl: f64, baseline_ppl: f64, teacher_ppl: f64) -> Result<f64> {
    for v in [student_ppl, baseline_ppl, teacher_ppl] {
        if !v.is_finite() {
            return Err(Error::invalid(format!("non-finite perplexity {}", v)));
        }
    }
    if baseline_ppl <= teacher_ppl {
        return Err(Error::invalid(format!(
            "no gap to reduce: baseline perplexity {} does not exceed teacher's {}",
            baseline_ppl, teacher_ppl
        )));
    }
    Ok(100.0 * (baseline_ppl - student_ppl) / (baseline_ppl - teacher_ppl))
}

/// Adaptive-moment state, one slot pair per parameter tensor.
struct AdamState {
    m: Params<f32>,
    v: Params<f32>,
}

impl AdamState {
    fn new(cfg: &ModelConfig) -> AdamState {
        AdamState { m: Params::zeros(cfg), v: Params::zeros(cfg) }
    }
}

/// Which tensors receive weight decay, in canonical tensor order: matrices
/// yes, biases and norm gains no.
fn decay_mask(cfg: &ModelConfig) -> Vec<bool> {
    let mut mask = vec![true, true];
    for _ in 0..cfg.n_blocks {
        mask.extend_from_slice(&[
            true, true, true, true, // wq wk wv wo
            true, false, true, false, // w1 b1 w2 b2
            false, false, // norm gains
        ]);
    }
    mask.push(true);
    mask
}

fn global_grad_norm(grads: &Params<f32>) -> f64 {
    let mut sq = 0.0f64;
    for t in grads.tensors() {
        for &g in t {
            sq += g as f64 * g as f64;
        }
    }
    sq.sqrt()
}

/// Mean next-token negative log likelihood and perplexity over held-out
/// batches. The stream is cloned and rewound, so evaluation never perturbs
/// training data order; at most one epoch is consumed so no window is
/// counted twice.
pub fn evaluate(ckpt: &Checkpoint, data: &BatchStream, num_batches: usize) -> Result<(f64, f64)> {
    let model = Model::<f32>::from_checkpoint(ckpt)?;
    evaluate_model(&model, data, num_batches)
}

fn evaluate_model(model: &Model<f32>, data: &BatchStream, num_batches: usize) -> Result<(f64, f64)> {
    if num_batches == 0 {
        return Err(Error::invalid("evaluation needs at least one batch"));
    }
    let mut stream = data.clone();
    stream.reset();
    let take = num_batches.min(stream.batches_per_epoch()).max(1);
    let mut nll_sum = 0.0f64;
    let mut count = 0usize;
    for _ in 0..take {
        let batch = stream.next_batch();
        let trace = forward(model, &batch, false)?;
        let (sum, n) = next_token_nll(&trace.logits, &batch, model.config().vocab);
        nll_sum += sum;
        count += n;
    }
    if count == 0 {
        return Err(Error::invalid("evaluation stream yields no predicted positions"));
    }
    let nll = nll_sum / count as f64;
    Ok((nll, nll.exp()))
}

/// Runs `cfg.steps` optimizer steps from `student`, distilling from `teacher`
/// when present, evaluating on the held-out stream at step 0, every
/// `eval_every` steps, and at the end. Returns the trained checkpoint and the
/// metric trajectory. The teacher only ever runs forward.
pub fn train(
    student: &Checkpoint,
    teacher: Option<&Checkpoint>,
    train_data: &BatchStream,
    eval_data: &BatchStream,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, MetricLog)> {
    cfg.validate()?;
    if cfg.distill_alpha.is_some() && teacher.is_none() {
        return Err(Error::invalid(
            "distillation weight given without a teacher checkpoint",
        ));
    }
    if let Some(t) = teacher {
        if t.config.vocab != student.config.vocab || t.config.ctx != student.config.ctx {
            return Err(Error::ConfigMismatch(format!(
                "teacher ({} vocab, {} ctx) incompatible with student ({} vocab, {} ctx)",
                t.config.vocab, t.config.ctx, student.config.vocab, student.config.ctx
            )));
        }
        if t.tokenizer != student.tokenizer {
            return Err(Error::ConfigMismatch(format!(
                "tokenizer mismatch: teacher {:?}, student {:?}",
                t.tokenizer, student.tokenizer
            )));
        }
    }
    let alpha = cfg.distill_alpha.unwrap_or(0.0);

    let mut model = Model::<f32>::from_checkpoint(student)?;
    let teacher_model = teacher.map(Model::<f32>::from_checkpoint).transpose()?;
    let mut stream = train_data.clone();
    stream.reset();

    let mut grads = Params::<f32>::zeros(&student.config);
    let mut opt = AdamState::new(&student.config);
    let mask = decay_mask(&student.config);

    let mut log = MetricLog {
        records: Vec::new(),
        breakdowns: Vec::new(),
        alpha: cfg.distill_alpha,
        steps: cfg.steps as u64,
    };
    let (el, ep) = evaluate_model(&model, eval_data, cfg.eval_batches)?;
    log.records.push(MetricRecord {
        step: 0,
        train_loss: None,
        eval_loss: el,
        eval_ppl: ep,
        clip_events: 0,
    });

    let mut clip_events = 0u64;
    for step in 1..=cfg.steps {
        let batch = stream.next_batch();
        let teacher_logits = match &teacher_model {
            Some(tm) => Some(forward(tm, &batch, false)?.logits),
            None => None,
        };
        grads.fill_zero();
        let terms = loss_and_grads(&model, &batch, teacher_logits.as_deref(), alpha, &mut grads)?;
        if !terms.total.is_finite() {
            return Err(Error::Divergence { step, what: "train loss".to_string() });
        }

        let norm = global_grad_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::Divergence { step, what: "gradient norm".to_string() });
        }
        let scale = if norm > CLIP_NORM {
            clip_events += 1;
            CLIP_NORM / norm
        } else {
            1.0
        };

        let lr = cfg.lr_at(step);
        let bc1 = 1.0 - BETA1.powi(step as i32);
        let bc2 = 1.0 - BETA2.powi(step as i32);
        let params = model.params_mut().tensors_mut();
        let mut mom = opt.m.tensors_mut();
        let mut vel = opt.v.tensors_mut();
        let g_all = grads.tensors();
        for (ti, p) in params.into_iter().enumerate() {
            let decay = if mask[ti] { WEIGHT_DECAY } else { 0.0 };
            let m = &mut mom[ti];
            let v = &mut vel[ti];
            let g_t = g_all[ti];
            for j in 0..p.len() {
                let g = g_t[j] as f64 * scale;
                let mj = BETA1 * m[j] as f64 + (1.0 - BETA1) * g;
                let vj = BETA2 * v[j] as f64 + (1.0 - BETA2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
                p[j] = (p[j] as f64 - lr * update - lr * decay * p[j] as f64) as f32;
            }
        }

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (el, ep) = evaluate_model(&model, eval_data, cfg.eval_batches)?;
            if !el.is_finite() {
                return Err(Error::Divergence { step, what: "eval loss".to_string() });
            }
            log.records.push(MetricRecord {
                step: step as u64,
                train_loss: Some(terms.total),
                eval_loss: el,
                eval_ppl: ep,
                clip_events,
            });
            log.breakdowns.push(LossBreakdown {
                step: step as u64,
                total: terms.total,
                pred: terms.pred,
                distill: terms.distill,
            });
        }
    }

    let out = model.to_checkpoint(student.step + cfg.steps as u64, &student.tokenizer)?;
    Ok((out, log))
}
