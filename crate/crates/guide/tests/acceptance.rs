//! Acceptance checks for the whole pipeline: arithmetic regressions against a
//! recorded results grid, analytic invariants of the initializers, oracle
//! equivalence for selection and gradients, and a small-scale training study
//! whose quality orderings the initializers must reproduce. Each test prints
//! one PASS/FAIL line (visible with `--nocapture`).
//!
//! The training study shares one lazily built lab (corpus, trained teacher,
//! student grid) across tests; expect the first heavy test to take tens of
//! minutes on one CPU core.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use guide::checkpoint::{random_init, Checkpoint, ModelConfig};
use guide::corpus::{generate_sample_text, Corpus, Tokenizer, BYTE_VOCAB};
use guide::initializers::{guide_init, lowrank_embed_init, random_student, uniform_init};
use guide::linalg::svd;
use guide::selection::{evenly_spaced_indices, select_layers, LayerStrategy};
use guide::tensor::Tensor;
use guide::training::{gap_reduction, train, TrainConfig};
use guide::transformer::{forward, loss_and_grads, Model, Params, TokenBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Print the verdict line for one criterion, then panic if anything failed.
fn conclude(name: &str, failures: Vec<String>) {
    if failures.is_empty() {
        println!("PASS {}", name);
    } else {
        println!("FAIL {}", name);
        for f in &failures {
            println!("  - {}", f);
        }
        panic!("{}: {} check(s) failed", name, failures.len());
    }
}

// ---------------------------------------------------------------------------
// 1. Gap-reduction arithmetic against a recorded results grid.

#[test]
fn gap_reduction_matches_recorded_results() {
    // (student_ppl, baseline_ppl, teacher_ppl, recorded gap reduction %).
    // Rows cover two model scales, distillation variants, and the layer
    // strategy sweep; recomputing each percentage must land within 0.15
    // points of the recorded value.
    const GRID: &[(f64, f64, f64, f64)] = &[
        // smaller student vs its random baseline
        (15.967, 15.915, 9.621, -0.82),
        (14.458, 15.915, 9.621, 23.15),
        (14.498, 15.915, 9.621, 22.51),
        (14.245, 15.915, 9.621, 26.53),
        // larger student vs its random baseline
        (14.088, 13.382, 9.621, -18.77),
        (12.459, 13.382, 9.621, 24.54),
        (12.491, 13.382, 9.621, 23.70),
        (12.438, 13.382, 9.621, 25.11),
        // distillation rows, smaller student
        (15.154, 15.915, 9.621, 12.10),
        (14.246, 15.915, 9.621, 26.53),
        (13.662, 15.915, 9.621, 35.80),
        // distillation rows, larger student
        (12.636, 13.382, 9.621, 19.86),
        (12.438, 13.382, 9.621, 25.11),
        (11.813, 13.382, 9.621, 41.73),
        // layer strategies, smaller student
        (14.453, 15.915, 9.621, 23.24),
        (14.246, 15.915, 9.621, 26.53),
        (14.317, 15.915, 9.621, 25.40),
        (14.268, 15.915, 9.621, 26.18),
        (14.356, 15.915, 9.621, 24.79),
        (14.509, 15.915, 9.621, 22.35),
        (15.501, 15.915, 9.621, 6.58),
        // layer strategies, larger student
        (12.866, 13.382, 9.621, 13.73),
        (12.438, 13.382, 9.621, 25.12),
        (12.612, 13.382, 9.621, 20.50),
        (12.505, 13.382, 9.621, 23.34),
        (12.609, 13.382, 9.621, 20.58),
        (12.630, 13.382, 9.621, 20.01),
        (14.037, 13.382, 9.621, -17.40),
    ];

    let mut failures = Vec::new();
    for &(student, baseline, teacher, recorded) in GRID {
        let got = gap_reduction(student, baseline, teacher).unwrap();
        if (got - recorded).abs() > 0.15 {
            failures.push(format!(
                "({}, {}, {}): recomputed {:.3}, recorded {:.2}",
                student, baseline, teacher, got, recorded
            ));
        }
    }
    conclude("gap-reduction arithmetic (28 recorded rows, 0.15pp)", failures);
}

// ---------------------------------------------------------------------------
// 2. With student dims equal to teacher dims the projection is square
//    orthogonal, so the guided first block must reproduce the teacher's
//    Q/K/V and attention exactly (up to 32-bit noise).

#[test]
fn identity_width_student_reproduces_first_block_attention() {
    let mut failures = Vec::new();
    for trial in 0..10u64 {
        let cfg = if trial % 2 == 0 {
            ModelConfig { dim: 24, n_blocks: 2, n_heads: 3, head_dim: 8, ffn: 48, vocab: 61, ctx: 12 }
        } else {
            ModelConfig { dim: 32, n_blocks: 3, n_heads: 4, head_dim: 8, ffn: 64, vocab: 97, ctx: 16 }
        };
        let teacher = random_init(cfg, 1000 + trial).unwrap();
        let layers = select_layers(LayerStrategy::FirstN, cfg.n_blocks, cfg.n_blocks).unwrap();
        let (student, _) = guide_init(&teacher, &cfg, &layers, 7).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5000 + trial);
        let ids: Vec<u32> =
            (0..2 * cfg.ctx).map(|_| rng.gen_range(0..cfg.vocab as u32)).collect();
        let batch = TokenBatch::new(2, cfg.ctx, ids).unwrap();

        let tm = Model::<f32>::from_checkpoint(&teacher).unwrap();
        let sm = Model::<f32>::from_checkpoint(&student).unwrap();
        let tt = forward(&tm, &batch, true).unwrap();
        let st = forward(&sm, &batch, true).unwrap();

        let max_abs = |a: &[f32], b: &[f32]| {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max)
        };
        let pairs = [
            ("queries", &tt.queries, &st.queries),
            ("keys", &tt.keys, &st.keys),
            ("values", &tt.values, &st.values),
            ("attention", &tt.attn_probs, &st.attn_probs),
        ];
        for (what, t, s) in pairs {
            let diff = max_abs(&t.as_ref().unwrap()[0], &s.as_ref().unwrap()[0]);
            if diff > 1e-4 {
                failures.push(format!("trial {}: {} max-abs diff {:.2e}", trial, what, diff));
            }
        }
    }
    conclude("identity-dimension first-block equivalence (10 teachers, 1e-4)", failures);
}

// ---------------------------------------------------------------------------
// 3. The compressed embedding table must hit the spectral lower bound of the
//    Gram reconstruction objective and never lose to column selection or to
//    random candidates of the same rank.

fn gram_distance(a: &Tensor, b: &Tensor) -> f64 {
    let (rows, ra) = (a.shape()[0], a.shape()[1]);
    let rb = b.shape()[1];
    assert_eq!(rows, b.shape()[0]);
    let (ad, bd) = (a.data(), b.data());
    let mut sum = 0.0f64;
    for i in 0..rows {
        for j in 0..rows {
            let mut ga = 0.0f64;
            for c in 0..ra {
                ga += ad[i * ra + c] as f64 * ad[j * ra + c] as f64;
            }
            let mut gb = 0.0f64;
            for c in 0..rb {
                gb += bd[i * rb + c] as f64 * bd[j * rb + c] as f64;
            }
            let d = ga - gb;
            sum += d * d;
        }
    }
    sum.sqrt()
}

#[test]
fn compressed_embeddings_attain_the_spectral_optimum() {
    let tcfg = ModelConfig { dim: 8, n_blocks: 1, n_heads: 1, head_dim: 8, ffn: 8, vocab: 50, ctx: 4 };
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    for trial in 0..50u64 {
        let teacher = random_init(tcfg, 9000 + trial).unwrap();
        let sigma = svd(&teacher.embed.to_matrix().unwrap()).unwrap().sigma;
        let spread = {
            let d = teacher.embed.data();
            (d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
        };

        for d_s in 1..8usize {
            let scfg = ModelConfig { dim: d_s, n_blocks: 1, n_heads: 1, head_dim: d_s, ffn: 8, vocab: 50, ctx: 4 };
            let (student, _) = lowrank_embed_init(&teacher, &scfg, trial).unwrap();
            let achieved = gram_distance(&student.embed, &teacher.embed);

            let tail: f64 = sigma[d_s..].iter().map(|s| s.powi(4)).sum::<f64>().sqrt();
            if (achieved - tail).abs() > 1e-6 * tail.max(1e-9) {
                failures.push(format!(
                    "trial {} d_s {}: achieved {:.9}, spectral bound {:.9}",
                    trial, d_s, achieved, tail
                ));
            }

            let cols = evenly_spaced_indices(d_s, 8).unwrap();
            let selected = teacher.embed.gather(1, &cols).unwrap();
            let by_selection = gram_distance(&selected, &teacher.embed);
            if achieved > by_selection + 1e-9 {
                failures.push(format!(
                    "trial {} d_s {}: selection objective {:.6} beats compression {:.6}",
                    trial, d_s, by_selection, achieved
                ));
            }

            for _ in 0..100 {
                let data: Vec<f32> = (0..50 * d_s)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) as f32 * spread as f32)
                    .collect();
                let candidate = Tensor::new(vec![50, d_s], data).unwrap();
                let by_chance = gram_distance(&candidate, &teacher.embed);
                if achieved > by_chance + 1e-9 {
                    failures.push(format!(
                        "trial {} d_s {}: random candidate {:.6} beats compression {:.6}",
                        trial, d_s, by_chance, achieved
                    ));
                }
            }
        }
    }
    conclude("embedding compression optimality (50 tables, ranks 1..7)", failures);
}

// ---------------------------------------------------------------------------
// 4. Index selection against an exact-rational brute force of the same
//    round-half-down rule, for every target/source pair up to 64.

#[test]
fn index_selection_matches_exhaustive_rounding() {
    let mut failures = Vec::new();
    for source in 2..=64usize {
        for target in 2..=source {
            let got = evenly_spaced_indices(target, source).unwrap();
            // round-half-down(a / b) == floor((2a + b - 1) / (2b)), exactly.
            let b = target - 1;
            let want: Vec<usize> =
                (0..target).map(|k| (2 * k * (source - 1) + b - 1) / (2 * b)).collect();
            if got != want {
                failures.push(format!("({}, {}): {:?} vs oracle {:?}", target, source, got, want));
                continue;
            }
            let increasing = got.windows(2).all(|w| w[0] < w[1]);
            if got.len() != target || got[0] != 0 || *got.last().unwrap() != source - 1 || !increasing
            {
                failures.push(format!("({}, {}): malformed {:?}", target, source, got));
            }
        }
    }
    conclude("index selection vs exhaustive rounding oracle (n <= 64)", failures);
}

// ---------------------------------------------------------------------------
// 5. Analytic gradients against central finite differences, sampled per
//    tensor class on a tiny model.

#[test]
fn gradients_match_central_differences_per_tensor_class() {
    let cfg = ModelConfig { dim: 8, n_blocks: 2, n_heads: 2, head_dim: 4, ffn: 16, vocab: 23, ctx: 6 };
    let ck = random_init(cfg, 99).unwrap();
    let mut model = Model::<f64>::from_checkpoint(&ck).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids: Vec<u32> = (0..3 * cfg.ctx).map(|_| rng.gen_range(0..cfg.vocab as u32)).collect();
    let batch = TokenBatch::new(3, cfg.ctx, ids).unwrap();

    let mut grads = Params::<f64>::zeros(&cfg);
    loss_and_grads(&model, &batch, None, 0.0, &mut grads).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

    // Group coordinates by tensor class (leaf name across blocks).
    let names: Vec<String> =
        Checkpoint::expected_shapes(&cfg).into_iter().map(|(n, _)| n).collect();
    let mut classes: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (ti, name) in names.iter().enumerate() {
        let class = name.rsplit('.').next().unwrap().to_string();
        let pool = classes.entry(class).or_default();
        for ci in 0..analytic[ti].len() {
            pool.push((ti, ci));
        }
    }

    let eps = 1e-5;
    let mut failures = Vec::new();
    for (class, mut pool) in classes {
        // Sample up to 100 coordinates per class.
        let n = pool.len().min(100);
        for i in 0..n {
            let j = i + (rng.gen::<u64>() as usize) % (pool.len() - i);
            pool.swap(i, j);
        }
        for &(ti, ci) in &pool[..n] {
            let orig = model.params().tensors()[ti][ci];
            model.params_mut().tensors_mut()[ti][ci] = orig + eps;
            let up = loss_and_grads(&model, &batch, None, 0.0, &mut grads).unwrap().total;
            model.params_mut().tensors_mut()[ti][ci] = orig - eps;
            let down = loss_and_grads(&model, &batch, None, 0.0, &mut grads).unwrap().total;
            model.params_mut().tensors_mut()[ti][ci] = orig;

            let fd = (up - down) / (2.0 * eps);
            let an = analytic[ti][ci];
            let denom = an.abs().max(fd.abs());
            if denom > 1e-10 && (fd - an).abs() / denom > 1e-4 {
                failures.push(format!(
                    "{} coord {}: finite diff {:.3e} vs analytic {:.3e}",
                    class, ci, fd, an
                ));
            }
        }
    }
    conclude("gradient check vs central differences (13 tensor classes)", failures);
}

// ---------------------------------------------------------------------------
// Shared lab for the training studies: one corpus, one trained teacher, and
// a grid of students spanning init methods, distillation, and layer
// strategies, three seeds each.

const SEEDS: [u64; 3] = [1, 2, 3];
const TEACHER_STEPS: usize = 5000;
const STUDENT_STEPS: usize = 2000;
const LR: f64 = 2e-3;
const BATCH: usize = 4;
const WINDOW: usize = 64;
const EVAL_EVERY: usize = 250;
const EVAL_BATCHES: usize = 64;
const DISTILL_ALPHA: f64 = 0.5;

fn teacher_cfg() -> ModelConfig {
    ModelConfig { dim: 128, n_blocks: 8, n_heads: 8, head_dim: 16, ffn: 512, vocab: BYTE_VOCAB, ctx: WINDOW }
}

fn student_cfg() -> ModelConfig {
    ModelConfig { dim: 64, n_blocks: 4, n_heads: 4, head_dim: 16, ffn: 256, vocab: BYTE_VOCAB, ctx: WINDOW }
}

fn student_train_cfg(alpha: Option<f64>) -> TrainConfig {
    TrainConfig {
        steps: STUDENT_STEPS,
        lr: LR,
        warmup_steps: None,
        distill_alpha: alpha,
        eval_every: EVAL_EVERY,
        eval_batches: EVAL_BATCHES,
    }
}

fn lab_corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let text = generate_sample_text(2024, 6 << 20);
        Corpus::from_text(&text, &Tokenizer::byte()).unwrap()
    })
}

fn lab_teacher() -> &'static (Checkpoint, f64) {
    static TEACHER: OnceLock<(Checkpoint, f64)> = OnceLock::new();
    TEACHER.get_or_init(|| {
        let t0 = Instant::now();
        let (train_data, eval_data) = lab_corpus().streams(BATCH, WINDOW, 0).unwrap();
        let seed_ck = random_init(teacher_cfg(), 0).unwrap();
        let cfg = TrainConfig {
            steps: TEACHER_STEPS,
            lr: LR,
            warmup_steps: None,
            distill_alpha: None,
            eval_every: 500,
            eval_batches: EVAL_BATCHES,
        };
        let (ck, log) = train(&seed_ck, None, &train_data, &eval_data, &cfg).unwrap();
        let ppl = log.final_record().unwrap().eval_ppl;
        eprintln!("[lab] teacher: eval ppl {:.3} after {} steps ({:.0}s)", ppl, TEACHER_STEPS, t0.elapsed().as_secs_f64());
        (ck, ppl)
    })
}

struct RunStats {
    step0_ppl: f64,
    final_ppl: f64,
}

fn lab_cells() -> &'static BTreeMap<&'static str, Vec<RunStats>> {
    static CELLS: OnceLock<BTreeMap<&'static str, Vec<RunStats>>> = OnceLock::new();
    CELLS.get_or_init(|| {
        let (teacher, _) = lab_teacher();
        let scfg = student_cfg();
        let (n_s, n_t) = (scfg.n_blocks, teacher.config.n_blocks);
        let top = select_layers(LayerStrategy::TopK(1), n_s, n_t).unwrap();
        let top_last = select_layers(LayerStrategy::TopPlusLast, n_s, n_t).unwrap();
        let first_n = select_layers(LayerStrategy::FirstN, n_s, n_t).unwrap();
        let embed_only = select_layers(LayerStrategy::EmbedOnly, n_s, n_t).unwrap();

        // Cell name, init method, distillation weight. Students within a
        // seed share the random draw, so differences are method-driven.
        let grid: &[(&'static str, &str, Option<f64>)] = &[
            ("random", "random", None),
            ("uniform-1", "uniform", None),
            ("guide", "top", None),
            ("kd", "random", Some(DISTILL_ALPHA)),
            ("guide+kd", "top", Some(DISTILL_ALPHA)),
            ("embed-only", "embed-only", None),
            ("top+last", "top+last", None),
            ("first-n", "first-n", None),
        ];

        let mut cells = BTreeMap::new();
        for &(name, method, alpha) in grid {
            let mut runs = Vec::new();
            for &seed in &SEEDS {
                let t0 = Instant::now();
                let (train_data, eval_data) = lab_corpus().streams(BATCH, WINDOW, seed).unwrap();
                let student = match method {
                    "random" => random_student(&scfg, seed).unwrap().0,
                    "uniform" => uniform_init(teacher, &scfg, &top, seed).unwrap().0,
                    "top" => guide_init(teacher, &scfg, &top, seed).unwrap().0,
                    "embed-only" => guide_init(teacher, &scfg, &embed_only, seed).unwrap().0,
                    "top+last" => guide_init(teacher, &scfg, &top_last, seed).unwrap().0,
                    "first-n" => guide_init(teacher, &scfg, &first_n, seed).unwrap().0,
                    _ => unreachable!(),
                };
                let cfg = student_train_cfg(alpha);
                let kd_teacher = alpha.map(|_| teacher);
                let (_, log) = train(&student, kd_teacher, &train_data, &eval_data, &cfg).unwrap();
                let step0 = log.records().first().unwrap().eval_ppl;
                let last = log.final_record().unwrap().eval_ppl;
                eprintln!(
                    "[lab] {} seed {}: step0 ppl {:.2}, final ppl {:.4} ({:.0}s)",
                    name, seed, step0, last, t0.elapsed().as_secs_f64()
                );
                runs.push(RunStats { step0_ppl: step0, final_ppl: last });
            }
            cells.insert(name, runs);
        }
        cells
    })
}

fn mean<'a>(runs: &'a [RunStats], f: impl Fn(&'a RunStats) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

// ---------------------------------------------------------------------------
// 6. Quality orderings of the trained students.

#[test]
fn initialization_quality_orders_trained_students() {
    let (_, teacher_ppl) = lab_teacher();
    let cells = lab_cells();
    let final_of = |name: &str| mean(&cells[name], |r| r.final_ppl);
    let step0_of = |name: &str| mean(&cells[name], |r| r.step0_ppl);

    println!("  teacher eval ppl {:.3}", teacher_ppl);
    let baseline = final_of("random");
    for (name, runs) in cells {
        let m = mean(runs, |r| r.final_ppl);
        let gap = gap_reduction(m, baseline, *teacher_ppl)
            .map(|g| format!("{:+6.1}%", g))
            .unwrap_or_else(|_| "   n/a".to_string());
        let finals: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.final_ppl)).collect();
        println!(
            "  {:<11} step0 {:8.2}  final {:.4} {}  seeds [{}]",
            name,
            mean(runs, |r| r.step0_ppl),
            m,
            gap,
            finals.join(", ")
        );
    }

    let mut failures = Vec::new();
    // NaN on either side must count as a failure, so no plain `>=`.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    let mut require = |msg: &str, lhs: f64, rhs: f64| {
        if !(lhs < rhs) {
            failures.push(format!("{}: {:.4} vs {:.4}", msg, lhs, rhs));
        }
    };
    require("guide should beat uniform-1 on final ppl", final_of("guide"), final_of("uniform-1"));
    require("uniform-1 should beat random on final ppl", final_of("uniform-1"), final_of("random"));
    require("guide+kd should beat kd on final ppl", final_of("guide+kd"), final_of("kd"));
    require("guide+kd should beat guide on final ppl", final_of("guide+kd"), final_of("guide"));
    require("guide should beat random at step 0", step0_of("guide"), step0_of("random"));
    conclude("small-scale ordering study (5 methods, 3 seeds)", failures);
}

// ---------------------------------------------------------------------------
// 7. Layer strategy sweep: first-n must not beat top.

#[test]
fn layer_strategy_sweep_keeps_first_n_behind_top() {
    let cells = lab_cells();
    let mut failures = Vec::new();
    for name in ["embed-only", "guide", "top+last", "first-n"] {
        let runs = &cells[name];
        let label = if name == "guide" { "top" } else { name };
        println!("  {:<11} mean final ppl {:.4}", label, mean(runs, |r| r.final_ppl));
        if runs.len() != SEEDS.len() || runs.iter().any(|r| !r.final_ppl.is_finite()) {
            failures.push(format!("strategy {} did not produce {} finite runs", label, SEEDS.len()));
        }
    }
    let top = mean(&cells["guide"], |r| r.final_ppl);
    let first_n = mean(&cells["first-n"], |r| r.final_ppl);
    if first_n < top {
        failures.push(format!(
            "first-n ({:.4}) beats top ({:.4}) on mean final ppl",
            first_n, top
        ));
    }
    conclude("layer strategy sweep (first-n vs top)", failures);
}

// ---------------------------------------------------------------------------
// 8. Determinism and roundtrip: repeat the cheapest grid cell twice and
//    demand bit-identical artifacts; push the checkpoint through disk.

#[test]
fn repeated_runs_are_bit_identical() {
    let (train_data, eval_data) = lab_corpus().streams(BATCH, WINDOW, SEEDS[0]).unwrap();
    let student = random_student(&student_cfg(), SEEDS[0]).unwrap().0;
    let cfg = student_train_cfg(None);

    let (ck_a, log_a) = train(&student, None, &train_data, &eval_data, &cfg).unwrap();
    let (ck_b, log_b) = train(&student, None, &train_data, &eval_data, &cfg).unwrap();

    let mut failures = Vec::new();
    let bytes_a = ck_a.save_bytes().unwrap();
    let bytes_b = ck_b.save_bytes().unwrap();
    if bytes_a != bytes_b {
        failures.push("two identically seeded runs produced differing checkpoints".to_string());
    }
    if log_a.to_csv() != log_b.to_csv() {
        failures.push("two identically seeded runs produced differing metric logs".to_string());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ck");
    ck_a.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    if back != ck_a {
        failures.push("checkpoint changed across save/load".to_string());
    }
    if back.save_bytes().unwrap() != bytes_a {
        failures.push("re-serialized checkpoint differs from the original bytes".to_string());
    }
    if back.content_hash().unwrap() != ck_a.content_hash().unwrap() {
        failures.push("content hash changed across save/load".to_string());
    }
    conclude("determinism and checkpoint roundtrip", failures);
}
