//! Knowledge distillation: the same student trained with and without the
//! teacher's soft targets added to the loss.
//!
//! The teacher stays frozen; the student's total loss gains
//! alpha * (cross entropy from the teacher's token distributions).

use guide::checkpoint::{random_init, ModelConfig};
use guide::corpus::{generate_sample_text, Corpus, Tokenizer, BYTE_VOCAB};
use guide::training::{train, TrainConfig};

fn main() -> guide::Result<()> {
    let text = generate_sample_text(23, 150_000);
    let corpus = Corpus::from_text(&text, &Tokenizer::byte())?;
    let (train_stream, eval_stream) = corpus.streams(4, 32, 9)?;

    // A modest teacher, briefly pre-trained so its soft targets mean something.
    let teacher_cfg = ModelConfig {
        dim: 64,
        n_blocks: 4,
        n_heads: 4,
        head_dim: 16,
        ffn: 128,
        vocab: BYTE_VOCAB,
        ctx: 32,
    };
    let mut tc = TrainConfig::new(400, 2e-3);
    tc.eval_every = 400;
    tc.eval_batches = 8;
    let (teacher, tlog) = train(&random_init(teacher_cfg, 3)?, None, &train_stream, &eval_stream, &tc)?;
    println!("teacher after 400 steps: ppl {:.3}", tlog.final_record().unwrap().eval_ppl);

    let student_cfg = ModelConfig {
        dim: 32,
        n_blocks: 2,
        n_heads: 2,
        head_dim: 16,
        ffn: 64,
        vocab: BYTE_VOCAB,
        ctx: 32,
    };
    let student = random_init(student_cfg, 7)?;

    let mut sc = TrainConfig::new(200, 2e-3);
    sc.eval_every = 200;
    sc.eval_batches = 8;
    let (_, plain) = train(&student, None, &train_stream, &eval_stream, &sc)?;

    sc.distill_alpha = Some(0.5);
    let (_, distilled) = train(&student, Some(&teacher), &train_stream, &eval_stream, &sc)?;

    println!(
        "student alone:     ppl {:.3}",
        plain.final_record().unwrap().eval_ppl
    );
    println!(
        "student distilled: ppl {:.3} (alpha = {})",
        distilled.final_record().unwrap().eval_ppl,
        distilled.alpha().unwrap()
    );
    for b in distilled.breakdowns() {
        println!(
            "  step {:>3}: total {:.4} = pred {:.4} + 0.5 * distill {:.4}",
            b.step, b.total, b.pred, b.distill
        );
    }
    Ok(())
}
