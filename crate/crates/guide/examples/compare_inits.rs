//! Head-to-head initializer comparison at toy scale: train one teacher,
//! spawn students by every method from it, give each the same short budget,
//! and tabulate final perplexities with gap reductions.
//!
//! Toy budgets blur the ordering the methods show at realistic scale; the
//! step-0 column is the part that is already visible here: transferred
//! students start far below a random one.

use guide::checkpoint::{random_init, Checkpoint, ModelConfig};
use guide::corpus::{generate_sample_text, Corpus, Tokenizer, BYTE_VOCAB};
use guide::initializers::{guide_init, lowrank_embed_init, random_student, uniform_init};
use guide::selection::{select_layers, LayerStrategy};
use guide::training::{gap_reduction, train, TrainConfig};

fn main() -> guide::Result<()> {
    let text = generate_sample_text(31, 250_000);
    let corpus = Corpus::from_text(&text, &Tokenizer::byte())?;
    let (train_stream, eval_stream) = corpus.streams(4, 32, 2)?;

    let teacher_cfg = ModelConfig {
        dim: 64,
        n_blocks: 4,
        n_heads: 4,
        head_dim: 16,
        ffn: 128,
        vocab: BYTE_VOCAB,
        ctx: 32,
    };
    let mut tc = TrainConfig::new(600, 2e-3);
    tc.eval_every = 600;
    tc.eval_batches = 10;
    let (teacher, tlog) = train(&random_init(teacher_cfg, 1)?, None, &train_stream, &eval_stream, &tc)?;
    let teacher_ppl = tlog.final_record().unwrap().eval_ppl;
    println!("teacher: ppl {:.3} after 600 steps\n", teacher_ppl);

    let student_cfg = ModelConfig {
        dim: 32,
        n_blocks: 2,
        n_heads: 2,
        head_dim: 16,
        ffn: 64,
        vocab: BYTE_VOCAB,
        ctx: 32,
    };
    let seed = 5;
    let layers = select_layers(LayerStrategy::TopK(1), 2, 4)?;
    let students: Vec<(&str, Checkpoint)> = vec![
        ("random", random_student(&student_cfg, seed)?.0),
        ("lowrank-embed", lowrank_embed_init(&teacher, &student_cfg, seed)?.0),
        ("uniform", uniform_init(&teacher, &student_cfg, &layers, seed)?.0),
        ("guide", guide_init(&teacher, &student_cfg, &layers, seed)?.0),
    ];

    let mut sc = TrainConfig::new(250, 2e-3);
    sc.eval_every = 250;
    sc.eval_batches = 10;

    let mut rows = Vec::new();
    for (name, ck) in &students {
        let (_, log) = train(ck, None, &train_stream, &eval_stream, &sc)?;
        let first = log.records().first().unwrap().eval_ppl;
        let last = log.final_record().unwrap().eval_ppl;
        rows.push((*name, first, last));
    }

    let baseline = rows.iter().find(|r| r.0 == "random").unwrap().2;
    println!("{:<15} {:>12} {:>12} {:>10}", "init", "ppl@step0", "ppl@final", "gap_red_%");
    for (name, first, last) in &rows {
        let gap = gap_reduction(*last, baseline, teacher_ppl)?;
        println!("{:<15} {:>12.3} {:>12.3} {:>10.2}", name, first, last, gap);
    }
    Ok(())
}
