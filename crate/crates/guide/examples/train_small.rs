//! Train a small model from scratch on generated text and watch the held-out
//! perplexity fall. Finishes in well under a minute.

use guide::checkpoint::{random_init, ModelConfig};
use guide::corpus::{generate_sample_text, Corpus, Tokenizer, BYTE_VOCAB};
use guide::training::{train, TrainConfig};

fn main() -> guide::Result<()> {
    let text = generate_sample_text(11, 200_000);
    let corpus = Corpus::from_text(&text, &Tokenizer::byte())?;
    println!(
        "corpus: {} tokens in {} documents",
        corpus.tokens().len(),
        corpus.n_docs()
    );
    let (train_stream, eval_stream) = corpus.streams(4, 32, 5)?;

    let cfg = ModelConfig {
        dim: 48,
        n_blocks: 3,
        n_heads: 4,
        head_dim: 12,
        ffn: 96,
        vocab: BYTE_VOCAB,
        ctx: 32,
    };
    let start = random_init(cfg, 1)?;

    let mut tc = TrainConfig::new(300, 2e-3);
    tc.eval_every = 60;
    tc.eval_batches = 8;
    let (trained, log) = train(&start, None, &train_stream, &eval_stream, &tc)?;

    println!("step   train_loss  eval_ppl");
    for r in log.records() {
        let train_loss = r.train_loss.map(|v| format!("{:.4}", v)).unwrap_or_else(|| "-".into());
        println!("{:>4}   {:>10}  {:>8.3}", r.step, train_loss, r.eval_ppl);
    }
    println!("summary: {}", log.summary());
    assert!(trained.step == 300);

    let first = log.records().first().unwrap().eval_ppl;
    let last = log.records().last().unwrap().eval_ppl;
    assert!(last < first, "training should reduce perplexity");
    Ok(())
}
