//! Checkpoint persistence: deterministic bytes, bit-exact reload, and the
//! header fields a downstream tool can rely on.

use guide::checkpoint::{random_init, Checkpoint, ModelConfig};

fn main() -> guide::Result<()> {
    let cfg = ModelConfig {
        dim: 24,
        n_blocks: 3,
        n_heads: 3,
        head_dim: 8,
        ffn: 48,
        vocab: 259,
        ctx: 20,
    };
    let ck = random_init(cfg, 12345)?;

    let bytes = ck.save_bytes()?;
    println!("serialized size: {} bytes for {} params", bytes.len(), cfg.param_count());

    let reloaded = Checkpoint::load_bytes(&bytes)?;
    assert_eq!(reloaded.save_bytes()?, bytes, "round trip must be bit-exact");
    println!("round trip: bit-exact");

    // Serialization is a pure function of the content.
    assert_eq!(random_init(cfg, 12345)?.save_bytes()?, bytes);
    assert_ne!(random_init(cfg, 12346)?.save_bytes()?, bytes);
    println!("content hash: {:016x}", ck.content_hash()?);

    for (name, t) in ck.tensors().iter().take(4) {
        println!("  {:<12} {:?}", name, t.shape());
    }
    println!("  ... {} tensors total", ck.tensors().len());
    Ok(())
}
