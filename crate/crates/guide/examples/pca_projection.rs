//! Fit the width-reducing projection from a teacher's embedding tables and
//! check its two defining properties: orthonormal columns, and exact
//! reconstruction when the tables really live in a lower-dimensional space.

use guide::checkpoint::{random_init, ModelConfig};
use guide::initializers::pca_projection;
use guide::linalg::Matrix;
use guide::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> guide::Result<()> {
    let cfg = ModelConfig {
        dim: 32,
        n_blocks: 2,
        n_heads: 4,
        head_dim: 8,
        ffn: 64,
        vocab: 200,
        ctx: 16,
    };

    // Plant the embedding and positional rows inside a 12-dimensional
    // subspace of the 32-dimensional teacher width.
    let rank = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let basis = Matrix::from_fn(rank, cfg.dim, |_, _| rng.gen_range(-1.0..1.0));
    let coeff_e = Matrix::from_fn(cfg.vocab, rank, |_, _| rng.gen_range(-1.0..1.0));
    let coeff_p = Matrix::from_fn(cfg.ctx, rank, |_, _| rng.gen_range(-1.0..1.0));
    let mut teacher = random_init(cfg, 7)?;
    teacher.embed = Tensor::from_matrix(&coeff_e.matmul(&basis)?);
    teacher.pos = Tensor::from_matrix(&coeff_p.matmul(&basis)?);

    let proj = pca_projection(&teacher.embed, &teacher.pos, 16)?;
    let m = proj.matrix();
    println!("projection: {}x{}", m.rows(), m.cols());

    let gram = m.transpose().matmul(m)?;
    let mut worst = 0.0f64;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.get(i, j) - want).abs());
        }
    }
    println!("max deviation of M^T M from identity: {:.2e}", worst);

    // Only 12 directions carry signal, so compressing to 16 loses nothing.
    let e = teacher.embed.to_matrix()?;
    let round_trip = e.matmul(m)?.matmul(&m.transpose())?;
    let mut err = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..e.rows() {
        for j in 0..e.cols() {
            err += (round_trip.get(i, j) - e.get(i, j)).powi(2);
            scale += e.get(i, j).powi(2);
        }
    }
    println!("relative reconstruction error: {:.2e}", (err / scale).sqrt());

    let tail = proj.residual_spectrum();
    println!(
        "discarded singular values ({}): first {:.3e}, all below rounding noise",
        tail.len(),
        tail.first().copied().unwrap_or(0.0)
    );
    Ok(())
}
