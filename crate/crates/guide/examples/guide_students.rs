//! Shrink a teacher into a student with the PCA-guided transfer and print
//! the per-tensor provenance report.
//!
//! Block 0 absorbs the projection into its Q/K/V weights, later mapped
//! blocks are index-selected, and everything the transfer cannot speak for
//! keeps its seeded random draw.

use guide::checkpoint::{random_init, ModelConfig};
use guide::initializers::guide_init;
use guide::selection::{select_layers, LayerStrategy};

fn main() -> guide::Result<()> {
    let teacher_cfg = ModelConfig {
        dim: 64,
        n_blocks: 6,
        n_heads: 8,
        head_dim: 8,
        ffn: 128,
        vocab: 259,
        ctx: 32,
    };
    let student_cfg = ModelConfig {
        dim: 32,
        n_blocks: 3,
        n_heads: 4,
        head_dim: 8,
        ffn: 64,
        vocab: 259,
        ctx: 32,
    };

    let teacher = random_init(teacher_cfg, 1)?;
    let layers = select_layers(LayerStrategy::TopPlusLast, 3, 6)?;
    let (student, report) = guide_init(&teacher, &student_cfg, &layers, 99)?;

    println!("{}", report.render());
    println!(
        "teacher: {} params, student: {} params",
        teacher_cfg.param_count(),
        student.config.param_count()
    );

    let derived = report
        .entries()
        .iter()
        .filter(|(_, origin)| origin.is_teacher_derived())
        .count();
    println!(
        "{} of {} tensors carry teacher knowledge",
        derived,
        report.entries().len()
    );
    Ok(())
}
