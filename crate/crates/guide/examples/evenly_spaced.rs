//! Evenly spaced index selection: the rule that decides which rows, columns,
//! heads, and blocks survive when a tensor shrinks.

use guide::selection::{evenly_spaced_indices, uniform_select};
use guide::tensor::Tensor;

fn main() -> guide::Result<()> {
    for (m, n) in [(3, 6), (4, 10), (5, 5), (1, 8), (6, 16)] {
        let idx = evenly_spaced_indices(m, n)?;
        println!("{:>2} of {:>2}: {:?}", m, n, idx);
    }

    // Endpoints always survive, and ties round down.
    let idx = evenly_spaced_indices(3, 8)?;
    assert_eq!(idx, vec![0, 3, 7]);

    // The same rule applied per axis shrinks whole tensors.
    let t = Tensor::new(vec![4, 6], (0..24).map(|v| v as f32).collect())?;
    let small = uniform_select(&t, &[2, 3])?;
    println!("4x6 -> 2x3 keeps {:?}", small.data());
    assert_eq!(small.data(), &[0.0, 2.0, 5.0, 18.0, 20.0, 23.0]);
    Ok(())
}
