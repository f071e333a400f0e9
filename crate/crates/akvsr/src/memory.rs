//! The compact audio memory: N trainable d-dimensional slots, one per
//! quantizer cluster, read frame-wise by cluster label.

use crate::autodiff::Var;
use crate::error::{AkvsrError, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Checkpoint name of the slot matrix.
pub const SLOTS_NAME: &str = "memory.slots";

/// Fresh `[N x d]` slot matrix, entries ~ N(0, 0.02^2).
pub fn init_memory(n: usize, d: usize, seed: u64) -> Result<Tensor> {
    if n < 2 {
        return Err(AkvsrError::Config(format!("memory needs N >= 2 slots, got {n}")));
    }
    if d < 8 {
        return Err(AkvsrError::Config(format!("memory needs d >= 8, got {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xBF58_476D_1CE4_E5B9).wrapping_add(11));
    Ok(Tensor::randn(&[n, d], 0.02, &mut rng))
}

/// Frame-wise memory access: row i of the output is `slots[labels[i]]`.
/// Gradients accumulate per slot across frames; a frozen slots leaf
/// receives none at all.
pub fn lookup(slots: &Var, labels: &[usize]) -> Result<Var> {
    slots.gather_rows(labels)
}
