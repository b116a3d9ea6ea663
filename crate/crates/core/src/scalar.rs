//! Element types accepted in document and query embeddings.

use std::fmt::Debug;

use num_traits::{Float, ToPrimitive};

/// Scalar stored in an embedding vector.
///
/// Dot scores are always accumulated in `f64`, whatever the storage type, so
/// rankings do not depend on the width chosen for the index.
pub trait EmbeddingScalar: Float + ToPrimitive + Copy + Send + Sync + Debug + 'static {
    fn widen(self) -> f64;
    fn narrow(value: f64) -> Self;
}

macro_rules! embedding_scalar_impl {
    ($($t:ty)*) => ($(
        impl EmbeddingScalar for $t {
            #[inline]
            fn widen(self) -> f64 {
                self as f64
            }

            #[inline]
            fn narrow(value: f64) -> Self {
                value as $t
            }
        }
    )*)
}

embedding_scalar_impl!(f32 f64);

/// Dot product of two equally long vectors, summed in index order in `f64`.
pub fn dot<S: EmbeddingScalar>(a: &[S], b: &[S]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x.widen() * y.widen();
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_accumulates_in_f64() {
        let a = [1.0f32, 2.0, 3.0];
        let b = [4.0f32, 5.0, 6.0];
        assert_eq!(dot(&a, &b), 32.0);
        let c = [0.1f64, 0.2];
        assert!((dot(&c, &c) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn f32_inputs_are_widened_before_multiplying() {
        // 16_777_217 is not representable in f32; the product of two f32 values is
        // exact in f64.
        let a = [4097.0f32];
        let b = [4097.0f32];
        assert_eq!(dot(&a, &b), 16_785_409.0);
    }
}
