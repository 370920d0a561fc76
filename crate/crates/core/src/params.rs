//! Parameter trees generic over their leaf type.
//!
//! The same struct holds concrete weights (`T = Tensor`), tape handles
//! (`T = Var`) or optimizer moments, so training, gradient extraction and
//! checkpointing all walk one fixed, named order.

use crate::numerics::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub trait Params<T: 'static> {
    type With<U>;

    fn map_ref<U>(&self, f: &mut impl FnMut(&T) -> U) -> Self::With<U>;

    /// Visits every leaf in a fixed order with its dotted path.
    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T));

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T));

    fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t));
        out
    }

    fn named_leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: 'static, P: Params<T>> Params<T> for Vec<P> {
    type With<U> = Vec<P::With<U>>;

    fn map_ref<U>(&self, f: &mut impl FnMut(&T) -> U) -> Self::With<U> {
        self.iter().map(|p| p.map_ref(f)).collect()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Truncated normal with the given standard deviation, resampled outside ±2σ.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = trunc_normal(&mut rng, &[100, 100], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 1e-3);
        let std = (t.sq_norm() / t.len() as f64).sqrt();
        // Truncation at ±2σ shrinks the spread to about 0.88σ.
        assert!((std - 0.0176).abs() < 1e-3, "{std}");
    }
}
