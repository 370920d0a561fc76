use super::{Tape, Tensor, Var};
use crate::error::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Largest relative error per leaf, in leaf order.
    pub per_leaf: Vec<f64>,
    pub coords_checked: usize,
}

/// Compares tape gradients of a scalar function against central differences
/// on every coordinate of every leaf.
pub fn grad_check<F>(f: F, leaves: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, leaves, eps, usize::MAX, 0)
}

/// Like [`grad_check`], but checks at most `per_leaf` coordinates of each leaf,
/// chosen with a seeded RNG.
///
/// The error at a coordinate is `|a − c| / (|a| + |c| + 1e-12)` with `a` the
/// tape gradient and `c` the central difference.
pub fn grad_check_sampled<F>(
    f: F,
    leaves: &[Tensor],
    eps: f64,
    per_leaf: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = leaves.to_vec();
    let mut per_leaf_err = vec![0.0f64; leaves.len()];
    let mut coords_checked = 0;
    for li in 0..leaves.len() {
        let n = leaves[li].len();
        let coords: Vec<usize> = if n <= per_leaf {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_leaf).into_vec()
        };
        for c in coords {
            let orig = values[li].data()[c];
            values[li].data_mut()[c] = orig + eps;
            let plus = eval(&values)?;
            values[li].data_mut()[c] = orig - eps;
            let minus = eval(&values)?;
            values[li].data_mut()[c] = orig;
            let cd = (plus - minus) / (2.0 * eps);
            let a = analytic[li].data()[c];
            let err = (a - cd).abs() / (a.abs() + cd.abs() + 1e-12);
            per_leaf_err[li] = per_leaf_err[li].max(err);
            coords_checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: per_leaf_err.iter().copied().fold(0.0, f64::max),
        per_leaf: per_leaf_err,
        coords_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn quadratic_is_exact() {
        let x = random(&[3, 4], 1);
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = random(&[2, 2], 2);
        let report = grad_check(
            |t, _| Ok(t.leaf(Tensor::scalar(4.0))),
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    /// Every tape op composed into one scalar, checked coordinate-wise.
    #[test]
    fn every_op_matches_central_differences() {
        let leaves = vec![
            random(&[4, 6], 3),  // x
            random(&[5, 6], 4),  // w
            random(&[1, 5], 5),  // gain-like row
            random(&[6], 6),     // norm gain
            random(&[10, 6], 7), // table
            random(&[6, 3], 8),  // right matmul operand
        ];
        let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let (x, w, row, gain, table, r) = (v[0], v[1], v[2], v[3], v[4], v[5]);
            let lin = t.matmul_nt(x, w)?; // [4,5]
            let act = t.silu(lin);
            let gated = t.mul(act, row)?;
            let sig = t.sigmoid(gated);
            let n = t.rmsnorm(x, gain, 1e-8)?;
            let rot = t.rope(n, &[0, 3, 7, 100], 6, 10000.0)?;
            let emb = t.gather_rows(table, &[1, 1, 9, 4])?;
            let both = t.add(rot, emb)?;
            let dotted = t.row_dot(both, x)?; // [4,1]
            let bc = t.mul(sig, dotted)?; // [4,5]
            let mut mask = vec![true; 20];
            mask[3] = false;
            mask[7] = false;
            let sm = t.masked_softmax(bc, mask)?;
            let tiled = t.tile_cols(sm, 2)?; // [4,10]
            let sl = t.slice_cols(tiled, 3, 6)?; // [4,6]
            let il = t.interleave_rows(&[sl, both])?; // [8,6]
            let mm = t.matmul(il, r)?; // [8,3]
            let cc = t.concat_cols(&[mm, mm])?; // [8,6]
            let sc = t.scale(cc, 0.7);
            let ce = t.cross_entropy(sc, &[0, 1, 2, 3, 4, 5, 0, 2])?;
            let s = t.sum(sl);
            let s = t.scale(s, 0.1);
            t.add(ce, s)
        };
        let report = grad_check(f, &leaves, 1e-5).unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }
}
