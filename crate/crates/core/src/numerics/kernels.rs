//! Forward kernels shared by the tape and by the inference path.

use super::Tensor;
use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`; the layout of a linear layer with `[out, in]` weights.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_nt inner extents differ: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
        }
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_tn inner extents differ: {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::matrix(n, m, out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `w · x` for `w: [out, in]`.
pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.last_dim();
    assert_eq!(cols, x.len(), "matvec: weight has {cols} columns, input has {}", x.len());
    (0..w.outer_len()).map(|r| dot(w.row_slice(r), x)).collect()
}

/// Output shape of a rank-2 broadcast; each extent must agree or be 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() != 2 || b.len() != 2 {
        return Err(Error::Dimension(format!("cannot broadcast {a:?} with {b:?}")));
    }
    let mut out = Vec::with_capacity(2);
    for (&x, &y) in a.iter().zip(b) {
        out.push(match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => return Err(Error::Dimension(format!("cannot broadcast {a:?} with {b:?}"))),
        });
    }
    Ok(out)
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(shape, data);
    }
    let (r, c) = (shape[0], shape[1]);
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            let x = a.data()[(i % ar) * ac + (j % ac)];
            let y = b.data()[(i % br) * bc + (j % bc)];
            data.push(f(x, y));
        }
    }
    Tensor::new(shape, data)
}

/// Sums a broadcast gradient back down to `shape`.
pub fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let (r, c) = (grad.shape()[0], grad.shape()[1]);
    let (tr, tc) = (shape[0], shape[1]);
    let mut out = Tensor::zeros(shape);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[(i % tr) * tc + (j % tc)] += grad.data()[i * c + j];
        }
    }
    out
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_zip(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_zip(a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x * c)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Softmax of `x` restricted to positions where `mask` is true.
///
/// Masked positions get weight 0. A slice with no unmasked entries comes back
/// all zeros.
pub fn masked_softmax_slice(x: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for ((o, &v), &m) in out.iter_mut().zip(x).zip(mask) {
        *o = if m { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    masked_softmax_slice(x, &vec![true; x.len()], &mut out);
    out
}

/// Masked softmax over the last axis.
///
/// `mask` either covers every element of `x` or has the extent of the last
/// axis, in which case it is shared by every slice.
pub fn masked_softmax(x: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let c = x.last_dim();
    if mask.len() != x.len() && mask.len() != c {
        return Err(Error::Dimension(format!(
            "mask of length {} does not broadcast to {:?}",
            mask.len(),
            x.shape()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.outer_len() {
        let m = if mask.len() == c { mask } else { &mask[r * c..(r + 1) * c] };
        masked_softmax_slice(x.row_slice(r), m, out.row_slice_mut(r));
    }
    Ok(out)
}

/// Indices of the `k` largest finite entries, largest first; ties go to the
/// lower index. Returns every finite entry when fewer than `k` exist.
pub fn topk_indices(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).filter(|&i| x[i].is_finite()).collect();
    let by_score = |&a: &usize, &b: &usize| x[b].total_cmp(&x[a]).then(a.cmp(&b));
    if idx.len() > k {
        idx.select_nth_unstable_by(k, by_score);
        idx.truncate(k);
    }
    idx.sort_by(by_score);
    idx
}

/// Row-wise `topk_indices` over the last axis of `x`.
pub fn topk_rows(x: &Tensor, k: usize) -> Vec<Vec<usize>> {
    (0..x.outer_len()).map(|r| topk_indices(x.row_slice(r), k)).collect()
}

pub fn rmsnorm_slice(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let inv = inv_rms(x, eps);
    x.iter().zip(gain).map(|(v, g)| g * v * inv).collect()
}

#[inline]
pub(crate) fn inv_rms(x: &[f64], eps: f64) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + eps).sqrt()
}

pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.last_dim();
    if gain.len() != c {
        return Err(Error::Dimension(format!(
            "rmsnorm gain has {} entries for last axis {c}",
            gain.len()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.outer_len() {
        let y = rmsnorm_slice(x.row_slice(r), gain.data(), eps);
        out.row_slice_mut(r).copy_from_slice(&y);
    }
    Ok(out)
}

/// Rotates `x` in place by the rotary embedding of `position`.
///
/// `x` is split into heads of `head_dim`; within a head, coordinate `i` is
/// paired with `i + head_dim / 2` and rotated by `position · theta^(-2i/head_dim)`.
/// `inverse` rotates by the negated angle.
pub fn rope_in_place(x: &mut [f64], position: usize, head_dim: usize, theta: f64, inverse: bool) {
    let half = head_dim / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for head in x.chunks_exact_mut(head_dim) {
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = (position as f64 * freq).sin_cos();
            let (a, b) = (head[i], head[i + half]);
            head[i] = a * cos - sign * b * sin;
            head[i + half] = sign * a * sin + b * cos;
        }
    }
}

pub fn check_rope_dims(width: usize, head_dim: usize) -> Result<()> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::Dimension(format!("rotary head dimension {head_dim} must be even")));
    }
    if width % head_dim != 0 {
        return Err(Error::Dimension(format!(
            "width {width} is not a multiple of rotary head dimension {head_dim}"
        )));
    }
    Ok(())
}

/// Applies the rotary embedding to every row; row `r` sits at `positions[r]`.
pub fn rope_rows(x: &Tensor, positions: &[usize], head_dim: usize, theta: f64) -> Result<Tensor> {
    check_rope_dims(x.last_dim(), head_dim)?;
    if positions.len() != x.outer_len() {
        return Err(Error::Dimension(format!(
            "{} positions for {} rows",
            positions.len(),
            x.outer_len()
        )));
    }
    let mut out = x.clone();
    for (r, &p) in positions.iter().enumerate() {
        rope_in_place(out.row_slice_mut(r), p, head_dim, theta, false);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::matrix(m, n, out).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Integer-valued entries keep every partial sum exact, so any summation
        // order must agree bit for bit.
        let a = Tensor::from_fn(&[3, 4], |_| rng.random_range(-9..=9) as f64);
        let b = Tensor::from_fn(&[4, 2], |_| rng.random_range(-9..=9) as f64);
        assert_eq!(matmul(&a, &b).unwrap(), triple_loop(&a, &b));
        let a = Tensor::from_fn(&[3, 4], |_| rng.random::<f64>() - 0.5);
        let b = Tensor::from_fn(&[4, 2], |_| rng.random::<f64>() - 0.5);
        assert_eq!(matmul(&a, &b).unwrap(), triple_loop(&a, &b));
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::from_fn(&[5, 3], |_| rng.random::<f64>() - 0.5);
        let b = Tensor::from_fn(&[4, 3], |_| rng.random::<f64>() - 0.5);
        let bt = transpose(&b).unwrap();
        let x = matmul_nt(&a, &b).unwrap();
        let y = matmul(&a, &bt).unwrap();
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-15);
        }
        let at = transpose(&a).unwrap();
        let z = matmul_tn(&at, &bt).unwrap();
        for (p, q) in z.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn masked_softmax_examples() {
        let x = Tensor::row(vec![0.0, 0.0, 0.0]);
        let y = masked_softmax(&x, &[true; 3]).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = masked_softmax(&Tensor::row(vec![5.0, 1.0]), &[false, true]).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0]);
        let y = masked_softmax(&Tensor::row(vec![1.0, 2.0]), &[false, false]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(silu(0.0), 0.0);
        for x in [-30.0, -2.5, -0.1, 0.3, 4.0, 40.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(add(&a, &b), Err(Error::Dimension(_))));
        let col = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let row = Tensor::row(vec![10.0, 20.0, 30.0]);
        assert_eq!(
            add(&col, &row).unwrap().data(),
            &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]
        );
    }

    #[test]
    fn topk_examples() {
        let mut got = topk_indices(&[0.1, 0.9, 0.5, 0.7], 2);
        got.sort();
        assert_eq!(got, vec![1, 3]);
        assert_eq!(topk_indices(&[2.0, 2.0, 2.0], 1), vec![0]);
        assert_eq!(topk_indices(&[1.0, f64::NEG_INFINITY, 3.0], 5), vec![2, 0]);
    }

    fn full_sort_topk(x: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..x.len()).filter(|&i| x[i].is_finite()).collect();
        idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    #[test]
    fn topk_agrees_with_full_sort_on_random_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..1000 {
            let len = if trial == 0 { 100 } else { rng.random_range(1..120) };
            // Coarse values force ties.
            let x: Vec<f64> = (0..len)
                .map(|_| {
                    if rng.random_bool(0.05) {
                        f64::NEG_INFINITY
                    } else {
                        (rng.random_range(-20..20) as f64) / 4.0
                    }
                })
                .collect();
            let k = if trial == 0 { 10 } else { rng.random_range(1..20) };
            assert_eq!(topk_indices(&x, k), full_sort_topk(&x, k), "trial {trial}");
        }
    }

    #[test]
    fn rope_odd_width_is_dimension_error() {
        let x = Tensor::row(vec![1.0, 2.0, 3.0]);
        assert!(matches!(rope_rows(&x, &[1], 3, 10000.0), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn masked_softmax_is_a_distribution(
            x in proptest::collection::vec(-50.0f64..50.0, 1..40),
            bits in proptest::collection::vec(any::<bool>(), 40),
        ) {
            let mask = &bits[..x.len()];
            let mut out = vec![0.0; x.len()];
            masked_softmax_slice(&x, mask, &mut out);
            let any_on = mask.iter().any(|&m| m);
            let total: f64 = out.iter().sum();
            for (o, &m) in out.iter().zip(mask) {
                prop_assert!(*o >= 0.0 && *o <= 1.0 && o.is_finite());
                if !m { prop_assert_eq!(*o, 0.0); }
            }
            if any_on { prop_assert!((total - 1.0).abs() < 1e-12); } else { prop_assert_eq!(total, 0.0); }
        }

        #[test]
        fn rope_inverse_undoes_rotation(
            x in proptest::collection::vec(-5.0f64..5.0, 8),
            pos in 0usize..5000,
        ) {
            let mut y = x.clone();
            rope_in_place(&mut y, pos, 8, 10000.0, false);
            rope_in_place(&mut y, pos, 8, 10000.0, true);
            for (a, b) in x.iter().zip(&y) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
