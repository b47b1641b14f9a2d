//! Row-wise activation and normalization kernels with their backward passes.

use rand::Rng;

use super::Matrix;
use crate::error::{Error, Result};

/// Numerically stable softmax over each row.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    softmax_rows_in_place(&mut out);
    out
}

pub fn softmax_rows_in_place(x: &mut Matrix) {
    for r in 0..x.rows() {
        softmax_in_place(x.row_mut(r));
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Given softmax output `p` and upstream `dp`, returns the gradient wrt the logits.
pub fn softmax_rows_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let mut ds = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let pr = p.row(r);
        let dr = dp.row(r);
        let inner: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((o, &pv), &dv) in ds.row_mut(r).iter_mut().zip(pr).zip(dr) {
            *o = pv * (dv - inner);
        }
    }
    ds
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Saved state for [`layer_norm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// Per-row normalization to zero mean and unit variance followed by `gain ⊙ x̂ + bias`.
pub fn layer_norm(
    x: &Matrix,
    gain: &Matrix,
    bias: &Matrix,
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::validation("layer_norm needs rows of length >= 2"));
    }
    if gain.shape() != (1, d) || bias.shape() != (1, d) {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape(),
            rhs: gain.shape(),
        });
    }
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    let g = gain.as_slice();
    let b = bias.as_slice();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let nr = normalized.row_mut(r);
        for (n, v) in nr.iter_mut().zip(row) {
            *n = (v - mean) * is;
        }
        let nr = normalized.row(r);
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = g[j] * nr[j] + b[j];
        }
    }
    Ok((
        out.debug_check("layer_norm")?,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Returns `dx`; accumulates into `dgain` and `dbias` (each `1 × d`).
pub fn layer_norm_backward(
    dy: &Matrix,
    gain: &Matrix,
    cache: &LayerNormCache,
    dgain: &mut Matrix,
    dbias: &mut Matrix,
) -> Matrix {
    let d = dy.cols();
    let g = gain.as_slice();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.normalized.row(r);
        {
            let dg = dgain.as_mut_slice();
            let db = dbias.as_mut_slice();
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
                db[j] += dyr[j];
            }
        }
        for j in 0..d {
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &Matrix) -> Matrix {
    let data = x.as_slice().iter().map(|&v| gelu_scalar(v)).collect();
    Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

/// `dy ⊙ gelu'(x)`
pub fn gelu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    let data = x
        .as_slice()
        .iter()
        .zip(dy.as_slice())
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

/// Inverted dropout. Returns the output and, in training with `p > 0`, the
/// scaled keep-mask (entries `0` or `1/(1-p)`) needed for the backward pass.
pub fn dropout<R: Rng + ?Sized>(
    x: &Matrix,
    p: f64,
    rng: &mut R,
    train: bool,
) -> Result<(Matrix, Option<Matrix>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::validation(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if !train || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let mask = dropout_mask(x.rows(), x.cols(), p, rng);
    let out = x.hadamard(&mask)?;
    Ok((out, Some(mask)))
}

pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0, 0.0]]));
        for &v in p.as_slice() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let p = softmax_rows(&Matrix::from_rows(&[[1000.0, 0.0, 0.0]]));
        assert!(p.is_finite());
        assert!(close(p.get(0, 0), 1.0, 1e-12));
        assert!(p.get(0, 1) < 1e-300);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-50.0f64..50.0, 2..10), c in -100.0f64..100.0) {
            let a = softmax_rows(&Matrix::row_vector(&v));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax_rows(&Matrix::row_vector(&shifted));
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
            prop_assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Matrix::from_rows(&[[3.0, 3.0, 3.0, 3.0]]);
        let g = Matrix::filled(1, 4, 1.0);
        let b = Matrix::zeros(1, 4);
        let (y, _) = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        assert!(y.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row: Vec<f64> = (0..17).map(|_| rng.gen_range(-4.0..9.0)).collect();
        let x = Matrix::row_vector(&row);
        let g = Matrix::filled(1, 17, 1.0);
        let bias_val = 0.25;
        let b = Matrix::filled(1, 17, bias_val);
        let (y, cache) = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        let n = cache.normalized.as_slice();
        let mean = n.iter().sum::<f64>() / 17.0;
        let var = n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
        let out_mean = y.as_slice().iter().sum::<f64>() / 17.0;
        assert!(close(out_mean, bias_val, 1e-9));
    }

    #[test]
    fn layer_norm_rejects_short_rows() {
        let x = Matrix::zeros(2, 1);
        let g = Matrix::filled(1, 1, 1.0);
        assert!(layer_norm(&x, &g, &Matrix::zeros(1, 1), LAYER_NORM_EPS).is_err());
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu_scalar(0.0), 0.0);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!(close(fd, gelu_grad_scalar(x), 1e-8), "x={x}");
        }
    }

    #[test]
    fn softmax_backward_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // loss = sum(w ⊙ softmax(s))
        let loss = |s: &[f64]| {
            let p = softmax_rows(&Matrix::row_vector(s));
            p.as_slice().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let p = softmax_rows(&Matrix::row_vector(&s));
        let ds = softmax_rows_backward(&p, &Matrix::row_vector(&w));
        for i in 0..5 {
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[i] += 1e-6;
            sm[i] -= 1e-6;
            let fd = (loss(&sp) - loss(&sm)) / 2e-6;
            assert!(close(fd, ds.get(0, i), 1e-9));
        }
    }

    #[test]
    fn layer_norm_backward_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 6;
        let x: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Matrix::from_vec(2, d, x).unwrap();
        let gain =
            Matrix::from_vec(1, d, (0..d).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        let bias =
            Matrix::from_vec(1, d, (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let w =
            Matrix::from_vec(2, d, (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let loss = |x: &Matrix| {
            let (y, _) = layer_norm(x, &gain, &bias, LAYER_NORM_EPS).unwrap();
            y.hadamard(&w).unwrap().as_slice().iter().sum::<f64>()
        };
        let (_, cache) = layer_norm(&x, &gain, &bias, LAYER_NORM_EPS).unwrap();
        let mut dg = Matrix::zeros(1, d);
        let mut db = Matrix::zeros(1, d);
        let dx = layer_norm_backward(&w, &gain, &cache, &mut dg, &mut db);
        for i in 0..2 * d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_mut_slice()[i] += 1e-6;
            xm.as_mut_slice()[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!(
                close(fd, dx.as_slice()[i], 1e-8),
                "coord {i}: {fd} vs {}",
                dx.as_slice()[i]
            );
        }
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Matrix::filled(3, 3, 2.0);
        let (y, mask) = dropout(&x, 0.1, &mut rng, false).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_none());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let x = Matrix::filled(100, 1000, 1.0);
        let (y, _) = dropout(&x, 0.1, &mut rng, true).unwrap();
        let mean = y.as_slice().iter().sum::<f64>() / 1e5;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
        let zeros = y.as_slice().iter().filter(|v| **v == 0.0).count();
        assert!((9_000..11_000).contains(&zeros));
    }

    #[test]
    fn dropout_rejects_p_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout(&Matrix::zeros(1, 1), 1.0, &mut rng, true).is_err());
    }
}
