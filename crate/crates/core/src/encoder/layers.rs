use ndarray::{Array1, Array2, ArrayBase, Axis, Data, Ix2};

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub(crate) fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let mean_d = row.sum() / d;
        let mean_dx = row.dot(&xh) / d;
        row.zip_mut_with(&xh, |g, &x| *g = r * (*g - mean_d - x * mean_dx));
    }
    dx
}

/// Row-wise softmax in place; masked key columns get probability 0.
pub(crate) fn masked_softmax_rows(scores: &mut Array2<f64>, key_mask: &[bool]) {
    for mut row in scores.rows_mut() {
        let mut max = f64::NEG_INFINITY;
        for (x, &m) in row.iter().zip(key_mask) {
            if !m && *x > max {
                max = *x;
            }
        }
        let mut sum = 0.0;
        for (x, &m) in row.iter_mut().zip(key_mask) {
            if m {
                *x = 0.0;
            } else {
                *x = (*x - max).exp();
                sum += *x;
            }
        }
        row /= sum;
    }
}

/// `acc += aᵀ · b`.
pub(crate) fn acc_matmul_tn<S1, S2>(acc: &mut Array2<f64>, a: &ArrayBase<S1, Ix2>, b: &ArrayBase<S2, Ix2>)
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
{
    ndarray::linalg::general_mat_mul(1.0, &a.t(), b, 1.0, acc);
}
