//! Classification heads (linear and cosine) and their gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::nn;

/// Guard added to the norm product of the cosine head.
pub const COSINE_EPS: f64 = 1e-8;

pub fn linear_logits(f: ArrayView2<f64>, weight: ArrayView2<f64>, bias: Option<ArrayView1<f64>>) -> Array2<f64> {
    nn::linear_forward(f, weight, bias)
}

/// `s · (w_j · f) / (‖w_j‖‖f‖ + ε)`; bounded by `s` in magnitude, zero for a zero feature.
pub fn cosine_logits(f: ArrayView2<f64>, weight: ArrayView2<f64>, scale: f64) -> Array2<f64> {
    let dots = f.dot(&weight.t());
    let nf = row_norms(f);
    let nw = row_norms(weight);
    Array2::from_shape_fn(dots.dim(), |(i, j)| scale * dots[[i, j]] / (nf[i] * nw[j] + COSINE_EPS))
}

/// Returns `(df, dW)` for the cosine head given `dlogits`.
pub fn cosine_backward(
    f: ArrayView2<f64>,
    weight: ArrayView2<f64>,
    scale: f64,
    dlogits: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let dots = f.dot(&weight.t());
    let nf = row_norms(f);
    let nw = row_norms(weight);
    let (n, m) = dots.dim();
    // d logit_ij = s/D (w_j · df) - s dot nw/(nf D²) (f_i · df)  and symmetric in w.
    let mut coef_w = Array2::<f64>::zeros((n, m));
    let mut coef_fself = Array1::<f64>::zeros(n);
    let mut coef_f = Array2::<f64>::zeros((n, m));
    let mut coef_wself = Array1::<f64>::zeros(m);
    for i in 0..n {
        for j in 0..m {
            let g = dlogits[[i, j]];
            if g == 0.0 {
                continue;
            }
            let denom = nf[i] * nw[j] + COSINE_EPS;
            let base = scale * g / denom;
            let corr = scale * g * dots[[i, j]] / (denom * denom);
            coef_w[[i, j]] = base;
            coef_f[[i, j]] = base;
            if nf[i] > 0.0 {
                coef_fself[i] -= corr * nw[j] / nf[i];
            }
            if nw[j] > 0.0 {
                coef_wself[j] -= corr * nf[i] / nw[j];
            }
        }
    }
    let mut df = coef_w.dot(&weight);
    df += &(&f * &coef_fself.insert_axis(Axis(1)));
    let mut dw = coef_f.t().dot(&f);
    dw += &(&weight * &coef_wself.insert_axis(Axis(1)));
    (df, dw)
}

fn row_norms(x: ArrayView2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}
