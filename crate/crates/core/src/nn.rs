//! Dense layer primitives with hand-written backward passes.
//!
//! Feature maps are `(C, H, W)`; batches of vectors are `(N, D)` row-major.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

use crate::geometry::BBox;

/// Saved input of a 3×3, stride-1, zero-padded convolution.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
}

fn im2col3x3(x: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let hw = h * w;
    let mut cols = Array2::<f64>::zeros((c * 9, hw));
    let dst = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut dst[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &plane[sy as usize * w..][..w];
                    let drow = &mut row[y * w..][..w];
                    // x + kx - 1 in range
                    let (lo, hi) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for xx in lo..hi {
                        drow[xx] = srow[xx + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

fn col2im3x3(cols: &Array2<f64>, (c, h, w): (usize, usize, usize)) -> Array3<f64> {
    let hw = h * w;
    let src = cols.as_slice().expect("standard layout");
    let mut out = Array3::<f64>::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &src[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[sy as usize * w..][..w];
                    let srow = &row[y * w..][..w];
                    let (lo, hi) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for xx in lo..hi {
                        drow[xx + kx - 1] += srow[xx];
                    }
                }
            }
        }
    }
    out
}

pub fn conv3x3_forward(x: ArrayView3<f64>, weight: ArrayView4<f64>, bias: ArrayView1<f64>) -> (Array3<f64>, ConvCache) {
    let (c, h, w) = x.dim();
    let cout = weight.dim().0;
    let cols = im2col3x3(x);
    let w2 = weight.as_standard_layout();
    let w2 = w2.view().into_shape_with_order((cout, c * 9)).expect("conv weight shape");
    let mut out = w2.dot(&cols);
    out += &bias.insert_axis(Axis(1));
    let out = out.into_shape_with_order((cout, h, w)).expect("conv output shape");
    (
        out,
        ConvCache {
            cols,
            in_shape: (c, h, w),
        },
    )
}

/// Returns `(dx, dW, db)`; `dx` is skipped when `need_dx` is false.
pub fn conv3x3_backward(
    cache: &ConvCache,
    weight: ArrayView4<f64>,
    dy: ArrayView3<f64>,
    need_dx: bool,
) -> (Option<Array3<f64>>, Array4<f64>, Array1<f64>) {
    let (c, h, w) = cache.in_shape;
    let cout = weight.dim().0;
    let dy = dy.as_standard_layout();
    let dy2 = dy.view().into_shape_with_order((cout, h * w)).expect("conv grad shape");
    let dw = dy2.dot(&cache.cols.t()).into_shape_with_order((cout, c, 3, 3)).expect("dW shape");
    let db = dy2.sum_axis(Axis(1));
    let dx = need_dx.then(|| {
        let w2 = weight.as_standard_layout();
        let w2 = w2.view().into_shape_with_order((cout, c * 9)).expect("conv weight shape");
        let dcols = w2.t().dot(&dy2);
        col2im3x3(&dcols, (c, h, w))
    });
    (dx, dw, db)
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<D: ndarray::Dimension>(out: &ndarray::Array<f64, D>, dy: &mut ndarray::Array<f64, D>) {
    ndarray::Zip::from(dy).and(out).for_each(|g, &y| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
}

/// 2×2 stride-2 max pooling; returns flat argmax into the input for backward.
pub fn maxpool2_forward(x: ArrayView3<f64>) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                        let v = x[[ci, sy, sx]];
                        if v > best {
                            best = v;
                            bi = (ci * h + sy) * w + sx;
                        }
                    }
                }
                out[[ci, y, xx]] = best;
                arg.push(bi);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(argmax: &[usize], in_shape: (usize, usize, usize), dy: ArrayView3<f64>) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros(in_shape);
    let flat = dx.as_slice_mut().expect("fresh array");
    for (g, &i) in dy.iter().zip(argmax) {
        flat[i] += g;
    }
    dx
}

/// `y = x Wᵀ + b` for `x: (N, in)`, `W: (out, in)`.
pub fn linear_forward(x: ArrayView2<f64>, weight: ArrayView2<f64>, bias: Option<ArrayView1<f64>>) -> Array2<f64> {
    let mut y = x.dot(&weight.t());
    if let Some(b) = bias {
        y += &b;
    }
    y
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward(
    x: ArrayView2<f64>,
    weight: ArrayView2<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    (dy.dot(&weight), dy.t().dot(&x), dy.sum_axis(Axis(0)))
}

/// Sentinel argmax for bins that cover no feature cell.
pub const EMPTY_BIN: usize = usize::MAX;

/// Quantized RoI max pooling onto a `p×p` grid. Output rows are `[c][py][px]` flattened.
pub fn roi_max_pool(feat: ArrayView3<f64>, boxes: &[BBox], stride: f64, p: usize) -> (Array2<f64>, Vec<usize>) {
    let (c, h, w) = feat.dim();
    let mut out = Array2::<f64>::zeros((boxes.len(), c * p * p));
    let mut arg = vec![EMPTY_BIN; boxes.len() * c * p * p];
    let scale = 1.0 / stride;
    for (n, b) in boxes.iter().enumerate() {
        let sx = (b.x1 * scale).round() as isize;
        let sy = (b.y1 * scale).round() as isize;
        let ex = (b.x2 * scale).round() as isize;
        let ey = (b.y2 * scale).round() as isize;
        let rw = (ex - sx + 1).max(1) as f64;
        let rh = (ey - sy + 1).max(1) as f64;
        let (bw, bh) = (rw / p as f64, rh / p as f64);
        for py in 0..p {
            let y0 = ((py as f64 * bh).floor() as isize + sy).clamp(0, h as isize) as usize;
            let y1 = (((py + 1) as f64 * bh).ceil() as isize + sy).clamp(0, h as isize) as usize;
            for px in 0..p {
                let x0 = ((px as f64 * bw).floor() as isize + sx).clamp(0, w as isize) as usize;
                let x1 = (((px + 1) as f64 * bw).ceil() as isize + sx).clamp(0, w as isize) as usize;
                if y0 >= y1 || x0 >= x1 {
                    continue;
                }
                for ci in 0..c {
                    let win = feat.slice(s![ci, y0..y1, x0..x1]);
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = EMPTY_BIN;
                    for ((yy, xx), &v) in win.indexed_iter() {
                        if v > best {
                            best = v;
                            bi = (ci * h + y0 + yy) * w + x0 + xx;
                        }
                    }
                    let k = ci * p * p + py * p + px;
                    out[[n, k]] = best;
                    arg[n * c * p * p + k] = bi;
                }
            }
        }
    }
    (out, arg)
}

pub fn roi_max_pool_backward(argmax: &[usize], feat_shape: (usize, usize, usize), dy: ArrayView2<f64>) -> Array3<f64> {
    let mut df = Array3::<f64>::zeros(feat_shape);
    let flat = df.as_slice_mut().expect("fresh array");
    for (g, &i) in dy.iter().zip(argmax) {
        if i != EMPTY_BIN {
            flat[i] += g;
        }
    }
    df
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}
