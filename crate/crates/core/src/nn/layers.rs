use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{LayerSpec, ModelParams, Stage};
use crate::scalar::Scalar;

/// Runs the stack and returns logits. When `acts` is given it receives the input of
/// every stage followed by the final logits.
pub(super) fn forward<T: Scalar>(
    stages: &[Stage],
    params: &ModelParams<T>,
    mut x: Array2<T>,
    mut acts: Option<&mut Vec<Array2<T>>>,
) -> Array2<T> {
    for stage in stages {
        let mut y = match (stage.layer, stage.param) {
            (LayerSpec::Dense { inputs, outputs }, Some(p)) => {
                let w = ArrayView2::from_shape((inputs, outputs), &params.arrays[p]).unwrap();
                let b = ArrayView1::from(&params.arrays[p + 1]);
                x.dot(&w) + &b
            }
            (LayerSpec::Conv { kernel, .. }, Some(p)) => conv_forward(stage, kernel, params, p, &x),
            (LayerSpec::MaxPool2, None) => pool_forward(stage, &x),
            _ => unreachable!("stage/parameter mismatch"),
        };
        if stage.relu {
            y.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        }
        if let Some(a) = acts.as_deref_mut() {
            a.push(x);
        }
        x = y;
    }
    if let Some(a) = acts {
        a.push(x.clone());
    }
    x
}

/// Backpropagates `d_logits` through the stack recorded in `acts`.
pub(super) fn backward<T: Scalar>(
    stages: &[Stage],
    params: &ModelParams<T>,
    acts: &[Array2<T>],
    d_logits: Array2<T>,
    shapes: &[usize],
) -> ModelParams<T> {
    let mut grads = ModelParams::zeros_like(shapes);
    let mut d = d_logits;
    for (i, stage) in stages.iter().enumerate().rev() {
        if stage.relu {
            d.zip_mut_with(&acts[i + 1], |g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            });
        }
        let x = &acts[i];
        let need_dx = i > 0;
        d = match (stage.layer, stage.param) {
            (LayerSpec::Dense { inputs, outputs }, Some(p)) => {
                let w = ArrayView2::from_shape((inputs, outputs), &params.arrays[p]).unwrap();
                {
                    let mut gw =
                        ndarray::ArrayViewMut2::from_shape((inputs, outputs), &mut grads.arrays[p])
                            .unwrap();
                    general_mat_mul(T::one(), &x.t(), &d, T::zero(), &mut gw);
                }
                grads.arrays[p + 1] = d.sum_axis(Axis(0)).to_vec();
                if need_dx {
                    d.dot(&w.t())
                } else {
                    Array2::zeros((0, 0))
                }
            }
            (LayerSpec::Conv { kernel, .. }, Some(p)) => {
                conv_backward(stage, kernel, params, p, x, &d, &mut grads, need_dx)
            }
            (LayerSpec::MaxPool2, None) => pool_backward(stage, x, &d),
            _ => unreachable!("stage/parameter mismatch"),
        };
    }
    grads
}

/// Patch matrix of one example: one row per output pixel, columns ordered
/// (ky, kx, channel) to match the weight layout.
fn im2col<T: Scalar>(input: ArrayView1<T>, h: usize, w: usize, c: usize, k: usize) -> Array2<T> {
    let pad = k / 2;
    let mut cols = Array2::zeros((h * w, k * k * c));
    let src = input.as_slice().expect("contiguous row");
    for (p, mut row) in cols.axis_iter_mut(Axis(0)).enumerate() {
        let (oy, ox) = (p / w, p % w);
        let row = row.as_slice_mut().unwrap();
        for ky in 0..k {
            let iy = oy + ky;
            if iy < pad || iy - pad >= h {
                continue;
            }
            let iy = iy - pad;
            for kx in 0..k {
                let ix = ox + kx;
                if ix < pad || ix - pad >= w {
                    continue;
                }
                let ix = ix - pad;
                let dst = (ky * k + kx) * c;
                let s = (iy * w + ix) * c;
                row[dst..dst + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &Array2<T>, out: &mut [T], h: usize, w: usize, c: usize, k: usize) {
    let pad = k / 2;
    for (p, row) in cols.axis_iter(Axis(0)).enumerate() {
        let (oy, ox) = (p / w, p % w);
        let row = row.as_slice().unwrap();
        for ky in 0..k {
            let iy = oy + ky;
            if iy < pad || iy - pad >= h {
                continue;
            }
            let iy = iy - pad;
            for kx in 0..k {
                let ix = ox + kx;
                if ix < pad || ix - pad >= w {
                    continue;
                }
                let ix = ix - pad;
                let src = (ky * k + kx) * c;
                let dst = (iy * w + ix) * c;
                for (o, &v) in out[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                    *o = *o + v;
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(
    stage: &Stage,
    k: usize,
    params: &ModelParams<T>,
    p: usize,
    x: &Array2<T>,
) -> Array2<T> {
    let (h, w, c) = stage.input;
    let oc = stage.output.2;
    let weights = ArrayView2::from_shape((k * k * c, oc), &params.arrays[p]).unwrap();
    let bias = ArrayView1::from(&params.arrays[p + 1]);
    let mut out = Array2::zeros((x.nrows(), h * w * oc));
    for (xi, mut oi) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let cols = im2col(xi, h, w, c, k);
        let mut y = ndarray::ArrayViewMut2::from_shape((h * w, oc), oi.as_slice_mut().unwrap())
            .unwrap();
        general_mat_mul(T::one(), &cols, &weights, T::zero(), &mut y);
        y += &bias;
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    stage: &Stage,
    k: usize,
    params: &ModelParams<T>,
    p: usize,
    x: &Array2<T>,
    d: &Array2<T>,
    grads: &mut ModelParams<T>,
    need_dx: bool,
) -> Array2<T> {
    let (h, w, c) = stage.input;
    let oc = stage.output.2;
    let weights = ArrayView2::from_shape((k * k * c, oc), &params.arrays[p]).unwrap();
    let mut gw = Array2::<T>::zeros((k * k * c, oc));
    let mut gb = Array1::<T>::zeros(oc);
    let mut dx = if need_dx {
        Array2::zeros(x.raw_dim())
    } else {
        Array2::zeros((0, 0))
    };
    for (n, (xi, di)) in x.axis_iter(Axis(0)).zip(d.axis_iter(Axis(0))).enumerate() {
        let cols = im2col(xi, h, w, c, k);
        let dy = ArrayView2::from_shape((h * w, oc), di.as_slice().unwrap()).unwrap();
        general_mat_mul(T::one(), &cols.t(), &dy, T::one(), &mut gw);
        gb += &dy.sum_axis(Axis(0));
        if need_dx {
            let dcols = dy.dot(&weights.t());
            col2im_add(&dcols, dx.row_mut(n).as_slice_mut().unwrap(), h, w, c, k);
        }
    }
    grads.arrays[p] = gw.into_raw_vec_and_offset().0;
    grads.arrays[p + 1] = gb.to_vec();
    dx
}

/// Offset of the maximum in each 2x2 window (first maximum on ties).
fn pool_argmax<T: Scalar>(src: &[T], w: usize, c: usize, oy: usize, ox: usize, ch: usize) -> usize {
    let mut best = ((2 * oy) * w + 2 * ox) * c + ch;
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
        if src[idx] > src[best] {
            best = idx;
        }
    }
    best
}

fn pool_forward<T: Scalar>(stage: &Stage, x: &Array2<T>) -> Array2<T> {
    let (_, w, c) = stage.input;
    let (oh, ow, _) = stage.output;
    let mut out = Array2::zeros((x.nrows(), oh * ow * c));
    for (xi, mut oi) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let src = xi.as_slice().unwrap();
        let dst = oi.as_slice_mut().unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    dst[(oy * ow + ox) * c + ch] = src[pool_argmax(src, w, c, oy, ox, ch)];
                }
            }
        }
    }
    out
}

fn pool_backward<T: Scalar>(stage: &Stage, x: &Array2<T>, d: &Array2<T>) -> Array2<T> {
    let (_, w, c) = stage.input;
    let (oh, ow, _) = stage.output;
    let mut dx = Array2::zeros(x.raw_dim());
    for ((xi, di), mut gi) in x
        .axis_iter(Axis(0))
        .zip(d.axis_iter(Axis(0)))
        .zip(dx.axis_iter_mut(Axis(0)))
    {
        let src = xi.as_slice().unwrap();
        let g = di.as_slice().unwrap();
        let out = gi.as_slice_mut().unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let idx = pool_argmax(src, w, c, oy, ox, ch);
                    out[idx] = out[idx] + g[(oy * ow + ox) * c + ch];
                }
            }
        }
    }
    dx
}

/// Numerically stable row-wise softmax, in place.
pub(super) fn softmax_rows<T: Scalar>(z: &mut Array2<T>) {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        let inv = T::of(1.0 / sum);
        row.mapv_inplace(|v| v * inv);
    }
}

/// Mean negative log-likelihood of the labelled classes, accumulated in f64.
pub(super) fn cross_entropy<T: Scalar>(probs: &Array2<T>, labels: &[u8]) -> f64 {
    let total: f64 = probs
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &y)| {
            let p = row[y as usize].as_f64();
            // underflow to exactly zero is clamped; NaN passes through
            -(if p == 0.0 { f64::MIN_POSITIVE } else { p }).ln()
        })
        .sum();
    total / labels.len() as f64
}
