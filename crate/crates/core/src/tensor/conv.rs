//! im2col + gemm convolution primitives shared by `conv2d` and
//! `conv_transpose2d`. Transposed convolution is the input-gradient dual of
//! convolution, so three routines cover both directions of both ops.

use ndarray::{Array2, Array4, ArrayD, Axis, Ix1, Ix4};

fn as4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("conv: 4-D input required")
}

fn out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfold `(B, Ci, H, W)` into `(B * Ho * Wo, Ci * k * k)` patch rows.
fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (b, ci, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((b * ho * wo, ci * k * k));
    let xs = x.as_slice().expect("im2col: standard layout required");
    let cs = cols.as_slice_mut().unwrap();
    let row_w = ci * k * k;
    for bi in 0..b {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((bi * ho + oh) * wo + ow) * row_w;
                for c in 0..ci {
                    let x_chan = (bi * ci + c) * h * w;
                    let col_base = row + c * k * k;
                    for kh in 0..k {
                        let ih = (oh * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_chan + ih as usize * w;
                        let col_row = col_base + kh * k;
                        for kw in 0..k {
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cs[col_row + kw] = xs[x_row + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add `(B * Ho * Wo, Ci * k * k)` patch rows back into
/// `(B, Ci, H, W)`; the adjoint of [`im2col`].
fn col2im(
    cols: &Array2<f64>,
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let mut x = Array4::<f64>::zeros((b, ci, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("col2im: standard layout required");
    let row_w = ci * k * k;
    for bi in 0..b {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((bi * ho + oh) * wo + ow) * row_w;
                for c in 0..ci {
                    let x_chan = (bi * ci + c) * h * w;
                    let col_base = row + c * k * k;
                    for kh in 0..k {
                        let ih = (oh * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_chan + ih as usize * w;
                        let col_row = col_base + kh * k;
                        for kw in 0..k {
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            xs[x_row + iw as usize] += cs[col_row + kw];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Materialize `(B, Co, Ho, Wo)` as `(B * Ho * Wo, Co)` rows.
fn to_rows(y: &ndarray::ArrayView4<'_, f64>) -> Array2<f64> {
    let (b, co, ho, wo) = y.dim();
    let perm = y.view().permuted_axes([0, 2, 3, 1]);
    let flat: Vec<f64> = perm.iter().cloned().collect();
    Array2::from_shape_vec((b * ho * wo, co), flat).unwrap()
}

/// Inverse of [`to_rows`].
fn from_rows(rows: &Array2<f64>, b: usize, co: usize, ho: usize, wo: usize) -> Array4<f64> {
    let mut y = Array4::<f64>::zeros((b, co, ho, wo));
    let ys = y.as_slice_mut().unwrap();
    let rs = rows.as_slice().unwrap();
    for bi in 0..b {
        for oh in 0..ho {
            for ow in 0..wo {
                let row = ((bi * ho + oh) * wo + ow) * co;
                for c in 0..co {
                    ys[((bi * co + c) * ho + oh) * wo + ow] = rs[row + c];
                }
            }
        }
    }
    y
}

/// Weight `(Co, Ci, k, k)` as a `(Ci * k * k, Co)` matrix.
fn weight_mat(w: &ndarray::ArrayView4<'_, f64>) -> Array2<f64> {
    let (co, ci, k, _) = w.dim();
    let flat: Vec<f64> = w.iter().cloned().collect();
    let as_rows = Array2::from_shape_vec((co, ci * k * k), flat).unwrap();
    as_rows.t().to_owned()
}

/// Forward convolution: `x (B, Ci, H, W) * w (Co, Ci, k, k) -> (B, Co, Ho, Wo)`.
pub fn conv2d_fwd(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let xv = as4(x);
    let wv = as4(w);
    let (b, ci, h, win) = xv.dim();
    let (co, wci, k, _) = wv.dim();
    assert_eq!(ci, wci, "conv2d: channel mismatch");
    let ho = out_len(h, k, stride, pad);
    let wo = out_len(win, k, stride, pad);
    let cols = im2col(&xv, k, stride, pad, ho, wo);
    let y_rows = cols.dot(&weight_mat(&wv));
    from_rows(&y_rows, b, co, ho, wo).into_dyn()
}

/// Gradient of `conv2d_fwd` w.r.t. its input; also the forward pass of
/// transposed convolution with weight layout `(Ci_out, Co_out, k, k)` read as
/// the dual conv's `(Co, Ci, k, k)`.
pub fn conv2d_dx(
    g: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    h_in: usize,
    w_in: usize,
) -> ArrayD<f64> {
    let gv = as4(g);
    let wv = as4(w);
    let (b, co, ho, wo) = gv.dim();
    let (wco, ci, k, _) = wv.dim();
    assert_eq!(co, wco, "conv2d_dx: channel mismatch");
    let g_rows = to_rows(&gv);
    let dcols = g_rows.dot(&weight_mat(&wv).t());
    col2im(&dcols, b, ci, h_in, w_in, k, stride, pad, ho, wo).into_dyn()
}

/// Gradient of `conv2d_fwd` w.r.t. its weight.
pub fn conv2d_dw(x: &ArrayD<f64>, g: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let xv = as4(x);
    let gv = as4(g);
    let (_b, ci, h, _w) = xv.dim();
    let (_, co, ho, wo) = gv.dim();
    let k = kernel_from_dims(h, ho, stride, pad);
    let cols = im2col(&xv, k, stride, pad, ho, wo);
    let g_rows = to_rows(&gv);
    let dw_mat = cols.t().dot(&g_rows); // (Ci*k*k, Co)
    let mut dw = Array4::<f64>::zeros((co, ci, k, k));
    for c_o in 0..co {
        for c_i in 0..ci {
            for kh in 0..k {
                for kw in 0..k {
                    dw[(c_o, c_i, kh, kw)] = dw_mat[((c_i * k + kh) * k + kw, c_o)];
                }
            }
        }
    }
    dw.into_dyn()
}

fn kernel_from_dims(h_in: usize, h_out: usize, stride: usize, pad: usize) -> usize {
    // h_out = (h_in + 2 pad - k) / stride + 1, solved for k.
    h_in + 2 * pad - (h_out - 1) * stride
}

/// Add a per-channel bias `(Co,)` to `(B, Co, H, W)` in place.
pub fn add_channel_bias(y: &mut ArrayD<f64>, bias: &ArrayD<f64>) {
    let bv = bias.view().into_dimensionality::<Ix1>().expect("bias: 1-D");
    let co = y.shape()[1];
    assert_eq!(bv.len(), co, "bias: channel mismatch");
    for (c, mut chan) in y.axis_iter_mut(Axis(1)).enumerate() {
        chan += bv[c];
    }
}

/// Bias gradient: sum `(B, Co, H, W)` over batch and space.
pub fn channel_bias_grad(g: &ArrayD<f64>) -> ArrayD<f64> {
    let gv = as4(g);
    let (_, co, _, _) = gv.dim();
    let mut out = ndarray::Array1::<f64>::zeros(co);
    for (c, chan) in gv.axis_iter(Axis(1)).enumerate() {
        out[c] = chan.sum();
    }
    out.into_dyn()
}
