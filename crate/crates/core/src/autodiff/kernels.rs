//! Dense array kernels shared by the reverse-mode tape and the no-tape
//! evaluation path: 3D convolution via per-slice im2col + matmul, transposed
//! convolution as the exact adjoint, ceil-mode average pooling,
//! nearest-neighbor upsampling, and scalar nonlinearities.
//!
//! Volumes are `(channels, d1, d2, d3)` arrays; convolution weights are kept
//! as `(out_channels, in_channels·k³)` matrices so the inner loop is a single
//! matrix product. Columns are gathered one output-depth slice at a time to
//! bound scratch memory at full scale.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4};

/// SELU scale λ (Klambauer et al. fixed point).
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SELU negative-branch coefficient α.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus log(1 + eˣ).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// SELU activation λ·(x for x > 0, α(eˣ−1) otherwise).
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

/// Derivative of [`selu`] with respect to its input.
pub fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

/// Output length of a 1D convolution axis: ⌊(s + 2p − k)/stride⌋ + 1.
pub fn conv_out_len(s: usize, k: usize, stride: usize, pad: usize) -> usize {
    debug_assert!(s + 2 * pad >= k, "axis {s} too small for kernel {k}");
    (s + 2 * pad - k) / stride + 1
}

/// Spatial output shape of a 3D convolution.
pub fn conv_out_shape(sp: [usize; 3], k: usize, stride: usize, pad: usize) -> [usize; 3] {
    [
        conv_out_len(sp[0], k, stride, pad),
        conv_out_len(sp[1], k, stride, pad),
        conv_out_len(sp[2], k, stride, pad),
    ]
}

/// Gather the im2col matrix (Ci·k³ rows, o2·o3 columns) for output-depth
/// slice `q1`; out-of-bounds taps read as zero padding.
fn im2col_slice(
    x: &ArrayView4<f64>,
    q1: usize,
    k: usize,
    stride: usize,
    pad: usize,
    o2: usize,
    o3: usize,
) -> Array2<f64> {
    let (ci, s1, s2, s3) = x.dim();
    let mut cols = Array2::zeros((ci * k * k * k, o2 * o3));
    for c in 0..ci {
        for k1 in 0..k {
            let i1 = (q1 * stride + k1) as isize - pad as isize;
            if i1 < 0 || i1 >= s1 as isize {
                continue;
            }
            for k2 in 0..k {
                for k3 in 0..k {
                    let row = ((c * k + k1) * k + k2) * k + k3;
                    for q2 in 0..o2 {
                        let i2 = (q2 * stride + k2) as isize - pad as isize;
                        if i2 < 0 || i2 >= s2 as isize {
                            continue;
                        }
                        for q3 in 0..o3 {
                            let i3 = (q3 * stride + k3) as isize - pad as isize;
                            if i3 < 0 || i3 >= s3 as isize {
                                continue;
                            }
                            cols[(row, q2 * o3 + q3)] =
                                x[(c, i1 as usize, i2 as usize, i3 as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the adjoint of [`im2col_slice`] back into `gx`.
fn col2im_slice_add(
    gx: &mut Array4<f64>,
    cols: &Array2<f64>,
    q1: usize,
    k: usize,
    stride: usize,
    pad: usize,
    o2: usize,
    o3: usize,
) {
    let (ci, s1, s2, s3) = gx.dim();
    debug_assert_eq!(cols.nrows(), ci * k * k * k);
    for c in 0..ci {
        for k1 in 0..k {
            let i1 = (q1 * stride + k1) as isize - pad as isize;
            if i1 < 0 || i1 >= s1 as isize {
                continue;
            }
            for k2 in 0..k {
                for k3 in 0..k {
                    let row = ((c * k + k1) * k + k2) * k + k3;
                    for q2 in 0..o2 {
                        let i2 = (q2 * stride + k2) as isize - pad as isize;
                        if i2 < 0 || i2 >= s2 as isize {
                            continue;
                        }
                        for q3 in 0..o3 {
                            let i3 = (q3 * stride + k3) as isize - pad as isize;
                            if i3 < 0 || i3 >= s3 as isize {
                                continue;
                            }
                            gx[(c, i1 as usize, i2 as usize, i3 as usize)] +=
                                cols[(row, q2 * o3 + q3)];
                        }
                    }
                }
            }
        }
    }
}

/// Extract `a[:, q1, :, :]` as a dense (channels, o2·o3) matrix.
fn depth_slice(a: &ArrayView4<f64>, q1: usize) -> Array2<f64> {
    let (c, _, o2, o3) = a.dim();
    let owned = a.slice(s![.., q1, .., ..]).to_owned();
    owned
        .into_shape_with_order((c, o2 * o3))
        .expect("slice reshape")
}

/// 3D convolution forward: `x` (Ci, d1..d3), `wmat` (Co, Ci·k³), cubic kernel
/// `k`, isotropic `stride`/`pad`.
pub fn conv3d_forward(
    x: ArrayView4<f64>,
    wmat: ArrayView2<f64>,
    bias: Option<ArrayView1<f64>>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (ci, s1, s2, s3) = x.dim();
    let co = wmat.nrows();
    assert_eq!(wmat.ncols(), ci * k * k * k, "weight/input channel mismatch");
    let [o1, o2, o3] = conv_out_shape([s1, s2, s3], k, stride, pad);
    let mut y = Array4::zeros((co, o1, o2, o3));
    for q1 in 0..o1 {
        let cols = im2col_slice(&x, q1, k, stride, pad, o2, o3);
        let prod = wmat.dot(&cols);
        for c in 0..co {
            for q2 in 0..o2 {
                for q3 in 0..o3 {
                    y[(c, q1, q2, q3)] = prod[(c, q2 * o3 + q3)];
                }
            }
        }
    }
    if let Some(b) = bias {
        for c in 0..co {
            y.slice_mut(s![c, .., .., ..]).mapv_inplace(|v| v + b[c]);
        }
    }
    y
}

/// Gradient of [`conv3d_forward`] with respect to its input.
pub fn conv3d_backward_input(
    gy: ArrayView4<f64>,
    wmat: ArrayView2<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    in_dim: (usize, [usize; 3]),
) -> Array4<f64> {
    let (in_ch, [s1, s2, s3]) = in_dim;
    let (_, o1, o2, o3) = gy.dim();
    debug_assert_eq!(conv_out_shape([s1, s2, s3], k, stride, pad), [o1, o2, o3]);
    let wt = wmat.t();
    let mut gx = Array4::zeros((in_ch, s1, s2, s3));
    for q1 in 0..o1 {
        let gys = depth_slice(&gy, q1);
        let cols_g = wt.dot(&gys);
        col2im_slice_add(&mut gx, &cols_g, q1, k, stride, pad, o2, o3);
    }
    gx
}

/// Gradient of [`conv3d_forward`] with respect to the weight matrix.
pub fn conv3d_backward_weights(
    x: ArrayView4<f64>,
    gy: ArrayView4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (ci, ..) = x.dim();
    let (co, o1, o2, o3) = gy.dim();
    let mut gw = Array2::zeros((co, ci * k * k * k));
    for q1 in 0..o1 {
        let cols = im2col_slice(&x, q1, k, stride, pad, o2, o3);
        let gys = depth_slice(&gy, q1);
        gw += &gys.dot(&cols.t());
    }
    gw
}

/// Per-channel sum of an output gradient — the bias gradient of both
/// convolution directions.
pub fn channel_sums(gy: ArrayView4<f64>) -> Array1<f64> {
    let (c, ..) = gy.dim();
    Array1::from_iter((0..c).map(|ch| gy.slice(s![ch, .., .., ..]).sum()))
}

/// Transposed 3D convolution forward — the exact adjoint of the convolution
/// that maps `out_sp` down to `x`'s spatial shape. Weights are
/// (Cin, Cout·k³) in convolution orientation (conv out-channels = Cin here).
/// `out_sp` must satisfy the conv shape relation; with k=3, s=2, p=1 that
/// admits both 2s−1 and 2s per axis (the output-padding choice).
pub fn convt3d_forward(
    x: ArrayView4<f64>,
    wmat: ArrayView2<f64>,
    bias: Option<ArrayView1<f64>>,
    k: usize,
    stride: usize,
    pad: usize,
    out_sp: [usize; 3],
) -> Array4<f64> {
    let (ci, s1, s2, s3) = x.dim();
    assert_eq!(wmat.nrows(), ci, "transposed-conv weight rows != in channels");
    let co = wmat.ncols() / (k * k * k);
    assert_eq!(
        conv_out_shape(out_sp, k, stride, pad),
        [s1, s2, s3],
        "requested output shape inconsistent with stride/kernel"
    );
    let mut y = conv3d_backward_input(x, wmat, k, stride, pad, (co, out_sp));
    if let Some(b) = bias {
        for c in 0..co {
            y.slice_mut(s![c, .., .., ..]).mapv_inplace(|v| v + b[c]);
        }
    }
    y
}

/// Gradient of [`convt3d_forward`] with respect to its input.
pub fn convt3d_backward_input(
    gy: ArrayView4<f64>,
    wmat: ArrayView2<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    conv3d_forward(gy, wmat, None, k, stride, pad)
}

/// Gradient of [`convt3d_forward`] with respect to its weight matrix.
pub fn convt3d_backward_weights(
    x: ArrayView4<f64>,
    gy: ArrayView4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    // The roles flip relative to conv3d_backward_weights: the (larger)
    // output gradient plays the conv input, the tape input plays the conv
    // output gradient.
    conv3d_backward_weights(gy, x, k, stride, pad)
}

/// Ceil-mode average pooling output shape (kernel 2, stride 2).
pub fn pool_out_shape(sp: [usize; 3]) -> [usize; 3] {
    [sp[0].div_ceil(2), sp[1].div_ceil(2), sp[2].div_ceil(2)]
}

/// Average pooling, kernel 2, stride 2, ceil mode; border windows average
/// only the in-bounds elements.
pub fn avgpool2_ceil_forward(x: ArrayView4<f64>) -> Array4<f64> {
    let (c, s1, s2, s3) = x.dim();
    let [o1, o2, o3] = pool_out_shape([s1, s2, s3]);
    let mut y = Array4::zeros((c, o1, o2, o3));
    for ch in 0..c {
        for q1 in 0..o1 {
            let e1 = (2 * q1 + 2).min(s1);
            for q2 in 0..o2 {
                let e2 = (2 * q2 + 2).min(s2);
                for q3 in 0..o3 {
                    let e3 = (2 * q3 + 2).min(s3);
                    let mut sum = 0.0;
                    for i1 in 2 * q1..e1 {
                        for i2 in 2 * q2..e2 {
                            for i3 in 2 * q3..e3 {
                                sum += x[(ch, i1, i2, i3)];
                            }
                        }
                    }
                    let count = (e1 - 2 * q1) * (e2 - 2 * q2) * (e3 - 2 * q3);
                    y[(ch, q1, q2, q3)] = sum / count as f64;
                }
            }
        }
    }
    y
}

/// Gradient of [`avgpool2_ceil_forward`] with respect to its input.
pub fn avgpool2_ceil_backward(gy: ArrayView4<f64>, in_sp: [usize; 3]) -> Array4<f64> {
    let (c, o1, o2, o3) = gy.dim();
    let [s1, s2, s3] = in_sp;
    debug_assert_eq!(pool_out_shape(in_sp), [o1, o2, o3]);
    let mut gx = Array4::zeros((c, s1, s2, s3));
    for ch in 0..c {
        for q1 in 0..o1 {
            let e1 = (2 * q1 + 2).min(s1);
            for q2 in 0..o2 {
                let e2 = (2 * q2 + 2).min(s2);
                for q3 in 0..o3 {
                    let e3 = (2 * q3 + 2).min(s3);
                    let count = (e1 - 2 * q1) * (e2 - 2 * q2) * (e3 - 2 * q3);
                    let g = gy[(ch, q1, q2, q3)] / count as f64;
                    for i1 in 2 * q1..e1 {
                        for i2 in 2 * q2..e2 {
                            for i3 in 2 * q3..e3 {
                                gx[(ch, i1, i2, i3)] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor upsampling to `out_sp` with index map out[i] = in[i/2];
/// valid for any target up to twice the source per axis.
pub fn upsample_nearest_forward(x: ArrayView4<f64>, out_sp: [usize; 3]) -> Array4<f64> {
    let (c, s1, s2, s3) = x.dim();
    let [t1, t2, t3] = out_sp;
    assert!(
        t1 <= 2 * s1 && t2 <= 2 * s2 && t3 <= 2 * s3 && t1 >= s1 && t2 >= s2 && t3 >= s3,
        "upsample target {out_sp:?} outside [s, 2s] of {:?}",
        (s1, s2, s3)
    );
    let mut y = Array4::zeros((c, t1, t2, t3));
    for ch in 0..c {
        for i1 in 0..t1 {
            for i2 in 0..t2 {
                for i3 in 0..t3 {
                    y[(ch, i1, i2, i3)] = x[(ch, i1 / 2, i2 / 2, i3 / 2)];
                }
            }
        }
    }
    y
}

/// Gradient of [`upsample_nearest_forward`] with respect to its input.
pub fn upsample_nearest_backward(gy: ArrayView4<f64>, in_sp: [usize; 3]) -> Array4<f64> {
    let (c, t1, t2, t3) = gy.dim();
    let mut gx = Array4::zeros((c, in_sp[0], in_sp[1], in_sp[2]));
    for ch in 0..c {
        for i1 in 0..t1 {
            for i2 in 0..t2 {
                for i3 in 0..t3 {
                    gx[(ch, i1 / 2, i2 / 2, i3 / 2)] += gy[(ch, i1, i2, i3)];
                }
            }
        }
    }
    gx
}
