//! 3x3 convolution and nearest-neighbour upsampling kernels.
//!
//! These back the image trunks in the models layer. Fixed kernel size 3,
//! padding 1, stride 1 or 2. Shapes are validated once by the tape op; the
//! raw kernels here assume valid inputs. Summation order is fixed, so results
//! are bit-reproducible.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub(crate) fn validate(input: &[usize], weight: &[usize], bias: &[usize], stride: usize) -> Result<()> {
    if input.len() != 4 {
        return Err(Error::BadShape {
            op: "conv2d_3x3",
            expected: "input of shape [n, cin, h, w]",
            got: input.to_vec(),
        });
    }
    if weight.len() != 4 || weight[2] != 3 || weight[3] != 3 {
        return Err(Error::BadShape {
            op: "conv2d_3x3",
            expected: "weight of shape [cout, cin, 3, 3]",
            got: weight.to_vec(),
        });
    }
    if weight[1] != input[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_3x3",
            left: input.to_vec(),
            right: weight.to_vec(),
        });
    }
    if bias.len() != 1 || bias[0] != weight[0] {
        return Err(Error::BadShape {
            op: "conv2d_3x3",
            expected: "bias of shape [cout]",
            got: bias.to_vec(),
        });
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Domain {
            op: "conv2d_3x3",
            detail: format!("stride must be 1 or 2, got {stride}"),
        });
    }
    Ok(())
}

pub(crate) fn out_hw(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h - 1) / stride + 1, (w - 1) / stride + 1)
}

/// Valid output range along one axis for kernel offset `d = k - 1`.
#[inline]
fn valid_range(extent: usize, out_extent: usize, stride: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 {
        ((-d) as usize + stride - 1) / stride
    } else {
        0
    };
    let hi_in = extent as isize - 1 - d; // largest input index reachable
    let hi = ((hi_in as usize) / stride).min(out_extent - 1);
    (lo, hi)
}

pub(crate) fn forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, cin, h, w) = dims4(input.shape());
    let cout = weight.shape()[0];
    let (ho, wo) = out_hw(h, w, stride);
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![0.0; n * cout * ho * wo];

    for ni in 0..n {
        for co in 0..cout {
            let obase = (ni * cout + co) * ho * wo;
            out[obase..obase + ho * wo].fill(b[co]);
            for ci in 0..cin {
                let ibase = (ni * cin + ci) * h * w;
                for kh in 0..3usize {
                    let dh = kh as isize - 1;
                    let (oh_lo, oh_hi) = valid_range(h, ho, stride, dh);
                    for kw in 0..3usize {
                        let dw = kw as isize - 1;
                        let wv = wt[((co * cin + ci) * 3 + kh) * 3 + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = valid_range(w, wo, stride, dw);
                        for oh in oh_lo..=oh_hi {
                            let ih = (oh * stride) as isize + dh;
                            let irow = ibase + ih as usize * w;
                            let orow = obase + oh * wo;
                            for ow in ow_lo..=ow_hi {
                                let iw = (ow * stride) as isize + dw;
                                out[orow + ow] += wv * x[irow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![n, cout, ho, wo], out)
}

pub(crate) fn backward_input(dout: &[f64], input_shape: &[usize], weight: &Tensor, stride: usize) -> Vec<f64> {
    let (n, cin, h, w) = dims4(input_shape);
    let cout = weight.shape()[0];
    let (ho, wo) = out_hw(h, w, stride);
    let wt = weight.data();
    let mut din = vec![0.0; n * cin * h * w];

    for ni in 0..n {
        for co in 0..cout {
            let obase = (ni * cout + co) * ho * wo;
            for ci in 0..cin {
                let ibase = (ni * cin + ci) * h * w;
                for kh in 0..3usize {
                    let dh = kh as isize - 1;
                    let (oh_lo, oh_hi) = valid_range(h, ho, stride, dh);
                    for kw in 0..3usize {
                        let dw = kw as isize - 1;
                        let wv = wt[((co * cin + ci) * 3 + kh) * 3 + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = valid_range(w, wo, stride, dw);
                        for oh in oh_lo..=oh_hi {
                            let ih = (oh * stride) as isize + dh;
                            let irow = ibase + ih as usize * w;
                            let orow = obase + oh * wo;
                            for ow in ow_lo..=ow_hi {
                                let iw = (ow * stride) as isize + dw;
                                din[irow + iw as usize] += wv * dout[orow + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

pub(crate) fn backward_weight(dout: &[f64], input: &Tensor, weight_shape: &[usize], stride: usize) -> Vec<f64> {
    let (n, cin, h, w) = dims4(input.shape());
    let cout = weight_shape[0];
    let (ho, wo) = out_hw(h, w, stride);
    let x = input.data();
    let mut dw_acc = vec![0.0; cout * cin * 9];

    for ni in 0..n {
        for co in 0..cout {
            let obase = (ni * cout + co) * ho * wo;
            for ci in 0..cin {
                let ibase = (ni * cin + ci) * h * w;
                for kh in 0..3usize {
                    let dh = kh as isize - 1;
                    let (oh_lo, oh_hi) = valid_range(h, ho, stride, dh);
                    for kw in 0..3usize {
                        let dwo = kw as isize - 1;
                        let (ow_lo, ow_hi) = valid_range(w, wo, stride, dwo);
                        let mut acc = 0.0;
                        for oh in oh_lo..=oh_hi {
                            let ih = (oh * stride) as isize + dh;
                            let irow = ibase + ih as usize * w;
                            let orow = obase + oh * wo;
                            for ow in ow_lo..=ow_hi {
                                let iw = (ow * stride) as isize + dwo;
                                acc += x[irow + iw as usize] * dout[orow + ow];
                            }
                        }
                        dw_acc[((co * cin + ci) * 3 + kh) * 3 + kw] += acc;
                    }
                }
            }
        }
    }
    dw_acc
}

pub(crate) fn backward_bias(dout: &[f64], input_shape: &[usize], weight_shape: &[usize], stride: usize) -> Vec<f64> {
    let (n, _, h, w) = dims4(input_shape);
    let cout = weight_shape[0];
    let (ho, wo) = out_hw(h, w, stride);
    let mut db = vec![0.0; cout];
    for ni in 0..n {
        for co in 0..cout {
            let obase = (ni * cout + co) * ho * wo;
            db[co] += dout[obase..obase + ho * wo].iter().sum::<f64>();
        }
    }
    db
}

pub(crate) fn upsample2_forward(input: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, w) = dims4(input.shape());
    let x = input.data();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * h2 * w2;
        for ih in 0..h {
            for iw in 0..w {
                let v = x[ibase + ih * w + iw];
                let o = obase + (2 * ih) * w2 + 2 * iw;
                out[o] = v;
                out[o + 1] = v;
                out[o + w2] = v;
                out[o + w2 + 1] = v;
            }
        }
    }
    (vec![n, c, h2, w2], out)
}

pub(crate) fn upsample2_backward(dout: &[f64], input_shape: &[usize]) -> Vec<f64> {
    let (n, c, h, w) = dims4(input_shape);
    let (h2, w2) = (2 * h, 2 * w);
    let mut din = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * h2 * w2;
        for ih in 0..h {
            for iw in 0..w {
                let o = obase + (2 * ih) * w2 + 2 * iw;
                din[ibase + ih * w + iw] = dout[o] + dout[o + 1] + dout[o + w2] + dout[o + w2 + 1];
            }
        }
    }
    din
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}
