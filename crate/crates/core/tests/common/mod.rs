//! Independent nested-loop oracles shared by the integration tests.

#![allow(dead_code)]

/// Direct convolution. `w` is `co x (ci / groups) x kh x kw`; `groups` is 1
/// for a full convolution and `c` for a depthwise one.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    (n, c, h, wd): (usize, usize, usize, usize),
    w: &[f64],
    (co, kh, kw): (usize, usize, usize),
    b: &[f64],
    stride: usize,
    dilation: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
    let cig = c / groups;
    let cog = co / groups;
    let mut y = vec![0.0; n * co * oh * ow];
    for i in 0..n {
        for o in 0..co {
            let g = o / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..cig {
                        let ch = g * cig + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((i * c + ch) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((o * cig + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    y[((i * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (y, oh, ow)
}

/// Scatter form of the transposed convolution; `w` is `ci x co x k x k`.
pub fn transposed_oracle(
    x: &[f64],
    (n, c, h, wd): (usize, usize, usize, usize),
    w: &[f64],
    (co, k): (usize, usize),
    b: &[f64],
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - 1) * stride + k;
    let ow = (wd - 1) * stride + k;
    let mut y = vec![0.0; n * co * oh * ow];
    for i in 0..n {
        for o in 0..co {
            for p in 0..oh * ow {
                y[(i * co + o) * oh * ow + p] = b[o];
            }
        }
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x[((i * c + ci) * h + iy) * wd + ix];
                    for o in 0..co {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (yy, xx) = (iy * stride + ky, ix * stride + kx);
                                y[((i * co + o) * oh + yy) * ow + xx] += xv * w[((ci * co + o) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (y, oh, ow)
}

/// Counts of a pair of binary vectors, enumerated pixel by pixel.
pub fn count_oracle(pred: &[u8], gt: &[u8], roi: Option<&[u8]>) -> [u64; 4] {
    let mut c = [0u64; 4]; // tp, tn, fp, fn
    for i in 0..pred.len() {
        if roi.is_some_and(|r| r[i] == 0) {
            continue;
        }
        let k = match (pred[i], gt[i]) {
            (1, 1) => 0,
            (0, 0) => 1,
            (1, 0) => 2,
            _ => 3,
        };
        c[k] += 1;
    }
    c
}
