//! Direct stride-1 valid convolution with exact operation counting.
//!
//! This is the correctness oracle for the dictionary and CP paths. It is a
//! cross-correlation (no kernel flip):
//!
//! `out[co, oy, ox, n] = Σ_{ci, j, k} x[ci, oy + j, ox + k, n] · w[ci, j, k, co]`

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Exact counts of the arithmetic an algorithm actually executed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub multiplies: u64,
    pub additions: u64,
}

impl Add for OpCount {
    type Output = OpCount;

    fn add(self, rhs: OpCount) -> OpCount {
        OpCount {
            multiplies: self.multiplies + rhs.multiplies,
            additions: self.additions + rhs.additions,
        }
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: OpCount) {
        *self = *self + rhs;
    }
}

/// Output dims of a valid convolution of activations `x` with kernel `w`.
pub fn output_dims(x: Dims, w: Dims) -> Result<Dims> {
    let [c, h, wd, n] = x;
    let [k1, k2, k3, k4] = w;
    if c != k1 {
        return Err(Error::DimMismatch(format!(
            "input has {c} channels, kernel expects {k1}"
        )));
    }
    if h < k2 || wd < k3 {
        return Err(Error::DimMismatch(format!(
            "kernel window {k2}x{k3} larger than input {h}x{wd}"
        )));
    }
    Ok([k4, h - k2 + 1, wd - k3 + 1, n])
}

pub fn conv2d_direct(x: &Tensor4, w: &Tensor4) -> Result<(Tensor4, OpCount)> {
    let out_dims = output_dims(x.dims(), w.dims())?;
    let [_, h, wd, n_batch] = x.dims();
    let [k1, k2, k3, k4] = w.dims();
    let [_, out_h, out_w, _] = out_dims;
    let xs = x.data();
    let ws = w.data();

    let mut out = vec![0.0f32; out_dims.iter().product()];
    let mut ops = OpCount::default();
    for co in 0..k4 {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for n in 0..n_batch {
                    let mut acc = 0.0f64;
                    let mut terms = 0u64;
                    for ci in 0..k1 {
                        for j in 0..k2 {
                            let x_row = ((ci * h + oy + j) * wd + ox) * n_batch + n;
                            let w_row = (ci * k2 + j) * k3 * k4 + co;
                            for k in 0..k3 {
                                let prod = xs[x_row + k * n_batch] as f64 * ws[w_row + k * k4] as f64;
                                ops.multiplies += 1;
                                if terms == 0 {
                                    acc = prod;
                                } else {
                                    acc += prod;
                                    ops.additions += 1;
                                }
                                terms += 1;
                            }
                        }
                    }
                    out[((co * out_h + oy) * out_w + ox) * n_batch + n] = acc as f32;
                }
            }
        }
    }

    debug_assert_eq!(
        ops.multiplies,
        (out_h * out_w * n_batch * k1 * k2 * k3 * k4) as u64
    );
    debug_assert_eq!(
        ops.additions,
        ops.multiplies - (out_h * out_w * n_batch * k4) as u64
    );
    Ok((Tensor4::new(out_dims, out)?, ops))
}
