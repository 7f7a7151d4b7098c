//! Convolution through a centroid dictionary.
//!
//! Stage 1 takes the inner product of every input channel block, at every
//! spatial position, with every centroid. Stage 2 builds each output value by
//! summing table entries selected by the order tensor, so it needs additions
//! only. Multiplies therefore scale with `|D|` instead of with `k4 · k2 · k3`.

use serde::{Deserialize, Serialize};

use crate::conv::{output_dims, OpCount};
use crate::error::{Error, Result};
use crate::quant::{block_count, Dictionary, IndexTensor, QuantizedKernel};
use crate::tensor::Tensor4;

/// Inner products of input channel blocks with every centroid, laid out `[B, H, W, |D|]`.
///
/// Construction is counted as MACs: `ops.multiplies` holds one per fused
/// multiply-add and `ops.additions` stays zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DotTable {
    dims: [usize; 4],
    values: Vec<f32>,
    ops: OpCount,
}

impl DotTable {
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn ops(&self) -> OpCount {
        self.ops
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize, d: usize) -> f32 {
        let [_, h, w, nd] = self.dims;
        self.values[((b * h + y) * w + x) * nd + d]
    }

    /// Intermediate storage, in values.
    pub fn memory_values(&self) -> usize {
        self.values.len()
    }
}

/// Stage 1 for a single-image input `[C, H, W, 1]`.
pub fn precompute_dot_table(x: &Tensor4, dict: &Dictionary) -> Result<DotTable> {
    if x.dims()[3] != 1 {
        return Err(Error::DimMismatch(format!(
            "dot table takes one image, input batch is {}",
            x.dims()[3]
        )));
    }
    Ok(dot_table_for(x, 0, dict))
}

fn dot_table_for(x: &Tensor4, n: usize, dict: &Dictionary) -> DotTable {
    let [c, h, w, n_batch] = x.dims();
    let m = dict.block_len();
    let nb = block_count(c, m);
    let nd = dict.len();
    let xs = x.data();
    let mut values = vec![0.0f32; nb * h * w * nd];
    let mut multiplies = 0u64;
    let mut block = vec![0.0f64; m];
    for b in 0..nb {
        for y in 0..h {
            for xx in 0..w {
                for (mi, slot) in block.iter_mut().enumerate() {
                    let ch = b * m + mi;
                    *slot = if ch < c {
                        xs[((ch * h + y) * w + xx) * n_batch + n] as f64
                    } else {
                        0.0
                    };
                }
                let row = ((b * h + y) * w + xx) * nd;
                for d in 0..nd {
                    let mut acc = 0.0f64;
                    for (&v, &cv) in block.iter().zip(dict.centroid(d)) {
                        acc += v * cv as f64;
                        multiplies += 1;
                    }
                    values[row + d] = acc as f32;
                }
            }
        }
    }
    debug_assert_eq!(multiplies, (h * w * nb * m * nd) as u64);
    DotTable {
        dims: [nb, h, w, nd],
        values,
        ops: OpCount {
            multiplies,
            additions: 0,
        },
    }
}

/// Stage 2: gathers and sums table entries per the order tensor. Returns
/// `[k4, outH, outW, 1]` and the additions performed.
pub fn accumulate(table: &DotTable, order: &IndexTensor) -> Result<(Tensor4, OpCount)> {
    let mut out = Vec::new();
    let (dims, ops) = accumulate_into(table, order, &mut out)?;
    Ok((Tensor4::new(dims, out)?, ops))
}

fn accumulate_into(table: &DotTable, order: &IndexTensor, out: &mut Vec<f32>) -> Result<([usize; 4], OpCount)> {
    let [nb, h, w, nd] = table.dims;
    let [ob, k2, k3, k4] = order.dims();
    if ob != nb {
        return Err(Error::DimMismatch(format!(
            "table has {nb} channel blocks, order tensor has {ob}"
        )));
    }
    if h < k2 || w < k3 {
        return Err(Error::DimMismatch(format!(
            "kernel window {k2}x{k3} larger than input {h}x{w}"
        )));
    }
    if let Some(&bad) = order.entries().iter().find(|&&e| e as usize >= nd) {
        return Err(Error::DimMismatch(format!(
            "order index {bad} exceeds table of {nd} centroids"
        )));
    }
    let (out_h, out_w) = (h - k2 + 1, w - k3 + 1);
    out.clear();
    out.reserve(k4 * out_h * out_w);
    let mut ops = OpCount::default();
    for co in 0..k4 {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0f64;
                let mut first = true;
                for b in 0..nb {
                    for j in 0..k2 {
                        for k in 0..k3 {
                            let d = order.get(b, j, k, co) as usize;
                            let v = table.get(b, oy + j, ox + k, d) as f64;
                            if first {
                                acc = v;
                                first = false;
                            } else {
                                acc += v;
                                ops.additions += 1;
                            }
                        }
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    debug_assert_eq!(ops.multiplies, 0);
    debug_assert_eq!(
        ops.additions,
        (k4 * out_h * out_w * (nb * k2 * k3 - 1)) as u64
    );
    Ok(([k4, out_h, out_w, 1], ops))
}

/// Full dictionary convolution; batch elements are processed one at a time.
pub fn conv2d_dict(x: &Tensor4, q: &QuantizedKernel) -> Result<(Tensor4, OpCount)> {
    let out_dims = output_dims(x.dims(), q.kernel_dims())?;
    let [k4, out_h, out_w, n_batch] = out_dims;
    let mut out = vec![0.0f32; k4 * out_h * out_w * n_batch];
    let mut ops = OpCount::default();
    let mut single = Vec::new();
    for n in 0..n_batch {
        let table = dot_table_for(x, n, q.dictionary());
        let (_, stage2) = accumulate_into(&table, q.order(), &mut single)?;
        ops += table.ops() + stage2;
        for (i, &v) in single.iter().enumerate() {
            out[i * n_batch + n] = v;
        }
    }
    Ok((Tensor4::new(out_dims, out)?, ops))
}
