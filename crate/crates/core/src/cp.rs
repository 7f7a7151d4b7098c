//! Rank-R canonical polyadic (CP) decomposition of a 4-D kernel, fitted by
//! alternating least squares, and the factorized convolution it enables.
//!
//! `T[i, j, k, l] ≈ Σ_r A1[i, r] · A2[j, r] · A3[k, r] · A4[l, r]`
//!
//! Factor matrices are `[k_n, R]` row-major. After fitting, the columns of the
//! first three factors have unit norm and the scale lives in the fourth.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::conv::{output_dims, OpCount};
use crate::error::{Error, Result};
use crate::tensor::{check_u32_dims, frobenius_norm, header_count, Dims, Tensor4};

pub const CPF_MAGIC: [u8; 4] = *b"CPF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpFactors {
    dims: Dims,
    rank: usize,
    factors: [Vec<f32>; 4],
}

impl CpFactors {
    pub fn new(dims: Dims, rank: usize, factors: [Vec<f32>; 4]) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("CP rank must be >= 1".into()));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid dims {dims:?}")));
        }
        for (n, f) in factors.iter().enumerate() {
            if f.len() != dims[n] * rank {
                return Err(Error::DimMismatch(format!(
                    "factor {n} has {} entries, expected {}x{rank}",
                    f.len(),
                    dims[n]
                )));
            }
            if let Some(pos) = f.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(pos));
            }
        }
        Ok(Self { dims, rank, factors })
    }

    pub fn zeros(dims: Dims, rank: usize) -> Result<Self> {
        Self::new(dims, rank, dims.map(|d| vec![0.0; d * rank]))
    }

    /// Seeded factors with entries uniform in `[-1, 1)`.
    pub fn random(dims: Dims, rank: usize, seed: u64) -> Result<Self> {
        Self::random_with(dims, rank, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn random_with(dims: Dims, rank: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::new(
            dims,
            rank,
            dims.map(|d| (0..d * rank).map(|_| rng.gen_range(-1.0f32..1.0)).collect()),
        )
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn factor(&self, mode: usize) -> &[f32] {
        &self.factors[mode]
    }

    #[inline]
    pub fn get(&self, mode: usize, i: usize, r: usize) -> f32 {
        self.factors[mode][i * self.rank + r]
    }

    /// Appends one component for warm-starting a rank-`R+1` fit. The new
    /// mode-1 column is zero so the padded model equals the current one; the
    /// other modes get seeded random columns.
    pub fn pad_rank(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.rank;
        let factors = std::array::from_fn(|n| {
            let mut out = Vec::with_capacity(self.dims[n] * (r + 1));
            for i in 0..self.dims[n] {
                out.extend_from_slice(&self.factors[n][i * r..(i + 1) * r]);
                out.push(if n == 0 { 0.0 } else { rng.gen_range(-1.0f32..1.0) });
            }
            out
        });
        Self {
            dims: self.dims,
            rank: r + 1,
            factors,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlsOptions {
    pub seed: u64,
    pub max_iters: usize,
    pub rel_fit_tol: f64,
    /// Eigenvalues of the Gram-Hadamard matrix below `pinv_tol · λ_max` are
    /// treated as zero.
    pub pinv_tol: f64,
    /// Independent random starts; the lowest final fit wins. The first start
    /// is `CpFactors::random(dims, rank, seed)`.
    pub restarts: usize,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iters: 500,
            rel_fit_tol: 1e-6,
            pinv_tol: 1e-10,
            restarts: 4,
        }
    }
}

impl AlsOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpFit {
    pub factors: CpFactors,
    /// `‖W − CP‖_F / ‖W‖_F` after each sweep.
    pub fit_history: Vec<f64>,
}

impl CpFit {
    pub fn final_fit(&self) -> f64 {
        *self.fit_history.last().expect("at least one sweep")
    }
}

pub fn cp_als(w: &Tensor4, rank: usize, opts: &AlsOptions) -> Result<CpFit> {
    if rank == 0 {
        return Err(Error::InvalidArgument("CP rank must be >= 1".into()));
    }
    if opts.restarts == 0 {
        return Err(Error::InvalidArgument("ALS needs restarts >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<CpFit> = None;
    for _ in 0..opts.restarts {
        let init = CpFactors::random_with(w.dims(), rank, &mut rng)?;
        let fit = cp_als_from(w, &init, opts)?;
        if best.as_ref().is_none_or(|b| fit.final_fit() < b.final_fit()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// ALS starting from explicit factors.
pub fn cp_als_from(w: &Tensor4, init: &CpFactors, opts: &AlsOptions) -> Result<CpFit> {
    if opts.max_iters == 0 {
        return Err(Error::InvalidArgument("ALS needs max_iters >= 1".into()));
    }
    if init.dims != w.dims() {
        return Err(Error::DimMismatch(format!(
            "factors for {:?}, tensor is {:?}",
            init.dims,
            w.dims()
        )));
    }
    let norm = frobenius_norm(w);
    if norm == 0.0 {
        return Err(Error::InvalidArgument("cannot fit CP model to an all-zero tensor".into()));
    }

    let dims = w.dims();
    let rank = init.rank;
    let data: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let mut factors: [Vec<f64>; 4] = std::array::from_fn(|n| init.factors[n].iter().map(|&v| v as f64).collect());
    let mut grams: [Vec<f64>; 4] = std::array::from_fn(|n| gram(&factors[n], dims[n], rank));

    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    let mut residual = residual_norm(&data, dims, &factors, rank);
    for _ in 0..opts.max_iters {
        for mode in 0..4 {
            let mut v = vec![1.0f64; rank * rank];
            for (other, g) in grams.iter().enumerate() {
                if other != mode {
                    v.iter_mut().zip(g).for_each(|(a, b)| *a *= b);
                }
            }
            let rhs = mttkrp(&data, dims, &factors, rank, mode);
            let solved = solve_rows(&rhs, dims[mode], &v, rank, opts.pinv_tol);
            // With a near-singular V the truncated solve can land above the
            // current factor's residual; keep the old factor in that case.
            let old = std::mem::replace(&mut factors[mode], solved);
            let candidate = residual_norm(&data, dims, &factors, rank);
            if candidate <= residual {
                residual = candidate;
            } else {
                factors[mode] = old;
            }

            if mode < 3 {
                for r in 0..rank {
                    let scale = (0..dims[mode])
                        .map(|i| factors[mode][i * rank + r].powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if scale > 0.0 {
                        (0..dims[mode]).for_each(|i| factors[mode][i * rank + r] /= scale);
                        (0..dims[3]).for_each(|i| factors[3][i * rank + r] *= scale);
                    }
                }
                grams[3] = gram(&factors[3], dims[3], rank);
            }
            grams[mode] = gram(&factors[mode], dims[mode], rank);
        }

        let fit = residual_norm(&data, dims, &factors, rank) / norm;
        debug_assert!(fit <= prev + 1e-9, "ALS fit increased: {prev} -> {fit}");
        history.push(fit);
        if fit == 0.0 || (prev.is_finite() && prev - fit < opts.rel_fit_tol * prev) {
            break;
        }
        prev = fit;
    }

    let factors = CpFactors::new(dims, rank, factors.map(|f| f.into_iter().map(|v| v as f32).collect()))?;
    Ok(CpFit {
        factors,
        fit_history: history,
    })
}

fn gram(a: &[f64], rows: usize, rank: usize) -> Vec<f64> {
    let mut g = vec![0.0; rank * rank];
    for i in 0..rows {
        let row = &a[i * rank..(i + 1) * rank];
        for p in 0..rank {
            for q in 0..rank {
                g[p * rank + q] += row[p] * row[q];
            }
        }
    }
    g
}

/// Matricized tensor times the Khatri-Rao product of every factor except `mode`.
fn mttkrp(data: &[f64], dims: Dims, factors: &[Vec<f64>; 4], rank: usize, mode: usize) -> Vec<f64> {
    let mut out = vec![0.0; dims[mode] * rank];
    let mut prod = vec![0.0; rank];
    let mut idx = 0;
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                for i3 in 0..dims[3] {
                    let v = data[idx];
                    idx += 1;
                    if v == 0.0 {
                        continue;
                    }
                    let at = [i0, i1, i2, i3];
                    prod.fill(v);
                    for (n, f) in factors.iter().enumerate() {
                        if n != mode {
                            let row = &f[at[n] * rank..(at[n] + 1) * rank];
                            prod.iter_mut().zip(row).for_each(|(p, a)| *p *= a);
                        }
                    }
                    let dst = &mut out[at[mode] * rank..(at[mode] + 1) * rank];
                    dst.iter_mut().zip(&prod).for_each(|(d, p)| *d += p);
                }
            }
        }
    }
    out
}

/// Solves `X · V = rhs` row by row with a truncated pseudo-inverse of the
/// symmetric positive semidefinite `V`, built from its eigendecomposition.
/// Eigenvalues below `tol · λ_max` are treated as zero.
fn solve_rows(rhs: &[f64], rows: usize, v: &[f64], rank: usize, tol: f64) -> Vec<f64> {
    let pinv = sym_pinv(DMatrix::from_row_slice(rank, rank, v), tol);
    let x = DMatrix::from_row_slice(rows, rank, rhs) * pinv;
    let mut out = Vec::with_capacity(rows * rank);
    for i in 0..rows {
        for r in 0..rank {
            out.push(x[(i, r)]);
        }
    }
    out
}

fn sym_pinv(v: DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = v.nrows();
    let eig = v.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l));
    if lmax <= 0.0 {
        return DMatrix::zeros(n, n);
    }
    let inv = eig.eigenvalues.map(|l| if l > tol * lmax { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

fn residual_norm(data: &[f64], dims: Dims, factors: &[Vec<f64>; 4], rank: usize) -> f64 {
    let mut acc = 0.0;
    let mut idx = 0;
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                for i3 in 0..dims[3] {
                    let mut model = 0.0;
                    for r in 0..rank {
                        model += factors[0][i0 * rank + r]
                            * factors[1][i1 * rank + r]
                            * factors[2][i2 * rank + r]
                            * factors[3][i3 * rank + r];
                    }
                    let d = data[idx] - model;
                    acc += d * d;
                    idx += 1;
                }
            }
        }
    }
    acc.sqrt()
}

pub fn cp_reconstruct(f: &CpFactors, dims: Dims) -> Result<Tensor4> {
    if f.dims != dims {
        return Err(Error::DimMismatch(format!(
            "factors describe {:?}, requested {dims:?}",
            f.dims
        )));
    }
    Tensor4::from_fn(dims, |i, j, k, l| {
        (0..f.rank)
            .map(|r| f.get(0, i, r) as f64 * f.get(1, j, r) as f64 * f.get(2, k, r) as f64 * f.get(3, l, r) as f64)
            .sum::<f64>() as f32
    })
}

/// Factorized convolution. For each component `r`: contract channels with
/// `A1[:, r]`, run a vertical 1-D valid convolution with `A2[:, r]`, then a
/// horizontal one with `A3[:, r]`, and scatter into the output channels with
/// `A4[:, r]`.
pub fn conv2d_cp(x: &Tensor4, f: &CpFactors) -> Result<(Tensor4, OpCount)> {
    let out_dims = output_dims(x.dims(), f.dims)?;
    let [c, h, w, n_batch] = x.dims();
    let [_, k2, k3, k4] = f.dims;
    let [_, out_h, out_w, _] = out_dims;
    let xs = x.data();

    let mut out = vec![0.0f64; k4 * out_h * out_w * n_batch];
    let mut ops = OpCount::default();
    let mut s = vec![0.0f64; h * w];
    let mut t = vec![0.0f64; out_h * w];
    let mut u = vec![0.0f64; out_h * out_w];
    for n in 0..n_batch {
        for r in 0..f.rank {
            // channel contraction
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let p = f.get(0, ci, r) as f64 * xs[((ci * h + y) * w + xx) * n_batch + n] as f64;
                        ops.multiplies += 1;
                        if ci == 0 {
                            acc = p;
                        } else {
                            acc += p;
                            ops.additions += 1;
                        }
                    }
                    s[y * w + xx] = acc;
                }
            }
            // vertical
            for oy in 0..out_h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for j in 0..k2 {
                        let p = f.get(1, j, r) as f64 * s[(oy + j) * w + xx];
                        ops.multiplies += 1;
                        if j == 0 {
                            acc = p;
                        } else {
                            acc += p;
                            ops.additions += 1;
                        }
                    }
                    t[oy * w + xx] = acc;
                }
            }
            // horizontal
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for k in 0..k3 {
                        let p = f.get(2, k, r) as f64 * t[oy * w + ox + k];
                        ops.multiplies += 1;
                        if k == 0 {
                            acc = p;
                        } else {
                            acc += p;
                            ops.additions += 1;
                        }
                    }
                    u[oy * out_w + ox] = acc;
                }
            }
            // output channels
            for co in 0..k4 {
                let a = f.get(3, co, r) as f64;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let p = a * u[oy * out_w + ox];
                        ops.multiplies += 1;
                        let dst = &mut out[((co * out_h + oy) * out_w + ox) * n_batch + n];
                        if r == 0 {
                            *dst = p;
                        } else {
                            *dst += p;
                            ops.additions += 1;
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(
        ops.multiplies,
        (n_batch * f.rank * (c * h * w + k2 * out_h * w + k3 * out_h * out_w + k4 * out_h * out_w)) as u64
    );
    Ok((Tensor4::new(out_dims, out.into_iter().map(|v| v as f32).collect())?, ops))
}

pub fn write_cpf(f: &CpFactors) -> Result<Vec<u8>> {
    check_u32_dims(&f.dims)?;
    check_u32_dims(&[f.rank])?;
    let total: usize = f.factors.iter().map(Vec::len).sum();
    let mut w = ByteWriter::with_capacity(24 + 4 * total);
    w.bytes(&CPF_MAGIC);
    for &d in &f.dims {
        w.u32(d as u32);
    }
    w.u32(f.rank as u32);
    for factor in &f.factors {
        for &v in factor {
            w.f32(v);
        }
    }
    Ok(w.into_inner())
}

pub fn read_cpf(bytes: &[u8]) -> Result<CpFactors> {
    let mut r = ByteReader::new(bytes);
    r.magic(CPF_MAGIC)?;
    let dims = r.dims()?;
    header_count(dims)?;
    let rank = r.u32()? as usize;
    if rank == 0 {
        return Err(Error::Malformed("CP rank 0".into()));
    }
    let mut factors: [Vec<f32>; 4] = Default::default();
    for (n, slot) in factors.iter_mut().enumerate() {
        let len = dims[n]
            .checked_mul(rank)
            .ok_or_else(|| Error::Overflow("factor size".into()))?;
        *slot = r.f32_vec(len)?;
    }
    r.finish()?;
    CpFactors::new(dims, rank, factors)
}
