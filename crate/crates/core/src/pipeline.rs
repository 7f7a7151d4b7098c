//! Toy multi-layer forward pass where each convolution runs direct, through a
//! centroid dictionary, or through CP factors, with ReLU between layers.
//!
//! Every run also executes the all-direct baseline on the same kernels and
//! input, so the end-to-end relative error isolates the approximation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_direct, OpCount};
use crate::cost::{build_report, BlockConvention, CostReport, MeasuredCounts, ReportSubject};
use crate::cp::{conv2d_cp, cp_als, cp_reconstruct, AlsOptions, CpFactors};
use crate::dict_conv::conv2d_dict;
use crate::error::{Error, Result};
use crate::kmeans::KMeansOptions;
use crate::quant::{quantization_error, quantize};
use crate::tensor::{frobenius_distance, frobenius_norm, read_t4, relative_error, Dims, Tensor4};

pub fn relu(t: &Tensor4) -> Tensor4 {
    t.map(|v| v.max(0.0)).expect("relu keeps values finite")
}

/// Where a tensor comes from in a pipeline config: a `.t4` path, or a seeded
/// uniform tensor. With `rank`, the seeded tensor is an exact rank-`rank` CP model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TensorSource {
    Path(PathBuf),
    File {
        path: PathBuf,
    },
    Random {
        seed: u64,
        dims: Dims,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rank: Option<usize>,
    },
}

impl TensorSource {
    pub fn load(&self, base_dir: &Path) -> Result<Tensor4> {
        match self {
            TensorSource::Path(p) | TensorSource::File { path: p } => {
                let bytes = std::fs::read(base_dir.join(p))?;
                read_t4(&bytes)
            }
            TensorSource::Random { seed, dims, rank: None } => Tensor4::random(*dims, *seed),
            TensorSource::Random {
                seed,
                dims,
                rank: Some(r),
            } => cp_reconstruct(&CpFactors::random(*dims, *r, *seed)?, *dims),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerMode {
    Direct,
    Dict {
        block_len: usize,
        dict_size: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        restarts: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_iters: Option<usize>,
    },
    Cp {
        rank: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_iters: Option<usize>,
    },
}

impl LayerMode {
    pub fn dict(block_len: usize, dict_size: usize, seed: u64) -> Self {
        LayerMode::Dict {
            block_len,
            dict_size,
            seed,
            restarts: None,
            max_iters: None,
        }
    }

    pub fn cp(rank: usize, seed: u64) -> Self {
        LayerMode::Cp {
            rank,
            seed,
            max_iters: None,
        }
    }
}

impl fmt::Display for LayerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerMode::Direct => write!(f, "direct"),
            LayerMode::Dict {
                block_len,
                dict_size,
                seed,
                ..
            } => write!(f, "dict(M={block_len};D={dict_size};seed={seed})"),
            LayerMode::Cp { rank, seed, .. } => write!(f, "cp(R={rank};seed={seed})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub kernel: Tensor4,
    pub mode: LayerMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: TensorSource,
    pub mode: LayerMode,
}

/// JSON pipeline description: `{"input": …, "layers": [{"kernel": …, "mode": {"type": …}}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input: TensorSource,
    pub layers: Vec<LayerSpec>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Loads every tensor; relative paths resolve against `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<(Tensor4, Vec<LayerConfig>)> {
        let input = self.input.load(base_dir)?;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerConfig {
                    kernel: l.kernel.load(base_dir)?,
                    mode: l.mode,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((input, layers))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub layers: Vec<CostReport>,
    pub output: Tensor4,
    /// `‖baseline − configured‖_F / ‖baseline‖_F` on the final output.
    pub relative_error: f64,
    /// Σ baseline multiplies / Σ configured multiplies.
    pub speedup_measured: f64,
    /// Σ direct storage bits / Σ configured storage bits.
    pub compression: f64,
}

pub fn check_chain(input: Dims, layers: &[LayerConfig]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("pipeline has no layers".into()));
    }
    let [mut c, mut h, mut w, _] = input;
    for (i, layer) in layers.iter().enumerate() {
        let [k1, k2, k3, k4] = layer.kernel.dims();
        if k1 != c {
            return Err(Error::DimMismatch(format!(
                "layer {i} expects {k1} input channels, receives {c}"
            )));
        }
        if h < k2 || w < k3 {
            return Err(Error::DimMismatch(format!(
                "layer {i} window {k2}x{k3} exceeds its {h}x{w} input"
            )));
        }
        c = k4;
        h -= k2 - 1;
        w -= k3 - 1;
    }
    Ok(())
}

struct LayerRun {
    output: Tensor4,
    ops: OpCount,
    report: CostReport,
}

fn run_layer(x: &Tensor4, layer: &LayerConfig, direct: (&Tensor4, OpCount)) -> Result<LayerRun> {
    let w = &layer.kernel;
    let measured = |configured| MeasuredCounts {
        direct: direct.1,
        configured,
    };
    match layer.mode {
        LayerMode::Direct => {
            let (output, ops) = conv2d_direct(x, w)?;
            let report = build_report(ReportSubject::Direct(w.dims()), Some(x.dims()), Some(measured(ops)), Some((0.0, 0.0)))?;
            Ok(LayerRun { output, ops, report })
        }
        LayerMode::Dict {
            block_len,
            dict_size,
            seed,
            restarts,
            max_iters,
        } => {
            let defaults = KMeansOptions::default();
            let opts = KMeansOptions {
                seed,
                restarts: restarts.unwrap_or(defaults.restarts),
                max_iters: max_iters.unwrap_or(defaults.max_iters),
                ..defaults
            };
            let q = quantize(w, block_len, dict_size, &opts)?;
            let err = quantization_error(w, &q)?;
            let (output, ops) = conv2d_dict(x, &q)?;
            let report = build_report(
                ReportSubject::Dict(&q, BlockConvention::Ceil),
                Some(x.dims()),
                Some(measured(ops)),
                Some((err.frobenius, err.relative)),
            )?;
            Ok(LayerRun { output, ops, report })
        }
        LayerMode::Cp { rank, seed, max_iters } => {
            let defaults = AlsOptions::default();
            let opts = AlsOptions {
                seed,
                max_iters: max_iters.unwrap_or(defaults.max_iters),
                ..defaults
            };
            let fit = cp_als(w, rank, &opts)?;
            let approx = cp_reconstruct(&fit.factors, w.dims())?;
            let frob = frobenius_distance(w, &approx)?;
            let rel = frob / frobenius_norm(w);
            let (output, ops) = conv2d_cp(x, &fit.factors)?;
            let report = build_report(
                ReportSubject::Cp(&fit.factors),
                Some(x.dims()),
                Some(measured(ops)),
                Some((frob, rel)),
            )?;
            Ok(LayerRun { output, ops, report })
        }
    }
}

pub fn run_pipeline(input: &Tensor4, layers: &[LayerConfig]) -> Result<PipelineResult> {
    check_chain(input.dims(), layers)?;
    let mut baseline = input.clone();
    let mut configured = input.clone();
    let mut reports = Vec::with_capacity(layers.len());
    let (mut base_mults, mut cfg_mults) = (0u64, 0u64);
    let (mut bits_direct, mut bits_cfg) = (0u64, 0u64);

    for (i, layer) in layers.iter().enumerate() {
        let (base_out, base_ops) = conv2d_direct(&baseline, &layer.kernel)?;
        let run = run_layer(&configured, layer, (&base_out, base_ops))?;
        base_mults += base_ops.multiplies;
        cfg_mults += run.ops.multiplies;
        bits_direct += run.report.bits_direct;
        bits_cfg += run.report.bits_quantized;
        reports.push(run.report);

        let last = i + 1 == layers.len();
        baseline = if last { base_out } else { relu(&base_out) };
        configured = if last { run.output } else { relu(&run.output) };
    }

    let relative_error = if frobenius_norm(&baseline) == 0.0 && frobenius_norm(&configured) == 0.0 {
        0.0
    } else {
        relative_error(&baseline, &configured)?
    };
    Ok(PipelineResult {
        layers: reports,
        output: configured,
        relative_error,
        speedup_measured: base_mults as f64 / cfg_mults as f64,
        compression: bits_direct as f64 / bits_cfg as f64,
    })
}

/// One swept dimension: the modes to try for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub layer: usize,
    pub modes: Vec<LayerMode>,
}

/// Cartesian product of its axes, enumerated with the last axis fastest.
/// Layers not named by any axis keep their configured mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub axes: Vec<GridAxis>,
}

impl SweepGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Every grid point as a full list of per-layer modes.
    pub fn points(&self, base: &[LayerMode]) -> Result<Vec<Vec<LayerMode>>> {
        if self.axes.is_empty() || self.axes.iter().any(|a| a.modes.is_empty()) {
            return Err(Error::InvalidArgument("sweep grid is empty".into()));
        }
        let mut seen = vec![false; base.len()];
        for axis in &self.axes {
            match seen.get_mut(axis.layer) {
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "grid names layer {} of a {}-layer pipeline",
                        axis.layer,
                        base.len()
                    )))
                }
                Some(true) => {
                    return Err(Error::InvalidArgument(format!(
                        "grid names layer {} twice",
                        axis.layer
                    )))
                }
                Some(s) => *s = true,
            }
        }

        let mut points = Vec::new();
        let mut digits = vec![0usize; self.axes.len()];
        loop {
            let mut modes = base.to_vec();
            for (axis, &d) in self.axes.iter().zip(&digits) {
                modes[axis.layer] = axis.modes[d];
            }
            points.push(modes);

            let mut pos = self.axes.len();
            loop {
                if pos == 0 {
                    return Ok(points);
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < self.axes[pos].modes.len() {
                    break;
                }
                digits[pos] = 0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: String,
    pub relative_error: f64,
    pub speedup_measured: f64,
    pub compression: f64,
}

pub fn config_label(modes: &[LayerMode]) -> String {
    modes
        .iter()
        .enumerate()
        .map(|(i, m)| format!("L{i}={m}"))
        .collect::<Vec<_>>()
        .join("|")
}

pub fn sweep(input: &Tensor4, layers: &[LayerConfig], grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let base: Vec<LayerMode> = layers.iter().map(|l| l.mode).collect();
    grid.points(&base)?
        .into_iter()
        .map(|modes| {
            let configured: Vec<LayerConfig> = layers
                .iter()
                .zip(&modes)
                .map(|(l, &mode)| LayerConfig {
                    kernel: l.kernel.clone(),
                    mode,
                })
                .collect();
            let result = run_pipeline(input, &configured)?;
            Ok(SweepRow {
                config: config_label(&modes),
                relative_error: result.relative_error,
                speedup_measured: result.speedup_measured,
                compression: result.compression,
            })
        })
        .collect()
}

/// CSV with header `config,relative_error,speedup_measured,compression`.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Malformed(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(["config", "relative_error", "speedup_measured", "compression"])
            .map_err(|e| Error::Malformed(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Malformed(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
