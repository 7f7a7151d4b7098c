use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dictconv_core::pipeline::sweep_csv;
use dictconv_core::{
    build_report, conv2d_cp, conv2d_dict, conv2d_direct, cp_als, cp_reconstruct, quantization_error, quantize,
    read_cdq, read_cpf, read_t4, reconstruct, relative_error, run_pipeline, sweep, write_cdq, write_cpf, write_t4,
    AlsOptions, BlockConvention, CpFactors, Dims, ErrorClass, KMeansOptions, MeasuredCounts, PipelineConfig,
    QuantizedKernel, ReportSubject, SweepGrid, Tensor4,
};

#[derive(Parser)]
#[command(name = "dictconv", version, about = "Dictionary-quantized convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster kernel blocks into a dictionary and write a .cdq file.
    Quantize {
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long)]
        block_len: usize,
        #[arg(long)]
        dict_size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        restarts: Option<usize>,
        /// Adds the analytic MAC estimates for an input of these dims.
        #[arg(long, value_parser = parse_dims)]
        input_dims: Option<Dims>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convolve an input with a .t4, .cdq or .cpf kernel.
    Conv {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: ConvMode,
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Writes the exact operation counts as JSON.
        #[arg(long)]
        counts: Option<PathBuf>,
    },
    /// Fit a rank-R CP model by alternating least squares.
    CpFit {
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a .cdq or .cpf file back into a dense .t4 kernel.
    Reconstruct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print ‖a − b‖_F / ‖a‖_F for two .t4 files.
    Error {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Print the cost report of a .cdq kernel for a given input shape.
    Report {
        #[arg(long)]
        quant: PathBuf,
        #[arg(long, value_parser = parse_dims)]
        input_dims: Dims,
        #[arg(long, value_enum, default_value_t = Convention::Ceil)]
        block_convention: Convention,
    },
    /// Run a pipeline over a parameter grid and write one CSV row per point.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a pipeline once and write the result as JSON.
    Forward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConvMode {
    Direct,
    Dict,
    Cp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Ceil,
    #[value(name = "paper-plus-one")]
    FloorPlusOne,
}

impl From<Convention> for BlockConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Ceil => BlockConvention::Ceil,
            Convention::FloorPlusOne => BlockConvention::FloorPlusOne,
        }
    }
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected 4 comma-separated dims, got {}", v.len()))
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: 1,
            err: anyhow!(msg.into()),
        }
    }
}

impl From<dictconv_core::Error> for Failure {
    fn from(e: dictconv_core::Error) -> Self {
        let code = match e.class() {
            ErrorClass::Usage => 1,
            ErrorClass::Format => 2,
            ErrorClass::Numerical => 3,
        };
        Failure { code, err: e.into() }
    }
}

type CmdResult<T> = Result<T, Failure>;

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        err: anyhow!("{}: {e}", path.display()),
    }
}

fn read_bytes(path: &Path) -> CmdResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_failure(path, e))
}

/// Runs a parser over a file; any failure here is an I/O or format error.
fn load<T>(path: &Path, parse: impl FnOnce(&[u8]) -> dictconv_core::Result<T>) -> CmdResult<T> {
    parse(&read_bytes(path)?).map_err(|e| io_failure(path, e))
}

fn load_text(path: &Path) -> CmdResult<String> {
    String::from_utf8(read_bytes(path)?).map_err(|e| io_failure(path, e))
}

fn load_json<T>(path: &Path, parse: impl FnOnce(&str) -> dictconv_core::Result<T>) -> CmdResult<T> {
    parse(&load_text(path)?).map_err(|e| io_failure(path, e))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum KernelKind {
    Dense,
    Quantized,
    Factored,
}

fn kernel_kind(path: &Path) -> Option<KernelKind> {
    match path.extension()?.to_str()? {
        "t4" => Some(KernelKind::Dense),
        "cdq" => Some(KernelKind::Quantized),
        "cpf" => Some(KernelKind::Factored),
        _ => None,
    }
}

/// Output files staged next to their targets and moved into place only once
/// every output of a command is ready.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: &Path, bytes: Vec<u8>) {
        self.files.push((path.to_path_buf(), bytes));
    }

    fn commit(self) -> CmdResult<()> {
        let mut staged = Vec::with_capacity(self.files.len());
        for (path, bytes) in self.files {
            let dir = match path.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            };
            let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| io_failure(&path, e))?;
            tmp.write_all(&bytes).map_err(|e| io_failure(&path, e))?;
            staged.push((tmp, path));
        }
        for (tmp, path) in staged {
            tmp.persist(&path).map_err(|e| io_failure(&path, e.error))?;
        }
        Ok(())
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s.into_bytes()
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_pipeline(config: &Path) -> CmdResult<(Tensor4, Vec<dictconv_core::LayerConfig>)> {
    let cfg = load_json(config, PipelineConfig::from_json)?;
    cfg.resolve(&base_dir(config)).map_err(|e| match e.class() {
        ErrorClass::Format => io_failure(config, e),
        _ => e.into(),
    })
}

/// Counts measured by running both paths on a zero input of the given shape.
fn measure(q: &QuantizedKernel, input_dims: Dims) -> CmdResult<MeasuredCounts> {
    let x = Tensor4::zeros(input_dims)?;
    let (_, direct) = conv2d_direct(&x, &reconstruct(q))?;
    let (_, configured) = conv2d_dict(&x, q)?;
    Ok(MeasuredCounts { direct, configured })
}

fn run(cmd: Command) -> CmdResult<()> {
    let mut outputs = Outputs::default();
    match cmd {
        Command::Quantize {
            kernel,
            block_len,
            dict_size,
            seed,
            restarts,
            input_dims,
            out,
        } => {
            let w = load(&kernel, read_t4)?;
            if block_len > w.dims()[0] {
                return Err(Failure::usage(format!(
                    "block length {block_len} exceeds the {} input channels",
                    w.dims()[0]
                )));
            }
            let mut opts = KMeansOptions::with_seed(seed);
            if let Some(r) = restarts {
                opts.restarts = r;
            }
            let q = quantize(&w, block_len, dict_size, &opts)?;
            let err = quantization_error(&w, &q)?;
            let report = build_report(
                ReportSubject::Dict(&q, BlockConvention::Ceil),
                input_dims,
                None,
                Some((err.frobenius, err.relative)),
            )?;
            outputs.add(&out, write_cdq(&q)?);
            outputs.commit()?;
            eprintln!(
                "quantized {:?} into {} centroids of length {}: {}",
                w.dims(),
                q.dict_size(),
                q.block_len(),
                report.summary()
            );
            println!("{}", report.to_json());
        }
        Command::Conv {
            input,
            mode,
            kernel,
            out,
            counts,
        } => {
            let kind = kernel_kind(&kernel).ok_or_else(|| {
                Failure::usage(format!("{}: kernel must end in .t4, .cdq or .cpf", kernel.display()))
            })?;
            let expected = match mode {
                ConvMode::Direct => KernelKind::Dense,
                ConvMode::Dict => KernelKind::Quantized,
                ConvMode::Cp => KernelKind::Factored,
            };
            if kind != expected {
                return Err(Failure::usage(format!(
                    "mode does not match kernel file {}",
                    kernel.display()
                )));
            }
            let x = load(&input, read_t4)?;
            let (y, ops) = match kind {
                KernelKind::Dense => conv2d_direct(&x, &load(&kernel, read_t4)?)?,
                KernelKind::Quantized => conv2d_dict(&x, &load(&kernel, read_cdq)?)?,
                KernelKind::Factored => conv2d_cp(&x, &load(&kernel, read_cpf)?)?,
            };
            outputs.add(&out, write_t4(&y));
            if let Some(path) = &counts {
                outputs.add(path, json_bytes(&ops));
            }
            outputs.commit()?;
            eprintln!(
                "output {:?}: {} multiplies, {} additions",
                y.dims(),
                ops.multiplies,
                ops.additions
            );
        }
        Command::CpFit {
            kernel,
            rank,
            seed,
            max_iters,
            restarts,
            out,
        } => {
            let w = load(&kernel, read_t4)?;
            let mut opts = AlsOptions::with_seed(seed);
            if let Some(m) = max_iters {
                opts.max_iters = m;
            }
            if let Some(r) = restarts {
                opts.restarts = r;
            }
            let fit = cp_als(&w, rank, &opts)?;
            outputs.add(&out, write_cpf(&fit.factors)?);
            outputs.commit()?;
            eprintln!(
                "rank {rank}: relative error {} after {} sweeps",
                fit.final_fit(),
                fit.fit_history.len()
            );
        }
        Command::Reconstruct { input, out } => {
            let w = match kernel_kind(&input) {
                Some(KernelKind::Quantized) => reconstruct(&load(&input, read_cdq)?),
                Some(KernelKind::Factored) => {
                    let f: CpFactors = load(&input, read_cpf)?;
                    cp_reconstruct(&f, f.dims())?
                }
                _ => {
                    return Err(Failure::usage(format!(
                        "{}: expected a .cdq or .cpf file",
                        input.display()
                    )))
                }
            };
            outputs.add(&out, write_t4(&w));
            outputs.commit()?;
        }
        Command::Error { a, b } => {
            let (ta, tb) = (load(&a, read_t4)?, load(&b, read_t4)?);
            let e = if ta == tb { 0.0 } else { relative_error(&ta, &tb)? };
            println!("{e:?}");
        }
        Command::Report {
            quant,
            input_dims,
            block_convention,
        } => {
            let q = load(&quant, read_cdq)?;
            let measured = measure(&q, input_dims)?;
            let report = build_report(
                ReportSubject::Dict(&q, block_convention.into()),
                Some(input_dims),
                Some(measured),
                None,
            )?;
            eprintln!("{}", report.summary());
            println!("{}", report.to_json());
        }
        Command::Sweep { config, grid, out } => {
            let (x, layers) = load_pipeline(&config)?;
            let grid = load_json(&grid, SweepGrid::from_json)?;
            let rows = sweep(&x, &layers, &grid)?;
            outputs.add(&out, sweep_csv(&rows)?.into_bytes());
            outputs.commit()?;
            eprintln!("{} grid points", rows.len());
        }
        Command::Forward { config, out } => {
            let (x, layers) = load_pipeline(&config)?;
            let result = run_pipeline(&x, &layers)?;
            outputs.add(&out, json_bytes(&result));
            outputs.commit()?;
            eprintln!(
                "relative error {:e}, measured speedup {:.4}, compression {:.4}",
                result.relative_error, result.speedup_measured, result.compression
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
