//! Convolution through a learned dictionary of kernel blocks.
//!
//! Kernels are split along the input-channel axis into short vectors, which
//! k-means clusters into a small dictionary. A convolution then multiplies the
//! input against each dictionary entry once and assembles every output value
//! with additions only, guided by an index tensor. A CP-ALS factorization is
//! provided as the comparison baseline, along with exact operation counting
//! and the closed-form storage and MAC estimates for both.

mod codec;
pub mod conv;
pub mod cost;
pub mod cp;
pub mod dict_conv;
pub mod error;
pub mod kmeans;
pub mod pipeline;
pub mod quant;
pub mod tensor;

pub use conv::{conv2d_direct, OpCount};
pub use cost::{build_report, BlockConvention, CostReport, MeasuredCounts, ReportSubject};
pub use cp::{conv2d_cp, cp_als, cp_als_from, cp_reconstruct, read_cpf, write_cpf, AlsOptions, CpFactors, CpFit};
pub use dict_conv::{accumulate, conv2d_dict, precompute_dot_table, DotTable};
pub use error::{Error, ErrorClass, Result};
pub use kmeans::{kmeans, BlockSet, KMeansOptions, KMeansResult};
pub use pipeline::{relu, run_pipeline, sweep, LayerConfig, LayerMode, PipelineConfig, PipelineResult, SweepGrid, SweepRow};
pub use quant::{
    extract_blocks, quantization_error, quantize, read_cdq, reconstruct, write_cdq, Dictionary, IndexTensor,
    QuantizationError, QuantizedKernel,
};
pub use tensor::{frobenius_norm, read_t4, relative_error, write_t4, Dims, Tensor4};
