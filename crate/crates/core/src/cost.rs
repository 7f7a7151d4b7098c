//! Storage and MAC accounting.
//!
//! The `*_paper` fields and functions are closed-form estimates evaluated as
//! written, quirks included: the direct MAC estimate multiplies the input
//! extents by all four kernel extents. The `*_measured` quantities are exact
//! counts from executing a convolution.

use serde::{Deserialize, Serialize};

use crate::conv::OpCount;
use crate::cp::CpFactors;
use crate::error::{Error, Result};
use crate::quant::{ceil_log2, QuantizedKernel};
use crate::tensor::Dims;

/// How many channel blocks the analytic storage formula assumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockConvention {
    /// `⌈k1 / M⌉`, the number of blocks actually stored.
    #[default]
    Ceil,
    /// `⌊k1 / M⌋ + 1`, which overcounts by one block when `M` divides `k1`.
    #[serde(rename = "paper-plus-one")]
    FloorPlusOne,
}

impl BlockConvention {
    pub fn blocks(self, k1: usize, m: usize) -> usize {
        match self {
            BlockConvention::Ceil => k1.div_ceil(m),
            BlockConvention::FloorPlusOne => k1 / m + 1,
        }
    }
}

fn product(label: &str, factors: &[u64]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| Error::Overflow(label.to_string()))
}

fn as_u64(dims: Dims) -> [u64; 4] {
    dims.map(|d| d as u64)
}

/// `32 · k1 · k2 · k3 · k4`
pub fn storage_bits_direct(dims: Dims) -> Result<u64> {
    let [a, b, c, d] = as_u64(dims);
    product("direct storage bits", &[32, a, b, c, d])
}

/// `32 · M · |D| + (⌈log₂|D|⌉ + 1) · B · k2 · k3 · k4`
pub fn storage_bits_quantized(
    dims: Dims,
    block_len: usize,
    dict_size: usize,
    convention: BlockConvention,
) -> Result<u64> {
    if block_len == 0 || dict_size == 0 {
        return Err(Error::InvalidArgument(
            "block length and dictionary size must be >= 1".into(),
        ));
    }
    let [_, k2, k3, k4] = as_u64(dims);
    let blocks = convention.blocks(dims[0], block_len) as u64;
    let width = ceil_log2(dict_size as u64) as u64 + 1;
    let dictionary = product("dictionary bits", &[32, block_len as u64, dict_size as u64])?;
    let order = product("order tensor bits", &[width, blocks, k2, k3, k4])?;
    dictionary
        .checked_add(order)
        .ok_or_else(|| Error::Overflow("quantized storage bits".into()))
}

/// `32 · R · (k1 + k2 + k3 + k4)`
pub fn storage_bits_cp(dims: Dims, rank: usize) -> Result<u64> {
    let rows: u64 = as_u64(dims).iter().sum();
    product("CP storage bits", &[32, rank as u64, rows])
}

/// `L1 · L2 · L3 · L4 · k1 · k2 · k3 · k4`
pub fn mac_direct_paper(input_dims: Dims, kernel_dims: Dims) -> Result<u64> {
    let [l1, l2, l3, l4] = as_u64(input_dims);
    let [k1, k2, k3, k4] = as_u64(kernel_dims);
    product("direct MAC estimate", &[l1, l2, l3, l4, k1, k2, k3, k4])
}

/// `L1 · L2 · L3 · L4 · |D|`
pub fn mac_dict_paper(input_dims: Dims, dict_size: usize) -> Result<u64> {
    let [l1, l2, l3, l4] = as_u64(input_dims);
    product("dictionary MAC estimate", &[l1, l2, l3, l4, dict_size as u64])
}

/// Measured counts for one layer: the reference path and the configured one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasuredCounts {
    pub direct: OpCount,
    pub configured: OpCount,
}

/// Accounting for one layer. For CP and direct layers the `*_dict_*` fields
/// describe the configured path (`mult_dict_measured` is its multiply count,
/// `bits_quantized` its storage) and `mac_dict_paper` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mac_direct_paper: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mac_dict_paper: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mult_direct_measured: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mult_dict_measured: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adds_dict_measured: Option<u64>,
    pub bits_direct: u64,
    pub bits_quantized: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub speedup_paper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub speedup_measured: Option<f64>,
    pub compression: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frobenius_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub relative_error: Option<f64>,
    /// Set to `"scalar-blocks"` for dictionaries with block length 1, which go
    /// beyond the `M > 1` setting of the method.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub extension: Option<String>,
}

/// What a report describes: the compressed form of one kernel.
#[derive(Debug, Clone, Copy)]
pub enum ReportSubject<'a> {
    Direct(Dims),
    Dict(&'a QuantizedKernel, BlockConvention),
    Cp(&'a CpFactors),
}

impl ReportSubject<'_> {
    pub fn kernel_dims(&self) -> Dims {
        match self {
            ReportSubject::Direct(d) => *d,
            ReportSubject::Dict(q, _) => q.kernel_dims(),
            ReportSubject::Cp(f) => f.dims(),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    num as f64 / den as f64
}

/// Assembles a report. `input_dims` adds the analytic MAC fields and `measured`
/// adds the instrumented ones. `errors` is the (frobenius, relative) pair.
pub fn build_report(
    subject: ReportSubject<'_>,
    input_dims: Option<Dims>,
    measured: Option<MeasuredCounts>,
    errors: Option<(f64, f64)>,
) -> Result<CostReport> {
    let kernel_dims = subject.kernel_dims();
    if let Some(input) = input_dims {
        if input[0] != kernel_dims[0] {
            return Err(Error::DimMismatch(format!(
                "input has {} channels, kernel expects {}",
                input[0], kernel_dims[0]
            )));
        }
        if input[1] < kernel_dims[1] || input[2] < kernel_dims[2] {
            return Err(Error::DimMismatch(format!(
                "input {input:?} smaller than kernel window {kernel_dims:?}"
            )));
        }
    }
    if let Some((f, r)) = errors {
        if !(f.is_finite() && r.is_finite() && f >= 0.0 && r >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid error pair ({f}, {r})")));
        }
    }

    let bits_direct = storage_bits_direct(kernel_dims)?;
    let bits_quantized = match subject {
        ReportSubject::Direct(_) => bits_direct,
        ReportSubject::Dict(q, conv) => storage_bits_quantized(kernel_dims, q.block_len(), q.dict_size(), conv)?,
        ReportSubject::Cp(f) => storage_bits_cp(kernel_dims, f.rank())?,
    };

    let mac_direct_paper = input_dims.map(|i| mac_direct_paper(i, kernel_dims)).transpose()?;
    let mac_dict_paper = match (subject, input_dims) {
        (ReportSubject::Dict(q, _), Some(i)) => Some(mac_dict_paper(i, q.dict_size())?),
        _ => None,
    };
    let speedup_paper = match (mac_direct_paper, mac_dict_paper) {
        (Some(a), Some(b)) if b > 0 => Some(ratio(a, b)),
        _ => None,
    };

    let speedup_measured = measured.and_then(|m| {
        (m.configured.multiplies > 0).then(|| ratio(m.direct.multiplies, m.configured.multiplies))
    });

    Ok(CostReport {
        mac_direct_paper,
        mac_dict_paper,
        mult_direct_measured: measured.map(|m| m.direct.multiplies),
        mult_dict_measured: measured.map(|m| m.configured.multiplies),
        adds_dict_measured: measured.map(|m| m.configured.additions),
        bits_direct,
        bits_quantized,
        speedup_paper,
        speedup_measured,
        compression: ratio(bits_direct, bits_quantized),
        frobenius_error: errors.map(|e| e.0),
        relative_error: errors.map(|e| e.1),
        extension: match subject {
            ReportSubject::Dict(q, _) if q.block_len() == 1 => Some("scalar-blocks".into()),
            _ => None,
        },
    })
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One-line human summary with ratios at 4 significant digits.
    pub fn summary(&self) -> String {
        let mut parts = vec![format!(
            "storage {} -> {} bits (compression {})",
            self.bits_direct,
            self.bits_quantized,
            sig4(self.compression)
        )];
        if let Some(s) = self.speedup_paper {
            parts.push(format!("analytic speedup {}", sig4(s)));
        }
        if let Some(s) = self.speedup_measured {
            parts.push(format!("measured speedup {}", sig4(s)));
        }
        if let Some(e) = self.relative_error {
            parts.push(format!("relative error {}", sig4(e)));
        }
        if let Some(x) = &self.extension {
            parts.push(format!("extension: {x}"));
        }
        parts.join(", ")
    }
}

/// Formats with 4 significant digits.
pub fn sig4(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    if !(-4..6).contains(&magnitude) {
        return format!("{v:.3e}");
    }
    let decimals = (3 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d_direct;
    use crate::dict_conv::conv2d_dict;
    use crate::kmeans::KMeansOptions;
    use crate::quant::{quantize, Dictionary, IndexTensor};
    use crate::tensor::Tensor4;

    #[test]
    fn direct_storage() {
        assert_eq!(storage_bits_direct([6, 3, 3, 1]).unwrap(), 1728);
        assert_eq!(storage_bits_direct([1, 1, 1, 1]).unwrap(), 32);
        assert_eq!(storage_bits_direct([512, 3, 3, 512]).unwrap(), 75_497_472);
        assert!(matches!(
            storage_bits_direct([usize::MAX, 2, 1, 1]),
            Err(Error::Overflow(_))
        ));
    }

    #[test]
    fn convention_wire_names() {
        assert_eq!(serde_json::to_string(&BlockConvention::Ceil).unwrap(), "\"ceil\"");
        assert_eq!(serde_json::to_string(&BlockConvention::FloorPlusOne).unwrap(), "\"paper-plus-one\"");
    }

    #[test]
    fn quantized_storage() {
        let ceil = storage_bits_quantized([6, 3, 3, 1], 3, 3, BlockConvention::Ceil).unwrap();
        assert_eq!(ceil, 342);
        assert!((1728.0 / ceil as f64 - 5.052).abs() < 1e-3);
        assert_eq!(
            storage_bits_quantized([6, 3, 3, 1], 3, 3, BlockConvention::FloorPlusOne).unwrap(),
            369
        );
        // |D| = 1 costs one bit per entry
        assert_eq!(
            storage_bits_quantized([6, 3, 3, 1], 3, 1, BlockConvention::Ceil).unwrap(),
            32 * 3 + 2 * 9
        );
    }

    #[test]
    fn closed_form_mac_counts() {
        assert_eq!(mac_direct_paper([6, 8, 8, 1], [6, 3, 3, 4]).unwrap(), 82_944);
        assert_eq!(mac_dict_paper([6, 8, 8, 1], 3).unwrap(), 1152);
        let k = [2, 3, 3, 2];
        let full = 2 * 3 * 3 * 2;
        assert_eq!(
            mac_direct_paper([2, 5, 5, 1], k).unwrap(),
            mac_dict_paper([2, 5, 5, 1], full).unwrap()
        );
    }

    #[test]
    fn end_to_end_report() {
        let x = Tensor4::random([6, 8, 8, 1], 1).unwrap();
        let w = Tensor4::random([6, 3, 3, 4], 2).unwrap();
        let q = quantize(&w, 3, 3, &KMeansOptions::with_seed(3)).unwrap();
        let (_, direct) = conv2d_direct(&x, &w).unwrap();
        let (_, dict) = conv2d_dict(&x, &q).unwrap();
        let r = build_report(
            ReportSubject::Dict(&q, BlockConvention::Ceil),
            Some(x.dims()),
            Some(MeasuredCounts { direct, configured: dict }),
            None,
        )
        .unwrap();
        assert_eq!(r.speedup_paper, Some(72.0));
        assert_eq!(r.speedup_measured, Some(6.75));
        assert_eq!(r.mult_direct_measured, Some(7776));
        assert_eq!(r.mult_dict_measured, Some(1152));
        assert_eq!(r.adds_dict_measured, Some(2448));
        // mac_dict_paper equals the measured stage-1 count when M divides C
        assert_eq!(r.mac_dict_paper, r.mult_dict_measured);
    }

    #[test]
    fn analytic_only_report_omits_measured_fields() {
        let q = QuantizedKernel::new(
            [3, 1, 1, 1],
            Dictionary::new(3, vec![1.0, 2.0, 3.0]).unwrap(),
            IndexTensor::new([1, 1, 1, 1], vec![0]).unwrap(),
        )
        .unwrap();
        let r = build_report(ReportSubject::Dict(&q, BlockConvention::Ceil), Some([3, 4, 4, 1]), None, Some((0.0, 0.0)))
            .unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let obj = json.as_object().unwrap();
        for absent in ["mult_direct_measured", "mult_dict_measured", "adds_dict_measured", "speedup_measured"] {
            assert!(!obj.contains_key(absent), "{absent}");
        }
        for present in ["mac_direct_paper", "mac_dict_paper", "bits_direct", "bits_quantized", "speedup_paper", "compression"] {
            assert!(obj.contains_key(present), "{present}");
        }
        assert!(obj["bits_direct"].is_u64());
        assert!(obj["compression"].is_f64());
        assert_eq!(obj["relative_error"].as_f64(), Some(0.0));
        assert!(!obj.contains_key("extension"));
    }

    #[test]
    fn scalar_blocks_are_labeled() {
        let q = QuantizedKernel::new(
            [2, 1, 1, 1],
            Dictionary::new(1, vec![0.5, -1.0]).unwrap(),
            IndexTensor::new([2, 1, 1, 1], vec![0, 1]).unwrap(),
        )
        .unwrap();
        let r = build_report(ReportSubject::Dict(&q, BlockConvention::Ceil), None, None, None).unwrap();
        assert_eq!(r.extension.as_deref(), Some("scalar-blocks"));
        assert!(r.summary().contains("extension: scalar-blocks"));
    }

    #[test]
    fn inconsistent_inputs_rejected() {
        let q = QuantizedKernel::new(
            [3, 2, 2, 1],
            Dictionary::new(3, vec![1.0, 2.0, 3.0]).unwrap(),
            IndexTensor::new([1, 2, 2, 1], vec![0; 4]).unwrap(),
        )
        .unwrap();
        let subject = ReportSubject::Dict(&q, BlockConvention::Ceil);
        assert!(build_report(subject, Some([4, 5, 5, 1]), None, None).is_err());
        assert!(build_report(subject, Some([3, 1, 5, 1]), None, None).is_err());
        assert!(build_report(subject, None, None, Some((f64::NAN, 0.0))).is_err());
    }

    #[test]
    fn ratios_agree_with_count_order() {
        let q = QuantizedKernel::new(
            [4, 3, 3, 8],
            Dictionary::new(2, (0..10).map(|v| v as f32).collect()).unwrap(),
            IndexTensor::new([2, 3, 3, 8], (0..144).map(|i| (i % 5) as u32).collect()).unwrap(),
        )
        .unwrap();
        let r = build_report(ReportSubject::Dict(&q, BlockConvention::Ceil), Some([4, 9, 9, 1]), None, None).unwrap();
        assert_eq!(r.compression > 1.0, r.bits_direct > r.bits_quantized);
        assert_eq!(
            r.speedup_paper.unwrap() > 1.0,
            r.mac_direct_paper.unwrap() > r.mac_dict_paper.unwrap()
        );
    }

    #[test]
    fn four_significant_digits() {
        assert_eq!(sig4(5.052631), "5.053");
        assert_eq!(sig4(72.0), "72.00");
        assert_eq!(sig4(6.75), "6.750");
        assert_eq!(sig4(0.012346), "0.01235");
    }
}
