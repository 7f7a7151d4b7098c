//! Centroid dictionary quantization of convolution kernels.
//!
//! A kernel `[k1, k2, k3, k4]` is cut along the input-channel axis into aligned
//! blocks of `M` consecutive channels (the last block zero-padded when `M` does
//! not divide `k1`). k-means over those blocks yields the dictionary, and every
//! block position `(b, j, k, l)` stores the index of its nearest centroid. The
//! kernel is then fully described by the dictionary plus that index tensor.

use serde::{Deserialize, Serialize};

use crate::codec::{pack_bits, unpack_bits, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, nearest, BlockSet, KMeansOptions};
use crate::tensor::{check_u32_dims, element_count, frobenius_distance, frobenius_norm, header_count, Dims, Tensor4};

pub const CDQ_MAGIC: [u8; 4] = *b"CDQ1";
pub const CDQ_HEADER_LEN: usize = 29;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    block_len: usize,
    centroids: Vec<f32>,
}

impl Dictionary {
    pub fn new(block_len: usize, centroids: Vec<f32>) -> Result<Self> {
        if block_len == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(block_len) {
            return Err(Error::InvalidArgument(format!(
                "dictionary needs block_len >= 1 and a whole, non-zero number of centroids \
                 (block_len {block_len}, {} values)",
                centroids.len()
            )));
        }
        if let Some(pos) = centroids.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { block_len, centroids })
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    /// `|D|`
    pub fn len(&self) -> usize {
        self.centroids.len() / self.block_len
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.block_len..(i + 1) * self.block_len]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }
}

/// The order tensor: one dictionary index per block position `(b, j, k, l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexTensor {
    dims: Dims,
    entries: Vec<u32>,
}

impl IndexTensor {
    pub fn new(dims: Dims, entries: Vec<u32>) -> Result<Self> {
        let n = element_count(dims)?;
        if entries.len() != n {
            return Err(Error::DimMismatch(format!(
                "index dims {dims:?} need {n} entries, got {}",
                entries.len()
            )));
        }
        Ok(Self { dims, entries })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, b: usize, j: usize, k: usize, l: usize) -> u32 {
        let [_, d1, d2, d3] = self.dims;
        self.entries[((b * d1 + j) * d2 + k) * d3 + l]
    }
}

/// Number of channel blocks for `k1` channels at block length `m`.
pub fn block_count(k1: usize, m: usize) -> usize {
    k1.div_ceil(m)
}

pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// Bits per order-tensor entry: `⌈log₂|D|⌉ + 1`.
pub fn index_bit_width(dict_size: usize) -> u8 {
    (ceil_log2(dict_size as u64) + 1) as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedKernel {
    kernel_dims: Dims,
    dictionary: Dictionary,
    order: IndexTensor,
}

impl QuantizedKernel {
    /// Validates shape consistency, index range, and that every centroid is referenced.
    pub fn new(kernel_dims: Dims, dictionary: Dictionary, order: IndexTensor) -> Result<Self> {
        element_count(kernel_dims)?;
        let m = dictionary.block_len();
        let [k1, k2, k3, k4] = kernel_dims;
        if m > k1 {
            return Err(Error::InvalidArgument(format!(
                "block length {m} exceeds {k1} input channels"
            )));
        }
        let want = [block_count(k1, m), k2, k3, k4];
        if order.dims() != want {
            return Err(Error::DimMismatch(format!(
                "order tensor dims {:?}, expected {want:?}",
                order.dims()
            )));
        }
        let mut used = vec![false; dictionary.len()];
        for &e in order.entries() {
            let slot = used.get_mut(e as usize).ok_or_else(|| {
                Error::DimMismatch(format!(
                    "index {e} out of range for dictionary of {}",
                    dictionary.len()
                ))
            })?;
            *slot = true;
        }
        if let Some(c) = used.iter().position(|&u| !u) {
            return Err(Error::InvalidArgument(format!("centroid {c} is never referenced")));
        }
        Ok(Self {
            kernel_dims,
            dictionary,
            order,
        })
    }

    pub fn kernel_dims(&self) -> Dims {
        self.kernel_dims
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }

    pub fn order(&self) -> &IndexTensor {
        &self.order
    }

    pub fn block_len(&self) -> usize {
        self.dictionary.block_len()
    }

    pub fn dict_size(&self) -> usize {
        self.dictionary.len()
    }
}

fn check_block_len(k1: usize, m: usize) -> Result<()> {
    if m == 0 || m > k1 {
        return Err(Error::InvalidArgument(format!(
            "block length must be in 1..={k1}, got {m}"
        )));
    }
    Ok(())
}

/// Channel-axis blocks of `w`, enumerated in order-tensor row-major order.
pub fn extract_blocks(w: &Tensor4, block_len: usize) -> Result<BlockSet> {
    let [k1, k2, k3, k4] = w.dims();
    check_block_len(k1, block_len)?;
    let nb = block_count(k1, block_len);
    let mut values = Vec::with_capacity(nb * block_len * k2 * k3 * k4);
    for b in 0..nb {
        for j in 0..k2 {
            for k in 0..k3 {
                for l in 0..k4 {
                    for ch in b * block_len..(b + 1) * block_len {
                        values.push(if ch < k1 { w.get(ch, j, k, l) } else { 0.0 });
                    }
                }
            }
        }
    }
    BlockSet::new(block_len, values)
}

/// Learns a dictionary of at most `dict_size` centroids and maps every block to
/// its nearest centroid. Unused centroids are dropped, so `|D|` may come out
/// smaller than requested.
pub fn quantize(w: &Tensor4, block_len: usize, dict_size: usize, opts: &KMeansOptions) -> Result<QuantizedKernel> {
    if dict_size == 0 {
        return Err(Error::InvalidArgument("dictionary size must be >= 1".into()));
    }
    let blocks = extract_blocks(w, block_len)?;
    let clusters = kmeans(&blocks, dict_size, opts)?;
    let centroids: Vec<f64> = clusters.centroids.iter().map(|&v| v as f64).collect();
    let k = clusters.num_centroids();

    let mut raw = Vec::with_capacity(blocks.len());
    let mut point = vec![0.0f64; block_len];
    for block in blocks.iter() {
        for (p, &v) in point.iter_mut().zip(block) {
            *p = v as f64;
        }
        raw.push(nearest(&point, &centroids, block_len).0);
    }

    let mut used = vec![false; k];
    for &c in &raw {
        used[c] = true;
    }
    let mut remap = vec![u32::MAX; k];
    let mut kept = Vec::with_capacity(clusters.centroids.len());
    for c in (0..k).filter(|&c| used[c]) {
        remap[c] = (kept.len() / block_len) as u32;
        kept.extend_from_slice(clusters.centroid(c));
    }

    let [k1, k2, k3, k4] = w.dims();
    let order = IndexTensor::new(
        [block_count(k1, block_len), k2, k3, k4],
        raw.into_iter().map(|c| remap[c]).collect(),
    )?;
    QuantizedKernel::new(w.dims(), Dictionary::new(block_len, kept)?, order)
}

pub fn reconstruct(q: &QuantizedKernel) -> Tensor4 {
    let [k1, k2, k3, k4] = q.kernel_dims;
    let m = q.block_len();
    let mut data = vec![0.0f32; k1 * k2 * k3 * k4];
    for b in 0..q.order.dims[0] {
        for j in 0..k2 {
            for k in 0..k3 {
                for l in 0..k4 {
                    let centroid = q.dictionary.centroid(q.order.get(b, j, k, l) as usize);
                    for (mi, &v) in centroid.iter().enumerate() {
                        let ch = b * m + mi;
                        if ch < k1 {
                            data[((ch * k2 + j) * k3 + k) * k4 + l] = v;
                        }
                    }
                }
            }
        }
    }
    Tensor4::new(q.kernel_dims, data).expect("centroids are finite and dims validated")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationError {
    pub frobenius: f64,
    pub relative: f64,
}

pub fn quantization_error(w: &Tensor4, q: &QuantizedKernel) -> Result<QuantizationError> {
    if w.dims() != q.kernel_dims {
        return Err(Error::DimMismatch(format!(
            "kernel {:?} vs quantized kernel {:?}",
            w.dims(),
            q.kernel_dims
        )));
    }
    let frobenius = frobenius_distance(w, &reconstruct(q))?;
    let norm = frobenius_norm(w);
    let relative = if norm > 0.0 {
        frobenius / norm
    } else if frobenius == 0.0 {
        0.0
    } else {
        return Err(Error::ZeroNorm);
    };
    Ok(QuantizationError { frobenius, relative })
}

pub fn write_cdq(q: &QuantizedKernel) -> Result<Vec<u8>> {
    check_u32_dims(&q.kernel_dims)?;
    check_u32_dims(&[q.block_len(), q.dict_size()])?;
    let width = index_bit_width(q.dict_size());
    let mut w = ByteWriter::with_capacity(CDQ_HEADER_LEN + 4 * q.dictionary.centroids.len());
    w.bytes(&CDQ_MAGIC);
    for &d in &q.kernel_dims {
        w.u32(d as u32);
    }
    w.u32(q.block_len() as u32);
    w.u32(q.dict_size() as u32);
    w.u8(width);
    for &v in q.dictionary.centroids() {
        w.f32(v);
    }
    w.bytes(&pack_bits(q.order.entries(), width));
    Ok(w.into_inner())
}

pub fn read_cdq(bytes: &[u8]) -> Result<QuantizedKernel> {
    let mut r = ByteReader::new(bytes);
    r.magic(CDQ_MAGIC)?;
    let kernel_dims = r.dims()?;
    let m = r.u32()? as usize;
    let dict_size = r.u32()? as usize;
    let width = r.u8()?;
    header_count(kernel_dims)?;
    if m == 0 || m > kernel_dims[0] {
        return Err(Error::Malformed(format!(
            "block length {m} invalid for {} channels",
            kernel_dims[0]
        )));
    }
    if dict_size == 0 {
        return Err(Error::Malformed("empty dictionary".into()));
    }
    if width != index_bit_width(dict_size) {
        return Err(Error::Malformed(format!(
            "index width {width} does not match dictionary of {dict_size}"
        )));
    }
    let n_values = m
        .checked_mul(dict_size)
        .ok_or_else(|| Error::Overflow("dictionary size".into()))?;
    let centroids = r.f32_vec(n_values)?;
    let [k1, k2, k3, k4] = kernel_dims;
    let order_dims = [block_count(k1, m), k2, k3, k4];
    let n_idx = header_count(order_dims)?;
    let idx_bytes = (n_idx as u128 * width as u128).div_ceil(8);
    let rest = bytes.len() - CDQ_HEADER_LEN - 4 * n_values;
    if (rest as u128) < idx_bytes {
        return Err(Error::Truncated {
            needed: CDQ_HEADER_LEN + 4 * n_values + idx_bytes as usize,
            available: bytes.len(),
        });
    }
    let packed = r.take(idx_bytes as usize)?;
    r.finish()?;
    let entries = unpack_bits(packed, n_idx, width)?;
    let dictionary = Dictionary::new(m, centroids)?;
    let order = IndexTensor::new(order_dims, entries)?;
    QuantizedKernel::new(kernel_dims, dictionary, order).map_err(|e| Error::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Kernel whose channel blocks take exactly `palette.len()` distinct values.
    fn palette_kernel(dims: Dims, m: usize, palette: &[Vec<f32>]) -> Tensor4 {
        Tensor4::from_fn(dims, |i, j, k, l| {
            let b = i / m;
            let pick = (b * 7 + j * 5 + k * 3 + l) % palette.len();
            palette[pick][i % m]
        })
        .unwrap()
    }

    #[test]
    fn exact_partition_without_padding() {
        let w = Tensor4::new([6, 1, 1, 1], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let blocks = extract_blocks(&w, 3).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks.get(0), &[1., 2., 3.]);
        assert_eq!(blocks.get(1), &[4., 5., 6.]);
    }

    #[test]
    fn ragged_last_block_is_zero_padded() {
        let w = Tensor4::from_fn([5, 1, 1, 2], |i, _, _, l| (10 * i + l + 1) as f32).unwrap();
        let blocks = extract_blocks(&w, 3).unwrap();
        assert_eq!(blocks.len(), 4);
        // order (b, l): (0,0) (0,1) (1,0) (1,1)
        assert_eq!(blocks.get(0), &[1., 11., 21.]);
        assert_eq!(blocks.get(1), &[2., 12., 22.]);
        assert_eq!(blocks.get(2), &[31., 41., 0.]);
        assert_eq!(blocks.get(3), &[32., 42., 0.]);
    }

    #[test]
    fn one_block_per_column() {
        let w = Tensor4::random([3, 3, 3, 1], 5).unwrap();
        let blocks = extract_blocks(&w, 3).unwrap();
        assert_eq!(blocks.len(), 9);
        for j in 0..3 {
            for k in 0..3 {
                let want = [w.get(0, j, k, 0), w.get(1, j, k, 0), w.get(2, j, k, 0)];
                assert_eq!(blocks.get(j * 3 + k), &want);
            }
        }
    }

    #[test]
    fn block_len_out_of_range() {
        let w = Tensor4::zeros([4, 1, 1, 1]).unwrap();
        assert!(matches!(extract_blocks(&w, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(extract_blocks(&w, 5), Err(Error::InvalidArgument(_))));
        assert!(quantize(&w, 5, 2, &KMeansOptions::default()).is_err());
        assert!(quantize(&w, 2, 0, &KMeansOptions::default()).is_err());
    }

    #[test]
    fn exact_dictionary_reconstructs() {
        let palette = vec![vec![0.5, -1.0, 2.0], vec![3.0, 0.25, -0.75], vec![-2.0, 1.5, 1.0]];
        let w = palette_kernel([6, 3, 3, 4], 3, &palette);
        let q = quantize(&w, 3, 3, &KMeansOptions::with_seed(1)).unwrap();
        assert_eq!(q.dict_size(), 3);
        let err = quantization_error(&w, &q).unwrap();
        assert!(err.frobenius <= 1e-6 * frobenius_norm(&w));
        assert_eq!(reconstruct(&q), w);
    }

    #[test]
    fn single_centroid_is_block_mean() {
        let w = Tensor4::random([4, 2, 2, 3], 17).unwrap();
        let q = quantize(&w, 2, 1, &KMeansOptions::with_seed(2)).unwrap();
        let blocks = extract_blocks(&w, 2).unwrap();
        let n = blocks.len() as f64;
        let mean: Vec<f64> = (0..2)
            .map(|m| blocks.iter().map(|b| b[m] as f64).sum::<f64>() / n)
            .collect();
        for (c, want) in q.dictionary().centroid(0).iter().zip(&mean) {
            assert!((*c as f64 - want).abs() < 1e-6);
        }
        assert!(q.order().entries().iter().all(|&e| e == 0));

        // error equals sqrt of the k = 1 objective over blocks (no padding here)
        let objective: f64 = blocks
            .iter()
            .map(|b| b.iter().zip(q.dictionary().centroid(0)).map(|(&x, &c)| (x as f64 - c as f64).powi(2)).sum::<f64>())
            .sum();
        let err = quantization_error(&w, &q).unwrap();
        assert!((err.frobenius - objective.sqrt()).abs() <= 1e-9 * objective.sqrt());
    }

    #[test]
    fn figure_one_shapes() {
        let w = Tensor4::random([6, 3, 3, 1], 21).unwrap();
        let q = quantize(&w, 3, 3, &KMeansOptions::with_seed(4)).unwrap();
        assert_eq!(q.order().dims(), [2, 3, 3, 1]);
        assert_eq!(q.dict_size(), 3);
        assert_eq!(q.block_len(), 3);
        assert_eq!(write_cdq(&q).unwrap().len(), 72);
    }

    #[test]
    fn zero_centroid_reconstructs_zero() {
        let q = QuantizedKernel::new(
            [3, 2, 2, 2],
            Dictionary::new(2, vec![0.0, 0.0]).unwrap(),
            IndexTensor::new([2, 2, 2, 2], vec![0; 16]).unwrap(),
        )
        .unwrap();
        assert_eq!(reconstruct(&q), Tensor4::zeros([3, 2, 2, 2]).unwrap());
    }

    #[test]
    fn quantize_of_reconstruction_is_exact() {
        let w = Tensor4::random([4, 3, 3, 4], 8).unwrap();
        let q = quantize(&w, 2, 6, &KMeansOptions::with_seed(8)).unwrap();
        let w_hat = reconstruct(&q);
        let q2 = quantize(&w_hat, 2, q.dict_size(), &KMeansOptions::with_seed(99)).unwrap();
        assert!(quantization_error(&w_hat, &q2).unwrap().relative <= 1e-6);
    }

    #[test]
    fn larger_dictionary_not_worse_than_one() {
        let w = Tensor4::random([4, 3, 3, 2], 12).unwrap();
        let distinct = extract_blocks(&w, 2).unwrap().distinct_count();
        let fine = quantize(&w, 2, distinct, &KMeansOptions::with_seed(1)).unwrap();
        let coarse = quantize(&w, 2, 1, &KMeansOptions::with_seed(1)).unwrap();
        let (ef, ec) = (quantization_error(&w, &fine).unwrap(), quantization_error(&w, &coarse).unwrap());
        assert!(ef.relative <= 1e-6);
        assert!(ef.frobenius <= ec.frobenius);
    }

    #[test]
    fn invariants_are_validated() {
        let dict = Dictionary::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // centroid 1 unused
        assert!(QuantizedKernel::new(
            [2, 1, 1, 2],
            dict.clone(),
            IndexTensor::new([1, 1, 1, 2], vec![0, 0]).unwrap()
        )
        .is_err());
        // index out of range
        assert!(QuantizedKernel::new(
            [2, 1, 1, 2],
            dict.clone(),
            IndexTensor::new([1, 1, 1, 2], vec![0, 2]).unwrap()
        )
        .is_err());
        // wrong order dims
        assert!(QuantizedKernel::new(
            [4, 1, 1, 2],
            dict,
            IndexTensor::new([1, 1, 1, 2], vec![0, 1]).unwrap()
        )
        .is_err());
    }

    #[test]
    fn cdq_round_trip_and_rejects_corruption() {
        let w = Tensor4::random([7, 3, 2, 3], 30).unwrap();
        let q = quantize(&w, 3, 5, &KMeansOptions::with_seed(30)).unwrap();
        let bytes = write_cdq(&q).unwrap();
        let back = read_cdq(&bytes).unwrap();
        assert_eq!(back, q);
        assert_eq!(write_cdq(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[3] = b'0';
        assert!(matches!(read_cdq(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(read_cdq(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut width = bytes.clone();
        width[28] += 1;
        assert!(matches!(read_cdq(&width), Err(Error::Malformed(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(read_cdq(&extra), Err(Error::Malformed(_))));
    }

    #[test]
    fn bit_width_follows_log_plus_one() {
        assert_eq!(index_bit_width(1), 1);
        assert_eq!(index_bit_width(2), 2);
        assert_eq!(index_bit_width(3), 3);
        assert_eq!(index_bit_width(4), 3);
        assert_eq!(index_bit_width(5), 4);
        assert_eq!(index_bit_width(256), 9);
    }
}
