//! Dense 4-D `f32` tensor used for both kernels and activations.
//!
//! Kernels are laid out `[in_channels, kernel_h, kernel_w, out_channels]` and
//! activations `[channels, height, width, batch]`. Storage is row-major with
//! axis 0 slowest, so element `(i, j, k, l)` lives at
//! `((i * d1 + j) * d2 + k) * d3 + l`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub type Dims = [usize; 4];

pub const T4_MAGIC: [u8; 4] = *b"T4F1";
pub const T4_HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f32>,
}

/// Number of elements for `dims`, rejecting zero extents and 64-bit overflow.
pub fn element_count(dims: Dims) -> Result<usize> {
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "tensor extents must be >= 1, got {dims:?}"
        )));
    }
    let mut n: u64 = 1;
    for &d in &dims {
        n = n
            .checked_mul(d as u64)
            .ok_or_else(|| Error::Overflow(format!("element count of {dims:?}")))?;
    }
    usize::try_from(n).map_err(|_| Error::Overflow(format!("element count of {dims:?}")))
}

impl Tensor4 {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        let n = element_count(dims)?;
        if data.len() != n {
            return Err(Error::DimMismatch(format!(
                "dims {dims:?} need {n} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        let n = element_count(dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; n],
        })
    }

    /// Seeded tensor with entries drawn uniformly from `[-1, 1)`.
    pub fn random(dims: Dims, seed: u64) -> Result<Self> {
        let n = element_count(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        let n = element_count(dims)?;
        let mut data = Vec::with_capacity(n);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    for l in 0..dims[3] {
                        data.push(f(i, j, k, l));
                    }
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        let [_, d1, d2, d3] = self.dims;
        ((i * d1 + j) * d2 + k) * d3 + l
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f32 {
        self.data[self.offset(i, j, k, l)]
    }

    /// Elementwise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f32) -> Result<Self> {
        self.map(|v| v * c)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

/// Frobenius norm, accumulated in `f64`.
pub fn frobenius_norm(t: &Tensor4) -> f64 {
    t.data
        .iter()
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// `‖a − b‖_F`, accumulated in `f64`.
pub fn frobenius_distance(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    check_same_dims(a, b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// `‖a − b‖_F / ‖a‖_F`. Only `a` normalizes, so the measure is not symmetric.
pub fn relative_error(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    check_same_dims(a, b)?;
    let reference = frobenius_norm(a);
    if reference == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(frobenius_distance(a, b)? / reference)
}

fn check_same_dims(a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::DimMismatch(format!(
            "{:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    Ok(())
}

pub fn write_t4(t: &Tensor4) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(T4_HEADER_LEN + 4 * t.len());
    w.bytes(&T4_MAGIC);
    for &d in &t.dims {
        w.u32(d as u32);
    }
    w.u32(0);
    for &v in &t.data {
        w.f32(v);
    }
    w.into_inner()
}

pub fn read_t4(bytes: &[u8]) -> Result<Tensor4> {
    let mut r = ByteReader::new(bytes);
    r.magic(T4_MAGIC)?;
    let dims = r.dims()?;
    let reserved = r.u32()?;
    if reserved != 0 {
        return Err(Error::Malformed(format!(
            "reserved header field must be 0, found {reserved}"
        )));
    }
    let n = header_count(dims)?;
    let data = r.f32_vec(n)?;
    r.finish()?;
    Tensor4::new(dims, data)
}

/// Element count for dims read from a file header; zero extents are a format
/// problem there, not a caller mistake.
pub(crate) fn header_count(dims: Dims) -> Result<usize> {
    element_count(dims).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Malformed(m),
        other => other,
    })
}

/// Dims that must fit the 32-bit header fields of the binary formats.
pub(crate) fn check_u32_dims(dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::Overflow(format!("extent in {dims:?} exceeds 32 bits")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loop_norm(t: &Tensor4) -> f64 {
        let [a, b, c, d] = t.dims();
        let mut acc = 0.0f64;
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    for l in 0..d {
                        let v = t.get(i, j, k, l) as f64;
                        acc += v * v;
                    }
                }
            }
        }
        acc.sqrt()
    }

    #[test]
    fn norm_of_zero_tensor() {
        assert_eq!(frobenius_norm(&Tensor4::zeros([2, 2, 2, 2]).unwrap()), 0.0);
    }

    #[test]
    fn norm_three_four_five() {
        let t = Tensor4::new([2, 1, 1, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(frobenius_norm(&t), 5.0);
    }

    #[test]
    fn norm_matches_loop_oracle() {
        let t = Tensor4::random([3, 3, 3, 3], 11).unwrap();
        let (got, want) = (frobenius_norm(&t), loop_norm(&t));
        assert!((got - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn relative_error_cases() {
        let a = Tensor4::random([2, 3, 2, 2], 1).unwrap();
        assert_eq!(relative_error(&a, &a).unwrap(), 0.0);
        let z = Tensor4::zeros(a.dims()).unwrap();
        assert!((relative_error(&a, &z).unwrap() - 1.0).abs() < 1e-15);

        let b = Tensor4::random([2, 3, 2, 2], 2).unwrap();
        let diff = Tensor4::new(
            a.dims(),
            a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
        )
        .unwrap();
        // diff is rounded to f32; compare against the same rounding in the oracle
        let want = loop_norm(&diff) / loop_norm(&a);
        let got = relative_error(&a, &b).unwrap();
        assert!((got - want).abs() <= 1e-6 * want);
    }

    #[test]
    fn relative_error_errors() {
        let a = Tensor4::zeros([1, 1, 1, 2]).unwrap();
        assert!(matches!(relative_error(&a, &a), Err(Error::ZeroNorm)));
        let b = Tensor4::zeros([1, 1, 2, 1]).unwrap();
        assert!(matches!(relative_error(&a, &b), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(Tensor4::new([1, 1, 1, 2], vec![1.0]).is_err());
        assert!(matches!(
            Tensor4::new([1, 1, 1, 2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite(1))
        ));
        assert!(Tensor4::zeros([0, 1, 1, 1]).is_err());
    }

    #[test]
    fn t4_round_trip_and_size() {
        let t = Tensor4::random([2, 3, 4, 5], 3).unwrap();
        let bytes = write_t4(&t);
        let back = read_t4(&bytes).unwrap();
        assert_eq!(back.dims(), t.dims());
        assert!(back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(write_t4(&back), bytes);

        let fig1 = Tensor4::zeros([6, 3, 3, 1]).unwrap();
        assert_eq!(write_t4(&fig1).len(), 240);
    }

    #[test]
    fn t4_rejects_corruption() {
        let t = Tensor4::random([1, 2, 2, 1], 4).unwrap();
        let mut bytes = write_t4(&t);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_t4(&bad), Err(Error::BadMagic { .. })));

        assert!(matches!(
            read_t4(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));

        let mut reserved = bytes.clone();
        reserved[20] = 1;
        assert!(matches!(read_t4(&reserved), Err(Error::Malformed(_))));

        let mut huge = bytes.clone();
        for b in &mut huge[4..20] {
            *b = 0xff;
        }
        assert!(matches!(read_t4(&huge), Err(Error::Overflow(_))));

        bytes[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_t4(&bytes), Err(Error::NonFinite(0))));
    }
}
