//! Per-array lossy compression: top-magnitude sparsification followed by b-bit
//! min/max quantisation.
//!
//! A `b`-bit code addresses `2^b` equally spaced levels between the minimum and
//! maximum of the transmitted values; the all-zeros code is the minimum and the
//! all-ones code the maximum.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub const MIN_BITS: u32 = 1;
pub const MAX_BITS: u32 = 32;
pub const MAX_DROP_PERCENT: u32 = 50;
/// Two 32-bit extrema travel with every array.
pub const EXTREMA_BITS: u64 = 64;
/// Header bytes of the binary payload: bits, count, min, max.
pub const WIRE_HEADER_BYTES: usize = 1 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("{0}")]
    Argument(String),
    #[error("non-finite value at position {index}")]
    NonFinite { index: usize },
    #[error("corrupt payload: {0}")]
    Corruption(String),
}

/// Compression settings for one parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerCompressionSpec {
    pub bits: u32,
    pub drop_percent: u32,
}

impl LayerCompressionSpec {
    pub const UNCOMPRESSED: Self = Self {
        bits: 32,
        drop_percent: 0,
    };

    pub fn new(bits: u32, drop_percent: u32) -> Result<Self, CodecError> {
        let spec = Self { bits, drop_percent };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(CodecError::Argument(format!(
                "bits must lie in [{MIN_BITS}, {MAX_BITS}], got {}",
                self.bits
            )));
        }
        if self.drop_percent > MAX_DROP_PERCENT {
            return Err(CodecError::Argument(format!(
                "drop percent must lie in [0, {MAX_DROP_PERCENT}], got {}",
                self.drop_percent
            )));
        }
        Ok(())
    }
}

/// Number of entries that survive dropping `drop_percent`% of `n`: `ceil(n * (100 - mu) / 100)`.
pub fn kept_count(n: usize, drop_percent: u32) -> usize {
    (n * (100 - drop_percent as usize)).div_ceil(100)
}

/// Highest code for `bits`, i.e. `2^bits - 1`.
#[inline]
pub fn max_code(bits: u32) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

/// Quantisation step `(max - min) / (2^bits - 1)`.
#[inline]
pub fn step_size(w_min: f64, w_max: f64, bits: u32) -> f64 {
    (w_max - w_min) / max_code(bits) as f64
}

/// Positions of the `kept_count(n, mu)` largest-magnitude entries, ascending.
/// Equal magnitudes favour the lower index.
pub fn sparsify<T: Scalar>(layer: &[T], drop_percent: u32) -> Result<Vec<u32>, CodecError> {
    if layer.is_empty() {
        return Err(CodecError::Argument("cannot sparsify an empty array".into()));
    }
    if drop_percent > MAX_DROP_PERCENT {
        return Err(CodecError::Argument(format!(
            "drop percent {drop_percent} exceeds {MAX_DROP_PERCENT}"
        )));
    }
    if let Some(index) = layer.iter().position(|v| !v.is_finite()) {
        return Err(CodecError::NonFinite { index });
    }
    let k = kept_count(layer.len(), drop_percent);
    let mut idx: Vec<u32> = (0..layer.len() as u32).collect();
    if k < layer.len() {
        let by_magnitude = |a: &u32, b: &u32| -> Ordering {
            let (ma, mb) = (layer[*a as usize].abs(), layer[*b as usize].abs());
            mb.partial_cmp(&ma).unwrap().then(a.cmp(b))
        };
        idx.select_nth_unstable_by(k - 1, by_magnitude);
        idx.truncate(k);
        idx.sort_unstable();
    }
    Ok(idx)
}

/// Wire representation of one compressed array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPayload<T> {
    pub kept_indices: Vec<u32>,
    pub codes: Vec<u32>,
    pub w_min: T,
    pub w_max: T,
    pub bits: u32,
}

/// Encodes the values at `kept` with `bits`-bit codes over their own min/max range.
pub fn quantize<T: Scalar>(
    layer: &[T],
    kept: Vec<u32>,
    bits: u32,
) -> Result<LayerPayload<T>, CodecError> {
    if kept.is_empty() {
        return Err(CodecError::Argument("nothing to quantise".into()));
    }
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(CodecError::Argument(format!("bits {bits} out of range")));
    }
    let mut w_min = T::infinity();
    let mut w_max = T::neg_infinity();
    for &i in &kept {
        let v = *layer.get(i as usize).ok_or_else(|| {
            CodecError::Argument(format!("kept index {i} beyond array of {}", layer.len()))
        })?;
        if !v.is_finite() {
            return Err(CodecError::NonFinite { index: i as usize });
        }
        w_min = w_min.min(v);
        w_max = w_max.max(v);
    }
    let (lo, hi) = (w_min.as_f64(), w_max.as_f64());
    let top = max_code(bits);
    let mut payload = LayerPayload {
        kept_indices: kept,
        codes: Vec::new(),
        w_min,
        w_max,
        bits,
    };
    payload.codes = if hi == lo {
        vec![0; payload.kept_indices.len()]
    } else {
        let step = step_size(lo, hi, bits);
        payload
            .kept_indices
            .iter()
            .map(|&i| {
                let v = layer[i as usize].as_f64();
                // f64::round is half-away-from-zero; the argument is never negative
                let q = (((v - lo) / step).round().clamp(0.0, top as f64)) as u32;
                // at large b the rounded quotient can sit one code off the nearest stored level
                let err = |c: u32| (payload.level(c).as_f64() - v).abs();
                [q.saturating_sub(1), q.saturating_add(1).min(top)]
                    .into_iter()
                    .fold(q, |best, c| if err(c) < err(best) { c } else { best })
            })
            .collect()
    };
    Ok(payload)
}

/// Sparsifies then quantises one array.
pub fn compress<T: Scalar>(
    layer: &[T],
    spec: LayerCompressionSpec,
) -> Result<LayerPayload<T>, CodecError> {
    spec.validate()?;
    let kept = sparsify(layer, spec.drop_percent)?;
    quantize(layer, kept, spec.bits)
}

impl<T: Scalar> LayerPayload<T> {
    pub fn step(&self) -> f64 {
        step_size(self.w_min.as_f64(), self.w_max.as_f64(), self.bits)
    }

    /// Reconstructed value of one code.
    pub fn level(&self, code: u32) -> T {
        if code == max_code(self.bits) && code != 0 {
            return self.w_max;
        }
        if code == 0 {
            return self.w_min;
        }
        T::of(self.w_min.as_f64() + code as f64 * self.step())
    }

    fn check(&self, n: usize) -> Result<(), CodecError> {
        if self.codes.len() != self.kept_indices.len() {
            return Err(CodecError::Corruption(format!(
                "{} codes for {} indices",
                self.codes.len(),
                self.kept_indices.len()
            )));
        }
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(CodecError::Corruption(format!("bit width {}", self.bits)));
        }
        if let Some(&i) = self.kept_indices.iter().find(|&&i| i as usize >= n) {
            return Err(CodecError::Corruption(format!(
                "index {i} outside array of length {n}"
            )));
        }
        if let Some(&c) = self.codes.iter().find(|&&c| c > max_code(self.bits)) {
            return Err(CodecError::Corruption(format!(
                "code {c} wider than {} bits",
                self.bits
            )));
        }
        Ok(())
    }

    /// Writes reconstructed values at the kept positions of `out`; other positions
    /// are left untouched.
    pub fn dequantize_into(&self, out: &mut [T]) -> Result<(), CodecError> {
        self.check(out.len())?;
        for (&i, &c) in self.kept_indices.iter().zip(&self.codes) {
            out[i as usize] = self.level(c);
        }
        Ok(())
    }

    /// Array of length `n` with dropped positions set to `filler`.
    pub fn dequantize(&self, n: usize, filler: T) -> Result<Vec<T>, CodecError> {
        let mut out = vec![filler; n];
        self.dequantize_into(&mut out)?;
        Ok(out)
    }

    /// Bits charged for this payload: codes plus the two extrema.
    pub fn bits_on_wire(&self) -> u64 {
        self.codes.len() as u64 * self.bits as u64 + EXTREMA_BITS
    }

    /// Little-endian binary layout:
    /// `[u8 bits][u32 n_kept][f32 min][f32 max][codes, bits each, LSB-first][u32 index deltas]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.codes.len();
        let mut out = Vec::with_capacity(WIRE_HEADER_BYTES + packed_len(n, self.bits) + 4 * n);
        out.push(self.bits as u8);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(self.w_min.as_f64() as f32).to_le_bytes());
        out.extend_from_slice(&(self.w_max.as_f64() as f32).to_le_bytes());
        pack_codes(&self.codes, self.bits, &mut out);
        let mut prev = 0u32;
        for &i in &self.kept_indices {
            out.extend_from_slice(&(i - prev).to_le_bytes());
            prev = i;
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let short = || CodecError::Corruption(format!("payload of {} bytes is truncated", bytes.len()));
        let u32_at = |o: usize| -> Result<u32, CodecError> {
            bytes
                .get(o..o + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(short)
        };
        let bits = *bytes.first().ok_or_else(short)? as u32;
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(CodecError::Corruption(format!("bit width {bits}")));
        }
        let n = u32_at(1)? as usize;
        let w_min = f32::from_bits(u32_at(5)?);
        let w_max = f32::from_bits(u32_at(9)?);
        if !(w_min <= w_max) {
            return Err(CodecError::Corruption(format!("min {w_min} exceeds max {w_max}")));
        }
        let code_bytes = packed_len(n, bits);
        let expected = WIRE_HEADER_BYTES + code_bytes + 4 * n;
        if bytes.len() != expected {
            return Err(CodecError::Corruption(format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let codes = unpack_codes(&bytes[WIRE_HEADER_BYTES..WIRE_HEADER_BYTES + code_bytes], n, bits);
        let mut kept_indices = Vec::with_capacity(n);
        let mut prev = 0u32;
        let base = WIRE_HEADER_BYTES + code_bytes;
        for k in 0..n {
            let delta = u32_at(base + 4 * k)?;
            if k > 0 && delta == 0 {
                return Err(CodecError::Corruption("indices are not strictly increasing".into()));
            }
            prev = prev
                .checked_add(delta)
                .ok_or_else(|| CodecError::Corruption("index overflow".into()))?;
            kept_indices.push(prev);
        }
        Ok(Self {
            kept_indices,
            codes,
            w_min: T::of(w_min as f64),
            w_max: T::of(w_max as f64),
            bits,
        })
    }
}

/// Bytes needed for `n` codes of `bits` bits.
pub fn packed_len(n: usize, bits: u32) -> usize {
    (n * bits as usize).div_ceil(8)
}

fn pack_codes(codes: &[u32], bits: u32, out: &mut Vec<u8>) {
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &c in codes {
        acc |= (c as u64) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
}

fn unpack_codes(bytes: &[u8], n: usize, bits: u32) -> Vec<u32> {
    let mask = max_code(bits) as u64;
    let mut codes = Vec::with_capacity(n);
    let mut acc: u64 = 0;
    let mut avail = 0u32;
    let mut src = bytes.iter();
    for _ in 0..n {
        while avail < bits {
            acc |= (*src.next().unwrap_or(&0) as u64) << avail;
            avail += 8;
        }
        codes.push((acc & mask) as u32);
        acc >>= bits;
        avail -= bits;
    }
    codes
}

/// Bits one client uploads for a whole model: `sum_i kept(n_i, mu_i) * b_i + 64 * l`.
/// Index sets are not charged.
pub fn payload_bits(specs: &[LayerCompressionSpec], shapes: &[usize]) -> u64 {
    assert_eq!(specs.len(), shapes.len(), "one spec per array");
    specs
        .iter()
        .zip(shapes)
        .map(|(s, &n)| kept_count(n, s.drop_percent) as u64 * s.bits as u64 + EXTREMA_BITS)
        .sum()
}

/// Uncompressed model size in bits, `sum_i 32 * n_i`.
pub fn full_model_bits(shapes: &[usize]) -> u64 {
    shapes.iter().map(|&n| 32 * n as u64).sum()
}
