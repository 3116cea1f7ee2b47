//! Bit-exact serialization of quantized weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic           4 bytes  "DLQT"
//! format version  u16
//! bits n          u8
//! granularity     u8       0 = per-channel, 1 = grouped
//! group size      u32      0 when per-channel
//! tensor records  ...      repeated until 4 bytes before EOF
//! crc32           u32      IEEE CRC-32 of every preceding byte
//! ```
//!
//! Each tensor record:
//!
//! ```text
//! name length     u16
//! name            UTF-8 bytes
//! n_dims          u8       (2 for weight matrices)
//! dims            u32 each, row-major order [c_out, c_in]
//! packed grid     ceil(numel * n / 8) bytes
//! s, b, m         group_count binary32 each, in that order
//! ```
//!
//! Grid integers are stored as unsigned offsets `v + 2^(n-1)` in
//! `[0, 2^n - 1]`, packed LSB-first within each byte, elements in row-major
//! order. The only padding is the final partial byte of each tensor's grid.
//! Metadata is binary32 regardless of training precision; equivalence
//! checks against an in-memory model require snapping its parameters
//! through binary32 first (see [`crate::quant::QuantParams::snap_to_binary32`]).

use crate::error::{Error, PackError, Result};
use crate::quant::{dequant_value, quantize_ints, Granularity, GroupView, QuantParams, QuantSpec};
use crate::tensor::{matmul_nn, Tensor};

pub const MAGIC: [u8; 4] = *b"DLQT";
pub const FORMAT_VERSION: u16 = 1;

/// One tensor to serialize: its effective weight plus group parameters.
pub struct PackInput<'a> {
    pub name: &'a str,
    pub weight: &'a Tensor,
    pub params: &'a QuantParams,
}

/// Decoded contents of one packed tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    /// Signed grid values, row-major.
    pub grid: Vec<i32>,
    pub s: Vec<f32>,
    pub b: Vec<f32>,
    pub m: Vec<f32>,
}

/// Decoded pack file.
#[derive(Debug, Clone, PartialEq)]
pub struct PackFile {
    pub bits: u8,
    pub granularity: Granularity,
    pub tensors: Vec<PackedTensor>,
}

impl PackFile {
    pub fn spec(&self) -> Result<QuantSpec> {
        QuantSpec::new(self.bits, self.granularity)
    }

    pub fn tensor(&self, name: &str) -> Result<&PackedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| PackError::UnknownTensor(name.to_string()).into())
    }

    /// Reconstruct `m * (s * grid + b)` for one tensor, widening the stored
    /// binary32 metadata to f64 exactly.
    pub fn dequantize_tensor(&self, name: &str) -> Result<Tensor> {
        let t = self.tensor(name)?;
        let (rows, cols) = t.dims2()?;
        let view = GroupView::new(rows, cols, self.granularity)?;
        if t.s.len() != view.group_count() {
            return Err(PackError::Malformed(format!(
                "tensor {}: {} groups of metadata for {} groups of weights",
                t.name,
                t.s.len(),
                view.group_count()
            ))
            .into());
        }
        let mut data = vec![0.0; t.grid.len()];
        for r in 0..rows {
            for c in 0..cols {
                let g = view.group_of(r, c);
                let idx = r * cols + c;
                data[idx] = dequant_value(
                    t.grid[idx],
                    t.s[g] as f64,
                    t.b[g] as f64,
                    t.m[g] as f64,
                );
            }
        }
        Tensor::new(vec![rows, cols], data)
    }
}

impl PackedTensor {
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r as usize, *c as usize)),
            other => Err(PackError::Malformed(format!(
                "tensor {}: expected 2 dims, found {}",
                self.name,
                other.len()
            ))
            .into()),
        }
    }
}

/// `Y = W_q * X` straight from the pack file. Bit-identical to the forward
/// of the in-memory layer the tensor was packed from (after its params
/// were snapped to binary32).
pub fn packed_linear_forward(pack: &PackFile, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = pack.dequantize_tensor(name)?;
    let (rows, cols) = w.dims2()?;
    let (xr, xc) = x.dims2()?;
    if xr != cols {
        return Err(Error::shape(
            "packed_linear_forward",
            format!("weight is {rows}x{cols}, input is {xr}x{xc}"),
        ));
    }
    Tensor::new(vec![rows, xc], matmul_nn(w.data(), x.data(), rows, cols, xc))
}

/// Serialize tensors under one shared quantizer spec.
///
/// `s`, `b`, `m` are rounded to binary32 and the grids are computed from
/// the rounded values, so the file is self-consistent: dequantizing it
/// reproduces exactly what a binary32-snapped in-memory model computes.
pub fn pack(inputs: &[PackInput], spec: &QuantSpec) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(spec.bits);
    match spec.granularity {
        Granularity::PerChannel => {
            out.push(0);
            out.extend_from_slice(&0u32.to_le_bytes());
        }
        Granularity::Group(g) => {
            out.push(1);
            out.extend_from_slice(&(g as u32).to_le_bytes());
        }
    }

    for input in inputs {
        if !input.weight.is_finite()
            || !input.params.s.is_finite()
            || !input.params.b.is_finite()
            || !input.params.m.is_finite()
        {
            return Err(Error::NonFinite { op: "pack" });
        }
        let (rows, cols) = input.weight.dims2()?;
        let view = GroupView::new(rows, cols, spec.granularity)?;
        if input.params.group_count() != view.group_count() {
            return Err(Error::shape(
                "pack",
                format!(
                    "tensor {}: {} group params for {} groups",
                    input.name,
                    input.params.group_count(),
                    view.group_count()
                ),
            ));
        }
        let name_bytes = input.name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Config(format!("tensor name too long: {}", input.name)));
        }

        // snap metadata to its storage width, then quantize with the
        // snapped values so grid and metadata agree exactly
        let s32: Vec<f32> = input.params.s.data().iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = input.params.b.data().iter().map(|&v| v as f32).collect();
        let m32: Vec<f32> = input.params.m.data().iter().map(|&v| v as f32).collect();
        let s64 = Tensor::new(
            input.params.s.shape().to_vec(),
            s32.iter().map(|&v| v as f64).collect(),
        )?;
        let b64 = Tensor::new(
            input.params.b.shape().to_vec(),
            b32.iter().map(|&v| v as f64).collect(),
        )?;
        let grid = quantize_ints(input.weight, &s64, &b64, spec)?;

        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(2);
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());

        let offset = 1i32 << (spec.bits - 1);
        let mut writer = BitWriter::new();
        for &q in &grid {
            writer.push((q + offset) as u32, spec.bits as u32);
        }
        out.extend_from_slice(&writer.finish());

        for arr in [&s32, &b32, &m32] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parse and verify a pack file.
pub fn unpack(bytes: &[u8]) -> Result<PackFile> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(PackError::BadMagic.into());
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(PackError::BadVersion(version).into());
    }
    let bits = r.u8()?;
    if !(2..=8).contains(&bits) {
        return Err(PackError::Malformed(format!("bits {bits} outside [2, 8]")).into());
    }
    let tag = r.u8()?;
    let group_size = r.u32()?;
    let granularity = match (tag, group_size) {
        (0, 0) => Granularity::PerChannel,
        (0, g) => return Err(PackError::Malformed(format!("per-channel with group size {g}")).into()),
        (1, 0) => return Err(PackError::Malformed("grouped with group size 0".into()).into()),
        (1, g) => Granularity::Group(g as usize),
        (t, _) => return Err(PackError::Malformed(format!("unknown granularity tag {t}")).into()),
    };

    if bytes.len() < r.pos + 4 {
        return Err(PackError::Truncated("missing crc".into()).into());
    }
    let payload_end = bytes.len() - 4;

    let mut tensors = Vec::new();
    while r.pos < payload_end {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| PackError::Malformed("tensor name is not UTF-8".into()))?;
        let n_dims = r.u8()?;
        if n_dims != 2 {
            return Err(PackError::Malformed(format!(
                "tensor {name}: {n_dims} dims unsupported in version {FORMAT_VERSION}"
            ))
            .into());
        }
        let mut dims = Vec::with_capacity(n_dims as usize);
        for _ in 0..n_dims {
            dims.push(r.u32()?);
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        if numel == 0 {
            return Err(PackError::Malformed(format!("tensor {name}: empty dims {dims:?}")).into());
        }
        let grid_bytes = (numel * bits as usize).div_ceil(8);
        let packed = r.take(grid_bytes)?;
        let offset = 1i32 << (bits - 1);
        let max_unsigned = (1u32 << bits) - 1;
        let mut reader = BitReader::new(packed);
        let mut grid = Vec::with_capacity(numel);
        for _ in 0..numel {
            let raw = reader.pull(bits as u32);
            debug_assert!(raw <= max_unsigned);
            grid.push(raw as i32 - offset);
        }
        let view = GroupView::new(dims[0] as usize, dims[1] as usize, granularity)?;
        let groups = view.group_count();
        let mut meta = [Vec::new(), Vec::new(), Vec::new()];
        for arr in &mut meta {
            arr.reserve(groups);
            for _ in 0..groups {
                let raw = r.take(4)?;
                arr.push(f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]));
            }
        }
        if r.pos > payload_end {
            return Err(PackError::Truncated(format!("tensor {name} overruns the payload")).into());
        }
        let [s, b, m] = meta;
        tensors.push(PackedTensor { name, dims, grid, s, b, m });
    }

    let stored = u32::from_le_bytes([
        bytes[payload_end],
        bytes[payload_end + 1],
        bytes[payload_end + 2],
        bytes[payload_end + 3],
    ]);
    let computed = crc32(&bytes[..payload_end]);
    if stored != computed {
        return Err(PackError::CrcMismatch { stored, computed }.into());
    }

    Ok(PackFile { bits, granularity, tensors })
}

// -- helpers -----------------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PackError::Truncated(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
            .into());
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    nbits: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter { out: Vec::new(), acc: 0, nbits: 0 }
    }

    fn push(&mut self, value: u32, bits: u32) {
        self.acc |= u64::from(value) << self.nbits;
        self.nbits += bits;
        while self.nbits >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.nbits -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.out.push(self.acc as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    acc: u64,
    nbits: u32,
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, acc: 0, nbits: 0, pos: 0 }
    }

    fn pull(&mut self, bits: u32) -> u32 {
        while self.nbits < bits {
            self.acc |= u64::from(self.bytes[self.pos]) << self.nbits;
            self.pos += 1;
            self.nbits += 8;
        }
        let v = (self.acc & ((1u64 << bits) - 1)) as u32;
        self.acc >>= bits;
        self.nbits -= bits;
        v
    }
}

/// IEEE CRC-32 (reflected, poly 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_input(rows: usize, cols: usize, spec: &QuantSpec, salt: u64) -> (Tensor, QuantParams) {
        let mut state = salt.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let w = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| next() * 0.8).collect()).unwrap();
        let mut params = QuantParams::init_from_weight(&w, spec).unwrap();
        for v in params.m.data_mut() {
            *v = 1.0 + next().abs() * 0.2;
        }
        params.snap_to_binary32();
        (w, params)
    }

    #[test]
    fn crc32_reference_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    /// Independent bit-level packer: writes each value's bits one at a time.
    fn bit_oracle(values: &[u32], bits: u32) -> Vec<u8> {
        let mut out = Vec::new();
        let mut bitpos = 0usize;
        for &v in values {
            for k in 0..bits {
                if bitpos % 8 == 0 {
                    out.push(0);
                }
                let bit = (v >> k) & 1;
                let last = out.last_mut().unwrap();
                *last |= (bit as u8) << (bitpos % 8);
                bitpos += 1;
            }
        }
        out
    }

    #[test]
    fn three_bit_packing_matches_bit_oracle() {
        // 8 elements at 3 bits: 3 bytes, elements straddling byte boundaries
        let values: Vec<u32> = vec![5, 0, 7, 3, 1, 6, 2, 4];
        let mut w = BitWriter::new();
        for &v in &values {
            w.push(v, 3);
        }
        let packed = w.finish();
        assert_eq!(packed.len(), 3);
        assert_eq!(packed, bit_oracle(&values, 3));
        let mut r = BitReader::new(&packed);
        for &v in &values {
            assert_eq!(r.pull(3), v);
        }
    }

    #[test]
    fn grid_size_arithmetic() {
        // 1x8 weight, n = 4, one group of 8: 4 grid bytes + one s/b/m triple
        let spec = QuantSpec::grouped(4, 8).unwrap();
        let (w, params) = toy_input(1, 8, &spec, 3);
        let bytes = pack(&[PackInput { name: "w", weight: &w, params: &params }], &spec).unwrap();
        let header = 4 + 2 + 1 + 1 + 4;
        let record = 2 + 1 + 1 + 8 + (8 * 4usize).div_ceil(8) + 3 * 4;
        assert_eq!(bytes.len(), header + record + 4);
    }

    #[test]
    fn pack_is_deterministic() {
        let spec = QuantSpec::grouped(3, 4).unwrap();
        let (w, params) = toy_input(5, 6, &spec, 9);
        let a = pack(&[PackInput { name: "w", weight: &w, params: &params }], &spec).unwrap();
        let b = pack(&[PackInput { name: "w", weight: &w, params: &params }], &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn round_trip_restores_grid_and_metadata() {
        for bits in [2u8, 3, 4, 5, 8] {
            for granularity in [Granularity::PerChannel, Granularity::Group(3)] {
                let spec = QuantSpec::new(bits, granularity).unwrap();
                // cols deliberately not aligned to the packing width
                let (w, params) = toy_input(4, 7, &spec, u64::from(bits));
                let grid = quantize_ints(&w, &params.s, &params.b, &spec).unwrap();
                let bytes =
                    pack(&[PackInput { name: "layer.w", weight: &w, params: &params }], &spec).unwrap();
                let pf = unpack(&bytes).unwrap();
                let t = pf.tensor("layer.w").unwrap();
                assert_eq!(t.grid, grid);
                let s32: Vec<f32> = params.s.data().iter().map(|&v| v as f32).collect();
                assert_eq!(t.s, s32);

                // dequantized weights equal the in-memory fake quantization
                let dq = pf.dequantize_tensor("layer.w").unwrap();
                let fq = crate::quant::fake_quantize(&w, &params, &spec).unwrap();
                assert_eq!(dq.data(), fq.data());
            }
        }
    }

    #[test]
    fn corruption_errors_are_distinct() {
        let spec = QuantSpec::grouped(4, 4).unwrap();
        let (w, params) = toy_input(3, 4, &spec, 21);
        let bytes = pack(&[PackInput { name: "w", weight: &w, params: &params }], &spec).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(unpack(&bad), Err(Error::Pack(PackError::BadMagic))));

        let mut bad = bytes.clone();
        bad[4] = 0xFF;
        assert!(matches!(unpack(&bad), Err(Error::Pack(PackError::BadVersion(_)))));

        // flip one payload byte inside the metadata region
        let mut bad = bytes.clone();
        let idx = bytes.len() - 6;
        bad[idx] ^= 0x40;
        assert!(matches!(unpack(&bad), Err(Error::Pack(PackError::CrcMismatch { .. }))));

        let bad = &bytes[..bytes.len() - 9];
        assert!(matches!(unpack(bad), Err(Error::Pack(PackError::Truncated(_)))));
    }

    #[test]
    fn packed_forward_matches_in_memory_product() {
        let spec = QuantSpec::per_channel(4).unwrap();
        let (w, params) = toy_input(4, 5, &spec, 33);
        let bytes = pack(&[PackInput { name: "w", weight: &w, params: &params }], &spec).unwrap();
        let pf = unpack(&bytes).unwrap();
        let x = Tensor::new(vec![5, 3], (0..15).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        let y = packed_linear_forward(&pf, "w", &x).unwrap();

        let fq = crate::quant::fake_quantize(&w, &params, &spec).unwrap();
        let want = matmul_nn(fq.data(), x.data(), 4, 5, 3);
        assert_eq!(y.data(), want.as_slice());

        assert!(packed_linear_forward(&pf, "nope", &x).is_err());
    }
}
