//! Deterministic tensor container, the BYAT on-disk format, token-grid index
//! arithmetic, and pixel-to-token mask downsampling.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "BYAT"
//! 4       1     version (1)
//! 5       1     dtype code (1 = f32 LE, 2 = u8)
//! 6       1     rank
//! 7       1     reserved (0)
//! 8       4*r   dims as u32
//! ..      n     row-major payload (last dimension fastest)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BYAT";
const VERSION: u8 = 1;

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::U8 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::U8),
            other => Err(Error::format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Raw element storage backing a [`Tensor`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major n-dimensional tensor with `f32` or `u8` elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    /// Build an `f32` tensor, validating the element count and finiteness.
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero dimension in shape {shape:?}")));
        }
        if data.len() != expect {
            return Err(Error::shape(format!(
                "shape {shape:?} expects {expect} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("non-finite f32 value".to_string()));
        }
        Ok(Tensor {
            shape,
            data: TensorData::F32(data),
        })
    }

    /// Build a `u8` tensor, validating the element count.
    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero dimension in shape {shape:?}")));
        }
        if data.len() != expect {
            return Err(Error::shape(format!(
                "shape {shape:?} expects {expect} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: TensorData::U8(data),
        })
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::format("expected f32 tensor, found u8".to_string())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::format("expected u8 tensor, found f32".to_string())),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::format("expected f32 tensor, found u8".to_string())),
        }
    }

    pub fn into_u8(self) -> Result<Vec<u8>> {
        match self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::format("expected u8 tensor, found f32".to_string())),
        }
    }
}

/// Write a tensor in the BYAT format described in the module docs.
pub fn write_tensor(tensor: &Tensor, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_tensor_to(tensor, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_tensor_to(tensor: &Tensor, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[
        VERSION,
        tensor.dtype().code(),
        u8::try_from(tensor.shape.len())
            .map_err(|_| Error::shape("rank exceeds 255".to_string()))?,
        0,
    ])?;
    for &dim in &tensor.shape {
        let d = u32::try_from(dim).map_err(|_| Error::shape("dimension exceeds u32".to_string()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match &tensor.data {
        TensorData::F32(values) => {
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        TensorData::U8(values) => w.write_all(values)?,
    }
    Ok(())
}

/// Read a tensor written by [`write_tensor`].
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_tensor_from(&mut r)
}

pub fn read_tensor_from(r: &mut impl Read) -> Result<Tensor> {
    let mut header = [0u8; 8];
    r.read_exact(&mut header)
        .map_err(|_| Error::format("truncated header".to_string()))?;
    if &header[0..4] != MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            &header[0..4],
            MAGIC
        )));
    }
    if header[4] != VERSION {
        return Err(Error::format(format!("unsupported version {}", header[4])));
    }
    let dtype = DType::from_code(header[5])?;
    let rank = header[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 4];
        r.read_exact(&mut dim)
            .map_err(|_| Error::format("truncated dims".to_string()))?;
        shape.push(u32::from_le_bytes(dim) as usize);
    }
    let count: usize = shape.iter().product();
    let tensor = match dtype {
        DType::F32 => {
            let mut raw = vec![0u8; count * 4];
            r.read_exact(&mut raw)
                .map_err(|_| Error::format("truncated f32 payload".to_string()))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::from_f32(shape, values)?
        }
        DType::U8 => {
            let mut values = vec![0u8; count];
            r.read_exact(&mut values)
                .map_err(|_| Error::format("truncated u8 payload".to_string()))?;
            Tensor::from_u8(shape, values)?
        }
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after payload".to_string()));
    }
    Ok(tensor)
}

/// Latent token grid extents: `t_len` frames by `h_len` x `w_len` patch cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGridDims {
    pub t_len: usize,
    pub h_len: usize,
    pub w_len: usize,
}

impl TokenGridDims {
    pub fn new(t_len: usize, h_len: usize, w_len: usize) -> Result<Self> {
        if t_len == 0 || h_len == 0 || w_len == 0 {
            return Err(Error::shape("token grid extents must be positive".to_string()));
        }
        Ok(TokenGridDims { t_len, h_len, w_len })
    }

    /// Total token count `S = t_len * h_len * w_len`.
    pub fn token_count(&self) -> usize {
        self.t_len * self.h_len * self.w_len
    }
}

/// Canonical flattening: t-major, then h, then w.
pub fn token_flatten(t: usize, h: usize, w: usize, dims: TokenGridDims) -> Result<usize> {
    if t >= dims.t_len || h >= dims.h_len || w >= dims.w_len {
        return Err(Error::bounds(format!(
            "token ({t},{h},{w}) outside grid {}x{}x{}",
            dims.t_len, dims.h_len, dims.w_len
        )));
    }
    Ok(t * dims.h_len * dims.w_len + h * dims.w_len + w)
}

/// Inverse of [`token_flatten`].
pub fn token_unflatten(index: usize, dims: TokenGridDims) -> Result<(usize, usize, usize)> {
    if index >= dims.token_count() {
        return Err(Error::bounds(format!(
            "flat index {index} outside grid of {} tokens",
            dims.token_count()
        )));
    }
    let per_frame = dims.h_len * dims.w_len;
    let t = index / per_frame;
    let rest = index % per_frame;
    Ok((t, rest / dims.w_len, rest % dims.w_len))
}

/// Area-mean downsampling of a pixel mask `n x T x H x W` (u8) to the token
/// grid `n x T x (H/f) x (W/f)` (f32 in `[0, 1]`) where `f = spatial_factor * tau`.
///
/// The frame count is preserved: the toy latent keeps T' = T.
pub fn downsample_mask(pixel_mask: &Tensor, spatial_factor: usize, tau: usize) -> Result<Tensor> {
    let shape = pixel_mask.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "expected n x T x H x W mask, got rank {}",
            shape.len()
        )));
    }
    let (n, t_len, height, width) = (shape[0], shape[1], shape[2], shape[3]);
    let factor = spatial_factor * tau;
    if factor == 0 || height % factor != 0 || width % factor != 0 {
        return Err(Error::shape(format!(
            "mask {height}x{width} not divisible by block {factor}"
        )));
    }
    let data = pixel_mask.as_u8()?;
    let (oh, ow) = (height / factor, width / factor);
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = vec![0f32; n * t_len * oh * ow];
    for c in 0..n {
        for t in 0..t_len {
            let frame = &data[(c * t_len + t) * height * width..(c * t_len + t + 1) * height * width];
            for bh in 0..oh {
                for bw in 0..ow {
                    let mut acc = 0u32;
                    for dy in 0..factor {
                        let row = (bh * factor + dy) * width + bw * factor;
                        for dx in 0..factor {
                            acc += u32::from(frame[row + dx]);
                        }
                    }
                    out[((c * t_len + t) * oh + bh) * ow + bw] = acc as f32 * norm;
                }
            }
        }
    }
    Tensor::from_f32(vec![n, t_len, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_f32_scalar_writes_16_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.byat");
        let t = Tensor::from_f32(vec![1], vec![0.0]).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16);
    }

    #[test]
    fn element_count_mismatch_rejected_before_write() {
        assert!(Tensor::from_f32(vec![2, 2], vec![0.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn round_trip_u8() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.byat");
        let t = Tensor::from_u8(vec![3, 4], (0u8..12).collect()).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.byat");
        let t = Tensor::from_f32(vec![1], vec![0.5]).unwrap();
        write_tensor(&t, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.byat");
        let t = Tensor::from_f32(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        write_tensor(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Declared dims 2x2 but only 3 f32 values present.
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format(_))));
    }

    #[test]
    fn token_flatten_examples() {
        let dims = TokenGridDims::new(4, 4, 4).unwrap();
        assert_eq!(token_flatten(0, 0, 0, dims).unwrap(), 0);
        assert_eq!(token_flatten(1, 2, 3, dims).unwrap(), 27);
        assert_eq!(token_flatten(3, 3, 3, dims).unwrap(), 63);
        assert!(token_flatten(4, 0, 0, dims).is_err());
    }

    #[test]
    fn downsample_all_ones_is_identity_mass() {
        let t = Tensor::from_u8(vec![1, 1, 8, 8], vec![1u8; 64]).unwrap();
        let down = downsample_mask(&t, 4, 2).unwrap();
        assert_eq!(down.shape(), &[1, 1, 1, 1]);
        assert_eq!(down.as_f32().unwrap(), &[1.0]);
    }

    #[test]
    fn downsample_top_left_block() {
        // 1x1x4x4 with exactly the top-left 2x2 block set, block size 2.
        let mut data = vec![0u8; 16];
        data[0] = 1;
        data[1] = 1;
        data[4] = 1;
        data[5] = 1;
        let t = Tensor::from_u8(vec![1, 1, 4, 4], data).unwrap();
        let down = downsample_mask(&t, 2, 1).unwrap();
        assert_eq!(down.as_f32().unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn downsample_checkerboard_is_half() {
        let mut data = vec![0u8; 64];
        for y in 0..8 {
            for x in 0..8 {
                data[y * 8 + x] = ((x + y) % 2) as u8;
            }
        }
        let t = Tensor::from_u8(vec![1, 1, 8, 8], data).unwrap();
        let down = downsample_mask(&t, 2, 1).unwrap();
        for &v in down.as_f32().unwrap() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    // Brute-force block averaging oracle for random masks.
    fn downsample_oracle(data: &[u8], h: usize, w: usize, f: usize) -> Vec<f32> {
        let (oh, ow) = (h / f, w / f);
        let mut out = vec![0f32; oh * ow];
        for y in 0..h {
            for x in 0..w {
                out[(y / f) * ow + x / f] += f32::from(data[y * w + x]);
            }
        }
        out.iter().map(|v| v / (f * f) as f32).collect()
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(
            t in 0usize..6, h in 0usize..5, w in 0usize..7
        ) {
            let dims = TokenGridDims::new(6, 5, 7).unwrap();
            let flat = token_flatten(t, h, w, dims).unwrap();
            prop_assert_eq!(token_unflatten(flat, dims).unwrap(), (t, h, w));
        }

        #[test]
        fn write_read_round_trip_f32(
            shape in proptest::collection::vec(1usize..4, 1..=5),
            seed in any::<u32>()
        ) {
            let count: usize = shape.iter().product();
            let values: Vec<f32> =
                (0..count).map(|i| ((i as u32).wrapping_mul(seed) % 1000) as f32 / 7.0).collect();
            let t = Tensor::from_f32(shape, values).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.byat");
            write_tensor(&t, &path).unwrap();
            prop_assert_eq!(read_tensor(&path).unwrap(), t);
        }

        #[test]
        fn write_read_round_trip_u8(
            shape in proptest::collection::vec(1usize..4, 1..=5),
            seed in any::<u8>()
        ) {
            let count: usize = shape.iter().product();
            let values: Vec<u8> = (0..count).map(|i| (i as u8).wrapping_mul(seed)).collect();
            let t = Tensor::from_u8(shape, values).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.byat");
            write_tensor(&t, &path).unwrap();
            prop_assert_eq!(read_tensor(&path).unwrap(), t);
        }

        #[test]
        fn downsample_matches_oracle_and_preserves_mass(bits in proptest::collection::vec(0u8..2, 64)) {
            let t = Tensor::from_u8(vec![1, 1, 8, 8], bits.clone()).unwrap();
            let down = downsample_mask(&t, 2, 2).unwrap();
            let oracle = downsample_oracle(&bits, 8, 8, 4);
            for (a, b) in down.as_f32().unwrap().iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            let total_in: f32 = bits.iter().map(|&b| f32::from(b)).sum();
            let total_out: f32 = down.as_f32().unwrap().iter().sum::<f32>() * 16.0;
            prop_assert!((total_in - total_out).abs() <= 1e-5 * total_in.max(1.0));
        }
    }
}
