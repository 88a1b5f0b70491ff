//! Single-file NIfTI-1 reading and writing, optionally gzip-compressed.
//!
//! Geometry comes from `pixdim` only. Orientation fields (qform/sform) are
//! carried through on write but never applied.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, BigEndian};
use flate2::read::MultiGzDecoder;
use flate2::{Compression, GzBuilder};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const HEADER_SIZE: usize = 348;
const NIFTI2_HEADER_SIZE: i32 = 540;
/// Header plus the 4-byte extension flag.
pub const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

mod off {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const MAGIC: usize = 344;
}

/// Byte ranges of the multi-byte numeric header fields as `(offset, width, count)`.
const NUMERIC_FIELDS: &[(usize, usize, usize)] = &[
    (0, 4, 1),
    (32, 4, 1),
    (36, 2, 1),
    (40, 2, 8),
    (56, 4, 3),
    (68, 2, 4),
    (76, 4, 8),
    (108, 4, 3),
    (120, 2, 1),
    (124, 4, 6),
    (252, 2, 2),
    (256, 4, 18),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            8 => Ok(Datatype::I32),
            16 => Ok(Datatype::F32),
            64 => Ok(Datatype::F64),
            c => Err(Error::UnsupportedDatatype(c)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Datatype::U8 | Datatype::I16 | Datatype::I32)
    }

    /// Datatype recorded in a header retained by [`read_nifti`].
    pub fn of_header(header: &[u8]) -> Option<Self> {
        (header.len() == HEADER_SIZE)
            .then(|| Self::from_code(LittleEndian::read_i16(&header[off::DATATYPE..])).ok())
            .flatten()
    }
}

fn is_gzip_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// Reverses the byte order of every numeric header field in place.
fn swap_header(h: &mut [u8]) {
    for &(start, width, count) in NUMERIC_FIELDS {
        for f in 0..count {
            h[start + f * width..start + (f + 1) * width].reverse();
        }
    }
}

/// Decodes a NIfTI-1 image from its (decompressed) bytes. The header is kept
/// on the volume in little-endian layout.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            expected: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let mut h = bytes[..HEADER_SIZE].to_vec();
    let big_endian = match (LittleEndian::read_i32(&h), BigEndian::read_i32(&h)) {
        (348, _) => false,
        (_, 348) => true,
        (NIFTI2_HEADER_SIZE, _) | (_, NIFTI2_HEADER_SIZE) => {
            return Err(Error::Format("NIfTI-2 files are not supported".into()))
        }
        (n, _) => return Err(Error::Format(format!("sizeof_hdr is {n}, expected 348"))),
    };
    if big_endian {
        swap_header(&mut h);
    }
    match &h[off::MAGIC..off::MAGIC + 4] {
        m if m == MAGIC_SINGLE => {}
        m if m == MAGIC_PAIR => {
            return Err(Error::Format(
                "two-file (.hdr/.img) NIfTI is not supported; convert to single-file .nii".into(),
            ))
        }
        m => return Err(Error::Format(format!("bad magic {m:?}"))),
    }
    let dim: Vec<i16> = (0..8).map(|i| LittleEndian::read_i16(&h[off::DIM + 2 * i..])).collect();
    if dim[0] != 3 {
        return Err(Error::Dimensionality(dim[0]));
    }
    if dim[1..4].iter().any(|&d| d <= 0) {
        return Err(Error::Format(format!("non-positive dimensions {:?}", &dim[1..4])));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let dtype = Datatype::from_code(LittleEndian::read_i16(&h[off::DATATYPE..]))?;
    let pix = |a: usize| LittleEndian::read_f32(&h[off::PIXDIM + 4 * a..]) as f64;
    let spacing = [pix(1).abs(), pix(2).abs(), pix(3).abs()];
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Format(format!("invalid pixdim spacing {spacing:?}")));
    }
    let vox = LittleEndian::read_f32(&h[off::VOX_OFFSET..]);
    if !(vox >= HEADER_SIZE as f32 && vox.fract() == 0.0) {
        return Err(Error::Format(format!("invalid vox_offset {vox}")));
    }
    let start = vox as usize;
    let n: usize = dims.iter().product();
    let expected = start + n * dtype.bytes();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let raw = &bytes[start..expected];
    let mut data = vec![0.0; n];
    macro_rules! decode {
        ($read:ident) => {
            if big_endian {
                for (v, c) in data.iter_mut().zip(raw.chunks_exact(dtype.bytes())) {
                    *v = BigEndian::$read(c) as f64;
                }
            } else {
                for (v, c) in data.iter_mut().zip(raw.chunks_exact(dtype.bytes())) {
                    *v = LittleEndian::$read(c) as f64;
                }
            }
        };
    }
    match dtype {
        Datatype::U8 => {
            for (v, &b) in data.iter_mut().zip(raw) {
                *v = b as f64;
            }
        }
        Datatype::I16 => decode!(read_i16),
        Datatype::I32 => decode!(read_i32),
        Datatype::F32 => decode!(read_f32),
        Datatype::F64 => decode!(read_f64),
    }
    let slope = LittleEndian::read_f32(&h[off::SCL_SLOPE..]) as f64;
    let inter = LittleEndian::read_f32(&h[off::SCL_INTER..]) as f64;
    if slope != 0.0 && slope.is_finite() {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        for v in data.iter_mut() {
            *v = *v * slope + inter;
        }
    }
    let (vol, replaced) = Volume::new_sanitized(dims, spacing, data)?;
    if replaced > 0 {
        log::warn!("replaced {replaced} non-finite samples with 0");
    }
    Ok(vol.with_header(Some(h)))
}

/// Reads a single-file NIfTI-1 volume, gunzipping when the content starts
/// with the gzip magic bytes.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip stream of {}: {e}", path.display())))?;
        raw = out;
    }
    decode_nifti(&raw)
}

fn fresh_header() -> Vec<u8> {
    let mut h = vec![0u8; HEADER_SIZE];
    LittleEndian::write_f32(&mut h[off::PIXDIM..], 1.0);
    // millimeters, seconds
    h[off::XYZT_UNITS] = 2 | 8;
    h
}

/// Encodes `vol` as a little-endian single-file NIfTI-1 image. Header fields
/// retained from a source file are copied through; dims, pixdim, datatype,
/// bitpix, vox_offset and scaling are overwritten.
pub fn encode_nifti(vol: &Volume, dtype: Datatype) -> Result<Vec<u8>> {
    let mut h = match vol.header() {
        Some(src) if src.len() == HEADER_SIZE => src.to_vec(),
        _ => fresh_header(),
    };
    let dims = vol.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::invalid(format!("dims {dims:?} exceed the NIfTI-1 limit")));
    }
    LittleEndian::write_i32(&mut h[off::SIZEOF_HDR..], HEADER_SIZE as i32);
    let dim = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[off::DIM + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[off::DATATYPE..], dtype.code());
    LittleEndian::write_i16(&mut h[off::BITPIX..], 8 * dtype.bytes() as i16);
    for (a, s) in vol.spacing().iter().enumerate() {
        LittleEndian::write_f32(&mut h[off::PIXDIM + 4 * (a + 1)..], *s as f32);
    }
    LittleEndian::write_f32(&mut h[off::VOX_OFFSET..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[off::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut h[off::SCL_INTER..], 0.0);
    h[off::MAGIC..off::MAGIC + 4].copy_from_slice(MAGIC_SINGLE);

    let mut out = Vec::with_capacity(VOX_OFFSET + vol.len() * dtype.bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&[0; VOX_OFFSET - HEADER_SIZE]);
    let integral = |v: f64, lo: f64, hi: f64| -> Result<f64> {
        let r = v.round();
        if r < lo || r > hi {
            return Err(Error::invalid(format!("value {v} does not fit datatype {dtype:?}")));
        }
        Ok(r)
    };
    let mut buf = [0u8; 8];
    for &v in vol.data() {
        match dtype {
            Datatype::U8 => out.push(integral(v, 0.0, u8::MAX as f64)? as u8),
            Datatype::I16 => {
                LittleEndian::write_i16(&mut buf, integral(v, i16::MIN as f64, i16::MAX as f64)? as i16);
                out.extend_from_slice(&buf[..2]);
            }
            Datatype::I32 => {
                LittleEndian::write_i32(&mut buf, integral(v, i32::MIN as f64, i32::MAX as f64)? as i32);
                out.extend_from_slice(&buf[..4]);
            }
            Datatype::F32 => {
                LittleEndian::write_f32(&mut buf, v as f32);
                out.extend_from_slice(&buf[..4]);
            }
            Datatype::F64 => {
                LittleEndian::write_f64(&mut buf, v);
                out.extend_from_slice(&buf);
            }
        }
    }
    Ok(out)
}

/// Writes `vol` to `path`, gzip-compressed when the path ends in `.gz`. The
/// compressed stream carries no timestamp, so output bytes are reproducible.
pub fn write_nifti(vol: &Volume, path: impl AsRef<Path>, dtype: Datatype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(vol, dtype)?;
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    if is_gzip_path(path) {
        let mut gz = GzBuilder::new().mtime(0).write(file, Compression::default());
        gz.write_all(&bytes).map_err(io)?;
        gz.finish().map_err(io)?.flush().map_err(io)?;
    } else {
        let mut f = file;
        f.write_all(&bytes).map_err(io)?;
        f.flush().map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product();
        let data = (0..n).map(|i| ((i as f32) * 0.37 - 5.5) as f64).collect();
        Volume::new(dims, [0.8, 1.25, 2.0], data).unwrap()
    }

    /// Big-endian twin of a little-endian encoding.
    fn to_big_endian(le: &[u8], dtype: Datatype) -> Vec<u8> {
        let mut out = le.to_vec();
        swap_header(&mut out[..HEADER_SIZE]);
        for c in out[VOX_OFFSET..].chunks_exact_mut(dtype.bytes()) {
            c.reverse();
        }
        out
    }

    #[test]
    fn roundtrip_float32_is_bit_exact() {
        let v = ramp([5, 4, 3]);
        let dec = decode_nifti(&encode_nifti(&v, Datatype::F32).unwrap()).unwrap();
        assert_eq!(dec.dims(), v.dims());
        for (a, b) in dec.spacing().iter().zip(v.spacing()) {
            assert!((a - b).abs() <= 1e-6 * b);
        }
        assert_eq!(dec.data(), v.data());
    }

    #[test]
    fn all_datatypes_roundtrip_integers() {
        let v = Volume::new([3, 2, 2], [1.0; 3], (0..12).map(|i| (i * 7) as f64).collect()).unwrap();
        for dt in [Datatype::U8, Datatype::I16, Datatype::I32, Datatype::F32, Datatype::F64] {
            let bytes = encode_nifti(&v, dt).unwrap();
            assert_eq!(bytes.len(), VOX_OFFSET + 12 * dt.bytes());
            assert_eq!(decode_nifti(&bytes).unwrap().data(), v.data(), "{dt:?}");
            assert_eq!(decode_nifti(&to_big_endian(&bytes, dt)).unwrap().data(), v.data(), "{dt:?}");
        }
    }

    #[test]
    fn integer_overflow_is_rejected() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 40000.0).unwrap();
        assert!(encode_nifti(&v, Datatype::I16).is_err());
        assert!(encode_nifti(&v, Datatype::I32).is_ok());
    }

    #[test]
    fn slope_and_intercept_are_applied() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], 5.0).unwrap();
        let mut bytes = encode_nifti(&v, Datatype::I16).unwrap();
        LittleEndian::write_f32(&mut bytes[off::SCL_SLOPE..], 2.0);
        LittleEndian::write_f32(&mut bytes[off::SCL_INTER..], 10.0);
        assert!(decode_nifti(&bytes).unwrap().data().iter().all(|&x| x == 20.0));
        LittleEndian::write_f32(&mut bytes[off::SCL_SLOPE..], 0.0);
        assert!(decode_nifti(&bytes).unwrap().data().iter().all(|&x| x == 5.0));
    }

    #[test]
    fn malformed_inputs_are_classified() {
        let v = ramp([4, 4, 4]);
        let good = encode_nifti(&v, Datatype::F32).unwrap();

        let mut bad = good.clone();
        bad[off::MAGIC..off::MAGIC + 4].copy_from_slice(b"abc\0");
        assert!(matches!(decode_nifti(&bad), Err(Error::Format(_))));
        bad[off::MAGIC..off::MAGIC + 4].copy_from_slice(MAGIC_PAIR);
        assert!(matches!(decode_nifti(&bad), Err(Error::Format(m)) if m.contains("two-file")));

        let mut bad = good.clone();
        LittleEndian::write_i32(&mut bad[..], 540);
        assert!(matches!(decode_nifti(&bad), Err(Error::Format(m)) if m.contains("NIfTI-2")));

        let mut bad = good.clone();
        LittleEndian::write_i16(&mut bad[off::DIM..], 4);
        assert!(matches!(decode_nifti(&bad), Err(Error::Dimensionality(4))));

        let mut bad = good.clone();
        LittleEndian::write_i16(&mut bad[off::DATATYPE..], 128);
        assert!(matches!(decode_nifti(&bad), Err(Error::UnsupportedDatatype(128))));

        assert!(matches!(
            decode_nifti(&good[..good.len() - 1]),
            Err(Error::Truncated { expected, found }) if expected == good.len() && found == good.len() - 1
        ));
        assert!(matches!(decode_nifti(&good[..100]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn header_passthrough_touches_only_geometry_fields() {
        let v = ramp([4, 3, 2]);
        let mut src = encode_nifti(&v, Datatype::F64).unwrap();
        src[148..148 + 6].copy_from_slice(b"source");
        LittleEndian::write_i16(&mut src[252..], 1);
        LittleEndian::write_f32(&mut src[280..], 0.8);
        let read = decode_nifti(&src).unwrap();
        let resized = Volume::new([2, 2, 2], [3.0; 3], vec![0.0; 8]).unwrap().with_header(read.header().map(<[u8]>::to_vec));
        let out = encode_nifti(&resized, Datatype::F32).unwrap();
        let allowed = |i: usize| {
            (off::DIM..off::DIM + 16).contains(&i)
                || (off::DATATYPE..off::BITPIX + 2).contains(&i)
                || (off::PIXDIM..off::PIXDIM + 32).contains(&i)
                || (off::VOX_OFFSET..off::VOX_OFFSET + 4).contains(&i)
        };
        for i in 0..HEADER_SIZE {
            if !allowed(i) {
                assert_eq!(src[i], out[i], "byte {i}");
            }
        }
    }

    #[test]
    fn gzip_files_match_plain_files_and_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp([6, 5, 4]);
        let (plain, gz) = (dir.path().join("a.nii"), dir.path().join("a.nii.gz"));
        write_nifti(&v, &plain, Datatype::F32).unwrap();
        write_nifti(&v, &gz, Datatype::F32).unwrap();
        let gz_bytes = std::fs::read(&gz).unwrap();
        assert_eq!(&gz_bytes[..2], &[0x1f, 0x8b]);
        let (a, b) = (read_nifti(&plain).unwrap(), read_nifti(&gz).unwrap());
        assert_eq!(a.data(), b.data());
        assert_eq!(a.header(), b.header());
        write_nifti(&v, &gz, Datatype::F32).unwrap();
        assert_eq!(std::fs::read(&gz).unwrap(), gz_bytes);
        assert!(matches!(read_nifti(dir.path().join("missing.nii")), Err(Error::Io { .. })));
    }
}
