//! File formats: the `.tns` tensor container and 8-bit PGM/PPM images.
//!
//! `.tns` layout: the ASCII magic `TNS1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then the row-major payload as little-endian
//! `f64`. Several records may be concatenated in one file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::metrics::LabelMap;
use crate::tensor::{FeatureMap, Scalar, Tensor};

const TNS_MAGIC: &[u8; 4] = b"TNS1";

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(TNS_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| format_err("tns", format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record. Returns `Ok(None)` on a clean end of stream.
pub fn read_tensor_opt(r: &mut impl Read) -> Result<Option<Tensor<f64>>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut magic[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    match got {
        0 => return Ok(None),
        4 if &magic == TNS_MAGIC => {}
        _ => return Err(format_err("tns", "bad magic")),
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 16 {
        return Err(format_err("tns", format!("unsupported rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u32(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|_| format_err("tns", "truncated payload"))?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map(Some)
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor<f64>> {
    read_tensor_opt(r)?.ok_or_else(|| format_err("tns", "empty stream"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| format_err("tns", "truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_tensors<T: Scalar>(path: impl AsRef<Path>, tensors: &[&Tensor<T>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tensors {
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<Tensor<f64>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(t) = read_tensor_opt(&mut r)? {
        out.push(t);
    }
    Ok(out)
}

/// Raw 8-bit netpbm raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub samples: usize,
    /// Interleaved samples, row-major.
    pub pixels: Vec<u8>,
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let samples = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => return Err(format_err("pnm", format!("unsupported magic {:?}", String::from_utf8_lossy(other)))),
    };
    let width = parse_num(next_token(bytes, &mut pos)?)?;
    let height = parse_num(next_token(bytes, &mut pos)?)?;
    let maxval = parse_num(next_token(bytes, &mut pos)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err("pnm", format!("only 8-bit rasters supported, maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(format_err("pnm", "zero-sized raster"));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let n = width * height * samples;
    let pixels = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format_err("pnm", "truncated payload"))?
        .to_vec();
    Ok(Raster { width, height, samples, pixels })
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(format_err("pnm", "truncated header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_num(tok: &[u8]) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err("pnm", format!("bad header field {:?}", String::from_utf8_lossy(tok))))
}

pub fn encode_pnm(r: &Raster) -> Vec<u8> {
    let magic = if r.samples == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    out
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn write_raster(path: impl AsRef<Path>, r: &Raster) -> Result<()> {
    std::fs::write(path, encode_pnm(r))?;
    Ok(())
}

impl Raster {
    /// Samples mapped linearly from `0..=255` to `[0, 1]`, channels first.
    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        let (w, s) = (self.width, self.samples);
        FeatureMap::from_fn(s, self.height, w, |c, y, x| f64::from(self.pixels[(y * w + x) * s + c]) / 255.0)
    }

    /// Inverse of [`Raster::to_feature_map`]; values are clamped to `[0, 1]`.
    pub fn from_feature_map<T: Scalar>(f: &FeatureMap<T>) -> Result<Self> {
        let (c, h, w) = f.dims();
        if c != 1 && c != 3 {
            return Err(Error::InvalidShape(format!("PGM/PPM need 1 or 3 channels, got {c}")));
        }
        let mut pixels = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    let v = f.get(ci, y, x).as_f64().clamp(0.0, 1.0);
                    pixels.push((v * 255.0).round() as u8);
                }
            }
        }
        Ok(Self { width: w, height: h, samples: c, pixels })
    }
}

/// Loads a PGM, PPM or `.tns` file as a feature map, chosen by extension.
pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "tns") {
        let mut r = BufReader::new(File::open(path)?);
        let t = read_tensor(&mut r)?;
        return match t.rank() {
            2 => {
                let (h, w) = (t.shape()[0], t.shape()[1]);
                FeatureMap::new(1, h, w, t.into_data())
            }
            _ => FeatureMap::try_from(t),
        };
    }
    read_raster(path)?.to_feature_map()
}

/// Writes a feature map as PGM/PPM (by channel count) or `.tns`, chosen by extension.
pub fn save_feature_map<T: Scalar>(path: impl AsRef<Path>, f: &FeatureMap<T>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "tns") {
        return save_tensors(path, &[f.tensor()]);
    }
    write_raster(path, &Raster::from_feature_map(f)?)
}

/// Reads a label map: PGM gray levels, or a single-channel `.tns` of
/// non-negative integers.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "tns") {
        let f = load_feature_map(path)?;
        if f.channels() != 1 {
            return Err(format_err("tns", format!("label map needs 1 channel, got {}", f.channels())));
        }
        let mut labels = Vec::with_capacity(f.data().len());
        for &v in f.data() {
            if !(v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64) {
                return Err(format_err("tns", format!("label {v} is not a non-negative integer")));
            }
            labels.push(v as usize);
        }
        return LabelMap::new(f.height(), f.width(), labels);
    }
    let r = read_raster(path)?;
    if r.samples != 1 {
        return Err(format_err("pnm", "label map must be a PGM".to_string()));
    }
    LabelMap::new(r.height, r.width, r.pixels.iter().map(|&p| usize::from(p)).collect())
}

/// Writes labels as PGM gray levels (at most 256 classes).
pub fn save_label_map(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let mut pixels = Vec::with_capacity(labels.labels().len());
    for &l in labels.labels() {
        pixels.push(u8::try_from(l).map_err(|_| format_err("pnm", format!("label {l} does not fit a PGM")))?);
    }
    write_raster(path, &Raster { width: labels.width(), height: labels.height(), samples: 1, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tns_header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"TNS1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 16 + 16);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tns_rejects_garbage() {
        assert!(read_tensor(&mut &b"TNS2\x01\0\0\0"[..]).is_err());
        assert!(read_tensor(&mut &b"TNS1\x01\0\0\0\x02\0\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn concatenated_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("multi.tns");
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 3], vec![3.0, 4.0, 5.0]).unwrap();
        save_tensors(&p, &[&a, &b]).unwrap();
        assert_eq!(load_tensors(&p).unwrap(), vec![a, b]);
    }

    #[test]
    fn pnm_with_comment_roundtrips() {
        let bytes = b"P5\n# made by hand\n3 2\n255\n\x00\x10\x20\x30\x40\xff";
        let r = decode_pnm(bytes).unwrap();
        assert_eq!((r.width, r.height, r.samples), (3, 2, 1));
        let f = r.to_feature_map().unwrap();
        assert_eq!(f.get(0, 1, 2), 1.0);
        assert_eq!(Raster::from_feature_map(&f).unwrap(), r);
    }

    #[test]
    fn ppm_channel_order() {
        let r = Raster { width: 1, height: 1, samples: 3, pixels: vec![255, 0, 51] };
        let f = decode_pnm(&encode_pnm(&r)).unwrap().to_feature_map().unwrap();
        assert_eq!(f.dims(), (3, 1, 1));
        assert_eq!(f.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn pnm_rejects_16_bit() {
        assert!(decode_pnm(b"P5 1 1 65535\n\0\0").is_err());
        assert!(decode_pnm(b"P2 1 1 255\n0").is_err());
        assert!(decode_pnm(b"P5 2 2 255\n\0").is_err());
    }
}
