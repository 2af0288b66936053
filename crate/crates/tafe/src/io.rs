//! On-disk formats: the TAFE-T1 tensor container, binary PPM/PGM images,
//! and helpers for reading/writing them atomically enough for this crate's
//! needs (write to a temp path, then rename).
//!
//! TAFE-T1 layout, all little-endian:
//!   bytes 0..8   magic `TAFETNSR`
//!   bytes 8..12  u32 header length L
//!   bytes 12..12+L  JSON header, e.g. `{"shape":[1,3,4,4],"dtype":"f64"}`
//!   rest         n*c*h*w f64 values in row-major order (w fastest)

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TafeError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TAFETNSR";

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    shape: [usize; 4],
    dtype: String,
}

/// Serializes a tensor into the TAFE-T1 byte layout.
pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let (n, c, h, w) = t.shape();
    let header = serde_json::to_vec(&TensorHeader {
        shape: [n, c, h, w],
        dtype: "f64".to_string(),
    })
    .expect("tensor header serialization cannot fail");
    let mut out = Vec::with_capacity(12 + header.len() + t.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a TAFE-T1 byte buffer back into a tensor, validating magic,
/// header, dtype, and payload length.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[0..8] != MAGIC {
        return Err(TafeError::Format(
            "missing TAFETNSR magic in tensor file".into(),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(TafeError::Format(format!(
            "tensor header length {hlen} exceeds file size"
        )));
    }
    let header: TensorHeader = serde_json::from_slice(&bytes[12..body])
        .map_err(|e| TafeError::Format(format!("bad tensor header JSON: {e}")))?;
    if header.dtype != "f64" {
        return Err(TafeError::Format(format!(
            "unsupported dtype {:?}, expected \"f64\"",
            header.dtype
        )));
    }
    let [n, c, h, w] = header.shape;
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| TafeError::Format("tensor shape overflows".into()))?;
    let payload = &bytes[body..];
    if payload.len() != count * 8 {
        return Err(TafeError::Format(format!(
            "tensor payload is {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            count * 8
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(n, c, h, w, data)
}

/// Writes a tensor file, replacing any existing file at `path`.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &tensor_to_bytes(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    tensor_from_bytes(&buf).map_err(|e| match e {
        TafeError::Format(m) => TafeError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes via a temp file in the target directory, then renames into place,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// An 8-bit RGB image with interleaved `[r,g,b]` samples, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(TafeError::Shape(format!(
                "pixel buffer {} does not match {width}x{height} RGB",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Converts to a `(1,3,h,w)` tensor with channels scaled to `[0,1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let p = (y * w + x) * 3;
                for ch in 0..3 {
                    data[ch * h * w + y * w + x] = self.pixels[p + ch] as f64 / 255.0;
                }
            }
        }
        Tensor::from_parts(1, 3, h, w, data)
    }

    /// Builds an image from a `(1,3,h,w)` tensor of `[0,1]` intensities,
    /// clamping out-of-range values.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.shape();
        if n != 1 || c != 3 {
            return Err(TafeError::Shape(format!(
                "expected (1,3,h,w) tensor for an RGB image, got {:?}",
                t.shape()
            )));
        }
        let mut pixels = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = t.at(0, ch, y, x).clamp(0.0, 1.0);
                    pixels[(y * w + x) * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }
}

/// A single-channel 8-bit label map; each byte is a class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(TafeError::Shape(format!(
                "pixel buffer {} does not match {width}x{height} grayscale",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

/// Writes a binary PPM (`P6`, maxval 255).
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    write_atomic(path, &bytes)
}

/// Writes a binary PGM (`P5`, maxval 255).
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    write_atomic(path, &bytes)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, data) = parse_netpbm(&bytes, b"P6", path)?;
    if maxval != 255 {
        return Err(TafeError::Format(format!(
            "{}: only maxval 255 is supported, got {maxval}",
            path.display()
        )));
    }
    if data.len() != w * h * 3 {
        return Err(TafeError::Format(format!(
            "{}: PPM payload {} bytes, expected {}",
            path.display(),
            data.len(),
            w * h * 3
        )));
    }
    RgbImage::new(w, h, data.to_vec())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, data) = parse_netpbm(&bytes, b"P5", path)?;
    if maxval != 255 {
        return Err(TafeError::Format(format!(
            "{}: only maxval 255 is supported, got {maxval}",
            path.display()
        )));
    }
    if data.len() != w * h {
        return Err(TafeError::Format(format!(
            "{}: PGM payload {} bytes, expected {}",
            path.display(),
            data.len(),
            w * h
        )));
    }
    GrayImage::new(w, h, data.to_vec())
}

/// Parses the netpbm binary header: magic, then three whitespace-separated
/// decimal fields (width, height, maxval) with `#` comments allowed, then a
/// single whitespace byte before the payload.
fn parse_netpbm<'a>(
    bytes: &'a [u8],
    magic: &[u8; 2],
    path: &Path,
) -> Result<(usize, usize, usize, &'a [u8])> {
    let err = |m: &str| TafeError::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(err(&format!(
            "expected {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| err("non-UTF8 header"))?
            .parse()
            .map_err(|_| err("bad header number"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing separator after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(err("zero image dimension"));
    }
    Ok((w, h, maxval, &bytes[pos..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_bytes_round_trip_is_bit_exact() {
        let vals: Vec<f64> = (0..24)
            .map(|i| (i as f64 * 0.37).sin() * 1e3 + 0.125)
            .collect();
        let t = Tensor::new(1, 2, 3, 4, vals).unwrap();
        let bytes = tensor_to_bytes(&t);
        assert_eq!(&bytes[0..8], b"TAFETNSR");
        let back = tensor_from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        // serialization is deterministic down to the byte
        assert_eq!(bytes, tensor_to_bytes(&back));
    }

    #[test]
    fn tensor_header_is_plain_json() {
        let t = Tensor::zeros(1, 3, 4, 4);
        let bytes = tensor_to_bytes(&t);
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(header, r#"{"shape":[1,3,4,4],"dtype":"f64"}"#);
    }

    #[test]
    fn tensor_from_bytes_rejects_corruption() {
        let t = Tensor::zeros(1, 1, 2, 2);
        let good = tensor_to_bytes(&t);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            tensor_from_bytes(&bad_magic),
            Err(TafeError::Format(_))
        ));

        let truncated = &good[..good.len() - 4];
        assert!(matches!(
            tensor_from_bytes(truncated),
            Err(TafeError::Format(_))
        ));

        let mut wrong_dtype = good.clone();
        let hlen = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(good[12..12 + hlen].to_vec()).unwrap();
        let swapped = header.replace("f64", "f32");
        wrong_dtype.splice(12..12 + hlen, swapped.into_bytes());
        assert!(matches!(
            tensor_from_bytes(&wrong_dtype),
            Err(TafeError::Format(_))
        ));
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tt1");
        let t = Tensor::new(2, 1, 1, 3, vec![1.0, -2.5, 3.75, 0.0, 9.0, -0.5]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn ppm_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = RgbImage::new(3, 2, (0u8..18).collect()).unwrap();
        write_ppm(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(read_ppm(&path).unwrap(), img);
    }

    #[test]
    fn pgm_round_trip_with_comment_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let img = GrayImage::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);

        // comments between header fields are legal netpbm
        let commented = b"P5\n# class ids\n2 2\n255\n\x00\x01\x02\x03".to_vec();
        let path2 = dir.path().join("c.pgm");
        fs::write(&path2, commented).unwrap();
        assert_eq!(read_pgm(&path2).unwrap(), img);
    }

    #[test]
    fn rgb_tensor_conversion_round_trips_exact_bytes() {
        let img = RgbImage::new(4, 3, (0..36).map(|i| (i * 7 % 256) as u8).collect()).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), (1, 3, 3, 4));
        assert_eq!(RgbImage::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn netpbm_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        fs::write(&p, b"P3\n1 1\n255\n0 0 0\n").unwrap(); // ASCII variant unsupported
        assert!(matches!(read_ppm(&p), Err(TafeError::Format(_))));
        fs::write(&p, b"P6\n2 2\n255\n\x00\x01").unwrap(); // short payload
        assert!(matches!(read_ppm(&p), Err(TafeError::Format(_))));
    }
}
