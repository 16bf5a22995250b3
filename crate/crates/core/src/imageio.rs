//! 8-bit PNG I/O for `1×C×H×W` tensors in `[0, 1]`, plus an exact raw-f32
//! sidecar format for numeric round trips.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use ndgrad::{Scalar, Tensor};

use crate::checkpoint::write_atomic;
use crate::{Error, Result};

const RAW_MAGIC: &[u8; 4] = b"RAWF";

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Quantizes to 8 bits (round to nearest) and writes gray or RGB PNG.
pub fn write_png<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (n, c, h, w) = img.dims4();
    if n != 1 || !(c == 1 || c == 3) {
        return Err(image_err(path, format!("cannot store shape {:?} as PNG", img.shape())));
    }
    let d = img.data();
    let mut bytes = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            let v = d[ch * h * w + p].as_f64().clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(if c == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().map_err(|e| image_err(path, e))?;
        wr.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    }
    write_atomic(path, &buf)
}

/// Reads any 8/16-bit gray, gray-alpha, RGB or RGBA PNG as `1×3×H×W`
/// (gray replicated, alpha dropped).
pub fn read_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| image_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * stride..(x + 1) * stride];
            for ch in 0..3 {
                let v = if stride >= 3 { px[ch] } else { px[0] };
                data[ch * h * w + y * w + x] = T::lit(v as f64 / 255.0);
            }
        }
    }
    Ok(Tensor::new(&[1, 3, h, w], data)?)
}

/// `"RAWF" | ndim u32 | dims u32… | f32…`, little-endian.
pub fn write_raw<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_raw<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || image_err(path, "malformed raw tensor");
    if bytes.len() < 8 || &bytes[..4] != RAW_MAGIC {
        return Err(bad());
    }
    let word = |i: usize| -> Option<u32> { Some(u32::from_le_bytes(bytes.get(i..i + 4)?.try_into().ok()?)) };
    let ndim = word(4).ok_or_else(bad)? as usize;
    let shape = (0..ndim).map(|i| word(8 + 4 * i).map(|d| d as usize)).collect::<Option<Vec<_>>>().ok_or_else(bad)?;
    let start = 8 + 4 * ndim;
    let n: usize = shape.iter().product();
    if bytes.len() != start + 4 * n {
        return Err(bad());
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok(Tensor::new(&shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = Tensor::<f32>::rand_uniform(&[1, 3, 9, 7], 0.0, 1.0, 3);
        write_png(&p, &img).unwrap();
        let back: Tensor<f32> = read_png(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-6);
        // already-quantized values survive exactly
        write_png(&p, &back).unwrap();
        assert_eq!(read_png::<f32>(&p).unwrap(), back);
    }

    #[test]
    fn gray_png_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let img = Tensor::<f64>::full(&[1, 1, 4, 4], 0.2);
        write_png(&p, &img).unwrap();
        let back: Tensor<f64> = read_png(&p).unwrap();
        assert_eq!(back.shape(), &[1, 3, 4, 4]);
        assert!(back.data().iter().all(|&v| v == 51.0 / 255.0));
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.raw");
        let img = Tensor::<f32>::rand_uniform(&[1, 3, 5, 5], 0.0, 1.0, 4);
        write_raw(&p, &img).unwrap();
        assert_eq!(read_raw::<f32>(&p).unwrap(), img);
        std::fs::write(&p, b"RAWFjunk").unwrap();
        assert!(read_raw::<f32>(&p).is_err());
    }

    #[test]
    fn missing_or_bad_files_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_png::<f32>(&dir.path().join("none.png")), Err(Error::Io { .. })));
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(read_png::<f32>(&p), Err(Error::Image { .. })));
    }
}
