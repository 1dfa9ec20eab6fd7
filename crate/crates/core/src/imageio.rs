//! Grayscale PNG persistence: 8-bit images, 1-bit masks.

use crate::error::{invalid, Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use tape::Tensor;

/// `round(v · 255)` with `v` clamped to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 255.0
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        [1, 1, h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(invalid!("expected a single-channel plane, got shape {:?}", s)),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_png(path: &Path, w: usize, h: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(create(path)?, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?;
    writer.finish().map_err(|e| Error::Image(e.to_string()))
}

/// Writes a `[0, 1]` plane as 8-bit grayscale.
pub fn save_gray(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(img)?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    write_png(path, w, h, png::BitDepth::Eight, &bytes)
}

/// Writes a `{0, 1}` plane as a 1-bit grayscale PNG.
pub fn save_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(mask)?;
    let stride = w.div_ceil(8);
    let mut bytes = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] > 0.5 {
                bytes[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    write_png(path, w, h, png::BitDepth::One, &bytes)
}

/// Reads any grayscale PNG as a `(1, 1, H, W)` tensor of 8-bit levels / 255.
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!("{}: unexpected bit depth", path.display())));
    }
    let data = (0..h * w)
        .map(|i| {
            let px = &buf[i * channels..];
            let v = if channels >= 3 {
                (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0
            } else {
                px[0] as f64
            };
            v / 255.0
        })
        .collect();
    Ok(Tensor::from_vec(vec![1, 1, h, w], data))
}

/// Reads a mask PNG; any non-zero level counts as foreground.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    Ok(load_gray(path)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_and_mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_vec(vec![1, 1, 2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]);
        let p = dir.path().join("a/img.png");
        save_gray(&p, &img).unwrap();
        let back = load_gray(&p).unwrap();
        assert_eq!(back.shape(), &[1, 1, 2, 3]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(*b, dequantize(quantize(*a)));
        }
        let mask = Tensor::from_vec(vec![3, 11], (0..33).map(|i| (i % 3 == 0) as u8 as f64).collect());
        let mp = dir.path().join("m.png");
        save_mask(&mp, &mask).unwrap();
        let mb = load_mask(&mp).unwrap();
        assert_eq!(mb.data(), mask.data());
    }
}
