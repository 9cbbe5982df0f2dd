//! Images on disk: an 8-bit RGB PNG for viewing plus a `.f64` sidecar (the
//! checkpoint container with a single `image` entry) that round-trips exactly.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Tensor};

fn ingestion(path: &Path, reason: impl ToString) -> Error {
    Error::Ingestion {
        item: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Writes a `[3,H,W]` tensor in `[0, 1]` as an RGB PNG.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::Dimension(format!("PNG needs [3,H,W], got {:?}", image.shape())));
    };
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Serialization(e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    writer.finish().map_err(|e| Error::Serialization(e.to_string()))
}

/// Reads an 8-bit RGB or RGBA PNG into `[3,H,W]` with values in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| ingestion(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| ingestion(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ingestion(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| ingestion(path, e))?;
    let channels = match (info.color_type, info.bit_depth) {
        (png::ColorType::Rgb, png::BitDepth::Eight) => 3,
        (png::ColorType::Rgba, png::BitDepth::Eight) => 4,
        other => return Err(ingestion(path, format!("unsupported PNG layout {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = buf[i * channels + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn sidecar(stem: &Path) -> PathBuf {
    stem.with_extension("f64")
}

/// Writes `stem.png` and the exact `stem.f64`.
pub fn save_image(stem: &Path, image: &Tensor) -> Result<()> {
    save_png(&stem.with_extension("png"), image)?;
    let mut c = Checkpoint::new();
    c.insert("image", image.clone());
    c.save(sidecar(stem))
}

/// Reads `stem.f64` when present, else `stem.png`.
pub fn load_image(stem: &Path) -> Result<Tensor> {
    let exact = sidecar(stem);
    if exact.exists() {
        let c = Checkpoint::load(&exact).map_err(|e| ingestion(&exact, e))?;
        return c.require("image").cloned().map_err(|e| ingestion(&exact, e));
    }
    load_png(&stem.with_extension("png"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sidecar_exact_png_quantised() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::uniform(&[3, 5, 4], 0.0, 1.0, &mut rng);
        let stem = dir.path().join("x");
        save_image(&stem, &img).unwrap();
        assert!(load_image(&stem).unwrap().bit_eq(&img));
        let png = load_png(&stem.with_extension("png")).unwrap();
        assert_eq!(png.shape(), &[3, 5, 4]);
        assert!(png.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn missing_file_is_ingestion_error() {
        let err = load_image(Path::new("/nonexistent/img")).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
    }
}
