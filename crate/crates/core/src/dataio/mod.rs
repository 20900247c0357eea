//! PNG I/O, paired datasets, patch sampling and checkpoints.

mod checkpoint;
mod manifest;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use manifest::{build_manifest, list_pngs, PairEntry, PairManifest, Split, SplitRatios};

use crate::error::{Error, Result};
use crate::image::{Domain, ImageTensor};

/// Reads an 8-bit RGB or grayscale PNG into `[0, 1]` channel-first samples.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let info = reader.info();
    let unsupported = |reason: String| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason,
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unsupported(format!("bit depth {:?} (only 8-bit is supported)", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        other => return Err(unsupported(format!("color type {other:?} (RGB or grayscale only)"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| unsupported("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let stride = frame.line_size;
    let mut data = vec![0.0; channels * h * w];
    for y in 0..h {
        let row = &buf[y * stride..y * stride + w * channels];
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = row[x * channels + c] as f64 / 255.0;
            }
        }
    }
    ImageTensor::new(channels, h, w, data, Domain::Unit)
}

/// Quantises to 8 bits (round half away from zero after clamping) and writes
/// an RGB or grayscale PNG.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let color = match img.channels() {
        3 => png::ColorType::Rgb,
        1 => png::ColorType::Grayscale,
        c => return Err(Error::InvalidArgument(format!("cannot save {c}-channel image"))),
    };
    let bytes = quantize(img);
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| encode_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| encode_err(path, e))?;
    writer.finish().map_err(|e| encode_err(path, e))?;
    Ok(())
}

/// Interleaved 8-bit samples for `img`, whatever its domain.
pub fn quantize(img: &ImageTensor) -> Vec<u8> {
    let unit = img.to_domain(Domain::Unit);
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = vec![0u8; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = (unit.get(ch, y, x).clamp(0.0, 1.0) * 255.0).round();
                out[(y * w + x) * c + ch] = v as u8;
            }
        }
    }
    out
}

fn image_err(path: &Path, e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::io(format!("read {}", path.display()), io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn encode_err(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(format!("write {}", path.display()), io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Aligned training crop cut from a clean/degraded pair.
#[derive(Debug, Clone)]
pub struct Patch {
    pub clean: ImageTensor,
    pub degraded: ImageTensor,
    pub y: usize,
    pub x: usize,
}

/// Cuts the same `size x size` window from both images at a uniformly drawn
/// offset, reflect-padding images smaller than the window first.
pub fn sample_patch<R: Rng + ?Sized>(
    clean: &ImageTensor,
    degraded: &ImageTensor,
    size: usize,
    rng: &mut R,
) -> Result<Patch> {
    clean.ensure_same_shape(degraded)?;
    if size == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let clean = clean.reflect_pad_to(size, size);
    let degraded = degraded.reflect_pad_to(size, size);
    let max_y = clean.height() - size;
    let max_x = clean.width() - size;
    let y = if max_y == 0 { 0 } else { rng.random_range(0..=max_y) };
    let x = if max_x == 0 { 0 } else { rng.random_range(0..=max_x) };
    Ok(Patch {
        clean: clean.crop(y, x, size, size)?,
        degraded: degraded.crop(y, x, size, size)?,
        y,
        x,
    })
}

/// A loaded clean/degraded pair.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub name: String,
    pub clean: ImageTensor,
    pub degraded: ImageTensor,
}

/// Loads every pair of the manifest (optionally one split only), converting
/// grayscale to RGB.
pub fn load_pairs(manifest: &PairManifest, split: Option<Split>) -> Result<Vec<ImagePair>> {
    manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .map(|e| {
            let clean = load_image(&e.clean)?.to_rgb()?;
            let degraded = load_image(&e.degraded)?.to_rgb()?;
            clean.ensure_same_shape(&degraded)?;
            Ok(ImagePair {
                name: e.name.clone(),
                clean,
                degraded,
            })
        })
        .collect()
}

/// `<root>/clean` and `<root>/degraded`.
pub fn pair_dirs(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("clean"), root.join("degraded"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        let img = ImageTensor::zeros(3, 5, 7, Domain::Unit);
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn half_rounds_up() {
        let img = ImageTensor::filled(1, 1, 1, 0.5, Domain::Unit);
        assert_eq!(quantize(&img), vec![128]);
        let signed = ImageTensor::filled(1, 1, 1, 0.0, Domain::Signed);
        assert_eq!(quantize(&signed), vec![128]);
    }

    #[test]
    fn save_load_save_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ImageTensor::from_fn(3, 6, 4, Domain::Unit, |_, _, _| rng.random_range(0.0..1.0));
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        save_image(&img, &a).unwrap();
        let once = load_image(&a).unwrap();
        save_image(&once, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(load_image(&b).unwrap(), once);
    }

    #[test]
    fn grayscale_loads_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let img = ImageTensor::from_fn(1, 3, 3, Domain::Unit, |_, y, x| ((y * 3 + x) * 20) as f64 / 255.0);
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(back, img);
    }

    #[test]
    fn sixteen_bit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let file = File::create(&p).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 2, 2);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[0u8; 2 * 2 * 3 * 2]).unwrap();
        w.finish().unwrap();
        assert!(matches!(load_image(&p), Err(Error::UnsupportedFormat { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image("/nonexistent/definitely/missing.png").unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn exact_size_patch_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = ImageTensor::randn(3, 16, 16, &mut rng);
        let p = sample_patch(&a, &a, 16, &mut rng).unwrap();
        assert_eq!((p.y, p.x), (0, 0));
        assert_eq!(p.clean, a);
    }

    #[test]
    fn small_image_is_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = ImageTensor::randn(3, 5, 9, &mut rng);
        let p = sample_patch(&a, &a, 8, &mut rng).unwrap();
        assert_eq!(p.clean.shape(), [3, 8, 8]);
    }

    #[test]
    fn patch_offsets_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = ImageTensor::randn(3, 40, 40, &mut rng);
        let offsets = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| {
                    let p = sample_patch(&a, &a, 16, &mut r).unwrap();
                    (p.y, p.x)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(offsets(5), offsets(5));
    }
}
