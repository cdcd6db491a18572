//! Image corpora laid out one directory per class, image preprocessing, and
//! procedurally generated texture corpora.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "tif", "tiff", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    pub class_names: Vec<String>,
    /// Human-readable notes about skipped files and dropped classes.
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Enumerate `root/<class>/*.{png,tif,tiff,jpg,jpeg}`. Classes are the
/// subdirectories in lexicographic order; classes left with no decodable
/// image are dropped, and undecodable files are skipped. Both are reported
/// in [`DatasetIndex::warnings`].
pub fn ingest_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let subdirs: Vec<PathBuf> = sorted_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if subdirs.is_empty() {
        return Err(Error::Dataset(format!(
            "{} contains no class subdirectories",
            root.display()
        )));
    }
    let mut warnings = Vec::new();
    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    for dir in subdirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut found = Vec::new();
        for path in sorted_dir(&dir)? {
            if !path.is_file() || !has_image_extension(&path) {
                continue;
            }
            match image::ImageReader::open(&path)?.with_guessed_format()?.decode() {
                Ok(_) => found.push(path),
                Err(e) => {
                    let msg = format!("skipping undecodable {}: {e}", path.display());
                    warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }
        if found.is_empty() {
            let msg = format!("dropping class {name:?}: no decodable images");
            warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let label = class_names.len();
        class_names.push(name);
        entries.extend(found.into_iter().map(|path| DatasetEntry { path, label }));
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!(
            "{} contains no decodable images",
            root.display()
        )));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        entries,
        class_names,
        warnings,
    })
}

/// Grayscale values in `[0, 1]`, row-major, from a decoded image. RGB input
/// uses luminance weights 0.299 / 0.587 / 0.114.
fn grayscale(img: &DynamicImage) -> (usize, usize, Vec<f64>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let px = rgb
            .pixels()
            .map(|p| {
                let v = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                v.clamp(0.0, 1.0)
            })
            .collect();
        (w, h, px)
    } else {
        let luma = img.to_luma32f();
        (w, h, luma.pixels().map(|p| (p[0] as f64).clamp(0.0, 1.0)).collect())
    }
}

/// Bilinear resampling with half-pixel centres and edge clamping.
fn resize_bilinear(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let sample = |len_src: usize, len_dst: usize, i: usize| -> (usize, usize, f64) {
        let scale = len_src as f64 / len_dst as f64;
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len_src - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let (y0, y1, fy) = sample(sh, dh, y);
        for x in 0..dw {
            let (x0, x1, fx) = sample(sw, dw, x);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
        }
    }
    out
}

/// Decode, convert to grayscale, resize to `size x size` and scale to
/// `[0, 1]`. Output shape is `(1, 1, size, size)`.
pub fn preprocess(bytes: &[u8], size: usize) -> Result<Tensor<f32>> {
    let img = image::load_from_memory(bytes).map_err(Error::DecodeBytes)?;
    Ok(preprocess_image(&img, size))
}

pub fn preprocess_image(img: &DynamicImage, size: usize) -> Tensor<f32> {
    let (w, h, px) = grayscale(img);
    let resized = if w == size && h == size {
        px
    } else {
        resize_bilinear(&px, w, h, size, size)
    };
    Tensor::from_vec([1, 1, size, size], resized.into_iter().map(|v| v as f32).collect())
        .expect("resize produces size^2 pixels")
}

pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(preprocess_image(&img, size))
}

/// Preprocessed images with labels, ready for training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn load(index: &DatasetIndex, size: usize) -> Result<Self> {
        let images = index
            .entries
            .iter()
            .map(|e| load_image(&e.path, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images,
            labels: index.entries.iter().map(|e| e.label).collect(),
            class_names: index.class_names.clone(),
        })
    }

    /// Images of one class.
    pub fn class_images(&self, label: usize) -> impl Iterator<Item = &Tensor<f32>> {
        self.images
            .iter()
            .zip(&self.labels)
            .filter(move |(_, &l)| l == label)
            .map(|(img, _)| img)
    }
}

/// Procedural textures standing in for micrograph classes.
pub mod synth {
    use super::*;
    use std::f64::consts::PI;

    /// Vertical sinusoidal stripes with a random 6-9 px period and phase.
    pub fn stripes(rng: &mut impl Rng, size: usize) -> Vec<f64> {
        let period = rng.random_range(6.0..9.0);
        let phase = rng.random_range(0.0..period);
        (0..size * size)
            .map(|i| {
                let x = (i % size) as f64;
                0.5 + 0.4 * (2.0 * PI * (x + phase) / period).sin()
            })
            .collect()
    }

    /// Square lattice of Gaussian dots with random pitch and offset.
    pub fn dot_lattice(rng: &mut impl Rng, size: usize) -> Vec<f64> {
        let pitch: f64 = rng.random_range(6.0..9.0);
        let (ox, oy) = (rng.random_range(0.0..pitch), rng.random_range(0.0..pitch));
        let sigma = pitch / 4.0;
        (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                let wrap = |d: f64| {
                    let m = d.rem_euclid(pitch);
                    m.min(pitch - m)
                };
                let (dx, dy) = (wrap(x - ox), wrap(y - oy));
                0.15 + 0.7 * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
            })
            .collect()
    }

    /// Oriented sinusoidal grating; `angle` in radians, `period` in pixels.
    pub fn grating(rng: &mut impl Rng, size: usize, angle: f64, period: f64) -> Vec<f64> {
        let phase = rng.random_range(0.0..2.0 * PI);
        let (s, c) = angle.sin_cos();
        (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                0.5 + 0.4 * (2.0 * PI * (x * c + y * s) / period + phase).sin()
            })
            .collect()
    }

    fn to_tensor(px: Vec<f64>, size: usize) -> Tensor<f32> {
        Tensor::from_vec([1, 1, size, size], px.into_iter().map(|v| v as f32).collect())
            .expect("generator produces size^2 pixels")
    }

    /// Quantize through 8 bits, matching what a PNG round trip would give.
    fn quantized(px: Vec<f64>) -> Vec<f64> {
        px.into_iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect()
    }

    /// Dot lattices (label 0) and vertical stripes (label 1), matching the
    /// lexicographic class order the same corpus gets when read from disk.
    pub fn stripes_and_dots(per_class: usize, size: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(2 * per_class);
        let mut labels = Vec::with_capacity(2 * per_class);
        for _ in 0..per_class {
            images.push(to_tensor(quantized(dot_lattice(&mut rng, size)), size));
            labels.push(0);
        }
        for _ in 0..per_class {
            images.push(to_tensor(quantized(stripes(&mut rng, size)), size));
            labels.push(1);
        }
        Dataset {
            images,
            labels,
            class_names: vec!["dots".into(), "stripes".into()],
        }
    }

    pub const GRATING_ANGLES_DEG: [f64; 4] = [0.0, 45.0, 90.0, 135.0];
    pub const GRATING_PERIODS: [f64; 2] = [4.0, 8.0];

    /// Eight-class texture task: gratings at 4 orientations x 2 periods.
    pub fn oriented_gratings(per_class: usize, size: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut class_names = Vec::new();
        for &deg in &GRATING_ANGLES_DEG {
            for &period in &GRATING_PERIODS {
                let label = class_names.len();
                class_names.push(format!("grating_{deg:03}deg_p{period}"));
                for _ in 0..per_class {
                    let px = grating(&mut rng, size, deg.to_radians(), period);
                    images.push(to_tensor(quantized(px), size));
                    labels.push(label);
                }
            }
        }
        Dataset {
            images,
            labels,
            class_names,
        }
    }

    /// Write a dataset as `root/<class>/<class>_NNNN.png` 8-bit PNGs.
    pub fn write_corpus(dataset: &Dataset, root: &Path) -> Result<()> {
        for name in &dataset.class_names {
            fs::create_dir_all(root.join(name))?;
        }
        let mut counters = vec![0usize; dataset.num_classes()];
        for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
            let name = &dataset.class_names[label];
            let path = root.join(name).join(format!("{name}_{:04}.png", counters[label]));
            counters[label] += 1;
            let [_, _, h, w] = img.shape();
            let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                let v = img[[0, 0, y as usize, x as usize]];
                Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
            });
            gray.save(&path).map_err(Error::Encode)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageFormat, RgbImage};
    use std::io::Cursor;

    fn png_bytes(img: DynamicImage) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png).unwrap();
        buf.into_inner()
    }

    #[test]
    fn black_and_white_endpoints() {
        let black = png_bytes(DynamicImage::ImageLuma8(GrayImage::new(5, 7)));
        let t = preprocess(&black, 4).unwrap();
        assert_eq!(t.shape(), [1, 1, 4, 4]);
        assert!(t.data().iter().all(|&v| v == 0.0));

        let white = RgbImage::from_pixel(3, 3, image::Rgb([255, 255, 255]));
        let t = preprocess(&png_bytes(DynamicImage::ImageRgb8(white)), 6).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_pixel_ramp_resizes_monotonically() {
        let mut img = GrayImage::new(2, 1);
        img.put_pixel(1, 0, Luma([255]));
        let t = preprocess(&png_bytes(DynamicImage::ImageLuma8(img)), 2).unwrap();
        for row in t.data().chunks(2) {
            assert!(row[0] <= row[1]);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // Half-pixel centres land exactly on the source samples.
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn rgb_uses_luminance_weights() {
        let red = RgbImage::from_pixel(1, 1, image::Rgb([255, 0, 0]));
        let t = preprocess(&png_bytes(DynamicImage::ImageRgb8(red)), 1).unwrap();
        assert!((t.data()[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn garbage_fails_to_decode() {
        assert!(matches!(
            preprocess(b"not an image", 4),
            Err(Error::DecodeBytes(_))
        ));
    }
}
