//! Rendering what a network has learned.
//!
//! Two techniques, kept separate:
//! - activation grids: run an image through the first `depth` layers and
//!   tile every output channel;
//! - filter synthesis: gradient ascent in input space on the mean
//!   pre-activation of one conv filter, starting from a seeded image.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::model::ModelSpec;
use crate::tensor::{Element, Tensor};

/// Pixels between tiles in rendered grids.
pub const GUTTER: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AscentInit {
    /// `0.5 + uniform(-0.1, 0.1)` per pixel.
    GrayNoise,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientAscentConfig {
    pub steps: usize,
    pub step_size: f64,
    pub init: AscentInit,
    pub grad_norm_epsilon: f64,
    pub seed: u64,
    /// Clamp the image to `[0, 1]` after every step.
    pub clamp: bool,
    /// Halve the step up to this many times when a step would lower the
    /// objective; a step that never improves leaves the image unchanged.
    /// The reduced step carries over and doubles back toward `step_size`
    /// after each first-try success. 0 applies every step as is.
    pub max_backtracks: usize,
}

impl Default for GradientAscentConfig {
    fn default() -> Self {
        Self {
            steps: 40,
            step_size: 1.0,
            init: AscentInit::GrayNoise,
            grad_norm_epsilon: 1e-5,
            seed: 0,
            clamp: true,
            max_backtracks: 20,
        }
    }
}

impl GradientAscentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("ascent needs at least one step".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig("step size must be positive".into()));
        }
        if !(self.grad_norm_epsilon >= 0.0) {
            return Err(Error::InvalidConfig("gradient epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// Tile placement for a grid of equally sized tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub tiles: usize,
    pub cols: usize,
    pub rows: usize,
    pub tile_width: usize,
    pub tile_height: usize,
    pub gutter: usize,
}

impl GridLayout {
    /// Near-square layout: `ceil(sqrt(n))` columns.
    pub fn new(tiles: usize, tile_width: usize, tile_height: usize) -> Self {
        let mut cols = 1;
        while cols * cols < tiles {
            cols += 1;
        }
        let rows = tiles.div_ceil(cols).max(1);
        Self {
            tiles,
            cols,
            rows,
            tile_width,
            tile_height,
            gutter: GUTTER,
        }
    }

    pub fn width(&self) -> usize {
        self.cols * (self.tile_width + self.gutter) - self.gutter
    }

    pub fn height(&self) -> usize {
        self.rows * (self.tile_height + self.gutter) - self.gutter
    }

    /// Top-left pixel of tile `i` (row-major).
    pub fn origin(&self, i: usize) -> (usize, usize) {
        let (r, c) = (i / self.cols, i % self.cols);
        (
            c * (self.tile_width + self.gutter),
            r * (self.tile_height + self.gutter),
        )
    }

    pub fn render(&self, tiles: &[Vec<u8>]) -> GrayImage {
        let mut img = GrayImage::new(self.width() as u32, self.height() as u32);
        for (i, tile) in tiles.iter().enumerate() {
            let (ox, oy) = self.origin(i);
            for y in 0..self.tile_height {
                for x in 0..self.tile_width {
                    img.put_pixel(
                        (ox + x) as u32,
                        (oy + y) as u32,
                        Luma([tile[y * self.tile_width + x]]),
                    );
                }
            }
        }
        img
    }

    /// Pixels of tile `i` cut back out of a rendered grid.
    pub fn crop(&self, img: &GrayImage, i: usize) -> Vec<u8> {
        let (ox, oy) = self.origin(i);
        let mut out = Vec::with_capacity(self.tile_width * self.tile_height);
        for y in 0..self.tile_height {
            for x in 0..self.tile_width {
                out.push(img.get_pixel((ox + x) as u32, (oy + y) as u32)[0]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl ChannelStats {
    fn of<T: Element>(values: &[T]) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for v in values {
            let v = v.to_f64();
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        Self {
            min,
            max,
            mean: sum / values.len().max(1) as f64,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.max <= self.min
    }

    /// Map a raw value to 8 bits; constant channels render mid-gray.
    pub fn quantize(&self, v: f64) -> u8 {
        if self.is_constant() {
            return 128;
        }
        (((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0) * 255.0).round() as u8
    }

    /// Inverse of [`quantize`](Self::quantize), up to quantization error.
    pub fn dequantize(&self, q: u8) -> f64 {
        if self.is_constant() {
            return self.min;
        }
        self.min + q as f64 / 255.0 * (self.max - self.min)
    }
}

/// Per-channel feature maps of one layer, min-max normalized and tiled.
#[derive(Clone, Debug)]
pub struct ActivationGrid {
    /// Zero-based index of the layer whose output is shown.
    pub layer: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Raw maps, `channels` planes of `height * width` values.
    pub maps: Vec<Vec<f32>>,
    pub stats: Vec<ChannelStats>,
    pub layout: GridLayout,
    pub image: GrayImage,
}

impl ActivationGrid {
    pub fn png(&self) -> Result<Vec<u8>> {
        encode_png(&self.image)
    }

    /// Sidecar CSV, one row per tile.
    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        for (i, s) in self.stats.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{i},{},{},{},{}\n",
                self.layer,
                s.mean,
                s.is_constant() as u8,
                s.min,
                s.max
            ));
        }
        out
    }
}

pub const CSV_HEADER: &str = "tile_index,layer,filter,score,dead,min,max\n";

/// Render the output of `truncate(model, depth)` for a single image.
pub fn extract_activations<T: Element>(
    model: &ModelSpec<T>,
    depth: usize,
    image: &Tensor<T>,
) -> Result<ActivationGrid> {
    if image.batch() != 1 {
        return Err(Error::ShapeMismatch {
            layer: None,
            expected: "a single image (N = 1)".into(),
            actual: image.shape().to_vec(),
        });
    }
    let truncated = model.truncate(depth)?;
    let out = truncated.predict(image)?;
    let [_, channels, height, width] = out.shape();
    let maps: Vec<Vec<f32>> = (0..channels)
        .map(|c| out.plane(0, c).iter().map(|v| v.to_f64() as f32).collect())
        .collect();
    let stats: Vec<ChannelStats> = maps.iter().map(|m| ChannelStats::of(m)).collect();
    let tiles: Vec<Vec<u8>> = maps
        .iter()
        .zip(&stats)
        .map(|(m, s)| m.iter().map(|&v| s.quantize(v as f64)).collect())
        .collect();
    let layout = GridLayout::new(channels, width, height);
    let image = layout.render(&tiles);
    Ok(ActivationGrid {
        layer: depth - 1,
        channels,
        height,
        width,
        maps,
        stats,
        layout,
        image,
    })
}

#[derive(Clone, Debug)]
pub struct FilterVisualization<T = f32> {
    pub layer: usize,
    pub filter: usize,
    /// Synthesized input, shaped like one model input.
    pub image: Tensor<T>,
    pub initial_score: f64,
    /// Objective after the last step.
    pub score: f64,
    /// Objective after each step.
    pub trajectory: Vec<f64>,
    /// Gradient was identically zero at the initial image.
    pub dead: bool,
}

/// Mean pre-activation of `filter` at conv layer `layer` with its gradient
/// w.r.t. the input.
struct FilterObjective<'a, T> {
    prefix: ModelSpec<T>,
    model: &'a ModelSpec<T>,
    layer: usize,
    filter: usize,
}

impl<'a, T: Element> FilterObjective<'a, T> {
    fn new(model: &'a ModelSpec<T>, layer: usize, filter: usize) -> Result<Self> {
        let count = model.filter_count(layer)?;
        if filter >= count {
            return Err(Error::FilterOutOfRange {
                layer,
                filter,
                count,
            });
        }
        Ok(Self {
            prefix: model.prefix(layer.max(1)),
            model,
            layer,
            filter,
        })
    }

    fn conv(&self) -> &crate::layers::Conv2d<T> {
        match &self.model.layers[self.layer] {
            Layer::Conv2d(c) => c,
            _ => unreachable!("checked in new"),
        }
    }

    fn score(&self, x: &Tensor<T>) -> Result<f64> {
        let input = if self.layer == 0 {
            x.clone()
        } else {
            self.prefix.predict(x)?
        };
        let pre = self.conv().forward_pre(&input)?;
        let plane = pre.plane(0, self.filter);
        Ok(plane.iter().map(|v| v.to_f64()).sum::<f64>() / plane.len() as f64)
    }

    fn gradient(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let trace = if self.layer == 0 {
            None
        } else {
            Some(self.prefix.forward_trace(x)?)
        };
        let input = trace.as_ref().map(|t| t.output()).unwrap_or(x);
        let [n, _, h, w] = input.shape();
        let mut grad_pre = Tensor::zeros([n, self.conv().out_channels(), h, w]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        for v in &mut grad_pre.data_mut()[self.filter * h * w..(self.filter + 1) * h * w] {
            *v = inv;
        }
        let (g, _) = self.conv().backward_linear(input, &grad_pre)?;
        match &trace {
            None => Ok(g),
            Some(t) => Ok(self.prefix.backward_from(&t.caches, self.layer, g)?.0),
        }
    }
}

fn initial_image<T: Element>(shape: [usize; 3], cfg: &GradientAscentConfig) -> Tensor<T> {
    let [c, h, w] = shape;
    match cfg.init {
        AscentInit::Zeros => Tensor::zeros([1, c, h, w]),
        AscentInit::GrayNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Tensor::from_fn([1, c, h, w], |_| T::from_f64(0.5 + rng.random_range(-0.1..0.1)))
        }
    }
}

/// Synthesize the input pattern that maximally drives one conv filter.
pub fn visualize_filter<T: Element>(
    model: &ModelSpec<T>,
    layer: usize,
    filter: usize,
    cfg: &GradientAscentConfig,
) -> Result<FilterVisualization<T>> {
    cfg.validate()?;
    let objective = FilterObjective::new(model, layer, filter)?;
    let mut x = initial_image::<T>(model.input_shape, cfg);
    let initial_score = objective.score(&x)?;
    let mut trajectory = Vec::with_capacity(cfg.steps);
    // Step multiplier carried across iterations by the backtracking rule.
    let mut shrink = 1.0f64;
    for step in 0..cfg.steps {
        let g = objective.gradient(&x)?;
        let ms = g.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / g.len() as f64;
        if ms == 0.0 && step == 0 {
            return Ok(FilterVisualization {
                layer,
                filter,
                image: x,
                initial_score,
                score: initial_score,
                trajectory,
                dead: true,
            });
        }
        let current = trajectory.last().copied().unwrap_or(initial_score);
        let base = cfg.step_size / (ms.sqrt() + cfg.grad_norm_epsilon);
        let mut accepted = None;
        for attempt in 0..=cfg.max_backtracks {
            let scale = base * shrink;
            let mut candidate = x.clone();
            for (xv, gv) in candidate.data_mut().iter_mut().zip(g.data()) {
                let mut v = xv.to_f64() + scale * gv.to_f64();
                if cfg.clamp {
                    v = v.clamp(0.0, 1.0);
                }
                *xv = T::from_f64(v);
            }
            let score = objective.score(&candidate)?;
            if cfg.max_backtracks == 0 || score >= current {
                accepted = Some((candidate, score));
                // Let the step grow back after a clean first try.
                if attempt == 0 {
                    shrink = (shrink * 2.0).min(1.0);
                }
                break;
            }
            shrink *= 0.5;
        }
        match accepted {
            Some((candidate, score)) => {
                x = candidate;
                trajectory.push(score);
            }
            None => trajectory.push(current),
        }
    }
    Ok(FilterVisualization {
        layer,
        filter,
        image: x,
        initial_score,
        score: *trajectory.last().expect("steps >= 1"),
        trajectory,
        dead: false,
    })
}

/// Standardize to mean 0.5 / std 0.25, clamp and quantize to 8 bits.
/// Constant inputs map to 128. Expects a single-channel image.
pub fn deprocess<T: Element>(x: &Tensor<T>) -> GrayImage {
    let [_, _, h, w] = x.shape();
    let vals: Vec<f64> = x.plane(0, 0).iter().map(|v| v.to_f64()).collect();
    let n = vals.len().max(1) as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let px: Vec<u8> = vals
        .iter()
        .map(|&v| {
            if std <= f64::EPSILON * mean.abs().max(1.0) {
                128
            } else {
                ((((v - mean) / std) * 0.25 + 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
            }
        })
        .collect();
    GrayImage::from_raw(w as u32, h as u32, px).expect("buffer matches dimensions")
}

#[derive(Clone, Debug)]
pub struct FilterAtlas<T = f32> {
    pub layer: usize,
    pub tiles: Vec<FilterVisualization<T>>,
    pub layout: GridLayout,
    pub image: GrayImage,
}

impl<T: Element> FilterAtlas<T> {
    pub fn png(&self) -> Result<Vec<u8>> {
        encode_png(&self.image)
    }

    pub fn csv(&self) -> String {
        filter_csv(&self.tiles)
    }
}

/// Sidecar CSV rows for synthesized filters.
pub fn filter_csv<T: Element>(tiles: &[FilterVisualization<T>]) -> String {
    let mut out = String::from(CSV_HEADER);
    for (i, t) in tiles.iter().enumerate() {
        let s = ChannelStats::of(t.image.data());
        out.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            t.layer, t.filter, t.score, t.dead as u8, s.min, s.max
        ));
    }
    out
}

/// Seed for filter `i` of an atlas, so parallel and serial runs agree.
pub fn filter_seed(base: u64, filter: usize) -> u64 {
    base.wrapping_add(filter as u64)
}

fn tile_pixels<T: Element>(v: &FilterVisualization<T>) -> Vec<u8> {
    let mut px = deprocess(&v.image).into_raw();
    if v.dead {
        // Mark dead filters with a diagonal cross.
        let [_, _, h, w] = v.image.shape();
        for i in 0..h.min(w) {
            px[i * w + i] = 0;
            px[i * w + (w - 1 - i)] = 0;
        }
    }
    px
}

/// Synthesize every filter of conv layer `layer` and tile the results in
/// filter order.
pub fn filter_atlas<T: Element>(
    model: &ModelSpec<T>,
    layer: usize,
    cfg: &GradientAscentConfig,
) -> Result<FilterAtlas<T>> {
    cfg.validate()?;
    let count = model.filter_count(layer)?;
    let tiles = (0..count)
        .into_par_iter()
        .map(|f| {
            let cfg = GradientAscentConfig {
                seed: filter_seed(cfg.seed, f),
                ..cfg.clone()
            };
            visualize_filter(model, layer, f, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let [_, h, w] = model.input_shape;
    let layout = GridLayout::new(count, w, h);
    let pixels: Vec<Vec<u8>> = tiles.iter().map(tile_pixels).collect();
    let image = layout.render(&pixels);
    Ok(FilterAtlas {
        layer,
        tiles,
        layout,
        image,
    })
}

/// PNG bytes for a single synthesized filter.
pub fn filter_png<T: Element>(v: &FilterVisualization<T>) -> Result<Vec<u8>> {
    let px = tile_pixels(v);
    let [_, _, h, w] = v.image.shape();
    encode_png(&GrayImage::from_raw(w as u32, h as u32, px).expect("tile size"))
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(Error::Encode)?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Activation, Conv2d};

    fn single_conv(weights: [f64; 9], act: Activation, size: usize) -> ModelSpec<f64> {
        let mut conv = Conv2d::zeros(1, 1, 3, act).unwrap();
        conv.weight.data_mut().copy_from_slice(&weights);
        ModelSpec::custom([1, size, size], vec![Layer::Conv2d(conv)]).unwrap()
    }

    const IDENTITY: [f64; 9] = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];

    #[test]
    fn layout_arithmetic() {
        let l = GridLayout::new(8, 16, 16);
        assert_eq!((l.cols, l.rows), (3, 3));
        assert_eq!(l.width(), 3 * 16 + 2 * GUTTER);
        let one = GridLayout::new(1, 5, 7);
        assert_eq!((one.width(), one.height()), (5, 7));
    }

    #[test]
    fn identity_layer_grid_is_normalized_input() {
        let m = single_conv(IDENTITY, Activation::Linear, 4);
        let x = Tensor::from_fn([1, 1, 4, 4], |[_, _, y, x]| (y * 4 + x) as f64);
        let grid = extract_activations(&m, 1, &x).unwrap();
        assert_eq!(grid.channels, 1);
        let tile = grid.layout.crop(&grid.image, 0);
        let expected: Vec<u8> = (0..16).map(|i| ((i as f64 / 15.0) * 255.0).round() as u8).collect();
        assert_eq!(tile, expected);
        assert_eq!(*tile.iter().min().unwrap(), 0);
        assert_eq!(*tile.iter().max().unwrap(), 255);
    }

    #[test]
    fn constant_channel_is_mid_gray() {
        let m = single_conv([0.0; 9], Activation::Linear, 4);
        let grid = extract_activations(&m, 1, &Tensor::full([1, 1, 4, 4], 0.3)).unwrap();
        assert!(grid.layout.crop(&grid.image, 0).iter().all(|&p| p == 128));
        assert!(grid.csv().lines().nth(1).unwrap().contains(",1,"));
    }

    #[test]
    fn batch_input_rejected() {
        let m = single_conv(IDENTITY, Activation::Linear, 4);
        assert!(extract_activations(&m, 1, &Tensor::zeros([2, 1, 4, 4])).is_err());
        assert!(matches!(
            extract_activations(&m, 2, &Tensor::zeros([1, 1, 4, 4])),
            Err(Error::DepthOutOfRange { .. })
        ));
    }

    #[test]
    fn all_positive_filter_saturates_to_ones() {
        let w = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        let m = single_conv(w, Activation::Linear, 6);
        let v = visualize_filter(&m, 0, 0, &GradientAscentConfig::default()).unwrap();
        assert!(v.image.data().iter().all(|&p| p == 1.0));
        // Interior outputs see the full kernel sum.
        let pre = match &m.layers[0] {
            Layer::Conv2d(c) => c.forward_pre(&v.image).unwrap(),
            _ => unreachable!(),
        };
        assert!((pre[[0, 0, 2, 2]] - 4.5).abs() < 1e-12);
        assert!(v.score > v.initial_score);
    }

    #[test]
    fn zero_steps_rejected_one_step_moves() {
        let m = single_conv([1.0; 9], Activation::Linear, 4);
        let cfg = GradientAscentConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(visualize_filter(&m, 0, 0, &cfg).is_err());
        let cfg = GradientAscentConfig {
            steps: 1,
            ..Default::default()
        };
        let v = visualize_filter(&m, 0, 0, &cfg).unwrap();
        assert_ne!(v.image, initial_image::<f64>([1, 4, 4], &cfg));
    }

    #[test]
    fn dead_filter_is_flagged() {
        let m = single_conv([0.0; 9], Activation::Relu, 4);
        let v = visualize_filter(&m, 0, 0, &GradientAscentConfig::default()).unwrap();
        assert!(v.dead);
        assert_eq!(v.image, initial_image::<f64>([1, 4, 4], &GradientAscentConfig::default()));
    }

    #[test]
    fn bad_layer_or_filter() {
        let m = ModelSpec::<f64>::custom(
            [1, 4, 4],
            vec![Layer::Conv2d(Conv2d::zeros(1, 2, 3, Activation::Relu).unwrap()), Layer::MaxPool2x2],
        )
        .unwrap();
        let cfg = GradientAscentConfig::default();
        assert!(matches!(visualize_filter(&m, 1, 0, &cfg), Err(Error::NotConvLayer { layer: 1 })));
        assert!(matches!(
            visualize_filter(&m, 0, 2, &cfg),
            Err(Error::FilterOutOfRange { count: 2, .. })
        ));
    }

    #[test]
    fn deprocess_constant_and_range() {
        let img = deprocess(&Tensor::<f32>::full([1, 1, 3, 3], 0.7));
        assert!(img.pixels().all(|p| p[0] == 128));
        let x = Tensor::<f64>::from_fn([1, 1, 8, 8], |[_, _, y, x]| ((y * 8 + x) as f64).powi(3));
        let img = deprocess(&x);
        assert_eq!(img.dimensions(), (8, 8));
    }

    #[test]
    fn quantize_round_trip() {
        let s = ChannelStats { min: -2.0, max: 3.0, mean: 0.0 };
        for v in [-2.0, -1.3, 0.0, 2.99, 3.0] {
            let back = s.dequantize(s.quantize(v));
            assert!((back - v).abs() <= 5.0 / 255.0);
        }
    }
}
