//! Synthetic bitemporal corpus. Image A is a smooth textured background;
//! image B is A with one to four rectangles or ellipses pasted in, each
//! brighter or darker than the scene. Both images then get independent
//! acquisition effects, and the label is exactly the union of the pasted
//! shapes.

use std::path::{Path, PathBuf};

use cbff_core::rng::{indexed_rng, Stream};
use cbff_core::{Mask, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DataError, Result};
use crate::imageio::{write_mask, write_rgb};
use crate::manifest::{DatasetManifest, Record, Split};
use crate::tile::check_tile_size;

pub const SYNTH_STREAM: &str = "synth";

/// Corpus parameters. The last `n_test` pairs go to the test split, the
/// `n_val` before them to validation, the rest to training.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_pairs: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n_pairs: usize, size: usize, seed: u64) -> Self {
        Self {
            n_pairs,
            n_val: 0,
            n_test: 0,
            size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(DataError::Config("n_pairs must be at least 1".into()));
        }
        if self.n_val + self.n_test > self.n_pairs {
            return Err(DataError::Config(format!(
                "{} val + {} test pairs exceed {} pairs",
                self.n_val, self.n_test, self.n_pairs
            )));
        }
        check_tile_size(self.size)
    }

    pub fn split_of(&self, i: usize) -> Split {
        let n_train = self.n_pairs - self.n_val - self.n_test;
        if i < n_train {
            Split::Train
        } else if i < n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

pub fn pair_id(i: usize) -> String {
    format!("pair_{i:05}")
}

/// Shape side lengths as a fraction of the image side.
const SHAPE_MIN: f64 = 0.2;
const SHAPE_MAX: f64 = 0.45;
/// A shape sits this far above or below the mean of the image it is
/// pasted into.
const CONTRAST: (f32, f32) = (0.2, 0.4);
/// Acquisition effects drawn independently per image: contrast gain around
/// mid-grey, brightness offset, per-channel colour cast, pixel noise.
const GAIN: f32 = 0.2;
const SHIFT: f32 = 0.08;
const CAST: f32 = 0.05;
const PIXEL_NOISE: f32 = 0.03;

/// Bilinearly interpolated lattice noise with `cells` cells per side.
fn value_noise(rng: &mut Stream, size: usize, cells: usize) -> Vec<f32> {
    let g = cells + 1;
    let lattice: Vec<f32> = (0..g * g).map(|_| rng.random::<f32>()).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f32 / size as f32 * cells as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f32 / size as f32 * cells as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| lattice[yy * g + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn background(rng: &mut Stream, size: usize) -> Tensor<f32> {
    let n = size * size;
    let coarse = value_noise(rng, size, 4);
    let fine = value_noise(rng, size, (size / 8).max(2));
    let angle = rng.random::<f32>() * std::f32::consts::TAU;
    let (gx, gy) = (angle.cos(), angle.sin());
    let mut img = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        let base = rng.random_range(0.25f32..0.55);
        let tex = rng.random_range(0.1f32..0.25);
        let slope = rng.random_range(-0.15f32..0.15);
        for p in 0..n {
            let (y, x) = ((p / size) as f32 / size as f32 - 0.5, (p % size) as f32 / size as f32 - 0.5);
            let v = base + tex * (0.6 * coarse[p] + 0.4 * fine[p] - 0.5) + slope * (gx * x + gy * y);
            img.push(v);
        }
    }
    Tensor::new(&[3, size, size], img).expect("sized to shape")
}

/// Paste `k in [1, 4]` shapes into `img` in place; returns the paste mask.
fn paste_shapes(rng: &mut Stream, img: &mut Tensor<f32>, size: usize) -> Mask {
    let n = size * size;
    let mut mask = Mask::zeros(size, size);
    let k = rng.random_range(1..=4);
    for _ in 0..k {
        let side = |r: &mut Stream| ((r.random_range(SHAPE_MIN..SHAPE_MAX) * size as f64).round() as usize).max(2);
        let (h, w) = (side(rng), side(rng));
        let y0 = rng.random_range(0..=size - h);
        let x0 = rng.random_range(0..=size - w);
        let ellipse = rng.random_bool(0.5);
        let mean = img.data().iter().sum::<f32>() / img.numel() as f32;
        let delta = rng.random_range(CONTRAST.0..CONTRAST.1);
        let level = if rng.random_bool(0.5) {
            (mean + delta).min(0.95)
        } else {
            (mean - delta).max(0.05)
        };
        let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.08f32..0.08));
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (ry, rx) = (h as f64 / 2.0, w as f64 / 2.0);
        let data = img.data_mut();
        for y in 0..h {
            for x in 0..w {
                if ellipse {
                    let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                    if dy * dy + dx * dx > 1.0 {
                        continue;
                    }
                }
                let p = (y0 + y) * size + x0 + x;
                mask.data[p] = 1;
                for (c, t) in tint.iter().enumerate() {
                    data[c * n + p] = level + t;
                }
            }
        }
    }
    mask
}

fn photometric_noise(rng: &mut Stream, img: &Tensor<f32>) -> Tensor<f32> {
    let gain = rng.random_range(1.0 - GAIN..=1.0 + GAIN);
    let shift = rng.random_range(-SHIFT..=SHIFT);
    let cast: [f32; 3] = std::array::from_fn(|_| rng.random_range(-CAST..=CAST));
    let noise = Normal::new(0.0f32, PIXEL_NOISE).expect("positive sigma");
    let mut out = img.clone();
    let n = img.numel() / 3;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let lit = (*v - 0.5) * gain + 0.5 + shift + cast[i / n];
        *v = (lit + noise.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

/// One pair, fully determined by `(seed, index)`.
pub fn synth_pair(seed: u64, index: usize, size: usize) -> (Tensor<f32>, Tensor<f32>, Mask) {
    let mut rng = indexed_rng(seed, SYNTH_STREAM, &[index as u64]);
    let clean_a = background(&mut rng, size);
    let mut clean_b = clean_a.clone();
    let mask = paste_shapes(&mut rng, &mut clean_b, size);
    let a = photometric_noise(&mut rng, &clean_a);
    let b = photometric_noise(&mut rng, &clean_b);
    (a, b, mask)
}

/// Generate the corpus under `root` in the standard layout and write its
/// manifest. Pairs are independent, so `workers > 1` splits them across
/// threads without changing any output byte.
pub fn synth_generate(spec: &SynthSpec, root: &Path, workers: usize) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(root).map_err(|e| DataError::io(root, e))?;
    let records: Vec<Record> = (0..spec.n_pairs)
        .map(|i| Record::standard(&pair_id(i), true, spec.split_of(i)))
        .collect();
    let write_one = |i: usize| -> Result<()> {
        let (a, b, m) = synth_pair(spec.seed, i, spec.size);
        let r = &records[i];
        write_rgb(&root.join(&r.path_a), &a)?;
        write_rgb(&root.join(&r.path_b), &b)?;
        write_mask(&root.join(r.path_label.as_ref().expect("synthetic pairs are labeled")), &m)
    };
    if workers <= 1 {
        (0..spec.n_pairs).try_for_each(write_one)?;
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let write_one = &write_one;
                    s.spawn(move || (w..spec.n_pairs).step_by(workers).try_for_each(write_one))
                })
                .collect();
            handles.into_iter().try_for_each(|h| h.join().expect("synth worker panicked"))
        })?;
    }
    let manifest = DatasetManifest {
        root: PathBuf::from(root),
        tile_size: spec.size,
        records,
    };
    manifest.save()?;
    Ok(manifest)
}
