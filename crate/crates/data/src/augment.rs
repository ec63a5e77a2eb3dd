//! Weak (resize + flip) and strong (colour jitter + blur, then batch-level
//! CutMix) augmentation of bitemporal pairs.
//!
//! Geometry is shared by image A, image B and the label; photometric
//! parameters are drawn separately for each image. Every random choice is
//! recorded in an [`AugRecord`] so an augmentation can be replayed exactly.

use cbff_core::ops::bilinear_resize;
use cbff_core::{BitemporalSample, Mask, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};

pub const RESIZE_RANGE: (f64, f64) = (0.8, 1.2);
pub const FLIP_PROB: f64 = 0.5;
pub const JITTER_PROB: f64 = 0.8;
pub const BLUR_PROB: f64 = 0.5;
pub const JITTER_DELTA: f32 = 0.5;
pub const HUE_DELTA: f32 = 0.25;
pub const BLUR_RANGE: (f32, f32) = (0.1, 2.0);
pub const ASPECT_RANGE: (f64, f64) = (1.0 / 3.0, 3.0);

/// Colour-jitter deltas; each factor is applied as `1 + delta` except hue,
/// which is a shift in turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

/// Photometric parameters drawn for one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    pub jitter: Option<Jitter>,
    /// Gaussian sigma in pixels.
    pub blur_radius: Option<f32>,
}

/// CutMix rectangle and the batch index it was copied from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub donor: usize,
}

impl CutBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub resize_ratio: f64,
    pub flipped: bool,
    /// Parameters for image A and image B, when a strong view was made.
    pub photometric: Option<[Photometric; 2]>,
    pub cutmix_box: Option<CutBox>,
}

impl AugRecord {
    pub fn identity() -> Self {
        Self {
            resize_ratio: 1.0,
            flipped: false,
            photometric: None,
            cutmix_box: None,
        }
    }
}

/// `floor(ratio * n + 0.5)`, never below one pixel.
pub fn resized_len(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).max(1)
}

/// Centre crop when `src > dst`, symmetric zero pad otherwise: returns the
/// source offset and destination offset along one axis.
fn restore_offsets(src: usize, dst: usize) -> (usize, usize) {
    if src >= dst {
        ((src - dst) / 2, 0)
    } else {
        (0, (dst - src) / 2)
    }
}

/// Crop/pad every `(.., h, w)` plane of `data` back to `(oh, ow)`.
fn restore<T: Copy + Default>(data: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let (sy, dy) = restore_offsets(h, oh);
    let (sx, dx) = restore_offsets(w, ow);
    let rows = h.min(oh);
    let cols = w.min(ow);
    let mut out = vec![T::default(); planes * oh * ow];
    for p in 0..planes {
        for r in 0..rows {
            let src = p * h * w + (sy + r) * w + sx;
            let dst = p * oh * ow + (dy + r) * ow + dx;
            out[dst..dst + cols].copy_from_slice(&data[src..src + cols]);
        }
    }
    out
}

fn flip_planes<T: Copy>(data: &mut [T], w: usize) {
    for row in data.chunks_mut(w) {
        row.reverse();
    }
}

/// Resize by `ratio` (bilinear), restore to the input size, optionally flip.
pub fn geometric_image(img: &Tensor<f32>, ratio: f64, flipped: bool) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (nh, nw) = (resized_len(h, ratio), resized_len(w, ratio));
    let mut data = if (nh, nw) == (h, w) {
        img.data().to_vec()
    } else {
        let r = bilinear_resize(img, nh, nw);
        restore(r.data(), c, nh, nw, h, w)
    };
    if flipped {
        flip_planes(&mut data, w);
    }
    Tensor::new(&[c, h, w], data).expect("shape preserved")
}

/// Nearest source index for output `i`, matching half-pixel centres.
fn nearest_index(i: usize, input: usize, output: usize) -> usize {
    (((i as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
}

/// Same geometry as [`geometric_image`] with nearest-neighbour sampling.
pub fn geometric_mask(mask: &Mask, ratio: f64, flipped: bool) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let (nh, nw) = (resized_len(h, ratio), resized_len(w, ratio));
    let mut data = if (nh, nw) == (h, w) {
        mask.data.clone()
    } else {
        let xs: Vec<usize> = (0..nw).map(|x| nearest_index(x, w, nw)).collect();
        let mut r = Vec::with_capacity(nh * nw);
        for y in 0..nh {
            let row = nearest_index(y, h, nh) * w;
            r.extend(xs.iter().map(|&x| mask.data[row + x]));
        }
        restore(&r, 1, nh, nw, h, w)
    };
    if flipped {
        flip_planes(&mut data, w);
    }
    Mask {
        height: h,
        width: w,
        data,
    }
}

/// Apply the geometric part of `record` to a sample.
pub fn replay_weak(sample: &BitemporalSample, record: &AugRecord) -> BitemporalSample {
    let (r, f) = (record.resize_ratio, record.flipped);
    BitemporalSample {
        id: sample.id.clone(),
        image_a: geometric_image(&sample.image_a, r, f),
        image_b: geometric_image(&sample.image_b, r, f),
        label: sample.label.as_ref().map(|m| geometric_mask(m, r, f)),
    }
}

pub fn weak_augment(sample: &BitemporalSample, rng: &mut impl Rng) -> (BitemporalSample, AugRecord) {
    let record = AugRecord {
        resize_ratio: rng.random_range(RESIZE_RANGE.0..=RESIZE_RANGE.1),
        flipped: rng.random_bool(FLIP_PROB),
        ..AugRecord::identity()
    };
    (replay_weak(sample, &record), record)
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation, hue, in that order, clamping to
/// `[0, 1]` after each step. Contrast pivots on the mean grey level.
pub fn color_jitter(img: &Tensor<f32>, j: &Jitter) -> Tensor<f32> {
    let n = img.shape()[1] * img.shape()[2];
    let mut d = img.data().to_vec();
    let fb = 1.0 + j.brightness;
    for v in d.iter_mut() {
        *v = (*v * fb).clamp(0.0, 1.0);
    }
    if j.contrast != 0.0 {
        let mean = (0..n).map(|p| luma(d[p], d[n + p], d[2 * n + p])).sum::<f32>() / n as f32;
        let fc = 1.0 + j.contrast;
        for v in d.iter_mut() {
            *v = (mean + (*v - mean) * fc).clamp(0.0, 1.0);
        }
    }
    if j.saturation != 0.0 || j.hue != 0.0 {
        let fs = 1.0 + j.saturation;
        for p in 0..n {
            let (h, s, v) = rgb_to_hsv(d[p], d[n + p], d[2 * n + p]);
            let s = (s * fs).clamp(0.0, 1.0);
            let (r, g, b) = hsv_to_rgb(h + j.hue, s, v);
            d[p] = r.clamp(0.0, 1.0);
            d[n + p] = g.clamp(0.0, 1.0);
            d[2 * n + p] = b.clamp(0.0, 1.0);
        }
    }
    Tensor::new(img.shape(), d).expect("shape preserved")
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f32) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0f32; c * h * w];
    for p in 0..c * h {
        let row = &src[p * w..(p + 1) * w];
        for x in 0..w {
            tmp[p * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * row[reflect(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let plane = &tmp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * plane[reflect(y as isize + t as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(img.shape(), out).expect("shape preserved")
}

pub fn apply_photometric(img: &Tensor<f32>, p: &Photometric) -> Tensor<f32> {
    let mut out = img.clone();
    if let Some(j) = &p.jitter {
        out = color_jitter(&out, j);
    }
    if let Some(sigma) = p.blur_radius {
        out = gaussian_blur(&out, sigma);
    }
    out.map(|v| v.clamp(0.0, 1.0))
}

pub fn draw_photometric(rng: &mut impl Rng) -> Photometric {
    let jitter = rng.random_bool(JITTER_PROB).then(|| Jitter {
        brightness: rng.random_range(-JITTER_DELTA..=JITTER_DELTA),
        contrast: rng.random_range(-JITTER_DELTA..=JITTER_DELTA),
        saturation: rng.random_range(-JITTER_DELTA..=JITTER_DELTA),
        hue: rng.random_range(-HUE_DELTA..=HUE_DELTA),
    });
    let blur_radius = rng
        .random_bool(BLUR_PROB)
        .then(|| rng.random_range(BLUR_RANGE.0..=BLUR_RANGE.1));
    Photometric { jitter, blur_radius }
}

/// Photometric part of the strong view, drawn independently for A and B.
pub fn strong_augment(sample: &BitemporalSample, rng: &mut impl Rng) -> (BitemporalSample, [Photometric; 2]) {
    let params = [draw_photometric(rng), draw_photometric(rng)];
    (replay_strong(sample, &params), params)
}

pub fn replay_strong(sample: &BitemporalSample, params: &[Photometric; 2]) -> BitemporalSample {
    BitemporalSample {
        id: sample.id.clone(),
        image_a: apply_photometric(&sample.image_a, &params[0]),
        image_b: apply_photometric(&sample.image_b, &params[1]),
        label: sample.label.clone(),
    }
}

/// Box with area fraction `U(0, 1)`, log-uniform aspect in `[1/3, 3]` and
/// uniform position, copied from batch entry `(i + 1) % batch`.
pub fn draw_box(rng: &mut impl Rng, h: usize, w: usize, i: usize, batch: usize) -> CutBox {
    let area = rng.random::<f64>() * (h * w) as f64;
    let aspect = rng.random_range(ASPECT_RANGE.0.ln()..=ASPECT_RANGE.1.ln()).exp();
    let bw = ((area * aspect).sqrt().round() as usize).min(w);
    let bh = ((area / aspect).sqrt().round() as usize).min(h);
    CutBox {
        x: rng.random_range(0..=w - bw),
        y: rng.random_range(0..=h - bh),
        w: bw,
        h: bh,
        donor: (i + 1) % batch,
    }
}

fn paste_planes<T: Copy>(dst: &mut [T], src: &[T], planes: usize, h: usize, w: usize, b: &CutBox) {
    for p in 0..planes {
        for y in b.y..b.y + b.h {
            let o = (p * h + y) * w;
            dst[o + b.x..o + b.x + b.w].copy_from_slice(&src[o + b.x..o + b.x + b.w]);
        }
    }
}

pub fn paste_image(dst: &Tensor<f32>, donor: &Tensor<f32>, b: &CutBox) -> Result<Tensor<f32>> {
    if dst.shape() != donor.shape() || dst.rank() != 3 {
        return Err(DataError::Size(format!(
            "cutmix images {:?} and {:?} differ",
            dst.shape(),
            donor.shape()
        )));
    }
    let (c, h, w) = (dst.shape()[0], dst.shape()[1], dst.shape()[2]);
    let mut out = dst.clone();
    paste_planes(out.data_mut(), donor.data(), c, h, w, b);
    Ok(out)
}

pub fn paste_mask(dst: &Mask, donor: &Mask, b: &CutBox) -> Result<Mask> {
    if (dst.height, dst.width) != (donor.height, donor.width) {
        return Err(DataError::Size(format!(
            "cutmix masks {}x{} and {}x{} differ",
            dst.height, dst.width, donor.height, donor.width
        )));
    }
    let mut out = dst.clone();
    paste_planes(&mut out.data, &donor.data, 1, dst.height, dst.width, b);
    Ok(out)
}

/// Mix each sample with a box cut from its donor. The same box moves
/// image A, image B and the per-sample masks in `targets`.
pub fn cutmix_with_boxes(
    batch: &[BitemporalSample],
    targets: &[Mask],
    boxes: &[CutBox],
) -> Result<(Vec<BitemporalSample>, Vec<Mask>)> {
    if targets.len() != batch.len() || boxes.len() != batch.len() {
        return Err(DataError::Size(format!(
            "cutmix batch of {} with {} targets and {} boxes",
            batch.len(),
            targets.len(),
            boxes.len()
        )));
    }
    let mut samples = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    for (i, b) in boxes.iter().enumerate() {
        let d = b.donor;
        if d >= batch.len() {
            return Err(DataError::Size(format!("donor {d} outside batch of {}", batch.len())));
        }
        samples.push(BitemporalSample {
            id: batch[i].id.clone(),
            image_a: paste_image(&batch[i].image_a, &batch[d].image_a, b)?,
            image_b: paste_image(&batch[i].image_b, &batch[d].image_b, b)?,
            label: None,
        });
        masks.push(paste_mask(&targets[i], &targets[d], b)?);
    }
    Ok((samples, masks))
}

/// Draw one box per sample and mix images and pseudo-labels with it.
pub fn cutmix_pair(
    batch: &[BitemporalSample],
    pseudo_labels: &[Mask],
    rng: &mut impl Rng,
) -> Result<(Vec<BitemporalSample>, Vec<Mask>, Vec<CutBox>)> {
    let Some(first) = batch.first() else {
        return Ok((Vec::new(), Vec::new(), Vec::new()));
    };
    let (h, w) = (first.height(), first.width());
    let boxes: Vec<CutBox> = (0..batch.len()).map(|i| draw_box(rng, h, w, i, batch.len())).collect();
    let (samples, masks) = cutmix_with_boxes(batch, pseudo_labels, &boxes)?;
    Ok((samples, masks, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbff_core::rng::seeded_rng;

    fn sample(h: usize, w: usize) -> BitemporalSample {
        let a = Tensor::from_fn(&[3, h, w], |i| ((i * 37) % 101) as f32 / 100.0);
        let b = a.map(|v| 1.0 - v);
        let label = Mask::new(h, w, (0..h * w).map(|i| ((i / w + i % w) % 3 == 0) as u8).collect()).unwrap();
        BitemporalSample::new("s", a, b, Some(label)).unwrap()
    }

    #[test]
    fn identity_record_is_identity() {
        let s = sample(32, 48);
        assert_eq!(replay_weak(&s, &AugRecord::identity()), s);
        let none = [Photometric::default(); 2];
        assert_eq!(replay_strong(&s, &none), s);
        let zero = Photometric {
            jitter: Some(Jitter::default()),
            blur_radius: None,
        };
        assert_eq!(replay_strong(&s, &[zero; 2]), s);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = sample(32, 32);
        let rec = AugRecord {
            flipped: true,
            ..AugRecord::identity()
        };
        let once = replay_weak(&s, &rec);
        assert_ne!(once, s);
        assert_eq!(once.image_a.data()[0], s.image_a.data()[31]);
        assert_eq!(replay_weak(&once, &rec), s);
    }

    #[test]
    fn resized_lengths_round_half_up() {
        assert_eq!(resized_len(256, 0.8), 205);
        assert_eq!(resized_len(256, 1.2), 307);
        assert_eq!(resized_len(64, 1.0), 64);
        assert_eq!(resized_len(10, 0.85), 9);
        assert_eq!(restore_offsets(205, 256), (0, 25));
        assert_eq!(restore_offsets(307, 256), (25, 0));
    }

    #[test]
    fn nearest_label_resampling_stays_binary() {
        let s = sample(64, 64);
        for r in [0.8, 0.93, 1.07, 1.2] {
            let m = geometric_mask(s.label.as_ref().unwrap(), r, false);
            assert!(m.data.iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn brightness_half_on_mid_grey() {
        let img = Tensor::full(&[3, 4, 4], 0.5f32);
        let j = Jitter {
            brightness: 0.5,
            ..Jitter::default()
        };
        assert!(color_jitter(&img, &j).data().iter().all(|&v| v == 0.75));
        let j = Jitter {
            brightness: 0.5,
            ..j
        };
        let bright = Tensor::full(&[3, 2, 2], 0.9f32);
        assert!(color_jitter(&bright, &j).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hsv_round_trip_and_hue_rotation() {
        for &(r, g, b) in &[(0.2f32, 0.4, 0.9), (0.9, 0.1, 0.1), (0.5, 0.5, 0.5), (0.0, 0.7, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
        // A third of a turn maps pure red to pure green.
        let (r, g, b) = hsv_to_rgb(0.0 + 1.0 / 3.0, 1.0, 1.0);
        assert!(r.abs() < 1e-6 && (g - 1.0).abs() < 1e-6 && b.abs() < 1e-6);
    }

    #[test]
    fn contrast_pivots_on_mean_grey() {
        let img = Tensor::from_fn(&[3, 1, 2], |i| if i % 2 == 0 { 0.25 } else { 0.75 });
        let j = Jitter {
            contrast: -0.5,
            ..Jitter::default()
        };
        let out = color_jitter(&img, &j);
        for (o, i) in out.data().iter().zip(img.data()) {
            assert!((o - (0.5 + (i - 0.5) * 0.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let flat = Tensor::full(&[3, 8, 8], 0.4f32);
        for s in [0.1, 0.7, 2.0] {
            assert!(gaussian_blur(&flat, s).data().iter().all(|v| (v - 0.4).abs() < 1e-6));
            let k = gaussian_kernel(s);
            assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
            assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!((0..6).map(|i| reflect(i - 2, 3)).collect::<Vec<_>>(), vec![2, 1, 0, 1, 2, 1]);
    }

    #[test]
    fn strong_view_stays_in_range() {
        let mut rng = seeded_rng(0, "test");
        let s = sample(16, 16);
        for _ in 0..1000 {
            let (out, _) = strong_augment(&s, &mut rng);
            for v in out.image_a.data().iter().chain(out.image_b.data()) {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn record_serializes() {
        let rec = AugRecord {
            resize_ratio: 0.9,
            flipped: true,
            photometric: Some([Photometric::default(), draw_photometric(&mut seeded_rng(1, "x"))]),
            cutmix_box: Some(CutBox {
                x: 1,
                y: 2,
                w: 3,
                h: 4,
                donor: 1,
            }),
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert_eq!(serde_json::from_str::<AugRecord>(&json).unwrap(), rec);
    }

    #[test]
    fn boxes_stay_inside_the_image() {
        let mut rng = seeded_rng(2, "box");
        for _ in 0..500 {
            let b = draw_box(&mut rng, 64, 48, 3, 4);
            assert!(b.x + b.w <= 48 && b.y + b.h <= 64);
            assert_eq!(b.donor, 0);
        }
    }
}
