//! Non-overlapping square tiling of co-registered image pairs.

use cbff_core::{BitemporalSample, Mask, Tensor};

use crate::error::{DataError, Result};

/// Side lengths must be a positive multiple of the encoder's total stride.
pub const TILE_MULTIPLE: usize = 32;

pub fn check_tile_size(tile: usize) -> Result<()> {
    if tile < TILE_MULTIPLE || tile % TILE_MULTIPLE != 0 {
        return Err(DataError::Config(format!(
            "tile size {tile} must be at least {TILE_MULTIPLE} and divisible by {TILE_MULTIPLE}"
        )));
    }
    Ok(())
}

fn image_hw(t: &Tensor<f32>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(DataError::Size(format!("{what} must be (3, H, W), got {s:?}"))),
    }
}

/// Copy the `(3, th, tw)` window at `(y, x)`.
pub fn crop_image(t: &Tensor<f32>, y: usize, x: usize, th: usize, tw: usize) -> Tensor<f32> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    debug_assert!(y + th <= h && x + tw <= w);
    let src = t.data();
    Tensor::from_fn(&[3, th, tw], |i| {
        let (c, r, col) = (i / (th * tw), (i / tw) % th, i % tw);
        src[(c * h + y + r) * w + x + col]
    })
}

pub fn crop_mask(m: &Mask, y: usize, x: usize, th: usize, tw: usize) -> Mask {
    let mut data = Vec::with_capacity(th * tw);
    for r in y..y + th {
        data.extend_from_slice(&m.data[r * m.width + x..r * m.width + x + tw]);
    }
    Mask {
        height: th,
        width: tw,
        data,
    }
}

/// Tile id for grid cell `(row, col)` of source `id`.
pub fn tile_id(id: &str, row: usize, col: usize) -> String {
    format!("{id}_{row:03}_{col:03}")
}

/// Cut `(floor(H/tile) * floor(W/tile))` samples in row-major order; pixels
/// past the last whole tile on the right and bottom are dropped.
pub fn tile_pair(
    id: &str,
    image_a: &Tensor<f32>,
    image_b: &Tensor<f32>,
    label: Option<&Mask>,
    tile: usize,
) -> Result<Vec<BitemporalSample>> {
    check_tile_size(tile)?;
    let (h, w) = image_hw(image_a, "image A")?;
    if image_hw(image_b, "image B")? != (h, w) {
        return Err(DataError::Size(format!(
            "{id}: image B is {:?}, image A is (3, {h}, {w})",
            image_b.shape()
        )));
    }
    if let Some(m) = label {
        if (m.height, m.width) != (h, w) {
            return Err(DataError::Size(format!(
                "{id}: label is {}x{}, images are {h}x{w}",
                m.height, m.width
            )));
        }
    }
    let mut out = Vec::with_capacity((h / tile) * (w / tile));
    for row in 0..h / tile {
        for col in 0..w / tile {
            let (y, x) = (row * tile, col * tile);
            out.push(BitemporalSample::new(
                tile_id(id, row, col),
                crop_image(image_a, y, x, tile, tile),
                crop_image(image_b, y, x, tile, tile),
                label.map(|m| crop_mask(m, y, x, tile, tile)),
            )?);
        }
    }
    Ok(out)
}
