//! Stacking samples into network inputs.

use cbff_core::{BitemporalSample, Mask, Tensor};

use crate::error::{Result, TrainError};

/// `(B, 3, H, W)` tensors for image A and image B.
pub fn stack_images(samples: &[&BitemporalSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples
        .first()
        .ok_or_else(|| TrainError::Shape("empty batch".into()))?;
    let shape = first.image_a.shape().to_vec();
    let mut a = Vec::with_capacity(samples.len() * first.image_a.numel());
    let mut b = Vec::with_capacity(a.capacity());
    for s in samples {
        if s.image_a.shape() != shape.as_slice() || s.image_b.shape() != shape.as_slice() {
            return Err(TrainError::Shape(format!(
                "sample {} is {:?}, batch is {:?}",
                s.id,
                s.image_a.shape(),
                shape
            )));
        }
        a.extend_from_slice(s.image_a.data());
        b.extend_from_slice(s.image_b.data());
    }
    let dims = [samples.len(), shape[0], shape[1], shape[2]];
    Ok((Tensor::new(&dims, a)?, Tensor::new(&dims, b)?))
}

/// Row-major `B*H*W` class targets from the samples' labels.
pub fn stack_labels(samples: &[&BitemporalSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        let l = s
            .label
            .as_ref()
            .ok_or_else(|| TrainError::Config(format!("sample {} has no label", s.id)))?;
        out.extend_from_slice(&l.data);
    }
    Ok(out)
}

pub fn flatten(masks: &[Mask]) -> Vec<u8> {
    masks.iter().flat_map(|m| m.data.iter().copied()).collect()
}
