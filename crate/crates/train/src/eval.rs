//! Confusion-matrix evaluation of a trained network.

use cbff_core::{BitemporalSample, ConfusionMatrix, HeadChoice, Real};
use cbff_model::{ChangeNet, ParamStore};

use crate::batch::stack_images;
use crate::error::{Result, TrainError};

/// Eval-mode prediction over `samples` in batches of `batch`, accumulating
/// one confusion matrix over every pixel.
pub fn evaluate<T: Real>(
    net: &ChangeNet,
    store: &ParamStore<T>,
    samples: &[&BitemporalSample],
    head: HeadChoice,
    batch: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    for chunk in samples.chunks(batch.max(1)) {
        let (a, b) = stack_images(chunk)?;
        let maps = net.predict(store, &a, &b)?.change_maps(head);
        for (s, pred) in chunk.iter().zip(&maps) {
            let truth = s
                .label
                .as_ref()
                .ok_or_else(|| TrainError::Config(format!("sample {} has no label to evaluate against", s.id)))?;
            cm.accumulate(pred, truth)?;
        }
    }
    Ok(cm)
}
