//! One epoch of strong-to-weak consistency training.
//!
//! Each iteration takes a labeled and an unlabeled batch. The labeled batch
//! is weakly augmented and supervised by its labels. The unlabeled batch is
//! weakly augmented, labelled by the convolutional head in eval mode
//! without gradients, then strongly augmented and CutMixed, and the
//! network is trained to reproduce the pseudo-labels on it.

use cbff_core::rng::{indexed_rng, AUG, CUTMIX, SHUFFLE};
use cbff_core::{BitemporalSample, Mask, TrainConfig};
use cbff_data::augment::{cutmix_with_boxes, draw_box, strong_augment, weak_augment, CutBox};
use cbff_model::layers::BN_MOMENTUM;
use cbff_model::{ChangeNet, Fwd, NetConfig, ParamStore};
use rand::seq::SliceRandom;

use crate::batch::{flatten, stack_images, stack_labels};
use crate::error::{Result, TrainError};
use crate::log::LossReport;
use crate::loss::{branch_cross_entropy, make_pseudo_labels, total_loss};
use crate::optim::Sgd;

pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: ChangeNet,
    pub store: ParamStore<f32>,
    pub sgd: Sgd<f32>,
    labeled: Vec<BitemporalSample>,
    unlabeled: Vec<BitemporalSample>,
    /// Threads used for per-sample augmentation; 0 or 1 runs serially.
    pub workers: usize,
}

/// Apply `f` to every item, optionally on `workers` threads. Output order
/// and content do not depend on the worker count.
fn map_items<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(usize, &I) -> O + Sync) -> Vec<O> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || part.iter().enumerate().map(|(j, x)| f(c * chunk + j, x)).collect::<Vec<O>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("augmentation worker panicked"))
            .collect()
    })
}

/// An epoch-long index sequence of `len` entries over `n` items, made of
/// back-to-back shuffled passes.
fn cycled_order(n: usize, len: usize, seed: u64, epoch: usize, which: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut pass = 0u64;
    while out.len() < len {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut indexed_rng(seed, SHUFFLE, &[epoch as u64, which, pass]));
        out.extend(idx.into_iter().take(len - out.len()));
        pass += 1;
    }
    out
}

impl Trainer {
    /// Fresh network initialised from `cfg.seed`. Labels of `unlabeled`
    /// samples are dropped here and never reach a loss.
    pub fn new(cfg: TrainConfig, labeled: Vec<BitemporalSample>, unlabeled: Vec<BitemporalSample>) -> Result<Self> {
        cfg.validate()?;
        if labeled.is_empty() {
            return Err(TrainError::Config("no labeled samples to train on".into()));
        }
        if let Some(s) = labeled.iter().find(|s| s.label.is_none()) {
            return Err(TrainError::Config(format!("labeled sample {} has no label", s.id)));
        }
        let (net, store) = ChangeNet::new::<f32>(&NetConfig::from(&cfg), cfg.seed);
        let sgd = Sgd::new(&store, cfg.lr, cfg.momentum, cfg.weight_decay);
        let unlabeled = unlabeled
            .into_iter()
            .map(|mut s| {
                s.label = None;
                s
            })
            .collect();
        Ok(Self {
            cfg,
            net,
            store,
            sgd,
            labeled,
            unlabeled,
            workers: 0,
        })
    }

    fn uses_unlabeled(&self) -> bool {
        self.cfg.lambda2 != 0.0 && !self.unlabeled.is_empty()
    }

    /// `ceil(max(N_u, N_l) / B)`: one pass over the unlabeled set, with
    /// the labeled set cycled to match.
    pub fn iterations_per_epoch(&self) -> usize {
        self.unlabeled.len().max(self.labeled.len()).div_ceil(self.cfg.batch_size)
    }

    /// Run one epoch (numbered from 1) and return a report per iteration.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<Vec<LossReport>> {
        let bs = self.cfg.batch_size;
        let iters = self.iterations_per_epoch();
        let seed = self.cfg.seed;
        let lab_order = cycled_order(self.labeled.len(), iters * bs, seed, epoch, 0);
        let unl_order = if self.unlabeled.is_empty() {
            Vec::new()
        } else {
            cycled_order(self.unlabeled.len(), iters * bs, seed, epoch, 1)
        };
        let mut reports = Vec::with_capacity(iters);
        for it in 0..iters {
            let lab: Vec<BitemporalSample> = lab_order[it * bs..(it + 1) * bs].iter().map(|&i| self.labeled[i].clone()).collect();
            let unl: Vec<BitemporalSample> = if self.uses_unlabeled() {
                unl_order[it * bs..(it + 1) * bs].iter().map(|&i| self.unlabeled[i].clone()).collect()
            } else {
                Vec::new()
            };
            let t = (epoch.saturating_sub(1)) * iters + it;
            self.sgd.lr = self.cfg.lr_schedule.rate(self.cfg.lr, t, self.cfg.epochs * iters);
            let report = self.step(epoch, it, &lab, &unl).map_err(|e| match e {
                TrainError::NonFinite { what, .. } => TrainError::NonFinite { what, epoch, iter: it },
                other => other,
            })?;
            reports.push(report);
        }
        Ok(reports)
    }

    fn step(&mut self, epoch: usize, it: usize, lab: &[BitemporalSample], unl: &[BitemporalSample]) -> Result<LossReport> {
        let seed = self.cfg.seed;
        let key = |slot: u64, k: usize| indexed_rng(seed, AUG, &[epoch as u64, it as u64, slot, k as u64]);

        let lab_weak: Vec<BitemporalSample> = map_items(lab, self.workers, |k, s| weak_augment(s, &mut key(0, k)).0);
        let lab_refs: Vec<&BitemporalSample> = lab_weak.iter().collect();
        let (la, lb) = stack_images(&lab_refs)?;
        let y = stack_labels(&lab_refs)?;

        // Unlabeled branch: weak view -> pseudo-labels -> strong view.
        let mut strong = None;
        let mut rate = 0.0;
        if !unl.is_empty() {
            let weak_and_strong: Vec<(BitemporalSample, BitemporalSample)> = map_items(unl, self.workers, |k, s| {
                let mut rng = key(1, k);
                let (w, _) = weak_augment(s, &mut rng);
                let (st, _) = strong_augment(&w, &mut rng);
                (w, st)
            });
            let weak: Vec<&BitemporalSample> = weak_and_strong.iter().map(|p| &p.0).collect();
            let (wa, wb) = stack_images(&weak)?;
            let p = self.net.predict(&self.store, &wa, &wb)?;
            let pseudo = make_pseudo_labels(&p.p_c, self.cfg.tau)?;
            rate = pseudo.positive_rate();
            let mut cut = indexed_rng(seed, CUTMIX, &[epoch as u64, it as u64]);
            let (h, w) = (weak[0].height(), weak[0].width());
            let boxes: Vec<CutBox> = (0..unl.len()).map(|i| draw_box(&mut cut, h, w, i, unl.len())).collect();
            let strong_views: Vec<BitemporalSample> = weak_and_strong.into_iter().map(|p| p.1).collect();
            let (mixed, labels) = cutmix_with_boxes(&strong_views, &pseudo.labels, &boxes)?;
            let valid: Option<Vec<Mask>> = if self.cfg.mask_low_confidence {
                Some(cutmix_with_boxes(&strong_views, &pseudo.confident, &boxes)?.1)
            } else {
                None
            };
            strong = Some((mixed, labels, valid));
        }

        let mut cx = Fwd::new(&self.store, true, true);
        let va = cx.tape.constant(cbff_model::normalize_images(&la)?);
        let vb = cx.tape.constant(cbff_model::normalize_images(&lb)?);
        let out = self.net.forward(&mut cx, va, vb)?;
        let sup = branch_cross_entropy(&mut cx.tape, &out, &y, None)?;
        let l_sup = cx.tape.value(sup)[0] as f64;
        // Running statistics follow the weakly augmented labeled batches
        // only; the strong views' independent colour jitter inflates the
        // difference features and would skew the eval-mode teacher.
        let updates = std::mem::take(&mut cx.bn_updates);
        let mut loss = cx.tape.scale(sup, self.cfg.lambda1 as f32);
        let mut l_con = 0.0;
        if let Some((mixed, labels, valid)) = &strong {
            let refs: Vec<&BitemporalSample> = mixed.iter().collect();
            let (sa, sb) = stack_images(&refs)?;
            let sa = cx.tape.constant(cbff_model::normalize_images(&sa)?);
            let sb = cx.tape.constant(cbff_model::normalize_images(&sb)?);
            let out_s = self.net.forward(&mut cx, sa, sb)?;
            let v = valid.as_ref().map(|v| flatten(v));
            let con = branch_cross_entropy(&mut cx.tape, &out_s, &flatten(labels), v.as_deref())?;
            l_con = cx.tape.value(con)[0] as f64;
            let weighted = cx.tape.scale(con, self.cfg.lambda2 as f32);
            loss = cx.tape.add(loss, weighted)?;
        }
        if !l_sup.is_finite() || !l_con.is_finite() {
            return Err(TrainError::NonFinite {
                what: "loss".into(),
                epoch,
                iter: it,
            });
        }
        let grads = cx.tape.backward(loss)?;
        let per_param: Vec<_> = cx.param_vars().iter().map(|&v| grads.get(v)).collect();
        self.sgd.step(&mut self.store, &per_param)?;
        for u in &updates {
            self.store.apply_bn_update(u, BN_MOMENTUM);
        }
        Ok(LossReport {
            epoch,
            iter: it,
            l_sup,
            l_con,
            total: total_loss(l_sup, l_con, &self.cfg),
            pseudo_positive_rate: rate,
            lr: self.sgd.lr,
        })
    }

    pub fn labeled(&self) -> &[BitemporalSample] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[BitemporalSample] {
        &self.unlabeled
    }
}
