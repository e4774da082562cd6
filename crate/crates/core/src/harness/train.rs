//! Parameter-efficient training on synthetic clips.
//!
//! A step samples seven frames of one sequence: two templates, then five
//! search frames. The second template frame also runs once as a
//! ground-truth-centred search frame to seed the clip's memory bank and
//! dynamic state, mirroring tracker initialization. The five search frames
//! then run in order with carried DSF state and a growing clip-local bank;
//! their losses are summed and back-propagated through time. Only trainable
//! parameters are updated.

use std::fmt::Write as _;

use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::harness::crop::CropWindow;
use crate::harness::model::Model;
use crate::harness::optim::AdamW;
use crate::harness::synthetic::{FrameSource, Scenario, SyntheticSequence};
use crate::heads::{clip_box, total_loss, validate_box};
use crate::mcp::MemoryBank;
use crate::numerics::{Graph, ParamId, SeededRng, Tensor, Var};

pub const CLIP_FRAMES: usize = 7;
pub const TEMPLATE_FRAMES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub giou: f64,
    pub l1: f64,
    pub focal: f64,
    pub ce: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<StepLoss>,
    pub frozen_hash_before: u64,
    pub frozen_hash_after: u64,
    pub trainable_params: usize,
    pub total_params: usize,
}

impl TrainReport {
    /// `step,total,giou,l1,focal,ce,grad_norm`
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,total,giou,l1,focal,ce,grad_norm\n");
        for l in &self.losses {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                l.step, l.total, l.giou, l.l1, l.focal, l.ce, l.grad_norm
            );
        }
        out
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_params as f64 / self.total_params.max(1) as f64
    }
}

/// The training corpus: scenarios in rotation, modalities staggered
/// against them.
pub fn training_set(model: &Model) -> Result<Vec<SyntheticSequence>> {
    let cfg = &model.cfg;
    (0..cfg.train.sequences)
        .map(|i| {
            let scenario = Scenario::ALL[i % Scenario::ALL.len()];
            let modality = Modality::ALL[(i + i / Scenario::ALL.len()) % Modality::ALL.len()];
            SyntheticSequence::generate(
                scenario,
                modality,
                cfg.train.seq_len,
                cfg.train.data_seed + i as u64,
                cfg.data.frame_size,
                cfg.embed.text_dim,
            )
        })
        .collect()
}

/// Increasing frame indices for one clip.
pub fn sample_clip(rng: &mut SeededRng, len: usize, max_gap: usize) -> Result<[usize; CLIP_FRAMES]> {
    if len < CLIP_FRAMES {
        return Err(Error::Config(format!("clips need {CLIP_FRAMES} frames, sequence has {len}")));
    }
    let mut gaps = [1usize; CLIP_FRAMES - 1];
    for g in gaps.iter_mut() {
        *g = 1 + rng.below(max_gap.max(1));
    }
    if gaps.iter().sum::<usize>() > len - 1 {
        gaps = [1; CLIP_FRAMES - 1];
    }
    let span: usize = gaps.iter().sum();
    let mut idx = [0usize; CLIP_FRAMES];
    idx[0] = rng.below(len - span);
    for k in 1..CLIP_FRAMES {
        idx[k] = idx[k - 1] + gaps[k - 1];
    }
    Ok(idx)
}

/// A search window around a randomly shifted and rescaled ground truth.
fn jittered_window(rng: &mut SeededRng, model: &Model, gt: [f64; 4], frame_w: usize, frame_h: usize) -> Result<CropWindow> {
    let t = &model.cfg.train;
    let (fw, fh) = (frame_w as f64, frame_h as f64);
    let side = (gt[2] * fw * gt[3] * fh).sqrt();
    let cx = gt[0] + t.jitter_center * side * rng.normal() / fw;
    let cy = gt[1] + t.jitter_center * side * rng.normal() / fh;
    let s = (t.jitter_scale * rng.normal()).exp();
    CropWindow::around([cx, cy, gt[2] * s, gt[3] * s], model.cfg.track.search_factor, frame_w, frame_h)
}

struct ClipLoss {
    total: Var,
    giou: f64,
    l1: f64,
    focal: f64,
    ce: f64,
}

/// Builds the loss graph of one clip.
fn clip_loss(
    g: &mut Graph,
    model: &Model,
    seq: &SyntheticSequence,
    idx: &[usize; CLIP_FRAMES],
    rng: &mut SeededRng,
) -> Result<ClipLoss> {
    let cfg = &model.cfg;
    let frames = idx.iter().map(|&i| seq.frame(i)).collect::<Result<Vec<_>>>()?;
    let (fw, fh) = seq.frame_size();
    let templates: Vec<Var> = (0..cfg.embed.templates)
        .map(|k| {
            let j = k % TEMPLATE_FRAMES;
            let t = model.template_tokens(&frames[j], seq.gt_box(idx[j]))?;
            Ok(g.constant(t))
        })
        .collect::<Result<_>>()?;
    let text = model.text_var(g, &frames[0]);

    let mut bank = if model.mcp.is_some() {
        Some(MemoryBank::from_config(cfg)?)
    } else {
        None
    };
    let mut stored: Vec<(usize, Var)> = Vec::new();
    let mut h: Vec<Var> = model
        .dsf
        .iter()
        .map(|m| g.constant(Tensor::zeros(&[cfg.search_tokens(), m.dims.inner * m.dims.state])))
        .collect();
    let mut fusion: Vec<Option<Var>> = vec![None; model.dsf.len()];

    let mut acc: Option<Var> = None;
    let (mut giou, mut l1, mut focal, mut ce) = (0.0, 0.0, 0.0, 0.0);
    for (local, k) in (TEMPLATE_FRAMES - 1..CLIP_FRAMES).enumerate() {
        let gt = seq.gt_box(idx[k]);
        let seed_pass = k < TEMPLATE_FRAMES;
        let window = if seed_pass {
            model.search_window(gt, &frames[k])?
        } else {
            jittered_window(rng, model, gt, fw, fh)?
        };
        let search = g.constant(model.search_tokens(&frames[k], &window)?);
        let memory = model.memory_prompt(g, &stored)?;
        let out = model.forward_frame(g, memory, &templates, search, text, &fusion)?;
        if !seed_pass {
            let gt_crop = clip_box(window.to_crop(gt));
            validate_box(gt_crop)?;
            let terms = total_loss(g, &out.center, out.modality_logits, gt_crop, seq.modality)?;
            giou += terms.giou;
            l1 += terms.l1;
            focal += terms.focal;
            ce += terms.ce;
            acc = Some(match acc {
                None => terms.total,
                Some(a) => g.add(a, terms.total)?,
            });
        }
        let steps = model.dsf_step(g, &out, &h)?;
        h = steps.iter().map(|s| s.h).collect();
        fusion = steps.iter().map(|s| Some(s.f)).collect();
        if let Some(b) = &mut bank {
            let o_s = out.o_s();
            let feature = if cfg.train.memory_backprop { o_s } else { g.detach(o_s) };
            b.insert_frame(local, g.value(o_s).clone())?;
            stored.push((local, feature));
            let keep = b.indices();
            stored.retain(|(i, _)| keep.contains(i));
        }
    }
    let total = acc.ok_or_else(|| Error::State("clip produced no search frames".into()))?;
    Ok(ClipLoss {
        total,
        giou,
        l1,
        focal,
        ce,
    })
}

/// Trains `model` in place for `cfg.train.steps` steps. `on_step` sees
/// every step's losses as they are produced.
pub fn train(model: &mut Model, data: &[SyntheticSequence], mut on_step: impl FnMut(&StepLoss)) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("training needs at least one sequence".into()));
    }
    let cfg = model.cfg.clone();
    let mut opt = AdamW::new(&cfg.train);
    let mut rng = SeededRng::new(cfg.seed).derive_index("clips", cfg.train.data_seed);
    let frozen_hash_before = model.store.frozen_hash();
    let (trainable_params, total_params) = model.store.counts();
    let mut losses = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let seq = &data[rng.below(data.len())];
        let idx = sample_clip(&mut rng, seq.len(), cfg.train.max_gap)?;
        let (loss, grads) = {
            let mut g = Graph::new(&model.store);
            let loss = clip_loss(&mut g, model, seq, &idx, &mut rng)?;
            let value = g.value(loss.total).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at step {step}: scenario {} seed {} frames {idx:?}, giou {} l1 {} focal {} ce {}",
                    seq.scenario, seq.seed, loss.giou, loss.l1, loss.focal, loss.ce
                )));
            }
            let grads = g.backward(loss.total)?;
            let list: Vec<(ParamId, Tensor)> = grads
                .params()
                .filter(|(id, _)| model.store.get(*id).trainable)
                .map(|(id, t)| (id, t.clone()))
                .collect();
            (
                StepLoss {
                    step,
                    total: value,
                    giou: loss.giou,
                    l1: loss.l1,
                    focal: loss.focal,
                    ce: loss.ce,
                    grad_norm: 0.0,
                },
                list,
            )
        };
        let grad_norm = opt.step(&mut model.store, &grads)?;
        let entry = StepLoss { grad_norm, ..loss };
        on_step(&entry);
        losses.push(entry);
    }
    Ok(TrainReport {
        losses,
        frozen_hash_before,
        frozen_hash_after: model.store.frozen_hash(),
        trainable_params,
        total_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn tiny() -> Config {
        let mut c = Config::compact();
        c.backbone.depth = 2;
        c.backbone.d = 16;
        c.backbone.heads = 2;
        c.dsf.count = 2;
        c.dsf.inner = 16;
        c.dsf.state = 4;
        c.mcp.n_tokens = 4;
        c.head.hidden = 16;
        c.train.sequences = 3;
        c.train.seq_len = 12;
        c.train.steps = 1;
        c
    }

    #[test]
    fn clip_indices_are_increasing_and_in_range() {
        let mut rng = SeededRng::new(3);
        for len in [7, 8, 20, 60] {
            for _ in 0..50 {
                let idx = sample_clip(&mut rng, len, 3).unwrap();
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
                assert!(idx[6] < len);
            }
        }
        assert!(sample_clip(&mut rng, 6, 2).is_err());
    }

    #[test]
    fn one_step_touches_only_trainable_parameters() {
        let mut model = Model::new(&tiny()).unwrap();
        let before = model.store.clone();
        let data = training_set(&model).unwrap();
        let report = train(&mut model, &data, |_| {}).unwrap();
        assert_eq!(report.frozen_hash_before, report.frozen_hash_after);
        let changed: Vec<&str> = model
            .store
            .iter()
            .filter(|(id, p)| !p.value.bit_eq(before.value(*id)))
            .map(|(_, p)| p.name.as_str())
            .collect();
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|n| !n.starts_with("backbone.") && !n.starts_with("embed.")));
        assert!(report.losses[0].total.is_finite());
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut cfg = tiny();
        cfg.train.lr = 0.0;
        cfg.train.steps = 2;
        let mut model = Model::new(&cfg).unwrap();
        let before = model.store.clone();
        let data = training_set(&model).unwrap();
        train(&mut model, &data, |_| {}).unwrap();
        for (id, p) in model.store.iter() {
            assert!(p.value.bit_eq(before.value(id)), "{}", p.name);
        }
    }
}
