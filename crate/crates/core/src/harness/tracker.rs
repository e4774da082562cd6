//! Frame-by-frame inference with a persistent memory bank and DSF states.

use std::sync::Arc;

use crate::dsf::DsfState;
use crate::embedding::MultiModalFrame;
use crate::error::{Error, Result};
use crate::harness::crop::{clamp_to_frame, CropWindow};
use crate::harness::metrics::iou;
use crate::harness::model::{FrameOutput, Model};
use crate::harness::synthetic::FrameSource;
use crate::heads::{validate_box, MIN_BOX_SIZE};
use crate::mcp::MemoryBank;
use crate::numerics::{Graph, Tensor, Var};

/// Result of one tracked frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    /// Normalized `(cx, cy, w, h)` in frame coordinates.
    pub bbox: [f64; 4],
    pub score: f64,
    /// Backbone sequence length used for this frame.
    pub token_count: usize,
}

/// Everything recorded while tracking one sequence. Index 0 is the
/// initialization frame, whose box is the given ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackerRun {
    pub boxes: Vec<[f64; 4]>,
    pub ious: Vec<f64>,
    pub scores: Vec<f64>,
    /// Frame indices held by the memory bank after each frame.
    pub bank_trace: Vec<Vec<usize>>,
    /// Euclidean norm over all DSF hidden states after each frame.
    pub dsf_norms: Vec<f64>,
    pub token_counts: Vec<usize>,
}

pub struct Tracker {
    model: Arc<Model>,
    templates: Vec<Tensor>,
    text: Option<Vec<f64>>,
    bank: Option<MemoryBank>,
    states: Vec<DsfState>,
    prev_box: [f64; 4],
    next_index: usize,
}

impl Tracker {
    pub fn new(model: Arc<Model>) -> Result<Self> {
        let cfg = &model.cfg;
        let bank = if model.mcp.is_some() {
            Some(MemoryBank::from_config(cfg)?)
        } else {
            None
        };
        let states = model.dsf.iter().map(|m| DsfState::new(cfg.search_tokens(), &m.dims)).collect();
        Ok(Self {
            model,
            templates: Vec::new(),
            text: None,
            bank,
            states,
            prev_box: [0.5, 0.5, 0.0, 0.0],
            next_index: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn is_initialized(&self) -> bool {
        self.next_index > 0
    }

    pub fn bank(&self) -> Option<&MemoryBank> {
        self.bank.as_ref()
    }

    pub fn states(&self) -> &[DsfState] {
        &self.states
    }

    pub fn dsf_norm(&self) -> f64 {
        self.states.iter().map(|s| s.h.norm().powi(2)).sum::<f64>().sqrt()
    }

    /// Sets the templates from the first frame and seeds memory and
    /// dynamic state from a search crop centred on the given box.
    pub fn init(&mut self, frame: &MultiModalFrame, bbox: [f64; 4]) -> Result<StepResult> {
        validate_box(bbox)?;
        let model = Arc::clone(&self.model);
        let tpl = model.template_tokens(frame, bbox)?;
        self.templates = vec![tpl; model.cfg.embed.templates];
        self.text = frame.text.clone();
        if let Some(b) = &mut self.bank {
            *b = MemoryBank::from_config(&model.cfg)?;
        }
        for (s, m) in self.states.iter_mut().zip(&model.dsf) {
            *s = DsfState::new(model.cfg.search_tokens(), &m.dims);
        }
        self.next_index = 0;
        let window = model.search_window(bbox, frame)?;
        let (_, score, tokens) = self.run(frame, &window)?;
        self.prev_box = bbox;
        Ok(StepResult {
            bbox,
            score,
            token_count: tokens,
        })
    }

    /// Tracks the next frame.
    pub fn track(&mut self, frame: &MultiModalFrame) -> Result<StepResult> {
        if !self.is_initialized() {
            return Err(Error::State("tracker used before init".into()));
        }
        let model = Arc::clone(&self.model);
        let window = model.search_window(self.prev_box, frame)?;
        let (pred, score, tokens) = self.run(frame, &window)?;
        let bbox = clamp_to_frame(window.to_frame(pred), MIN_BOX_SIZE);
        self.prev_box = bbox;
        Ok(StepResult {
            bbox,
            score,
            token_count: tokens,
        })
    }

    /// One network pass: returns the crop-space prediction and folds the
    /// frame into memory and dynamic state.
    fn run(&mut self, frame: &MultiModalFrame, window: &CropWindow) -> Result<([f64; 4], f64, usize)> {
        let model = &*self.model;
        let search = model.search_tokens(frame, window)?;
        let mut g = Graph::new(&model.store);
        let bank_vars: Vec<(usize, Var)> = self
            .bank
            .iter()
            .flat_map(|b| b.entries())
            .map(|(i, t)| (*i, g.constant(t.clone())))
            .collect();
        let memory = model.memory_prompt(&mut g, &bank_vars)?;
        let templates: Vec<Var> = self.templates.iter().map(|t| g.constant(t.clone())).collect();
        let s = g.constant(search);
        let text = self.text.as_ref().map(|t| g.constant(Tensor::matrix(1, t.len(), t.clone())));
        let fusion: Vec<Option<Var>> = self
            .states
            .iter()
            .map(|st| st.last_f.as_ref().map(|f| g.constant(f.clone())))
            .collect();
        let out: FrameOutput = model.forward_frame(&mut g, memory, &templates, s, text, &fusion)?;
        let pred = model.center.decode(&g, &out.center)?;
        let h_prev: Vec<Var> = self.states.iter().map(|st| g.constant(st.h.clone())).collect();
        let steps = model.dsf_step(&mut g, &out, &h_prev)?;
        for (st, step) in self.states.iter_mut().zip(&steps) {
            st.advance(g.value(step.h).clone(), g.value(step.f).clone());
        }
        let index = self.next_index;
        if let Some(b) = &mut self.bank {
            b.insert_frame(index, g.value(out.o_s()).clone())?;
        }
        self.next_index += 1;
        Ok((pred.as_array(), pred.score, out.token_count()))
    }
}

/// Tracks a whole sequence from its first ground-truth box.
pub fn track_sequence(model: Arc<Model>, source: &dyn FrameSource) -> Result<TrackerRun> {
    let mut tracker = Tracker::new(model)?;
    let mut run = TrackerRun::default();
    for t in 0..source.len() {
        let frame = source.frame(t)?;
        let step = if t == 0 {
            tracker.init(&frame, source.gt_box(0))?
        } else {
            tracker.track(&frame)?
        };
        run.boxes.push(step.bbox);
        run.ious.push(iou(step.bbox, source.gt_box(t)));
        run.scores.push(step.score);
        run.token_counts.push(step.token_count);
        run.bank_trace.push(tracker.bank().map(MemoryBank::indices).unwrap_or_default());
        run.dsf_norms.push(tracker.dsf_norm());
    }
    Ok(run)
}

