//! The full tracker network: frozen embedding and backbone, memory prompts,
//! dynamic-state fusion and the two heads.

use crate::backbone::{Backbone, BackboneOutput, StageFusion};
use crate::config::{Config, DsfSource};
use crate::dsf::{DsfDims, DsfModule, DsfStep};
use crate::embedding::{
    build_six_channel, extract_patches, normalize_pixels, EmbeddingDims, EmbeddingParams, MultiModalFrame, Segment,
};
use crate::error::{dim_err, Error, Result};
use crate::harness::crop::{crop_image, CropWindow};
use crate::heads::{CenterHead, CenterOutput, ModalityHead};
use crate::mcp::McpParams;
use crate::numerics::{matmul, Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

/// One frame through the network.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub backbone: BackboneOutput,
    pub center: CenterOutput,
    pub modality_logits: Var,
    pub segments: Vec<Segment>,
}

impl FrameOutput {
    pub fn o_s(&self) -> Var {
        self.backbone.o_s
    }

    /// Backbone sequence length.
    pub fn token_count(&self) -> usize {
        self.segments.len()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: Config,
    pub store: ParamStore,
    pub embed: EmbeddingParams,
    pub backbone: Backbone,
    pub mcp: Option<McpParams>,
    pub dsf: Vec<DsfModule>,
    pub center: CenterHead,
    pub modality: ModalityHead,
}

impl Model {
    /// Each component draws from its own stream of `cfg.seed`, so switching
    /// a module off leaves every other weight unchanged.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let root = SeededRng::new(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.backbone.d;
        let embed = EmbeddingParams::init(
            &mut store,
            EmbeddingDims {
                patch: cfg.embed.patch,
                d,
                template_tokens: cfg.template_tokens(),
                search_tokens: cfg.search_tokens(),
                text_dim: cfg.embed.text_dim,
            },
            &mut root.derive("embed"),
        )?;
        let backbone = Backbone::init(&mut store, cfg, &mut root.derive("backbone"))?;
        let mcp = if cfg.mcp.enabled {
            Some(McpParams::init(&mut store, cfg, &mut root.derive("mcp"))?)
        } else {
            None
        };
        let dims = DsfDims {
            d,
            inner: cfg.dsf_inner(),
            state: cfg.dsf.state,
            conv_width: cfg.dsf.conv_width,
            dt_rank: cfg.dt_rank(),
            heads: cfg.backbone.heads,
        };
        let dsf = backbone
            .stages
            .iter()
            .enumerate()
            .map(|(i, _)| DsfModule::init(&mut store, &format!("dsf.{i}"), dims, &mut root.derive_index("dsf", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut head_rng = root.derive("head");
        let center = CenterHead::init(&mut store, d, cfg.head.hidden, &mut head_rng)?;
        let modality = ModalityHead::init(&mut store, d, cfg.head.hidden, &mut head_rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            embed,
            backbone,
            mcp,
            dsf,
            center,
            modality,
        })
    }

    /// Trainable parameter groups by component, for partition checks.
    pub fn trainable_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = Vec::new();
        if let Some(m) = &self.mcp {
            groups.push(("mcp".to_string(), m.param_ids()));
        }
        for (i, m) in self.dsf.iter().enumerate() {
            groups.push((format!("dsf.{i}"), m.param_ids()));
        }
        groups.push(("head.center".to_string(), self.center.ids()));
        groups.push(("head.modality".to_string(), self.modality.mlp.ids().to_vec()));
        groups
    }

    /// Normalized six-channel crop of a frame.
    pub fn crop(&self, frame: &MultiModalFrame, window: &CropWindow, out: usize) -> Result<Tensor> {
        let six = build_six_channel(frame)?;
        Ok(normalize_pixels(&crop_image(&six, window, out)?))
    }

    /// Raw patch tokens of a normalized crop. The embedding is frozen, so
    /// these are plain tensors and can be cached.
    pub fn patch_tokens(&self, image: &Tensor) -> Result<Tensor> {
        let patches = extract_patches(image, self.cfg.embed.patch)?;
        let mut out = matmul(&patches, self.store.value(self.embed.patch_w))?;
        let bias = self.store.value(self.embed.patch_b).data().to_vec();
        for row in out.data_mut().chunks_mut(bias.len()) {
            for (o, b) in row.iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn search_window(&self, bbox: [f64; 4], frame: &MultiModalFrame) -> Result<CropWindow> {
        CropWindow::around(bbox, self.cfg.track.search_factor, frame.width(), frame.height())
    }

    pub fn template_window(&self, bbox: [f64; 4], frame: &MultiModalFrame) -> Result<CropWindow> {
        CropWindow::around(bbox, self.cfg.track.template_factor, frame.width(), frame.height())
    }

    pub fn template_tokens(&self, frame: &MultiModalFrame, bbox: [f64; 4]) -> Result<Tensor> {
        let win = self.template_window(bbox, frame)?;
        self.patch_tokens(&self.crop(frame, &win, self.cfg.embed.template_size)?)
    }

    pub fn search_tokens(&self, frame: &MultiModalFrame, window: &CropWindow) -> Result<Tensor> {
        self.patch_tokens(&self.crop(frame, window, self.cfg.embed.search_size)?)
    }

    /// Memory prompt for a bank given oldest first. With no stored frames
    /// the learnable queries themselves serve as the prompt. `None` when
    /// the memory module is off.
    pub fn memory_prompt(&self, g: &mut Graph, bank: &[(usize, Var)]) -> Result<Option<Var>> {
        match &self.mcp {
            None => Ok(None),
            Some(m) if bank.is_empty() => Ok(Some(g.param(m.queries))),
            Some(m) => m.compress(g, bank).map(Some),
        }
    }

    /// Embedding, backbone with fusion and both heads. `fusion[i]` is the
    /// previous frame's output of DSF module `i`.
    pub fn forward_frame(
        &self,
        g: &mut Graph,
        memory: Option<Var>,
        templates: &[Var],
        search: Var,
        text: Option<Var>,
        fusion: &[Option<Var>],
    ) -> Result<FrameOutput> {
        if memory.is_some() != self.mcp.is_some() {
            return Err(Error::State("memory prompt given iff the memory module is on".into()));
        }
        if !fusion.is_empty() && fusion.len() != self.dsf.len() {
            return Err(dim_err!("{} fusion inputs for {} modules", fusion.len(), self.dsf.len()));
        }
        let seq = self.embed.assemble(g, memory, templates, search, text)?;
        let stages: Vec<StageFusion> = fusion
            .iter()
            .zip(&self.dsf)
            .map(|(f, module)| StageFusion { module, f: *f })
            .collect();
        let backbone = self.backbone.forward_with_fusion(g, &seq, &stages)?;
        let center = self.center.forward(g, backbone.o_s)?;
        let modality_logits = self.modality.forward(g, backbone.o_s)?;
        Ok(FrameOutput {
            backbone,
            center,
            modality_logits,
            segments: seq.segments,
        })
    }

    /// What DSF module `k` reads from a frame's output.
    pub fn dsf_source(&self, g: &mut Graph, out: &FrameOutput, k: usize) -> Result<Var> {
        match self.cfg.dsf.source {
            DsfSource::FinalSearch => Ok(out.backbone.o_s),
            DsfSource::StageInput => out
                .backbone
                .stage_inputs
                .get(k)
                .copied()
                .ok_or_else(|| dim_err!("no stage input for module {k}")),
            DsfSource::WholeSequence => {
                let rest: Vec<usize> = out
                    .segments
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| **s != Segment::Search)
                    .map(|(i, _)| i)
                    .collect();
                if rest.is_empty() {
                    return Ok(out.backbone.o_s);
                }
                let others = g.gather_rows(out.backbone.o, &rest)?;
                let pooled = g.mean_rows(others);
                g.add_row(out.backbone.o_s, pooled)
            }
        }
    }

    /// Advances every DSF module by one frame from `h_prev`.
    pub fn dsf_step(&self, g: &mut Graph, out: &FrameOutput, h_prev: &[Var]) -> Result<Vec<DsfStep>> {
        if h_prev.len() != self.dsf.len() {
            return Err(dim_err!("{} states for {} modules", h_prev.len(), self.dsf.len()));
        }
        let mut steps = Vec::with_capacity(self.dsf.len());
        for (k, (module, &h)) in self.dsf.iter().zip(h_prev).enumerate() {
            let src = self.dsf_source(g, out, k)?;
            steps.push(module.dynamic_state_forward(g, src, h)?);
        }
        Ok(steps)
    }

    pub fn text_var(&self, g: &mut Graph, frame: &MultiModalFrame) -> Option<Var> {
        frame
            .text
            .as_ref()
            .map(|t| g.constant(Tensor::matrix(1, t.len(), t.clone())))
    }
}
