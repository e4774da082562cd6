//! Frozen transformer encoder with fusion hook points.
//!
//! A plain pre-norm encoder stands in for a large pretrained backbone. Every
//! token attends to every other token (memory, templates, search and text
//! interact jointly). Dynamic-state fusion layers splice in at the input of
//! the first layer and the output of the last layer of each stage.

use crate::blocks::{add_gain, AttentionParams, FfnParams, OutInit, NORM_EPS};
use crate::config::Config;
use crate::dsf::DsfModule;
use crate::embedding::{Segment, SequenceVars};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, SeededRng, Var};

/// Layers `input_layer ..= output_layer` form one fusion stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionStage {
    pub input_layer: usize,
    pub output_layer: usize,
}

/// Evenly partitions layers `start..depth` into `count` contiguous stages.
/// A remainder goes to the earliest stages.
pub fn fusion_stages(depth: usize, start: usize, count: usize) -> Result<Vec<FusionStage>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if start >= depth || count > depth - start {
        return Err(Error::Config(format!(
            "{count} stages do not fit layers {start}..{depth}"
        )));
    }
    let span = depth - start;
    let (base, extra) = (span / count, span % count);
    let mut stages = Vec::with_capacity(count);
    let mut layer = start;
    for i in 0..count {
        let len = base + usize::from(i < extra);
        stages.push(FusionStage {
            input_layer: layer,
            output_layer: layer + len - 1,
        });
        layer += len;
    }
    Ok(stages)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub ffn: FfnParams,
}

impl EncoderLayer {
    /// Pre-norm self-attention and FFN, each with a residual.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let x = self.attn.residual(g, x)?;
        self.ffn.residual(g, x)
    }
}

/// One stage's fusion module and the `F` it consumes this frame.
#[derive(Clone, Copy, Debug)]
pub struct StageFusion<'a> {
    pub module: &'a DsfModule,
    pub f: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub o: Var,
    pub o_s: Var,
    /// Search-region slice of each stage's input (before fusion).
    pub stage_inputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub layers: Vec<EncoderLayer>,
    pub norm_out: ParamId,
    pub stages: Vec<FusionStage>,
}

impl Backbone {
    /// Random frozen weights under the `backbone.` prefix.
    pub fn init(store: &mut ParamStore, cfg: &Config, rng: &mut SeededRng) -> Result<Self> {
        let b = &cfg.backbone;
        let mut layers = Vec::with_capacity(b.depth);
        for i in 0..b.depth {
            let p = format!("backbone.layer{i}");
            layers.push(EncoderLayer {
                attn: AttentionParams::init(store, &format!("{p}.attn"), b.d, b.heads, false, OutInit::Random, false, rng)?,
                ffn: FfnParams::init(store, &format!("{p}.ffn"), b.d, b.d * b.ffn_mult, OutInit::Random, false, rng)?,
            });
        }
        let count = if cfg.dsf.enabled { cfg.dsf.count } else { 0 };
        Ok(Self {
            layers,
            norm_out: add_gain(store, "backbone.norm_out", b.d, false)?,
            stages: fusion_stages(b.depth, b.fusion_start, count)?,
        })
    }

    /// Runs the encoder, fusing stage `i` with `fusions[i]` when given.
    /// An empty `fusions` slice is the plain encoder.
    pub fn forward_with_fusion(
        &self,
        g: &mut Graph,
        seq: &SequenceVars,
        fusions: &[StageFusion],
    ) -> Result<BackboneOutput> {
        if !fusions.is_empty() && fusions.len() != self.stages.len() {
            return Err(dim_err!(
                "{} fusion inputs for {} stages",
                fusions.len(),
                self.stages.len()
            ));
        }
        let search_rows: Vec<usize> = crate::embedding::rows_of(&seq.segments, Segment::Search);
        let (s0, n_s) = (search_rows[0], search_rows.len());
        let d = g.value(seq.tokens).cols();
        for fu in fusions {
            if let Some(f) = fu.f {
                let shape = g.value(f).shape();
                if shape != [n_s, d] {
                    return Err(dim_err!("fusion input {shape:?}, expected [{n_s}, {d}]"));
                }
            }
        }
        let mut x = seq.tokens;
        let mut stage_inputs = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for (si, st) in self.stages.iter().enumerate() {
                if st.input_layer == li {
                    stage_inputs.push(g.slice_rows(x, s0, n_s)?);
                    if let Some(fu) = fusions.get(si) {
                        x = fu.module.fuse_in.fuse(g, x, fu.f)?;
                    }
                }
            }
            x = layer.forward(g, x)?;
            for (si, st) in self.stages.iter().enumerate() {
                if st.output_layer == li {
                    if let Some(fu) = fusions.get(si) {
                        x = fu.module.fuse_out.fuse(g, x, fu.f)?;
                    }
                }
            }
        }
        let gain = g.param(self.norm_out);
        let o = g.rms_norm(x, gain, NORM_EPS)?;
        let o_s = g.slice_rows(o, s0, n_s)?;
        Ok(BackboneOutput { o, o_s, stage_inputs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn small_cfg() -> Config {
        let mut c = Config::compact();
        c.backbone.depth = 4;
        c.backbone.d = 8;
        c.backbone.heads = 2;
        c.dsf.count = 2;
        c.dsf.inner = 4;
        c.dsf.state = 2;
        c
    }

    fn seq_vars(g: &mut Graph, x: &Tensor, segments: Vec<Segment>) -> SequenceVars {
        SequenceVars {
            tokens: g.constant(x.clone()),
            segments,
        }
    }

    #[test]
    fn even_partition() {
        let st = fusion_stages(8, 0, 4).unwrap();
        let pairs: Vec<(usize, usize)> = st.iter().map(|s| (s.input_layer, s.output_layer)).collect();
        assert_eq!(pairs, vec![(0, 1), (2, 3), (4, 5), (6, 7)]);
        let st = fusion_stages(12, 4, 2).unwrap();
        assert_eq!(st[0], FusionStage { input_layer: 4, output_layer: 7 });
        assert!(fusion_stages(4, 0, 5).is_err());
        assert!(fusion_stages(4, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn zero_output_projections_are_residual_identity() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, &cfg, &mut SeededRng::new(1)).unwrap();
        let layer = &bb.layers[0];
        for id in [layer.attn.wo, layer.ffn.w2] {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        let x = SeededRng::new(2).normal_tensor(&[5, 8], 1.0);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let y = layer.forward(&mut g, xv).unwrap();
        assert!(g.value(y).bit_eq(&x));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, &cfg, &mut SeededRng::new(3)).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(SeededRng::new(4).normal_tensor(&[1, 8], 1.0));
        let (_, node) = bb.layers[0].attn.attend(&mut g, x, x, None).unwrap();
        let (_, _, _, w) = g.attention_weights(node).unwrap();
        assert!(w.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, &cfg, &mut SeededRng::new(5)).unwrap();
        let x = SeededRng::new(6).normal_tensor(&[6, 8], 1.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::new(&store);
        let a = g.constant(x);
        let b = g.constant(xp);
        let ya = bb.layers[1].forward(&mut g, a).unwrap();
        let yb = bb.layers[1].forward(&mut g, b).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (u, v) in g.value(yb).row(k).iter().zip(g.value(ya).row(i)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_skip_paths_and_search_slice() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(7);
        let bb = Backbone::init(&mut store, &cfg, &mut rng).unwrap();
        let dims = crate::dsf::DsfDims {
            d: 8,
            inner: 4,
            state: 2,
            conv_width: 4,
            dt_rank: 1,
            heads: 2,
        };
        let mods: Vec<DsfModule> = (0..2)
            .map(|i| DsfModule::init(&mut store, &format!("dsf.{i}"), dims, &mut rng).unwrap())
            .collect();
        let x = rng.normal_tensor(&[7, 8], 1.0);
        let f = rng.normal_tensor(&[4, 8], 1.0);
        let segs = vec![
            Segment::Memory,
            Segment::Template,
            Segment::Template,
            Segment::Search,
            Segment::Search,
            Segment::Search,
            Segment::Search,
        ];
        let mut g = Graph::new(&store);
        let s = seq_vars(&mut g, &x, segs.clone());
        let plain = bb.forward_with_fusion(&mut g, &s, &[]).unwrap();
        let absent: Vec<StageFusion> = mods.iter().map(|m| StageFusion { module: m, f: None }).collect();
        let skip = bb.forward_with_fusion(&mut g, &s, &absent).unwrap();
        let fv = g.constant(f.clone());
        let zero: Vec<StageFusion> = mods.iter().map(|m| StageFusion { module: m, f: Some(fv) }).collect();
        let zinit = bb.forward_with_fusion(&mut g, &s, &zero).unwrap();
        assert!(g.value(plain.o).bit_eq(g.value(skip.o)));
        assert!(g.value(plain.o).bit_eq(g.value(zinit.o)));
        assert_eq!(plain.stage_inputs.len(), 2);
        for (k, r) in (3..7).enumerate() {
            assert_eq!(g.value(plain.o_s).row(k), g.value(plain.o).row(r));
        }
        let bad = g.constant(Tensor::zeros(&[3, 8]));
        let wrong: Vec<StageFusion> = mods.iter().map(|m| StageFusion { module: m, f: Some(bad) }).collect();
        assert!(matches!(bb.forward_with_fusion(&mut g, &s, &wrong), Err(Error::Dimension(_))));
    }
}
