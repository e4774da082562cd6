//! Center-based box head, modality head and the training loss.

use crate::blocks::{add_bias, add_linear, OutInit};
use crate::embedding::{Modality, NUM_MODALITIES};
use crate::error::{dim_err, Error, Result};
use crate::numerics::ops::sigmoid_scalar;
use crate::numerics::{Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

pub const LOSS_WEIGHT_GIOU: f64 = 2.0;
pub const LOSS_WEIGHT_L1: f64 = 5.0;
pub const LOSS_WEIGHT_FOCAL: f64 = 1.0;
pub const LOSS_WEIGHT_CE: f64 = 1.0;
pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;

/// Score logit bias at init (prior foreground probability ≈ 0.12).
const SCORE_PRIOR_BIAS: f64 = -2.0;

/// Two-layer per-token MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            w1: add_linear(store, &format!("{prefix}.w1"), d_in, hidden, rng, true, OutInit::Random)?,
            b1: add_bias(store, &format!("{prefix}.b1"), hidden, true)?,
            w2: add_linear(store, &format!("{prefix}.w2"), hidden, d_out, rng, true, OutInit::Random)?,
            b2: add_bias(store, &format!("{prefix}.b2"), d_out, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.silu(h);
        g.linear(h, w2, Some(b2))
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Per-cell score logits and sigmoid offset/size maps.
#[derive(Clone, Copy, Debug)]
pub struct CenterOutput {
    /// `N_S × 1` logits.
    pub score: Var,
    /// `N_S × 2` in `[0, 1)` cell units.
    pub offset: Var,
    /// `N_S × 2` normalized width and height.
    pub size: Var,
    pub grid: usize,
}

/// Decoded `(cx, cy, w, h)` in normalized search-region coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxPrediction {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub cell: (usize, usize),
    pub score: f64,
}

impl BoxPrediction {
    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

pub const MIN_BOX_SIZE: f64 = 1e-4;

fn grid_side(n: usize) -> Result<usize> {
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || g == 0 {
        return Err(dim_err!("{n} search tokens do not form a square grid"));
    }
    Ok(g)
}

/// Decodes at the score argmax; ties go to the smallest row-major index.
pub fn decode(score: &[f64], offset: &Tensor, size: &Tensor) -> Result<BoxPrediction> {
    let g = grid_side(score.len())?;
    if offset.rows() != score.len() || size.rows() != score.len() {
        return Err(dim_err!("offset {:?} / size {:?} for {} cells", offset.shape(), size.shape(), score.len()));
    }
    let mut best = 0;
    for (i, &s) in score.iter().enumerate() {
        if s > score[best] {
            best = i;
        }
    }
    let (r, c) = (best / g, best % g);
    let gf = g as f64;
    let cx = ((c as f64 + offset.at(best, 0)) / gf).clamp(0.0, 1.0);
    let cy = ((r as f64 + offset.at(best, 1)) / gf).clamp(0.0, 1.0);
    let w = size.at(best, 0).clamp(MIN_BOX_SIZE, 1.0);
    let h = size.at(best, 1).clamp(MIN_BOX_SIZE, 1.0);
    Ok(BoxPrediction {
        cx,
        cy,
        w,
        h,
        cell: (r, c),
        score: sigmoid_scalar(score[best]),
    })
}

#[derive(Clone, Debug)]
pub struct CenterHead {
    pub score: Mlp,
    pub offset: Mlp,
    pub size: Mlp,
}

impl CenterHead {
    pub fn init(store: &mut ParamStore, d: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        let score = Mlp::init(store, "head.center.score", d, hidden, 1, rng)?;
        store.get_mut(score.b2).value = Tensor::full(&[1, 1], SCORE_PRIOR_BIAS);
        Ok(Self {
            score,
            offset: Mlp::init(store, "head.center.offset", d, hidden, 2, rng)?,
            size: Mlp::init(store, "head.center.size", d, hidden, 2, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, o_s: Var) -> Result<CenterOutput> {
        let grid = grid_side(g.value(o_s).rows())?;
        let score = self.score.forward(g, o_s)?;
        let offset = self.offset.forward(g, o_s)?;
        let offset = g.sigmoid(offset);
        let size = self.size.forward(g, o_s)?;
        let size = g.sigmoid(size);
        Ok(CenterOutput {
            score,
            offset,
            size,
            grid,
        })
    }

    pub fn decode(&self, g: &Graph, out: &CenterOutput) -> Result<BoxPrediction> {
        decode(g.value(out.score).data(), g.value(out.offset), g.value(out.size))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.score, &self.offset, &self.size].iter().flat_map(|m| m.ids()).collect()
    }
}

/// Box `(cx, cy, w, h)` read at a given cell, as a `1 × 4` graph value.
pub fn box_at_cell(g: &mut Graph, out: &CenterOutput, cell: (usize, usize)) -> Result<Var> {
    let idx = cell.0 * out.grid + cell.1;
    let gf = out.grid as f64;
    let off = g.gather_rows(out.offset, &[idx])?;
    let off = g.scale(off, 1.0 / gf);
    let origin = g.constant(Tensor::matrix(1, 2, vec![cell.1 as f64 / gf, cell.0 as f64 / gf]));
    let center = g.add(off, origin)?;
    let size = g.gather_rows(out.size, &[idx])?;
    g.concat_cols(&[center, size])
}

#[derive(Clone, Debug)]
pub struct ModalityHead {
    pub mlp: Mlp,
}

impl ModalityHead {
    pub fn init(store: &mut ParamStore, d: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::init(store, "head.modality", d, hidden, NUM_MODALITIES, rng)?,
        })
    }

    /// Mean over tokens, then the MLP: `1 × 5` logits.
    pub fn forward(&self, g: &mut Graph, o_s: Var) -> Result<Var> {
        let pooled = g.mean_rows(o_s);
        self.mlp.forward(g, pooled)
    }
}

/// Grid cell containing a normalized point.
pub fn cell_of(cx: f64, cy: f64, grid: usize) -> (usize, usize) {
    let idx = |v: f64| ((v * grid as f64).floor().max(0.0) as usize).min(grid - 1);
    (idx(cy), idx(cx))
}

/// Gaussian heatmap centered on the cell holding the box center, exactly 1
/// there, with σ = (mean box side in cells)/6, at least one cell.
pub fn gaussian_target(gt: [f64; 4], grid: usize) -> Tensor {
    let (r0, c0) = cell_of(gt[0], gt[1], grid);
    let side = 0.5 * (gt[2] + gt[3]) * grid as f64;
    let sigma = (side / 6.0).max(1.0);
    let mut data = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            let dr = r as f64 - r0 as f64;
            let dc = c as f64 - c0 as f64;
            data.push((-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp());
        }
    }
    Tensor::matrix(grid * grid, 1, data)
}

/// Validates a normalized `(cx, cy, w, h)` ground-truth box.
pub fn validate_box(b: [f64; 4]) -> Result<()> {
    let tol = 1e-9;
    let ok = b.iter().all(|v| v.is_finite())
        && b[2] > 0.0
        && b[3] > 0.0
        && b[0] - b[2] / 2.0 >= -tol
        && b[0] + b[2] / 2.0 <= 1.0 + tol
        && b[1] - b[3] / 2.0 >= -tol
        && b[1] + b[3] / 2.0 <= 1.0 + tol;
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!("invalid ground-truth box {b:?}")))
    }
}

/// Clips a box to `[0,1]²`, keeping a minimum size.
pub fn clip_box(b: [f64; 4]) -> [f64; 4] {
    let x1 = (b[0] - b[2] / 2.0).clamp(0.0, 1.0);
    let x2 = (b[0] + b[2] / 2.0).clamp(0.0, 1.0);
    let y1 = (b[1] - b[3] / 2.0).clamp(0.0, 1.0);
    let y2 = (b[1] + b[3] / 2.0).clamp(0.0, 1.0);
    let w = (x2 - x1).max(MIN_BOX_SIZE);
    let h = (y2 - y1).max(MIN_BOX_SIZE);
    let cx = ((x1 + x2) / 2.0).clamp(w / 2.0, 1.0 - w / 2.0);
    let cy = ((y1 + y2) / 2.0).clamp(h / 2.0, 1.0 - h / 2.0);
    [cx, cy, w, h]
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub giou: f64,
    pub l1: f64,
    pub focal: f64,
    pub ce: f64,
}

/// `2·GIoU + 5·L1 + 1·focal + 1·CE`; the box terms read the prediction at
/// the ground-truth center cell.
pub fn total_loss(
    g: &mut Graph,
    center: &CenterOutput,
    modality_logits: Var,
    gt_box: [f64; 4],
    gt_modality: Modality,
) -> Result<LossTerms> {
    validate_box(gt_box)?;
    let cell = cell_of(gt_box[0], gt_box[1], center.grid);
    let pred = box_at_cell(g, center, cell)?;
    let giou = g.giou_loss(pred, gt_box)?;
    let l1 = g.l1_loss(pred, gt_box)?;
    let target = gaussian_target(gt_box, center.grid);
    let focal = g.focal_loss(center.score, &target, FOCAL_ALPHA, FOCAL_BETA)?;
    let ce = g.cross_entropy(modality_logits, gt_modality.code())?;
    let parts = [
        g.scale(giou, LOSS_WEIGHT_GIOU),
        g.scale(l1, LOSS_WEIGHT_L1),
        g.scale(focal, LOSS_WEIGHT_FOCAL),
        g.scale(ce, LOSS_WEIGHT_CE),
    ];
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    let val = |g: &Graph, v: Var| g.value(v).data()[0];
    Ok(LossTerms {
        total,
        giou: val(g, giou),
        l1: val(g, l1),
        focal: val(g, focal),
        ce: val(g, ce),
    })
}
