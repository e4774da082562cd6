//! Unified six-channel patch embedding and token-sequence assembly.
//!
//! Every modality is mapped to the same `H × W × 6` layout: RGB in channels
//! 0–2 and the auxiliary image (depth / thermal / event, replicated to three
//! channels) in 3–5. Modalities without an auxiliary image repeat the RGB
//! channels, so one patch projection serves all of them.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

pub const NUM_MODALITIES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Rgbd,
    Rgbt,
    Rgbe,
    Rgbl,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [
        Modality::Rgb,
        Modality::Rgbd,
        Modality::Rgbt,
        Modality::Rgbe,
        Modality::Rgbl,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown modality code {code}")))
    }

    pub fn has_aux(self) -> bool {
        matches!(self, Modality::Rgbd | Modality::Rgbt | Modality::Rgbe)
    }

    pub fn has_text(self) -> bool {
        self == Modality::Rgbl
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Rgbd => "rgbd",
            Modality::Rgbt => "rgbt",
            Modality::Rgbe => "rgbe",
            Modality::Rgbl => "rgbl",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?}")))
    }
}

/// One input frame. Pixel values are in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalFrame {
    /// `H × W × 3`
    pub rgb: Tensor,
    /// `H × W × 3`, present iff the modality carries an auxiliary image.
    pub aux: Option<Tensor>,
    pub modality: Modality,
    /// Fixed-dimension stand-in for a language description (RGBL only).
    pub text: Option<Vec<f64>>,
}

impl MultiModalFrame {
    pub fn height(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.rgb.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(dim_err!("rgb image must be H×W×3, got {shape:?}"));
        }
        if self.aux.is_some() != self.modality.has_aux() {
            return Err(Error::Validation(format!(
                "modality {} {} an auxiliary image",
                self.modality,
                if self.modality.has_aux() { "requires" } else { "forbids" }
            )));
        }
        let in_range = |t: &Tensor| t.data().iter().all(|&v| (0.0..=255.0).contains(&v));
        if !in_range(&self.rgb) {
            return Err(Error::Validation("rgb pixel outside [0, 255]".into()));
        }
        if let Some(aux) = &self.aux {
            if aux.shape() != shape {
                return Err(dim_err!("aux {:?} vs rgb {shape:?}", aux.shape()));
            }
            if !in_range(aux) {
                return Err(Error::Validation("aux pixel outside [0, 255]".into()));
            }
        }
        Ok(())
    }
}

/// `H × W × 6`: RGB then auxiliary (or a copy of RGB when there is none).
pub fn build_six_channel(frame: &MultiModalFrame) -> Result<Tensor> {
    frame.validate()?;
    let (h, w) = (frame.height(), frame.width());
    let second = frame.aux.as_ref().unwrap_or(&frame.rgb);
    let mut out = Vec::with_capacity(h * w * 6);
    for (a, b) in frame.rgb.data().chunks(3).zip(second.data().chunks(3)) {
        out.extend_from_slice(a);
        out.extend_from_slice(b);
    }
    Tensor::new(vec![h, w, 6], out)
}

/// Maps `[0, 255]` pixels to roughly zero-mean unit-scale inputs.
pub fn normalize_pixels(x: &Tensor) -> Tensor {
    x.map(|v| (v / 255.0 - 0.5) / 0.25)
}

/// Rows are non-overlapping `P × P × C` patches in raster order, each
/// flattened as `(py, px, channel)`.
pub fn extract_patches(x: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(dim_err!("extract_patches: expected H×W×C, got {shape:?}"));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(dim_err!("image {h}×{w} not divisible into {patch}×{patch} patches"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let mut out = Vec::with_capacity(gh * gw * width);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * w + gx * patch) * c;
                out.extend_from_slice(&x.data()[start..start + patch * c]);
            }
        }
    }
    Ok(Tensor::matrix(gh * gw, width, out))
}

/// Linear patch projection: `(H/P · W/P) × d`.
pub fn patch_embed(x: &Tensor, patch: usize, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let patches = extract_patches(x, patch)?;
    if weight.rows() != patches.cols() {
        return Err(dim_err!(
            "patch_embed: weight {:?} vs patch width {}",
            weight.shape(),
            patches.cols()
        ));
    }
    let mut out = crate::numerics::matmul(&patches, weight)?;
    let d = out.cols();
    if bias.len() != d {
        return Err(dim_err!("patch_embed: bias {} vs {d}", bias.len()));
    }
    for row in out.data_mut().chunks_mut(d) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Memory,
    Template,
    Search,
    Text,
}

/// Token embeddings with one segment tag per row.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub segments: Vec<Segment>,
    pub frame_index: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn rows_of(&self, seg: Segment) -> Vec<usize> {
        rows_of(&self.segments, seg)
    }
}

pub fn rows_of(segments: &[Segment], seg: Segment) -> Vec<usize> {
    segments
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == seg)
        .map(|(i, _)| i)
        .collect()
}

/// Graph-side token sequence.
#[derive(Clone, Debug)]
pub struct SequenceVars {
    pub tokens: Var,
    pub segments: Vec<Segment>,
}

impl SequenceVars {
    pub fn search_range(&self) -> (usize, usize) {
        let rows = rows_of(&self.segments, Segment::Search);
        (rows[0], rows.len())
    }
}

/// Embedding parameter handles.
#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub patch: usize,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub template_pos: ParamId,
    pub search_pos: ParamId,
    pub type_memory: ParamId,
    pub type_template: ParamId,
    pub type_search: ParamId,
    pub type_text: ParamId,
    pub text_w: ParamId,
    pub text_b: ParamId,
}

/// Sizes for [`EmbeddingParams::init`].
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingDims {
    pub patch: usize,
    pub d: usize,
    pub template_tokens: usize,
    pub search_tokens: usize,
    pub text_dim: usize,
}

impl EmbeddingParams {
    /// Patch projection, positional and type tables are frozen; the text
    /// projection is trainable.
    pub fn init(store: &mut ParamStore, dims: EmbeddingDims, rng: &mut SeededRng) -> Result<Self> {
        let EmbeddingDims {
            patch,
            d,
            template_tokens,
            search_tokens,
            text_dim,
        } = dims;
        let fan_in = patch * patch * 6;
        let std = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            patch,
            patch_w: store.add("embed.patch_w", rng.normal_tensor(&[fan_in, d], std), false)?,
            patch_b: store.add("embed.patch_b", Tensor::zeros(&[1, d]), false)?,
            template_pos: store.add(
                "embed.template_pos",
                rng.normal_tensor(&[template_tokens, d], 0.02),
                false,
            )?,
            search_pos: store.add("embed.search_pos", rng.normal_tensor(&[search_tokens, d], 0.02), false)?,
            type_memory: store.add("embed.type_memory", rng.normal_tensor(&[1, d], 0.02), false)?,
            type_template: store.add("embed.type_template", rng.normal_tensor(&[1, d], 0.02), false)?,
            type_search: store.add("embed.type_search", rng.normal_tensor(&[1, d], 0.02), false)?,
            type_text: store.add("embed.type_text", rng.normal_tensor(&[1, d], 0.02), false)?,
            text_w: store.add(
                "text.proj_w",
                rng.normal_tensor(&[text_dim, d], 1.0 / (text_dim.max(1) as f64).sqrt()),
                true,
            )?,
            text_b: store.add("text.proj_b", Tensor::zeros(&[1, d]), true)?,
        })
    }

    /// Raw patch tokens (no positional or type embedding) of a six-channel,
    /// already normalized image.
    pub fn embed_image(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        let patches = extract_patches(image, self.patch)?;
        let x = g.constant(patches);
        let (w, b) = (g.param(self.patch_w), g.param(self.patch_b));
        g.linear(x, w, Some(b))
    }

    /// Concatenates `[memory | templates… | search | text?]`, adding positional
    /// embeddings to template and search tokens and a type embedding to every
    /// segment. Memory tokens receive only the memory type embedding.
    pub fn assemble(
        &self,
        g: &mut Graph,
        memory: Option<Var>,
        templates: &[Var],
        search: Var,
        text: Option<Var>,
    ) -> Result<SequenceVars> {
        let store = g.store();
        let n_t = store.value(self.template_pos).rows();
        let n_s = store.value(self.search_pos).rows();
        let mut parts = Vec::new();
        let mut segments = Vec::new();

        if let Some(m) = memory {
            let ty = g.param(self.type_memory);
            let rows = g.value(m).rows();
            parts.push(g.add_row(m, ty)?);
            segments.extend(std::iter::repeat_n(Segment::Memory, rows));
        }
        for &t in templates {
            if g.value(t).rows() != n_t {
                return Err(Error::Validation(format!(
                    "template block has {} tokens, expected {n_t}",
                    g.value(t).rows()
                )));
            }
            let pos = g.param(self.template_pos);
            let ty = g.param(self.type_template);
            let x = g.add(t, pos)?;
            parts.push(g.add_row(x, ty)?);
            segments.extend(std::iter::repeat_n(Segment::Template, n_t));
        }
        if g.value(search).rows() != n_s {
            return Err(Error::Validation(format!(
                "search block has {} tokens, expected {n_s}",
                g.value(search).rows()
            )));
        }
        let pos = g.param(self.search_pos);
        let ty = g.param(self.type_search);
        let x = g.add(search, pos)?;
        parts.push(g.add_row(x, ty)?);
        segments.extend(std::iter::repeat_n(Segment::Search, n_s));

        if let Some(t) = text {
            let (w, b, ty) = (g.param(self.text_w), g.param(self.text_b), g.param(self.type_text));
            let proj = g.linear(t, w, Some(b))?;
            parts.push(g.add_row(proj, ty)?);
            segments.push(Segment::Text);
        }
        let tokens = g.concat_rows(&parts)?;
        Ok(SequenceVars { tokens, segments })
    }
}

/// Tensor-level sequence assembly; `expected_memory` is the configured N_M
/// (`None` when memory prompts are disabled).
pub fn assemble_sequence(
    store: &ParamStore,
    params: &EmbeddingParams,
    memory: Option<&Tensor>,
    expected_memory: Option<usize>,
    templates: &[&Tensor],
    search: &Tensor,
    text: Option<&[f64]>,
    frame_index: usize,
) -> Result<TokenSequence> {
    if memory.map(Tensor::rows) != expected_memory {
        return Err(Error::Validation(format!(
            "memory block has {:?} tokens, expected {:?}",
            memory.map(Tensor::rows),
            expected_memory
        )));
    }
    let mut g = Graph::new(store);
    let m = memory.map(|t| g.constant(t.clone()));
    let ts: Vec<Var> = templates.iter().map(|t| g.constant((*t).clone())).collect();
    let s = g.constant(search.clone());
    let txt = text.map(|v| g.constant(Tensor::matrix(1, v.len(), v.to_vec())));
    let seq = params.assemble(&mut g, m, &ts, s, txt)?;
    Ok(TokenSequence {
        tokens: g.value(seq.tokens).clone(),
        segments: seq.segments,
        frame_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::relative_error;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Tensor::new(vec![h, w, 3], data).unwrap()
    }

    fn rgb_frame() -> MultiModalFrame {
        MultiModalFrame {
            rgb: image(4, 4, |y, x, c| ((y * 31 + x * 7 + c * 3) % 256) as f64),
            aux: None,
            modality: Modality::Rgb,
            text: None,
        }
    }

    fn channel(t: &Tensor, c: usize) -> Vec<f64> {
        t.data().iter().skip(c).step_by(6).copied().collect()
    }

    #[test]
    fn rgb_only_duplicates() {
        let out = build_six_channel(&rgb_frame()).unwrap();
        for c in 0..3 {
            assert_eq!(channel(&out, c), channel(&out, c + 3));
        }
    }

    #[test]
    fn aux_fills_second_half() {
        let mut f = rgb_frame();
        f.modality = Modality::Rgbd;
        f.aux = Some(image(4, 4, |y, _, _| (y * 50) as f64));
        let out = build_six_channel(&f).unwrap();
        let aux = f.aux.as_ref().unwrap();
        for c in 0..3 {
            let expected: Vec<f64> = aux.data().iter().skip(c).step_by(3).copied().collect();
            assert_eq!(channel(&out, c + 3), expected);
        }
    }

    #[test]
    fn channel_means_zero_and_full() {
        let f = MultiModalFrame {
            rgb: image(2, 2, |_, _, _| 0.0),
            aux: Some(image(2, 2, |_, _, _| 255.0)),
            modality: Modality::Rgbt,
            text: None,
        };
        let out = build_six_channel(&f).unwrap();
        let means: Vec<f64> = (0..6).map(|c| channel(&out, c).iter().sum::<f64>() / 4.0).collect();
        assert_eq!(means, vec![0.0, 0.0, 0.0, 255.0, 255.0, 255.0]);
    }

    #[test]
    fn out_of_range_pixel_rejected() {
        let mut f = rgb_frame();
        f.rgb.data_mut()[5] = 256.0;
        assert!(matches!(build_six_channel(&f), Err(Error::Validation(_))));
        let mut f = rgb_frame();
        f.modality = Modality::Rgbe;
        assert!(matches!(build_six_channel(&f), Err(Error::Validation(_))));
    }

    #[test]
    fn idempotent_on_rgb_half() {
        let first = build_six_channel(&rgb_frame()).unwrap();
        let rgb_half: Vec<f64> = first.data().chunks(6).flat_map(|p| p[..3].to_vec()).collect();
        let again = MultiModalFrame {
            rgb: Tensor::new(vec![4, 4, 3], rgb_half).unwrap(),
            ..rgb_frame()
        };
        assert_eq!(build_six_channel(&again).unwrap(), first);
    }

    #[test]
    fn patch_counts_and_zero_image() {
        let x = Tensor::zeros(&[16, 16, 6]);
        let w = SeededRng::new(1).normal_tensor(&[8 * 8 * 6, 5], 1.0);
        let out = patch_embed(&x, 8, &w, &Tensor::zeros(&[5])).unwrap();
        assert_eq!(out.shape(), &[4, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            patch_embed(&Tensor::zeros(&[12, 16, 6]), 8, &w, &Tensor::zeros(&[5])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn duplicated_rgb_projects_with_summed_halves() {
        let p = 2;
        let d = 3;
        let mut rng = SeededRng::new(2);
        let frame = rgb_frame();
        let six = build_six_channel(&frame).unwrap();
        let w = rng.normal_tensor(&[p * p * 6, d], 1.0);
        let b = rng.normal_tensor(&[d], 1.0);
        let full = patch_embed(&six, p, &w, &b).unwrap();

        // W1 + W2 indexed by (py, px, c) over three channels.
        let mut summed = Tensor::zeros(&[p * p * 3, d]);
        for pix in 0..p * p {
            for c in 0..3 {
                for k in 0..d {
                    let v = w.at(pix * 6 + c, k) + w.at(pix * 6 + c + 3, k);
                    summed.set(pix * 3 + c, k, v);
                }
            }
        }
        let three = patch_embed(&frame.rgb, p, &summed, &b).unwrap();
        assert!(relative_error(&full, &three) < 1e-14);
    }

    #[test]
    fn patch_embed_is_affine() {
        let mut rng = SeededRng::new(3);
        let x = rng.uniform_tensor(&[4, 4, 6], 0.0, 1.0);
        let w = rng.normal_tensor(&[24, 3], 1.0);
        let b = rng.normal_tensor(&[3], 1.0);
        let alpha = -1.7;
        let lhs = patch_embed(&x.scale(alpha), 2, &w, &b).unwrap();
        let base = patch_embed(&x, 2, &w, &b).unwrap();
        let rhs = Tensor::matrix(4, 3, base.data().iter().enumerate().map(|(i, v)| alpha * (v - b.data()[i % 3]) + b.data()[i % 3]).collect());
        assert!(relative_error(&lhs, &rhs) < 1e-13);
    }

    fn params(store: &mut ParamStore, d: usize, nt: usize, ns: usize) -> EmbeddingParams {
        EmbeddingParams::init(
            store,
            EmbeddingDims {
                patch: 2,
                d,
                template_tokens: nt,
                search_tokens: ns,
                text_dim: 3,
            },
            &mut SeededRng::new(4),
        )
        .unwrap()
    }

    #[test]
    fn paper_sized_sequence_layout() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 4, 49, 196);
        let mem = Tensor::zeros(&[16, 4]);
        let t = Tensor::zeros(&[49, 4]);
        let s = Tensor::zeros(&[196, 4]);
        let seq = assemble_sequence(&store, &p, Some(&mem), Some(16), &[&t, &t], &s, None, 0).unwrap();
        assert_eq!(seq.len(), 310);
        assert_eq!(seq.segments[..16], [Segment::Memory; 16]);
        assert_eq!(seq.segments[16..114], [Segment::Template; 98]);
        assert_eq!(seq.segments[114..], [Segment::Search; 196]);

        let seq = assemble_sequence(&store, &p, Some(&mem), Some(16), &[&t, &t], &s, Some(&[1.0, 0.0, 0.0]), 0).unwrap();
        assert_eq!(seq.len(), 311);
        assert_eq!(seq.segments.last(), Some(&Segment::Text));

        let bad = Tensor::zeros(&[8, 4]);
        assert!(matches!(
            assemble_sequence(&store, &p, Some(&bad), Some(16), &[&t, &t], &s, None, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn zero_embeddings_pass_tokens_through() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 3, 2, 4);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        let mut rng = SeededRng::new(5);
        let mem = rng.normal_tensor(&[2, 3], 1.0);
        let t = rng.normal_tensor(&[2, 3], 1.0);
        let s = rng.normal_tensor(&[4, 3], 1.0);
        let seq = assemble_sequence(&store, &p, Some(&mem), Some(2), &[&t], &s, None, 3).unwrap();
        let expected = Tensor::concat_rows(&[&mem, &t, &s]).unwrap();
        assert_eq!(seq.tokens, expected);
    }

    #[test]
    fn segments_recover_inputs_after_subtracting_embeddings() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 3, 2, 4);
        let mut rng = SeededRng::new(6);
        let t = rng.normal_tensor(&[2, 3], 1.0);
        let s = rng.normal_tensor(&[4, 3], 1.0);
        let seq = assemble_sequence(&store, &p, None, None, &[&t], &s, None, 0).unwrap();
        let rows = seq.rows_of(Segment::Search);
        for (k, r) in rows.into_iter().enumerate() {
            for c in 0..3 {
                let raw = seq.tokens.at(r, c) - store.value(p.search_pos).at(k, c) - store.value(p.type_search).data()[c];
                assert!((raw - s.at(k, c)).abs() < 1e-15);
            }
        }
    }
}
