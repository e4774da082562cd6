//! Deterministic synthetic tracking sequences.
//!
//! A checkered target moves over a smooth textured background. The scenario
//! picks the dynamics: slow drift, large scale changes, a sliding occluder,
//! look-alike distractors or fast jumpy motion. Frames are rendered on demand
//! from a compact description, so long sequences cost little memory.

use std::fmt;
use std::str::FromStr;

use crate::embedding::{Modality, MultiModalFrame};
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    Plain,
    ScaleVariation,
    Occlusion,
    Distractors,
    FastMotion,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Plain,
        Scenario::ScaleVariation,
        Scenario::Occlusion,
        Scenario::Distractors,
        Scenario::FastMotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Plain => "PLAIN",
            Scenario::ScaleVariation => "SCALE_VARIATION",
            Scenario::Occlusion => "OCCLUSION",
            Scenario::Distractors => "DISTRACTORS",
            Scenario::FastMotion => "FAST_MOTION",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

/// Visibility below this marks a frame as occluded.
pub const OCCLUDED_BELOW: f64 = 0.2;

/// Anything that can feed a tracker: frames plus ground truth.
pub trait FrameSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn frame(&self, t: usize) -> Result<MultiModalFrame>;
    /// Normalized `(cx, cy, w, h)`.
    fn gt_box(&self, t: usize) -> [f64; 4];
    fn modality(&self) -> Modality;
    fn frame_size(&self) -> (usize, usize);
}

/// Axis-aligned rectangle in pixels, `(cx, cy, w, h)`.
type Rect = [f64; 4];

#[derive(Clone, Debug)]
struct Appearance {
    colors: [[f64; 3]; 2],
    cells: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub scenario: Scenario,
    pub modality: Modality,
    pub seed: u64,
    pub size: usize,
    /// Normalized ground truth per frame.
    pub gt_boxes: Vec<[f64; 4]>,
    /// Fraction of the target left uncovered, per frame.
    pub visibility: Vec<f64>,
    pub text: Option<Vec<f64>>,
    target: Appearance,
    targets: Vec<Rect>,
    distractors: Vec<(Appearance, Vec<Rect>)>,
    occluders: Vec<Option<Rect>>,
    occluder_color: [f64; 3],
    background: Tensor,
    aux_background: Option<Tensor>,
}

fn saturated_color(rng: &mut SeededRng) -> [f64; 3] {
    let hue = rng.uniform(0.0, 6.0);
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [20.0 + 215.0 * r, 20.0 + 215.0 * g, 20.0 + 215.0 * b]
}

fn render_background(size: usize, rng: &mut SeededRng, lo: f64, hi: f64, channels: usize) -> Tensor {
    let cell = 16.0;
    let n = (size as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..n * n * channels).map(|_| rng.uniform(lo, hi)).collect();
    let mut data = Vec::with_capacity(size * size * channels);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 / cell, x as f64 / cell);
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let (sy, sx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
            for c in 0..channels {
                let at = |r: usize, q: usize| lattice[(r * n + q) * channels + c];
                let top = at(iy, ix) * (1.0 - sx) + at(iy, ix + 1) * sx;
                let bot = at(iy + 1, ix) * (1.0 - sx) + at(iy + 1, ix + 1) * sx;
                let grain = rng.uniform(-6.0, 6.0);
                data.push((top * (1.0 - sy) + bot * sy + grain).clamp(0.0, 255.0));
            }
        }
    }
    Tensor::new(vec![size, size, channels], data).expect("background shape")
}

fn overlap_area(a: Rect, b: Rect) -> f64 {
    let w = ((a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0)).max(0.0);
    let h = ((a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0)).max(0.0);
    w * h
}

/// Smooth bounded random walk of box centers.
struct Walker {
    pos: [f64; 2],
    vel: [f64; 2],
    speed: f64,
}

impl Walker {
    fn step(&mut self, rng: &mut SeededRng, half: [f64; 2], size: f64, jump_prob: f64) {
        for k in 0..2 {
            self.vel[k] = 0.85 * self.vel[k] + 0.35 * self.speed * rng.normal();
            let vmax = 2.0 * self.speed;
            self.vel[k] = self.vel[k].clamp(-vmax, vmax);
        }
        if jump_prob > 0.0 && rng.bernoulli(jump_prob) {
            let ang = rng.uniform(0.0, std::f64::consts::TAU);
            self.vel = [3.0 * self.speed * ang.cos(), 3.0 * self.speed * ang.sin()];
        }
        for k in 0..2 {
            self.pos[k] += self.vel[k];
            let (lo, hi) = (half[k] + 1.0, size - half[k] - 1.0);
            if self.pos[k] < lo {
                self.pos[k] = 2.0 * lo - self.pos[k];
                self.vel[k] = self.vel[k].abs();
            }
            if self.pos[k] > hi {
                self.pos[k] = 2.0 * hi - self.pos[k];
                self.vel[k] = -self.vel[k].abs();
            }
            self.pos[k] = self.pos[k].clamp(lo, hi.max(lo));
        }
    }
}

impl SyntheticSequence {
    /// Pure function of its arguments. `text_dim` sizes the description
    /// stub of language sequences.
    pub fn generate(
        scenario: Scenario,
        modality: Modality,
        length: usize,
        seed: u64,
        size: usize,
        text_dim: usize,
    ) -> Result<Self> {
        if length < 2 {
            return Err(Error::Config(format!("sequence length must be at least 2, got {length}")));
        }
        if size < 16 {
            return Err(Error::Config(format!("frame size {size} is too small")));
        }
        let root = SeededRng::new(seed).derive(scenario.name());
        let mut motion = root.derive("motion");
        let mut look = root.derive("appearance");
        let s = size as f64;

        let target = Appearance {
            colors: [saturated_color(&mut look), saturated_color(&mut look)],
            cells: 2 + look.below(2),
        };
        let background = render_background(size, &mut look, 70.0, 180.0, 3);
        let occluder_color = [look.uniform(90.0, 150.0); 3];

        let base_side = s * motion.uniform(0.17, 0.24);
        let aspect = motion.uniform(0.75, 1.33);
        let (speed, jump) = match scenario {
            Scenario::FastMotion => (s * 0.045, 0.08),
            Scenario::Plain => (s * 0.01, 0.0),
            _ => (s * 0.015, 0.0),
        };
        let scale_amp = (2.2f64).ln() / 2.0;
        let half_period = ((length - 1) as f64 / 2.0).max(1.0);
        let scale_at = |t: usize| -> f64 {
            if scenario != Scenario::ScaleVariation {
                return 1.0;
            }
            let phase = t as f64 / half_period;
            let tri = if phase <= 1.0 { 2.0 * phase - 1.0 } else { 3.0 - 2.0 * phase };
            (scale_amp * tri).exp()
        };
        let dims_at = |t: usize| -> [f64; 2] {
            let side = base_side * scale_at(t);
            [side * aspect.sqrt(), side / aspect.sqrt()]
        };

        let mut walker = Walker {
            pos: [s * motion.uniform(0.35, 0.65), s * motion.uniform(0.35, 0.65)],
            vel: [0.0, 0.0],
            speed,
        };
        let mut targets = Vec::with_capacity(length);
        for t in 0..length {
            let wh = dims_at(t);
            if t > 0 {
                walker.step(&mut motion, [wh[0] / 2.0, wh[1] / 2.0], s, jump);
            } else {
                for k in 0..2 {
                    walker.pos[k] = walker.pos[k].clamp(wh[k] / 2.0 + 1.0, s - wh[k] / 2.0 - 1.0);
                }
            }
            targets.push([walker.pos[0], walker.pos[1], wh[0], wh[1]]);
        }

        let mut distractors = Vec::new();
        if scenario == Scenario::Distractors {
            for k in 0..2 {
                let mut dl = root.derive_index("distractor", k as u64);
                let mut colors = target.colors;
                for c in colors.iter_mut().flatten() {
                    *c = (*c + dl.uniform(-25.0, 25.0)).clamp(0.0, 255.0);
                }
                let app = Appearance {
                    colors,
                    cells: target.cells,
                };
                let wh = dims_at(0);
                let mut w = Walker {
                    pos: [s * dl.uniform(0.15, 0.85), s * dl.uniform(0.15, 0.85)],
                    vel: [0.0, 0.0],
                    speed: speed * 1.2,
                };
                let mut rects = Vec::with_capacity(length);
                for _ in 0..length {
                    w.step(&mut dl, [wh[0] / 2.0, wh[1] / 2.0], s, 0.0);
                    rects.push([w.pos[0], w.pos[1], wh[0], wh[1]]);
                }
                distractors.push((app, rects));
            }
        }

        let mut occluders = vec![None; length];
        if scenario == Scenario::Occlusion {
            let mut ol = root.derive("occluder");
            let window = (length / 6).clamp(2, 14);
            let events = (length / 50).max(1);
            for ev in 0..events {
                let span = length / events;
                let lo = ev * span + span / 3;
                let hi = (ev * span + 2 * span / 3).max(lo + 1);
                let start = (lo + ol.below(hi - lo)).min(length.saturating_sub(window));
                let dir = if ol.bernoulli(0.5) { 1.0 } else { -1.0 };
                for (i, slot) in occluders.iter_mut().enumerate().skip(start).take(window) {
                    let tgt = targets[i];
                    let side = 1.6 * tgt[2].max(tgt[3]);
                    let frac = if window > 1 { i as f64 - start as f64 } else { 0.0 } / (window - 1).max(1) as f64;
                    let shift = dir * (frac * 2.0 - 1.0) * 1.2 * side;
                    *slot = Some([tgt[0] + shift, tgt[1], side, side]);
                }
                // The middle frame of the window is fully covered.
                let mid = start + window / 2;
                if mid < length {
                    let tgt = targets[mid];
                    let side = 1.6 * tgt[2].max(tgt[3]);
                    occluders[mid] = Some([tgt[0], tgt[1], side, side]);
                }
            }
        }

        let visibility: Vec<f64> = (0..length)
            .map(|t| {
                let tgt = targets[t];
                match occluders[t] {
                    Some(o) => (1.0 - overlap_area(tgt, o) / (tgt[2] * tgt[3])).clamp(0.0, 1.0),
                    None => 1.0,
                }
            })
            .collect();
        let gt_boxes = targets
            .iter()
            .map(|r| [r[0] / s, r[1] / s, r[2] / s, r[3] / s])
            .collect();
        let aux_background = modality.has_aux().then(|| {
            let mut al = root.derive(modality.name());
            match modality {
                Modality::Rgbd => render_background(size, &mut al, 30.0, 110.0, 1),
                Modality::Rgbt => render_background(size, &mut al, 10.0, 60.0, 1),
                _ => Tensor::zeros(&[size, size, 1]),
            }
        });
        let text = modality.has_text().then(|| {
            let mut tl = root.derive("text");
            let mut v: Vec<f64> = target.colors.iter().flatten().map(|c| c / 127.5 - 1.0).collect();
            v.resize(text_dim.max(v.len()), 0.0);
            for x in v.iter_mut().skip(6) {
                *x = tl.uniform(-1.0, 1.0);
            }
            v.truncate(text_dim);
            v
        });

        Ok(Self {
            scenario,
            modality,
            seed,
            size,
            gt_boxes,
            visibility,
            text,
            target,
            targets,
            distractors,
            occluders,
            occluder_color,
            background,
            aux_background,
        })
    }

    pub fn occluded(&self, t: usize) -> bool {
        self.visibility[t] < OCCLUDED_BELOW
    }

    fn paint(img: &mut [f64], size: usize, rect: Rect, app: &Appearance) {
        let (x0, x1) = (rect[0] - rect[2] / 2.0, rect[0] + rect[2] / 2.0);
        let (y0, y1) = (rect[1] - rect[3] / 2.0, rect[1] + rect[3] / 2.0);
        let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(size as f64) as usize);
        for y in ys {
            let py = y as f64 + 0.5;
            if py < y0 || py >= y1 {
                continue;
            }
            let v = (py - y0) / rect[3];
            let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(size as f64) as usize);
            for x in xs {
                let px = x as f64 + 0.5;
                if px < x0 || px >= x1 {
                    continue;
                }
                let u = (px - x0) / rect[2];
                let border = u < 0.1 || u > 0.9 || v < 0.1 || v > 0.9;
                let color = if border {
                    [240.0, 240.0, 240.0]
                } else {
                    let k = app.cells as f64;
                    let parity = ((u * k).floor() + (v * k).floor()) as usize % 2;
                    app.colors[parity]
                };
                img[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
            }
        }
    }

    fn fill(img: &mut [f64], size: usize, channels: usize, rect: Rect, value: &[f64]) {
        let (x0, x1) = (rect[0] - rect[2] / 2.0, rect[0] + rect[2] / 2.0);
        let (y0, y1) = (rect[1] - rect[3] / 2.0, rect[1] + rect[3] / 2.0);
        for y in 0..size {
            let py = y as f64 + 0.5;
            if py < y0 || py >= y1 {
                continue;
            }
            for x in 0..size {
                let px = x as f64 + 0.5;
                if px >= x0 && px < x1 {
                    img[(y * size + x) * channels..(y * size + x + 1) * channels].copy_from_slice(value);
                }
            }
        }
    }

    /// Thin band along a rectangle's outline (event-camera stand-in).
    fn outline(img: &mut [f64], size: usize, rect: Rect, value: f64) {
        let band = 1.5;
        let (x0, x1) = (rect[0] - rect[2] / 2.0, rect[0] + rect[2] / 2.0);
        let (y0, y1) = (rect[1] - rect[3] / 2.0, rect[1] + rect[3] / 2.0);
        for y in 0..size {
            let py = y as f64 + 0.5;
            for x in 0..size {
                let px = x as f64 + 0.5;
                let inside_outer = px >= x0 - band && px < x1 + band && py >= y0 - band && py < y1 + band;
                let inside_inner = px >= x0 + band && px < x1 - band && py >= y0 + band && py < y1 - band;
                if inside_outer && !inside_inner {
                    img[y * size + x] = value;
                }
            }
        }
    }

    fn render(&self, t: usize) -> MultiModalFrame {
        let size = self.size;
        let mut rgb = self.background.data().to_vec();
        for (app, rects) in &self.distractors {
            Self::paint(&mut rgb, size, rects[t], app);
        }
        Self::paint(&mut rgb, size, self.targets[t], &self.target);
        if let Some(o) = self.occluders[t] {
            Self::fill(&mut rgb, size, 3, o, &self.occluder_color);
        }
        let aux = self.aux_background.as_ref().map(|bg| {
            let mut a = bg.data().to_vec();
            let (tv, dv, ov) = match self.modality {
                Modality::Rgbd => (220.0, 160.0, 120.0),
                Modality::Rgbt => (245.0, 120.0, 40.0),
                _ => (255.0, 200.0, 0.0),
            };
            if self.modality == Modality::Rgbe {
                for (_, rects) in &self.distractors {
                    Self::outline(&mut a, size, rects[t], dv);
                }
                Self::outline(&mut a, size, self.targets[t], tv);
            } else {
                for (_, rects) in &self.distractors {
                    Self::fill(&mut a, size, 1, rects[t], &[dv]);
                }
                Self::fill(&mut a, size, 1, self.targets[t], &[tv]);
            }
            if let Some(o) = self.occluders[t] {
                Self::fill(&mut a, size, 1, o, &[ov]);
            }
            let data: Vec<f64> = a.iter().flat_map(|&v| [v, v, v]).collect();
            Tensor::new(vec![size, size, 3], data).expect("aux shape")
        });
        MultiModalFrame {
            rgb: Tensor::new(vec![size, size, 3], rgb).expect("rgb shape"),
            aux,
            modality: self.modality,
            text: self.text.clone(),
        }
    }
}

impl FrameSource for SyntheticSequence {
    fn len(&self) -> usize {
        self.gt_boxes.len()
    }

    fn frame(&self, t: usize) -> Result<MultiModalFrame> {
        if t >= self.len() {
            return Err(Error::Domain(format!("frame {t} of {}", self.len())));
        }
        Ok(self.render(t))
    }

    fn gt_box(&self, t: usize) -> [f64; 4] {
        self.gt_boxes[t]
    }

    fn modality(&self) -> Modality {
        self.modality
    }

    fn frame_size(&self) -> (usize, usize) {
        (self.size, self.size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_bytes() {
        let a = SyntheticSequence::generate(Scenario::Plain, Modality::Rgbd, 6, 9, 64, 8).unwrap();
        let b = SyntheticSequence::generate(Scenario::Plain, Modality::Rgbd, 6, 9, 64, 8).unwrap();
        for t in 0..6 {
            let (fa, fb) = (a.frame(t).unwrap(), b.frame(t).unwrap());
            assert!(fa.rgb.bit_eq(&fb.rgb));
            assert!(fa.aux.unwrap().bit_eq(&fb.aux.unwrap()));
            assert_eq!(a.gt_box(t), b.gt_box(t));
        }
    }

    #[test]
    fn scale_variation_contract() {
        for seed in 0..5 {
            let s = SyntheticSequence::generate(Scenario::ScaleVariation, Modality::Rgb, 100, seed, 64, 8).unwrap();
            let areas: Vec<f64> = s.gt_boxes.iter().map(|b| b[2] * b[3]).collect();
            let max = areas.iter().cloned().fold(0.0, f64::max);
            let min = areas.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(max / min >= 4.0, "ratio {}", max / min);
        }
    }

    #[test]
    fn occlusion_contract() {
        for seed in 0..5 {
            let s = SyntheticSequence::generate(Scenario::Occlusion, Modality::Rgbt, 60, seed, 64, 8).unwrap();
            assert!((0..60).any(|t| s.occluded(t)));
            assert!(s.visibility.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn frames_are_valid_and_boxes_inside() {
        for sc in Scenario::ALL {
            for m in Modality::ALL {
                let s = SyntheticSequence::generate(sc, m, 30, 3, 64, 8).unwrap();
                for t in [0, 15, 29] {
                    s.frame(t).unwrap().validate().unwrap();
                }
                for b in &s.gt_boxes {
                    assert!(b[0] - b[2] / 2.0 >= 0.0 && b[0] + b[2] / 2.0 <= 1.0);
                    assert!(b[1] - b[3] / 2.0 >= 0.0 && b[1] + b[3] / 2.0 <= 1.0);
                }
                assert_eq!(s.text.is_some(), m.has_text());
                if sc != Scenario::Occlusion {
                    assert!(s.visibility.iter().all(|&v| v == 1.0));
                }
            }
        }
    }

    #[test]
    fn unknown_scenario_is_config_error() {
        assert!(matches!("WOBBLE".parse::<Scenario>(), Err(Error::Config(_))));
        assert_eq!("occlusion".parse::<Scenario>().unwrap(), Scenario::Occlusion);
        assert!(SyntheticSequence::generate(Scenario::Plain, Modality::Rgb, 1, 0, 64, 8).is_err());
    }
}
