//! Memory-aware compression prompts.
//!
//! Historical search-region features are kept in a bounded bank and
//! compressed into a fixed number of prompt tokens by learnable queries:
//!
//! ```text
//! Q = Linear_q(RMSNorm_q(q))
//! K, V = Split(Linear_kv(RMSNorm_kv(F_m)))
//! Attn = Softmax(Q·Kᵀ/√(d/H) + ALiBi)
//! M₁ = Linear_o(Attn·V) + q
//! M₂ = FFN(RMSNorm(M₁)) + M₁
//! M  = FFN′(M₂ + SelfAttn(M₂))
//! ```
//!
//! The bias is frame level: every token of the j-th bank frame (1-based, of
//! `N` frames) gets `−m_h·|j − N|` in head `h`, with `m_h = 2^(−8/h)`.

use crate::blocks::{AttentionParams, FfnParams, OutInit};
use crate::config::{AlibiDistance, Config, MemoryPolicy, PositionBias};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

/// Standard deviation of the learnable query tokens at init. Small, as for
/// ViT class tokens, so the prompt starts close to its type embedding.
pub const QUERY_INIT_STD: f64 = 0.02;

/// ALiBi slope of 1-based head `h`: `2^(−8/h)`.
pub fn alibi_slope(h: usize) -> f64 {
    (-8.0 / h as f64).exp2()
}

/// Bias of frame position `j` (1-based) in a bank of `n_frames` for head `h`.
pub fn alibi_bias(j: usize, n_frames: usize, h: usize) -> f64 {
    -alibi_slope(h) * (j as f64 - n_frames as f64).abs()
}

/// Positions `round(i·(T−1)/(L−1))`, `i = 0..L`, into a sorted list of `T`
/// tracked indices; everything when `T ≤ L`.
pub fn select_memory(tracked: &[usize], l: usize) -> Result<Vec<usize>> {
    if l < 1 {
        return Err(Error::Config("memory capacity L must be at least 1".into()));
    }
    let t = tracked.len();
    if t <= l {
        return Ok(tracked.to_vec());
    }
    if l == 1 {
        return Ok(vec![tracked[t - 1]]);
    }
    Ok((0..l)
        .map(|i| {
            let pos = (i as f64 * (t - 1) as f64 / (l - 1) as f64).round() as usize;
            tracked[pos]
        })
        .collect())
}

/// Bounded store of per-frame search-region features.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    entries: Vec<(usize, Tensor)>,
    capacity: usize,
    policy: MemoryPolicy,
    fifo_k: usize,
    tracked: Vec<usize>,
    inserts: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, policy: MemoryPolicy, fifo_k: usize) -> Result<Self> {
        if capacity < 1 || fifo_k < 1 {
            return Err(Error::Config("memory capacity and FIFO interval must be positive".into()));
        }
        Ok(Self {
            entries: Vec::new(),
            capacity,
            policy,
            fifo_k,
            tracked: Vec::new(),
            inserts: 0,
        })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        Self::new(cfg.mcp.bank_l, cfg.mcp.policy, cfg.mcp.fifo_k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|(i, _)| *i).collect()
    }

    pub fn entries(&self) -> &[(usize, Tensor)] {
        &self.entries
    }

    /// Adds a tracked frame and re-selects per the policy.
    pub fn insert_frame(&mut self, frame_index: usize, features: Tensor) -> Result<()> {
        if let Some(&last) = self.tracked.last() {
            if frame_index <= last {
                return Err(Error::State(format!(
                    "frame {frame_index} inserted after frame {last}"
                )));
            }
        }
        if let Some((_, first)) = self.entries.first() {
            if first.shape() != features.shape() {
                return Err(dim_err!(
                    "memory features {:?}, bank holds {:?}",
                    features.shape(),
                    first.shape()
                ));
            }
        }
        self.tracked.push(frame_index);
        let n = self.inserts;
        self.inserts += 1;
        match self.policy {
            MemoryPolicy::FifoEveryK => {
                if n % self.fifo_k == 0 {
                    self.entries.push((frame_index, features));
                    if self.entries.len() > self.capacity {
                        self.entries.remove(0);
                    }
                }
            }
            MemoryPolicy::Uniform => {
                self.entries.push((frame_index, features));
                if self.entries.len() > self.capacity {
                    let ideal = select_memory(&self.tracked, self.capacity)?;
                    let keep = retain_nearest(&self.indices(), &ideal);
                    let old = std::mem::take(&mut self.entries);
                    self.entries = old
                        .into_iter()
                        .enumerate()
                        .filter(|(k, _)| keep[*k])
                        .map(|(_, e)| e)
                        .collect();
                }
            }
        }
        Ok(())
    }
}

/// Marks which stored indices to keep so that each ideal index maps to a
/// distinct stored one: exact matches first, then the nearest unclaimed
/// stored index (earlier wins ties).
fn retain_nearest(stored: &[usize], ideal: &[usize]) -> Vec<bool> {
    let mut keep = vec![false; stored.len()];
    let mut pending = Vec::new();
    for &want in ideal {
        match stored.binary_search(&want) {
            Ok(k) if !keep[k] => keep[k] = true,
            _ => pending.push(want),
        }
    }
    for want in pending {
        let best = (0..stored.len())
            .filter(|&k| !keep[k])
            .min_by_key(|&k| (stored[k].abs_diff(want), k));
        if let Some(k) = best {
            keep[k] = true;
        }
    }
    keep
}

/// Compressor parameters (all under `mcp.`, all trainable).
#[derive(Clone, Debug)]
pub struct McpParams {
    pub heads: usize,
    pub queries: ParamId,
    pub cross: AttentionParams,
    pub ffn: FfnParams,
    pub enhance_attn: AttentionParams,
    pub enhance_ffn: FfnParams,
    /// Learned per-slot table (`L × d`) for the absolute-position variant.
    pub abs_pos: Option<ParamId>,
    pub bias: PositionBias,
    pub distance: AlibiDistance,
}

impl McpParams {
    pub fn init(store: &mut ParamStore, cfg: &Config, rng: &mut SeededRng) -> Result<Self> {
        let d = cfg.backbone.d;
        let heads = cfg.backbone.heads;
        let m = &cfg.mcp;
        let hidden = d * m.ffn_mult;
        let queries = store.add("mcp.query_tokens", rng.normal_tensor(&[m.n_tokens, d], QUERY_INIT_STD), true)?;
        let cross = AttentionParams::init(store, "mcp.cross", d, heads, true, OutInit::Random, true, rng)?;
        let ffn = FfnParams::init(store, "mcp.ffn", d, hidden, OutInit::Random, true, rng)?;
        let enhance_attn = AttentionParams::init(store, "mcp.enhance.attn", d, heads, false, OutInit::Random, true, rng)?;
        let enhance_ffn = FfnParams::init(store, "mcp.enhance.ffn", d, hidden, OutInit::Random, true, rng)?;
        let abs_pos = if m.bias == PositionBias::Absolute {
            Some(store.add("mcp.abs_pos", rng.normal_tensor(&[m.bank_l, d], 0.02), true)?)
        } else {
            None
        };
        Ok(Self {
            heads,
            queries,
            cross,
            ffn,
            enhance_attn,
            enhance_ffn,
            abs_pos,
            bias: m.bias,
            distance: m.distance,
        })
    }

    /// Per-head `heads × (frames·tokens_per_frame)` logit bias for a bank
    /// whose frames have the given original indices (oldest first).
    pub fn bias_table(&self, frame_indices: &[usize], tokens_per_frame: usize) -> Option<Tensor> {
        if self.bias != PositionBias::Alibi {
            return None;
        }
        Some(alibi_table(self.heads, frame_indices, tokens_per_frame, self.distance))
    }

    /// Compresses bank frames (oldest first, each `N_S × d`) into `N_M × d`
    /// prompt tokens.
    pub fn compress(&self, g: &mut Graph, frames: &[(usize, Var)]) -> Result<Var> {
        let (attended, _) = self.compress_with_attention(g, frames)?;
        Ok(attended)
    }

    /// Also returns the cross-attention node for inspection.
    pub fn compress_with_attention(&self, g: &mut Graph, frames: &[(usize, Var)]) -> Result<(Var, Var)> {
        if frames.is_empty() {
            return Err(Error::State("compress called on an empty memory bank".into()));
        }
        let per = g.value(frames[0].1).rows();
        let mut feats: Vec<Var> = frames.iter().map(|(_, v)| *v).collect();
        if let Some(table) = self.abs_pos {
            let tv = g.param(table);
            let cap = g.value(tv).rows();
            if frames.len() > cap {
                return Err(Error::Config(format!(
                    "absolute memory positions cover {cap} frames, bank has {}",
                    frames.len()
                )));
            }
            // Slot 0 is the newest frame, so positions extrapolate from the
            // most recent end.
            let n = frames.len();
            for (j, f) in feats.iter_mut().enumerate() {
                let row = g.slice_rows(tv, n - 1 - j, 1)?;
                *f = g.add_row(*f, row)?;
            }
        }
        let memory = g.concat_rows(&feats)?;
        let indices: Vec<usize> = frames.iter().map(|(i, _)| *i).collect();
        let bias = self.bias_table(&indices, per);
        let q = g.param(self.queries);
        let (a, node) = self.cross.attend(g, q, memory, bias.as_ref())?;
        let m1 = g.add(a, q)?;
        let m2 = self.ffn.residual(g, m1)?;
        let m = self.enhance_attn.residual(g, m2)?;
        let m = self.enhance_ffn.residual(g, m)?;
        Ok((m, node))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.queries];
        for a in [&self.cross, &self.enhance_attn] {
            ids.extend([a.norm_q, a.wq, a.wk, a.wv, a.wo]);
            ids.extend(a.norm_kv);
        }
        for f in [&self.ffn, &self.enhance_ffn] {
            ids.extend([f.norm, f.w1, f.b1, f.w2, f.b2]);
        }
        ids.extend(self.abs_pos);
        ids
    }
}

/// ALiBi table for frames with the given original indices.
pub fn alibi_table(heads: usize, frame_indices: &[usize], tokens_per_frame: usize, distance: AlibiDistance) -> Tensor {
    let n = frame_indices.len();
    let newest = frame_indices.last().copied().unwrap_or(0);
    let nk = n * tokens_per_frame;
    let mut data = Vec::with_capacity(heads * nk);
    for h in 1..=heads {
        for (j, &idx) in frame_indices.iter().enumerate() {
            let b = match distance {
                AlibiDistance::BankPosition => alibi_bias(j + 1, n, h),
                AlibiDistance::FrameIndex => -alibi_slope(h) * newest.abs_diff(idx) as f64,
            };
            data.extend(std::iter::repeat_n(b, tokens_per_frame));
        }
    }
    Tensor::matrix(heads, nk, data)
}

/// Tensor-level compression of a whole bank.
pub fn compress_bank(store: &ParamStore, params: &McpParams, bank: &MemoryBank) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let frames: Vec<(usize, Var)> = bank
        .entries()
        .iter()
        .map(|(i, t)| (*i, g.constant(t.clone())))
        .collect();
    let m = params.compress(&mut g, &frames)?;
    Ok(g.value(m).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, DEFAULT_FD_STEP};

    fn small_cfg() -> Config {
        let mut c = Config::compact();
        c.backbone.d = 8;
        c.backbone.heads = 2;
        c.mcp.n_tokens = 3;
        c.mcp.ffn_mult = 2;
        c
    }

    fn oracle_select(tracked: &[usize], l: usize) -> Vec<usize> {
        let t = tracked.len();
        if t <= l {
            return tracked.to_vec();
        }
        // Integer rounding: round(i·(T−1)/(L−1)) = floor((2i(T−1) + (L−1)) / (2(L−1))).
        (0..l)
            .map(|i| tracked[(2 * i * (t - 1) + (l - 1)) / (2 * (l - 1))])
            .collect()
    }

    #[test]
    fn selection_examples() {
        let t3: Vec<usize> = (0..3).collect();
        assert_eq!(select_memory(&t3, 50).unwrap(), t3);
        let t50: Vec<usize> = (0..50).collect();
        assert_eq!(select_memory(&t50, 50).unwrap(), t50);
        let t100: Vec<usize> = (0..100).collect();
        let sel = select_memory(&t100, 50).unwrap();
        assert_eq!(sel, oracle_select(&t100, 50));
        assert_eq!(sel[0], 0);
        assert_eq!(sel[49], 99);
        assert_eq!(&sel[..4], &[0, 2, 4, 6]);
        assert!(matches!(select_memory(&t3, 0), Err(Error::Config(_))));
        assert_eq!(select_memory(&t3, 1).unwrap(), vec![2]);
    }

    #[test]
    fn selection_matches_oracle_across_sizes() {
        for t in 1..160 {
            let tracked: Vec<usize> = (0..t).map(|i| 3 * i + 1).collect();
            for l in 2..60 {
                assert_eq!(select_memory(&tracked, l).unwrap(), oracle_select(&tracked, l), "T={t} L={l}");
            }
        }
    }

    #[test]
    fn alibi_examples() {
        assert_eq!(alibi_bias(7, 7, 3), 0.0);
        assert_eq!(alibi_bias(9, 10, 1), -0.00390625);
        assert_eq!(alibi_bias(6, 10, 2), -0.25);
    }

    #[test]
    fn fifo_every_k() {
        let mut bank = MemoryBank::new(50, MemoryPolicy::FifoEveryK, 5).unwrap();
        for i in 0..25 {
            bank.insert_frame(i, Tensor::zeros(&[2, 2])).unwrap();
        }
        assert_eq!(bank.indices(), vec![0, 5, 10, 15, 20]);
        let mut small = MemoryBank::new(2, MemoryPolicy::FifoEveryK, 5).unwrap();
        for i in 0..25 {
            small.insert_frame(i, Tensor::zeros(&[2, 2])).unwrap();
        }
        assert_eq!(small.indices(), vec![15, 20]);
    }

    #[test]
    fn uniform_bank_invariants() {
        let mut bank = MemoryBank::new(50, MemoryPolicy::Uniform, 5).unwrap();
        assert!(bank.is_empty());
        for i in 0..200 {
            bank.insert_frame(i, Tensor::zeros(&[1, 1])).unwrap();
            assert!(bank.len() <= 50);
            let idx = bank.indices();
            assert_eq!(*idx.last().unwrap(), i);
            assert_eq!(idx[0], 0);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(bank.len(), 50);
        assert!(matches!(bank.insert_frame(10, Tensor::zeros(&[1, 1])), Err(Error::State(_))));
    }

    #[test]
    fn empty_bank_is_a_state_error() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let p = McpParams::init(&mut store, &cfg, &mut SeededRng::new(1)).unwrap();
        let bank = MemoryBank::from_config(&cfg).unwrap();
        assert!(matches!(compress_bank(&store, &p, &bank), Err(Error::State(_))));
    }

    #[test]
    fn identical_tokens_get_uniform_attention() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let p = McpParams::init(&mut store, &cfg, &mut SeededRng::new(2)).unwrap();
        let row = SeededRng::new(3).normal_tensor(&[1, 8], 1.0);
        let frame = Tensor::from_rows(&vec![row.row(0).to_vec(); 5]).unwrap();
        let mut g = Graph::new(&store);
        let f = g.constant(frame);
        let (_, node) = p.compress_with_attention(&mut g, &[(0, f)]).unwrap();
        let (_, _, nk, w) = g.attention_weights(node).unwrap();
        assert_eq!(nk, 5);
        assert!(w.iter().all(|&x| (x - 0.2).abs() < 1e-12));
    }

    #[test]
    fn zero_projections_return_queries() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let p = McpParams::init(&mut store, &cfg, &mut SeededRng::new(4)).unwrap();
        for id in [p.cross.wo, p.ffn.w2, p.enhance_attn.wo, p.enhance_ffn.w2] {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        let mut bank = MemoryBank::from_config(&cfg).unwrap();
        bank.insert_frame(0, SeededRng::new(5).normal_tensor(&[4, 8], 1.0)).unwrap();
        let m = compress_bank(&store, &p, &bank).unwrap();
        assert!(m.bit_eq(store.value(p.queries)));
    }

    #[test]
    fn output_shape_is_independent_of_bank_size() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let p = McpParams::init(&mut store, &cfg, &mut SeededRng::new(6)).unwrap();
        let mut bank = MemoryBank::from_config(&cfg).unwrap();
        let mut rng = SeededRng::new(7);
        for i in 0..12 {
            bank.insert_frame(i, rng.normal_tensor(&[4, 8], 1.0)).unwrap();
            assert_eq!(compress_bank(&store, &p, &bank).unwrap().shape(), &[3, 8]);
        }
    }

    #[test]
    fn compress_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let p = McpParams::init(&mut store, &cfg, &mut SeededRng::new(8)).unwrap();
        let mut rng = SeededRng::new(9);
        let frames = [rng.normal_tensor(&[4, 8], 1.0), rng.normal_tensor(&[4, 8], 1.0)];
        let w = rng.normal_tensor(&[3, 8], 1.0);
        let objective = |g: &mut Graph| -> Result<Var> {
            let fs: Vec<(usize, Var)> = frames.iter().enumerate().map(|(i, t)| (i, g.constant(t.clone()))).collect();
            let m = p.compress(g, &fs)?;
            let wv = g.constant(w.clone());
            let y = g.mul(m, wv)?;
            Ok(g.sum(y))
        };
        let ids = p.param_ids();
        let grads = {
            let mut g = Graph::new(&store);
            let l = objective(&mut g).unwrap();
            g.backward(l).unwrap()
        };
        let fd = finite_diff_grad(&mut store, &ids, DEFAULT_FD_STEP, |s| {
            let mut g = Graph::new(s);
            let l = objective(&mut g)?;
            Ok(g.value(l).data()[0])
        })
        .unwrap();
        for (id, num) in ids.iter().zip(&fd) {
            let ana = grads.param(*id).unwrap();
            assert!(relative_error(ana, num) < 1e-4, "{}", store.get(*id).name);
        }
    }
}
