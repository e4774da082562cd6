//! Dynamic state fusion.
//!
//! Each module keeps a gated selective state-space layer whose hidden state
//! advances once per video frame. Every search token owns its own
//! `d_s × e` state block; token positions line up across frames because the
//! search grid is fixed. The layer reads only search-region features. Its
//! output `F` is spliced back into the backbone by two cross-attention fusion
//! layers whose output projections start at zero.

use crate::blocks::{add_bias, add_gain, add_linear, AttentionParams, OutInit, NORM_EPS};
use crate::error::{dim_err, Error, Result};
use crate::numerics::graph::{ssm_readout_kernel, ssm_transition_kernel};
use crate::numerics::{Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

/// Sizes of one dynamic state layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DsfDims {
    pub d: usize,
    /// Inner width d_s.
    pub inner: usize,
    /// State width e.
    pub state: usize,
    pub conv_width: usize,
    pub dt_rank: usize,
    pub heads: usize,
}

/// Per-tracker state of one module.
#[derive(Clone, Debug, PartialEq)]
pub struct DsfState {
    /// `N_S × (d_s·e)`, laid out as `[token][channel][state]`.
    pub h: Tensor,
    pub last_f: Option<Tensor>,
    pub frames_seen: usize,
}

impl DsfState {
    pub fn new(n_s: usize, dims: &DsfDims) -> Self {
        Self {
            h: Tensor::zeros(&[n_s, dims.inner * dims.state]),
            last_f: None,
            frames_seen: 0,
        }
    }

    /// Record one completed update.
    pub fn advance(&mut self, h: Tensor, f: Tensor) {
        self.h = h;
        self.last_f = Some(f);
        self.frames_seen += 1;
    }
}

/// Cross-attention fusion `x + Attn(x → F)·W_o`.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub attn: AttentionParams,
}

impl FusionParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            attn: AttentionParams::init(store, prefix, d, heads, true, OutInit::Zero, true, rng)?,
        })
    }

    /// Every row of `x` may attend to every row of `f`. Absent `f` is the
    /// identity.
    pub fn fuse(&self, g: &mut Graph, x: Var, f: Option<Var>) -> Result<Var> {
        match f {
            None => Ok(x),
            Some(f) => {
                let a = self.attn.forward(g, x, f, None)?;
                g.add(x, a)
            }
        }
    }
}

/// One module: the dynamic state layer plus its two fusion layers.
#[derive(Clone, Debug)]
pub struct DsfModule {
    pub dims: DsfDims,
    pub norm: ParamId,
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub w_c: ParamId,
    pub b_c: ParamId,
    pub conv: ParamId,
    pub conv_b: ParamId,
    /// Linear₁: `d_s → (r + 2e)`, split into Δ′, B, C.
    pub w_x: ParamId,
    /// Linear₂: `r → d_s`.
    pub w_dt: ParamId,
    pub b_dt: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    /// Output projection `d_s → d`, zero at init.
    pub w_out: ParamId,
    pub fuse_in: FusionParams,
    pub fuse_out: FusionParams,
}

/// Δ after softplus starts log-uniform in this range.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 0.1);

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Graph values of one state update.
#[derive(Clone, Copy, Debug)]
pub struct DsfStep {
    pub f: Var,
    pub h: Var,
    pub s1: Var,
    pub delta: Var,
}

impl DsfModule {
    pub fn init(store: &mut ParamStore, prefix: &str, dims: DsfDims, rng: &mut SeededRng) -> Result<Self> {
        let DsfDims {
            d,
            inner,
            state,
            conv_width,
            dt_rank,
            heads,
        } = dims;
        let name = |s: &str| format!("{prefix}.{s}");
        let (lo, hi) = DT_INIT_RANGE;
        let b_dt: Vec<f64> = (0..inner)
            .map(|_| inverse_softplus(rng.uniform(lo.ln(), hi.ln()).exp()))
            .collect();
        let a_log: Vec<f64> = (0..inner)
            .flat_map(|_| (1..=state).map(|j| (j as f64).ln()))
            .collect();
        let dt_bound = 1.0 / (dt_rank as f64).sqrt();
        Ok(Self {
            dims,
            norm: add_gain(store, &name("norm"), d, true)?,
            w_g: add_linear(store, &name("w_g"), d, inner, rng, true, OutInit::Random)?,
            b_g: add_bias(store, &name("b_g"), inner, true)?,
            w_c: add_linear(store, &name("w_c"), d, inner, rng, true, OutInit::Random)?,
            b_c: add_bias(store, &name("b_c"), inner, true)?,
            conv: store.add(
                name("conv"),
                rng.normal_tensor(&[conv_width, inner], 1.0 / (conv_width as f64).sqrt()),
                true,
            )?,
            conv_b: add_bias(store, &name("conv_b"), inner, true)?,
            w_x: add_linear(store, &name("w_x"), inner, dt_rank + 2 * state, rng, true, OutInit::Random)?,
            w_dt: store.add(
                name("w_dt"),
                rng.uniform_tensor(&[dt_rank, inner], -dt_bound, dt_bound),
                true,
            )?,
            b_dt: store.add(name("b_dt"), Tensor::matrix(1, inner, b_dt), true)?,
            a_log: store.add(name("a_log"), Tensor::matrix(inner, state, a_log), true)?,
            d_skip: store.add(name("d"), Tensor::full(&[1, inner], 1.0), true)?,
            w_out: add_linear(store, &name("w_out"), inner, d, rng, true, OutInit::Zero)?,
            fuse_in: FusionParams::init(store, &name("fuse_in"), d, heads, rng)?,
            fuse_out: FusionParams::init(store, &name("fuse_out"), d, heads, rng)?,
        })
    }

    /// `S₁ = SiLU(Conv(Linear_c(I)))` and `G = SiLU(Linear_g(I))` for
    /// `I = RMSNorm(source)`.
    fn gate_and_input(&self, g: &mut Graph, source: Var) -> Result<(Var, Var)> {
        let gain = g.param(self.norm);
        let i = g.rms_norm(source, gain, NORM_EPS)?;
        let (w_g, b_g) = (g.param(self.w_g), g.param(self.b_g));
        let gate = g.linear(i, w_g, Some(b_g))?;
        let gate = g.silu(gate);
        let (w_c, b_c) = (g.param(self.w_c), g.param(self.b_c));
        let (conv, conv_b) = (g.param(self.conv), g.param(self.conv_b));
        let xc = g.linear(i, w_c, Some(b_c))?;
        let xc = g.depthwise_conv(xc, conv)?;
        let xc = g.add_row(xc, conv_b)?;
        Ok((gate, g.silu(xc)))
    }

    /// Δ, B, C from `S₁` (Linear₁ split, then Linear₂ and softplus on Δ′).
    fn selective(&self, g: &mut Graph, s1: Var) -> Result<(Var, Var, Var)> {
        let (r, e) = (self.dims.dt_rank, self.dims.state);
        let w_x = g.param(self.w_x);
        let xdbl = g.linear(s1, w_x, None)?;
        let dt = g.slice_cols(xdbl, 0, r)?;
        let b = g.slice_cols(xdbl, r, e)?;
        let c = g.slice_cols(xdbl, r + e, e)?;
        let (w_dt, b_dt) = (g.param(self.w_dt), g.param(self.b_dt));
        let delta = g.linear(dt, w_dt, Some(b_dt))?;
        Ok((g.softplus(delta), b, c))
    }

    /// `A = −exp(A_log)`.
    fn a_matrix(&self, g: &mut Graph) -> Var {
        let a_log = g.param(self.a_log);
        let a = g.exp(a_log);
        g.scale(a, -1.0)
    }

    /// Gated layer plus one SSM step:
    /// `F = source + Linear(G ⊙ SSM(S₁))`.
    pub fn dynamic_state_forward(&self, g: &mut Graph, source: Var, h_prev: Var) -> Result<DsfStep> {
        let DsfDims { d, inner, state, .. } = self.dims;
        let src = g.value(source);
        if src.cols() != d {
            return Err(dim_err!("dsf: source {:?}, expected width {d}", src.shape()));
        }
        let n = src.rows();
        if g.value(h_prev).len() != n * inner * state {
            return Err(dim_err!(
                "dsf: state {:?} for {n} tokens of {inner}×{state}",
                g.value(h_prev).shape()
            ));
        }
        let (gate, s1) = self.gate_and_input(g, source)?;
        let (delta, b, c) = self.selective(g, s1)?;
        let a = self.a_matrix(g);
        let h = g.ssm_transition(h_prev, delta, a, b, s1)?;
        let dskip = g.param(self.d_skip);
        let s = g.ssm_readout(h, c, dskip, s1)?;
        let gs = g.mul(gate, s)?;
        let w_out = g.param(self.w_out);
        let proj = g.linear(gs, w_out, None)?;
        let f = g.add(source, proj)?;
        Ok(DsfStep { f, h, s1, delta })
    }

    /// Tensor-level state update; returns `(F, h_new)`.
    pub fn update(&self, store: &ParamStore, source: &Tensor, state: &DsfState) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(store);
        let src = g.constant(source.clone());
        let h = g.constant(state.h.clone());
        let step = self.dynamic_state_forward(&mut g, src, h)?;
        Ok((g.value(step.f).clone(), g.value(step.h).clone()))
    }

    /// One SSM step on a given `S₁` with Δ, B, C computed from the module's
    /// parameters. Returns `(S, h_new)`.
    pub fn ssm_scan(&self, store: &ParamStore, s1: &Tensor, h_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(store);
        let s1v = g.constant(s1.clone());
        let (delta, b, c) = self.selective(&mut g, s1v)?;
        let a = self.a_matrix(&mut g);
        let d = store.value(self.d_skip);
        ssm_step(s1, h_prev, g.value(delta), g.value(a), g.value(b), g.value(c), d)
    }

    /// `(Δ, B, C)` for a given `S₁` (used by the decay verifiers).
    pub fn selective_values(&self, store: &ParamStore, s1: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new(store);
        let s1v = g.constant(s1.clone());
        let (delta, b, c) = self.selective(&mut g, s1v)?;
        Ok((g.value(delta).clone(), g.value(b).clone(), g.value(c).clone()))
    }

    pub fn a_value(&self, store: &ParamStore) -> Tensor {
        store.value(self.a_log).map(|v| -v.exp())
    }

    /// Every parameter of the module, fusion layers included.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.norm, self.w_g, self.b_g, self.w_c, self.b_c, self.conv, self.conv_b, self.w_x, self.w_dt,
            self.b_dt, self.a_log, self.d_skip, self.w_out,
        ];
        for f in [&self.fuse_in, &self.fuse_out] {
            let a = &f.attn;
            ids.extend([a.norm_q, a.wq, a.wk, a.wv, a.wo]);
            ids.extend(a.norm_kv);
        }
        ids
    }
}

/// Discrete SSM step with explicit Δ (`n × d_s`), A (`d_s × e`),
/// B, C (`n × e`) and D (`d_s`):
/// `h = exp(ΔA)⊙h_prev + (Δ×B)⊙S₁`, `S = C·h + D⊙S₁`.
pub fn ssm_step(
    s1: &Tensor,
    h_prev: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, ds) = (s1.rows(), s1.cols());
    let e = a.cols();
    if delta.rows() != n
        || delta.cols() != ds
        || a.rows() != ds
        || b.rows() != n
        || b.cols() != e
        || c.rows() != n
        || c.cols() != e
        || d.len() != ds
        || h_prev.len() != n * ds * e
    {
        return Err(dim_err!(
            "ssm_step: S1 {:?}, h {:?}, Δ {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
            s1.shape(),
            h_prev.shape(),
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        ));
    }
    debug_assert!(delta.data().iter().all(|&v| v >= 0.0), "Δ must be nonnegative");
    let h = ssm_transition_kernel(h_prev.data(), delta.data(), a.data(), b.data(), s1.data(), n, ds, e);
    let s = ssm_readout_kernel(&h, c.data(), d.data(), s1.data(), n, ds, e);
    Ok((Tensor::matrix(n, ds, s), Tensor::matrix(n, ds * e, h)))
}

/// Result of [`decay_envelope_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayEnvelope {
    /// Max over coordinates of `∏ₖ exp(Δₖ·A)`.
    pub product_norm: f64,
    /// `exp(−c·span)` with `c = min Δ·|A|`.
    pub bound: f64,
    pub c: f64,
}

/// Checks `‖∏ₖ Āₖ‖_∞ ≤ exp(−c·span)` over the first `span` steps of
/// `delta_seq` (each a length-`d_s` tensor) and a `d_s × e` matrix `A`.
pub fn decay_envelope_check(delta_seq: &[Tensor], a: &Tensor, span: usize) -> Result<DecayEnvelope> {
    if span > delta_seq.len() {
        return Err(Error::Domain(format!("span {span} exceeds {} steps", delta_seq.len())));
    }
    let (ds, e) = (a.rows(), a.cols());
    if a.data().iter().any(|&v| v >= 0.0 || !v.is_finite()) {
        return Err(Error::Domain("A must be strictly negative".into()));
    }
    let steps = &delta_seq[..span];
    for dt in steps {
        if dt.len() != ds {
            return Err(dim_err!("Δ {:?} for A {:?}", dt.shape(), a.shape()));
        }
        if dt.data().iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Domain("Δ must be strictly positive".into()));
        }
    }
    if span == 0 {
        return Ok(DecayEnvelope {
            product_norm: 1.0,
            bound: 1.0,
            c: f64::INFINITY,
        });
    }
    let mut c = f64::INFINITY;
    let mut product_norm: f64 = 0.0;
    for ch in 0..ds {
        for j in 0..e {
            let av = a.data()[ch * e + j];
            let mut log_prod = 0.0;
            for dt in steps {
                let x = dt.data()[ch] * av;
                log_prod += x;
                c = c.min(-x);
            }
            product_norm = product_norm.max(log_prod.exp());
        }
    }
    let bound = (-c * span as f64).exp();
    if product_norm > bound * (1.0 + 1e-12) {
        return Err(Error::Numeric(format!(
            "decay product {product_norm} exceeds envelope {bound}"
        )));
    }
    Ok(DecayEnvelope { product_norm, bound, c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, DEFAULT_FD_STEP};

    fn dims() -> DsfDims {
        DsfDims {
            d: 8,
            inner: 4,
            state: 2,
            conv_width: 3,
            dt_rank: 2,
            heads: 2,
        }
    }

    fn module(seed: u64) -> (ParamStore, DsfModule) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let m = DsfModule::init(&mut store, "dsf.0", dims(), &mut rng).unwrap();
        (store, m)
    }

    fn randomize_zero_params(store: &mut ParamStore, m: &DsfModule, rng: &mut SeededRng) {
        for id in [m.w_out, m.fuse_in.attn.wo, m.fuse_out.attn.wo] {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = rng.normal_tensor(&shape, 0.5);
        }
    }

    #[test]
    fn scalar_hand_unrolled_recurrence() {
        let s1 = Tensor::matrix(1, 1, vec![1.0]);
        let delta = Tensor::matrix(1, 1, vec![std::f64::consts::LN_2]);
        let a = Tensor::matrix(1, 1, vec![-1.0]);
        let one = Tensor::matrix(1, 1, vec![1.0]);
        let d = Tensor::matrix(1, 1, vec![0.0]);
        let (s, h) = ssm_step(&s1, &Tensor::zeros(&[1, 1]), &delta, &a, &one, &one, &d).unwrap();
        assert!((h.data()[0] - 0.693147).abs() < 1e-6);
        assert!((s.data()[0] - 0.693147).abs() < 1e-6);
        let (s, h) = ssm_step(&s1, &h, &delta, &a, &one, &one, &d).unwrap();
        assert!((h.data()[0] - 1.039721).abs() < 1e-6);
        assert!((s.data()[0] - 1.039721).abs() < 1e-6);
        let ln2 = std::f64::consts::LN_2;
        assert!((h.data()[0] - (0.5 * ln2 + ln2)).abs() < 1e-15);
    }

    #[test]
    fn zero_delta_is_identity_transition() {
        let mut rng = SeededRng::new(3);
        let (n, ds, e) = (3, 4, 2);
        let s1 = rng.normal_tensor(&[n, ds], 1.0);
        let h_prev = rng.normal_tensor(&[n, ds * e], 1.0);
        let a = rng.uniform_tensor(&[ds, e], -2.0, -0.1);
        let b = rng.normal_tensor(&[n, e], 1.0);
        let c = rng.normal_tensor(&[n, e], 1.0);
        let d = rng.normal_tensor(&[1, ds], 1.0);
        let (s, h) = ssm_step(&s1, &h_prev, &Tensor::zeros(&[n, ds]), &a, &b, &c, &d).unwrap();
        assert!(h.bit_eq(&h_prev));
        for t in 0..n {
            for ch in 0..ds {
                let mut want = d.data()[ch] * s1.at(t, ch);
                for j in 0..e {
                    want += c.at(t, j) * h_prev.data()[(t * ds + ch) * e + j];
                }
                assert!((s.at(t, ch) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let (store, m) = module(1);
        let z = Tensor::zeros(&[4, 4]);
        let (s, h) = m.ssm_scan(&store, &z, &Tensor::zeros(&[4, 8])).unwrap();
        assert_eq!(s.max_abs(), 0.0);
        assert_eq!(h.max_abs(), 0.0);
    }

    #[test]
    fn zero_output_projection_passes_source_through() {
        let (store, m) = module(2);
        let mut rng = SeededRng::new(5);
        let src = rng.normal_tensor(&[4, 8], 1.0);
        let state = DsfState::new(4, &m.dims);
        let (f, h) = m.update(&store, &src, &state).unwrap();
        assert!(f.bit_eq(&src));
        assert!(h.max_abs() > 0.0);
    }

    #[test]
    fn closed_gate_blocks_the_state_path() {
        let (mut store, m) = module(4);
        let mut rng = SeededRng::new(6);
        randomize_zero_params(&mut store, &m, &mut rng);
        store.get_mut(m.w_g).value = Tensor::zeros(&[8, 4]);
        let src = rng.normal_tensor(&[4, 8], 1.0);
        let (f, _) = m.update(&store, &src, &DsfState::new(4, &m.dims)).unwrap();
        assert!(f.bit_eq(&src));
    }

    #[test]
    fn state_accumulates_across_frames() {
        let (mut store, m) = module(7);
        let mut rng = SeededRng::new(8);
        randomize_zero_params(&mut store, &m, &mut rng);
        let src = rng.normal_tensor(&[4, 8], 1.0);
        let mut state = DsfState::new(4, &m.dims);
        let (f1, h1) = m.update(&store, &src, &state).unwrap();
        state.advance(h1, f1.clone());
        let (f2, _) = m.update(&store, &src, &state).unwrap();
        assert!(relative_error(&f1, &f2) > 1e-6);
        assert_eq!(state.frames_seen, 1);
    }

    #[test]
    fn fusion_identities() {
        let (mut store, m) = module(9);
        let mut rng = SeededRng::new(10);
        let x = rng.normal_tensor(&[6, 8], 1.0);
        let f = rng.normal_tensor(&[4, 8], 1.0);
        {
            let mut g = Graph::new(&store);
            let xv = g.constant(x.clone());
            let fv = g.constant(f.clone());
            let skip = m.fuse_in.fuse(&mut g, xv, None).unwrap();
            assert!(g.value(skip).bit_eq(&x));
            let fused = m.fuse_in.fuse(&mut g, xv, Some(fv)).unwrap();
            assert!(g.value(fused).bit_eq(&x));
        }
        randomize_zero_params(&mut store, &m, &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let fv = g.constant(f.slice_rows(0, 1));
        let (_, node) = m.fuse_in.attn.attend(&mut g, xv, fv, None).unwrap();
        let (h, nq, nk, w) = g.attention_weights(node).unwrap();
        assert_eq!((h, nq, nk), (2, 6, 1));
        assert!(w.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn decay_envelope_examples() {
        let ones = vec![Tensor::matrix(1, 1, vec![1.0]); 3];
        let a = Tensor::matrix(1, 1, vec![-1.0]);
        let env = decay_envelope_check(&ones, &a, 3).unwrap();
        assert!((env.product_norm - (-3.0f64).exp()).abs() < 1e-15);
        assert!((env.bound - 0.049787).abs() < 1e-6);
        let env = decay_envelope_check(&ones, &a, 0).unwrap();
        assert_eq!((env.product_norm, env.bound), (1.0, 1.0));
        let bad = vec![Tensor::matrix(1, 1, vec![0.0])];
        assert!(matches!(decay_envelope_check(&bad, &a, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn decay_envelope_random_draws() {
        let mut rng = SeededRng::new(11);
        for _ in 0..1000 {
            let (ds, e) = (1 + rng.below(4), 1 + rng.below(4));
            let a = rng.uniform_tensor(&[ds, e], -3.0, -0.01);
            let seq: Vec<Tensor> = (0..8).map(|_| rng.uniform_tensor(&[1, ds], 1e-3, 1.0)).collect();
            let mut last = f64::INFINITY;
            for span in 0..=8 {
                let env = decay_envelope_check(&seq, &a, span).unwrap();
                assert!(env.product_norm <= env.bound * (1.0 + 1e-12));
                assert!(env.product_norm <= last);
                last = env.product_norm;
            }
        }
    }

    #[test]
    fn dynamic_state_forward_gradients_match_finite_differences() {
        let (mut store, m) = module(12);
        let mut rng = SeededRng::new(13);
        randomize_zero_params(&mut store, &m, &mut rng);
        let src = rng.normal_tensor(&[4, 8], 1.0);
        let h0 = rng.normal_tensor(&[4, 8], 0.5);
        let wts = rng.normal_tensor(&[4, 8], 1.0);
        let hw = rng.normal_tensor(&[4, 8], 1.0);
        let ids: Vec<ParamId> = m.param_ids().into_iter().filter(|id| {
            !store.get(*id).name.contains("fuse")
        }).collect();
        let objective = |g: &mut Graph| -> Result<Var> {
            let s = g.constant(src.clone());
            let h = g.constant(h0.clone());
            let step = m.dynamic_state_forward(g, s, h)?;
            let w = g.constant(wts.clone());
            let hwv = g.constant(hw.clone());
            let a = g.mul(step.f, w)?;
            let b = g.mul(step.h, hwv)?;
            let a = g.sum(a);
            let b = g.sum(b);
            g.add(a, b)
        };
        let grads = {
            let mut g = Graph::new(&store);
            let loss = objective(&mut g).unwrap();
            g.backward(loss).unwrap()
        };
        let fd = finite_diff_grad(&mut store, &ids, DEFAULT_FD_STEP, |s| {
            let mut g = Graph::new(s);
            let loss = objective(&mut g)?;
            Ok(g.value(loss).data()[0])
        })
        .unwrap();
        for (id, num) in ids.iter().zip(&fd) {
            let ana = grads.param(*id).cloned().unwrap_or_else(|| Tensor::zeros(num.shape()));
            let err = relative_error(&ana, num);
            assert!(err < 1e-4, "{}: {err}", store.get(*id).name);
        }
    }
}
