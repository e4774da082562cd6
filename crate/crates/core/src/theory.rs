//! Numerical checks of the two forgetting bounds.
//!
//! With equal-content keys, a linear distance bias `β·k` (β < 0) turns the
//! attention distribution into a truncated geometric law, so memories beyond
//! a training length K carry at most `e^{β(K+1)}/(1−e^β)` of the
//! (unnormalized) mass. For the state-space layer, the influence of an input
//! `k` frames back is scaled by `∏ Ā = exp(Σ ΔA)`, bounded by `exp(−c·k)` with
//! `c = min Δ·|A|`.

use crate::dsf::{decay_envelope_check, ssm_step, DsfModule};
use crate::error::{Error, Result};
use crate::numerics::ops::softmax_row;
use crate::numerics::{ParamStore, SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailMassReport {
    pub beta: f64,
    pub k: usize,
    pub l: usize,
    /// `Σ_{k=K+1}^{L} e^{βk}`.
    pub exact_tail: f64,
    /// `e^{β(K+1)}/(1−e^β)`.
    pub bound: f64,
    /// `Σ_{k>L} e^{βk} = e^{β(L+1)}/(1−e^β)`, what the bound adds beyond
    /// the exact tail. Positive means the inequality is strict even when
    /// both sides round to the same double.
    pub remainder: f64,
    pub eta: f64,
    /// `ln(1/η)/|β| − 1`.
    pub horizon: f64,
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta < 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("beta must be negative, got {beta}")))
    }
}

/// Infinite-tail bound `e^{β(K+1)}/(1−e^β)`.
pub fn tail_bound(beta: f64, k: usize) -> Result<f64> {
    check_beta(beta)?;
    Ok((beta * (k as f64 + 1.0)).exp() / -beta.exp_m1())
}

/// `ln(1/η)/|β| − 1`.
pub fn horizon(beta: f64, eta: f64) -> Result<f64> {
    check_beta(beta)?;
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::Domain(format!("eta must lie in (0, 1), got {eta}")));
    }
    Ok((1.0 / eta).ln() / -beta - 1.0)
}

/// Geometric partial sum in closed form.
pub fn tail_mass(beta: f64, k: usize, l: usize, eta: f64) -> Result<TailMassReport> {
    check_beta(beta)?;
    if l <= k {
        return Err(Error::Domain(format!("need L > K, got K={k}, L={l}")));
    }
    let first = (beta * (k as f64 + 1.0)).exp();
    let exact_tail = first * (beta * (l - k) as f64).exp_m1() / beta.exp_m1();
    Ok(TailMassReport {
        beta,
        k,
        l,
        exact_tail,
        bound: tail_bound(beta, k)?,
        remainder: tail_bound(beta, l)?,
        eta,
        horizon: horizon(beta, eta)?,
    })
}

/// Term-by-term sum, used as the cross-check oracle.
pub fn naive_tail(beta: f64, k: usize, l: usize) -> f64 {
    ((k + 1)..=l).map(|i| (beta * i as f64).exp()).sum()
}

/// Smallest integer K ≥ 0 with `tail_bound(β, K) ≤ η`, by direct search.
pub fn min_k_for_bound(beta: f64, eta: f64) -> Result<usize> {
    check_beta(beta)?;
    let mut k = 0usize;
    while tail_bound(beta, k)? > eta {
        k += 1;
        if k > 100_000_000 {
            return Err(Error::Numeric("horizon search did not terminate".into()));
        }
    }
    Ok(k)
}

/// Exact real solution of `tail_bound(β, K) = η`:
/// `K = (ln(1/η) + ln(1/(1−e^β)))/|β| − 1`. It differs from
/// [`horizon`] by `ln(1/(1−e^β))/|β|`, which is large for shallow slopes.
pub fn exact_horizon(beta: f64, eta: f64) -> Result<f64> {
    let h = horizon(beta, eta)?;
    Ok(h + (1.0 / -beta.exp_m1()).ln() / -beta)
}

/// Measured ratio `p_older/p_newer` for two equal-content memories `gap`
/// frames apart inside a bank of `bank` frames (zero content logits,
/// bias `β·distance`). Fails when it strays from `exp(β·gap)` by more than
/// 1e−12.
pub fn attention_ratio_law(beta: f64, gap: usize, bank: usize) -> Result<f64> {
    if bank < gap + 1 {
        return Err(Error::Domain(format!("bank of {bank} cannot hold gap {gap}")));
    }
    let mut logits: Vec<f64> = (0..bank).map(|dist| beta * dist as f64).collect();
    softmax_row(&mut logits);
    let ratio = logits[gap] / logits[0];
    let want = (beta * gap as f64).exp();
    if (ratio - want).abs() > 1e-12 {
        return Err(Error::Numeric(format!(
            "ratio {ratio} vs exp(β·gap) {want} (β={beta}, gap={gap}, bank={bank})"
        )));
    }
    Ok(ratio)
}

/// Inputs of one SSM step.
#[derive(Clone, Debug)]
pub struct SsmStepInputs {
    pub s1: Tensor,
    pub delta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayRow {
    pub k: usize,
    /// Max over state coordinates of `|δh_k / δh_0|`.
    pub measured: f64,
    /// `exp(−c·k)`, c over steps `1..=k`.
    pub bound: f64,
    /// `‖δS_k‖_∞`, the output change at lag k (feed-through excluded).
    pub output_change: f64,
    /// `exp(−c·k)·‖δh_0‖_∞·max_n ‖C_k[n]‖₁`, the matching output envelope.
    pub output_bound: f64,
}

/// Runs the recurrence twice, once with `impulse` added to the first step's
/// state contribution, and measures how the difference decays. Later inputs
/// are identical, so the difference is exactly `∏ Ā ⊙ δh_0`.
pub fn impulse_decay(steps: &[SsmStepInputs], a: &Tensor, impulse: &Tensor, lags: &[usize]) -> Result<Vec<DecayRow>> {
    let n = steps.first().ok_or_else(|| Error::Domain("no SSM steps".into()))?.s1.rows();
    let ds = a.rows();
    let e = a.cols();
    let zero_d = Tensor::zeros(&[1, ds]);
    let mut hb = Tensor::zeros(&[n, ds * e]);
    let mut hp = hb.clone();
    let mut base = Vec::with_capacity(steps.len());
    let mut pert = Vec::with_capacity(steps.len());
    for (k, st) in steps.iter().enumerate() {
        let (sb, nb) = ssm_step(&st.s1, &hb, &st.delta, a, &st.b, &st.c, &zero_d)?;
        let sp;
        if k == 0 {
            // The impulse is the step-0 state difference itself.
            hp = nb.add(impulse)?;
            sp = readout(&hp, &st.c, ds, e);
        } else {
            let (s, np) = ssm_step(&st.s1, &hp, &st.delta, a, &st.b, &st.c, &zero_d)?;
            hp = np;
            sp = s;
        }
        hb = nb;
        base.push((sb, hb.clone()));
        pert.push((sp, hp.clone()));
    }
    let dh0 = pert[0].1.sub(&base[0].1)?;
    let dh0_max = dh0.max_abs();
    let deltas: Vec<Tensor> = steps.iter().map(|s| s.delta.clone()).collect();
    let mut rows = Vec::with_capacity(lags.len());
    for &k in lags {
        if k >= steps.len() {
            return Err(Error::Domain(format!("lag {k} beyond {} steps", steps.len())));
        }
        let dh = pert[k].1.sub(&base[k].1)?;
        let mut measured: f64 = 0.0;
        for (x, x0) in dh.data().iter().zip(dh0.data()) {
            if *x0 != 0.0 {
                measured = measured.max((x / x0).abs());
            }
        }
        let bound = per_token_envelope(&deltas[1..=k], a)?;
        let ds_out = pert[k].0.sub(&base[k].0)?;
        let c_l1 = (0..n)
            .map(|t| steps[k].c.row(t).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        rows.push(DecayRow {
            k,
            measured,
            bound,
            output_change: ds_out.max_abs(),
            output_bound: bound * dh0_max * c_l1,
        });
    }
    Ok(rows)
}

fn readout(h: &Tensor, c: &Tensor, ds: usize, e: usize) -> Tensor {
    let n = c.rows();
    let mut out = vec![0.0; n * ds];
    for t in 0..n {
        for ch in 0..ds {
            let base = (t * ds + ch) * e;
            out[t * ds + ch] = (0..e).map(|j| c.at(t, j) * h.data()[base + j]).sum();
        }
    }
    Tensor::matrix(n, ds, out)
}

/// `exp(−c·k)` with `c` the minimum of `Δ·|A|` over all tokens, channels,
/// state slots and the given steps (each `Δ` is `n × d_s`).
fn per_token_envelope(deltas: &[Tensor], a: &Tensor) -> Result<f64> {
    if deltas.is_empty() {
        return Ok(1.0);
    }
    let n = deltas[0].rows();
    let mut bound: f64 = 0.0;
    // The worst token gives the loosest (largest) envelope; take c as the
    // global minimum so one envelope covers every coordinate.
    let mut per_step = Vec::new();
    for t in 0..n {
        per_step.clear();
        for dt in deltas {
            per_step.push(Tensor::matrix(1, dt.cols(), dt.row(t).to_vec()));
        }
        let env = decay_envelope_check(&per_step, a, per_step.len())?;
        bound = bound.max(env.bound);
    }
    Ok(bound)
}

/// Impulse-decay table for a concrete module: random inputs drive Δ, B and
/// C through the module's own projections.
pub fn ssm_influence_decay(
    store: &ParamStore,
    module: &DsfModule,
    n_tokens: usize,
    lags: &[usize],
    rng: &mut SeededRng,
) -> Result<Vec<DecayRow>> {
    let horizon = lags.iter().copied().max().unwrap_or(0) + 1;
    let ds = module.dims.inner;
    let e = module.dims.state;
    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let s1 = rng.normal_tensor(&[n_tokens, ds], 1.0);
        let (delta, b, c) = module.selective_values(store, &s1)?;
        steps.push(SsmStepInputs { s1, delta, b, c });
    }
    let impulse = rng.normal_tensor(&[n_tokens, ds * e], 1.0);
    impulse_decay(&steps, &module.a_value(store), &impulse, lags)
}

/// One line of the verification report.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundCheck {
    pub check: &'static str,
    pub beta: f64,
    pub param: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Every bound check for the given slopes:
/// - `tail`: exact tail mass below the geometric bound at (K, L);
/// - `horizon`: smallest K with bound ≤ η within 1 of `ceil(ln(1/η)/|β| − 1)`;
/// - `horizon_exact`: the same K equals the ceiling of the exact solution;
/// - `ratio`: equal-content attention ratio for gaps 1–16;
/// - `ssm_decay`: impulse response under its envelope over random modules.
pub fn theory_report(
    betas: &[f64],
    k: usize,
    l: usize,
    etas: &[f64],
    decay_draws: usize,
    seed: u64,
) -> Result<Vec<BoundCheck>> {
    let mut out = Vec::new();
    for &beta in betas {
        let r = tail_mass(beta, k, l, etas.first().copied().unwrap_or(0.01))?;
        out.push(BoundCheck {
            check: "tail",
            beta,
            param: format!("K={k} L={l}"),
            measured: r.exact_tail,
            bound: r.bound,
            pass: r.exact_tail <= r.bound
                && r.remainder > 0.0
                && (r.exact_tail + r.remainder - r.bound).abs() <= 1e-12 * r.bound,
        });
        for &eta in etas {
            let kmin = min_k_for_bound(beta, eta)? as f64;
            let approx = horizon(beta, eta)?.ceil();
            out.push(BoundCheck {
                check: "horizon",
                beta,
                param: format!("eta={eta}"),
                measured: kmin,
                bound: approx,
                pass: (kmin - approx).abs() <= 1.0,
            });
            let exact = exact_horizon(beta, eta)?.ceil().max(0.0);
            out.push(BoundCheck {
                check: "horizon_exact",
                beta,
                param: format!("eta={eta}"),
                measured: kmin,
                bound: exact,
                pass: kmin == exact,
            });
        }
        for gap in 1..=16 {
            let want = (beta * gap as f64).exp();
            let (measured, pass) = match attention_ratio_law(beta, gap, gap + 8) {
                Ok(r) => (r, true),
                Err(_) => (f64::NAN, false),
            };
            out.push(BoundCheck {
                check: "ratio",
                beta,
                param: format!("gap={gap}"),
                measured,
                bound: want,
                pass,
            });
        }
    }
    let lags = [1, 2, 4, 8, 16];
    let root = SeededRng::new(seed);
    for draw in 0..decay_draws {
        let mut rng = root.derive_index("decay", draw as u64);
        let dims = crate::dsf::DsfDims {
            d: 8,
            inner: 8,
            state: 4,
            conv_width: 4,
            dt_rank: 1,
            heads: 2,
        };
        let mut store = ParamStore::new();
        let module = DsfModule::init(&mut store, "dsf", dims, &mut rng)?;
        for row in ssm_influence_decay(&store, &module, 4, &lags, &mut rng)? {
            out.push(BoundCheck {
                check: "ssm_decay",
                beta: f64::NAN,
                param: format!("draw={draw} k={}", row.k),
                measured: row.measured,
                bound: row.bound,
                pass: row.measured <= row.bound * (1.0 + 1e-12),
            });
        }
    }
    Ok(out)
}

/// `check,beta,param,measured,bound,pass`
pub fn report_csv(checks: &[BoundCheck]) -> String {
    let mut out = String::from("check,beta,param,measured,bound,pass\n");
    for c in checks {
        out.push_str(&format!(
            "{},{:?},{},{:?},{:?},{}\n",
            c.check, c.beta, c.param, c.measured, c.bound, c.pass
        ));
    }
    out
}

/// Plain-text summary: one line per check kind and slope, then failures.
pub fn report_text(checks: &[BoundCheck]) -> String {
    let key_of = |c: &BoundCheck| {
        let slope = if c.beta.is_nan() { "all draws".to_string() } else { format!("beta={:.6}", c.beta) };
        (c.check, slope)
    };
    let mut groups: Vec<(&str, String)> = Vec::new();
    for c in checks {
        if !groups.contains(&key_of(c)) {
            groups.push(key_of(c));
        }
    }
    let mut out = String::new();
    for (check, key) in &groups {
        let members: Vec<&BoundCheck> = checks.iter().filter(|c| key_of(c) == (*check, key.clone())).collect();
        let passed = members.iter().filter(|c| c.pass).count();
        out.push_str(&format!(
            "{:<14} {:<18} {passed}/{} {}\n",
            check,
            key,
            members.len(),
            if passed == members.len() { "PASS" } else { "FAIL" }
        ));
    }
    let failures: Vec<&BoundCheck> = checks.iter().filter(|c| !c.pass).collect();
    if !failures.is_empty() {
        out.push_str("\nfailures:\n");
        for c in failures {
            out.push_str(&format!(
                "  {} beta={} {}: measured {} vs {}\n",
                c.check, c.beta, c.param, c.measured, c.bound
            ));
        }
    }
    out
}
