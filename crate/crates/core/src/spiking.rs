//! Integrate-and-fire prompt filtering and spike discretization.
//!
//! A continuous prompt element `p` drives its own IF neuron as a constant
//! input current for `T` steps. The firing rate (spike count over `T`) is the
//! filtered prompt; thresholding the rate at `theta` yields the binary spike
//! prompt that the backbone consumes.
//!
//! Both the rate map and the threshold are step functions. Backward uses the
//! arctan surrogate `alpha / (2 * (1 + (pi/2 * alpha * (x - c))^2))`, centred at
//! `c = v_th` for the rate map and `c = theta` for the threshold.

use std::cell::Cell;
use std::f64::consts::FRAC_PI_2;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{CustomGradFn, Tape, Tensor, Var};

thread_local! {
    static IF_STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of IF bank steps executed on the calling thread so far.
pub fn if_steps_on_this_thread() -> u64 {
    IF_STEPS.with(Cell::get)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IfConfig {
    pub v_th: f64,
    pub v_reset: f64,
    pub t_steps: usize,
}

impl Default for IfConfig {
    fn default() -> Self {
        Self {
            v_th: 0.01,
            v_reset: 0.0,
            t_steps: 16,
        }
    }
}

impl IfConfig {
    pub fn new(v_th: f64, v_reset: f64, t_steps: usize) -> Result<Self> {
        let cfg = Self {
            v_th,
            v_reset,
            t_steps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_th > 0.0) {
            return Err(Error::Parameter(format!("v_th must be > 0, got {}", self.v_th)));
        }
        if self.t_steps == 0 {
            return Err(Error::Parameter("t_steps must be >= 1".into()));
        }
        if !(self.v_reset < self.v_th) {
            return Err(Error::Parameter(format!(
                "v_reset {} must be below v_th {}",
                self.v_reset, self.v_th
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeConfig {
    pub theta: f64,
    pub alpha: f64,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        Self {
            theta: 0.01,
            alpha: 2.0,
        }
    }
}

impl SpikeConfig {
    pub fn new(theta: f64, alpha: f64) -> Result<Self> {
        let cfg = Self { theta, alpha };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Parameter(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Parameter(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        Ok(())
    }
}

/// Subthreshold membrane potentials `V'` of a bank of IF neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct IfState {
    v_sub: Vec<f64>,
}

impl IfState {
    /// All neurons at rest (`v_reset`).
    pub fn new(len: usize, cfg: &IfConfig) -> Self {
        Self {
            v_sub: vec![cfg.v_reset; len],
        }
    }

    pub fn from_potentials(v_sub: Vec<f64>) -> Self {
        Self { v_sub }
    }

    pub fn potentials(&self) -> &[f64] {
        &self.v_sub
    }

    /// One integrate / fire / reset step. Returns the binary spike tensor.
    pub fn step(&mut self, input: &Tensor, cfg: &IfConfig) -> Result<Tensor> {
        if input.len() != self.v_sub.len() {
            return Err(shape_err!(
                "IF input has {} elements, state has {}",
                input.len(),
                self.v_sub.len()
            ));
        }
        IF_STEPS.with(|c| c.set(c.get() + 1));
        let spikes = self
            .v_sub
            .iter_mut()
            .zip(input.data())
            .map(|(v_sub, &current)| integrate_fire_reset(v_sub, current, cfg))
            .collect();
        Tensor::new(input.shape(), spikes)
    }
}

#[inline]
fn integrate_fire_reset(v_sub: &mut f64, current: f64, cfg: &IfConfig) -> f64 {
    let v = *v_sub + current;
    let s = if v - cfg.v_th >= 0.0 { 1.0 } else { 0.0 };
    *v_sub = v * (1.0 - s) + cfg.v_reset * s;
    s
}

/// Rate-coded output of the signal filtering layer: each element drives
/// its own IF neuron for `t_steps` steps from rest; output is spikes / T.
pub fn sf_layer_rate(prompt: &Tensor, cfg: &IfConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut state = IfState::new(prompt.len(), cfg);
    let mut counts = vec![0.0; prompt.len()];
    for _ in 0..cfg.t_steps {
        let spikes = state.step(prompt, cfg)?;
        counts.iter_mut().zip(spikes.data()).for_each(|(c, s)| *c += s);
    }
    let t = cfg.t_steps as f64;
    Tensor::new(prompt.shape(), counts.into_iter().map(|c| c / t).collect())
}

/// Closed-form firing rate under constant input and hard reset to zero.
pub fn if_rate_closed_form(p: f64, cfg: &IfConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.v_reset != 0.0 {
        return Err(Error::Contract(format!(
            "closed-form rate needs v_reset = 0, got {}",
            cfg.v_reset
        )));
    }
    if p <= 0.0 {
        return Ok(0.0);
    }
    let t = cfg.t_steps as f64;
    let period = (cfg.v_th / p).ceil();
    Ok(t.min((t / period).floor()) / t)
}

/// Binary discretization: 1 where `filtered - theta >= 0`.
pub fn sd_unit(filtered: &Tensor, cfg: &SpikeConfig) -> Tensor {
    let data = filtered
        .data()
        .iter()
        .map(|&x| step(x - cfg.theta))
        .collect();
    Tensor::new(filtered.shape(), data).expect("shape preserved")
}

#[inline]
fn step(offset: f64) -> f64 {
    if offset >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Arctan surrogate derivative at a signed offset from threshold.
pub fn arctan_surrogate(offset: f64, alpha: f64) -> f64 {
    let u = FRAC_PI_2 * alpha * offset;
    alpha / (2.0 * (1.0 + u * u))
}

/// Surrogate derivative of the discretization unit at `x`.
pub fn surrogate_grad_value(x: f64, cfg: &SpikeConfig) -> f64 {
    arctan_surrogate(x - cfg.theta, cfg.alpha)
}

/// Backward rule used for the rate map `p -> rate(p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RateGradient {
    /// Arctan surrogate centred at `v_th` with the discretization's `alpha`.
    #[default]
    ArcTan,
    /// Identity pass-through.
    StraightThrough,
}

/// The signal filtering layer as a custom-gradient op.
#[derive(Debug, Clone, Copy)]
pub struct RateCoding {
    pub if_cfg: IfConfig,
    pub alpha: f64,
    pub policy: RateGradient,
}

impl CustomGradFn for RateCoding {
    fn forward(&self, x: f64) -> f64 {
        let mut v_sub = self.if_cfg.v_reset;
        let count: f64 = (0..self.if_cfg.t_steps)
            .map(|_| integrate_fire_reset(&mut v_sub, x, &self.if_cfg))
            .sum();
        count / self.if_cfg.t_steps as f64
    }

    fn derivative(&self, x: f64) -> f64 {
        match self.policy {
            RateGradient::ArcTan => arctan_surrogate(x - self.if_cfg.v_th, self.alpha),
            RateGradient::StraightThrough => 1.0,
        }
    }

    fn forward_all(&self, xs: &[f64]) -> Vec<f64> {
        let t = Tensor::new(&[xs.len()], xs.to_vec()).expect("non-empty prompt");
        sf_layer_rate(&t, &self.if_cfg)
            .expect("validated config")
            .into_data()
    }
}

/// The spike discretization unit as a custom-gradient op.
#[derive(Debug, Clone, Copy)]
pub struct SpikeDiscretization {
    pub cfg: SpikeConfig,
}

impl CustomGradFn for SpikeDiscretization {
    fn forward(&self, x: f64) -> f64 {
        step(x - self.cfg.theta)
    }

    fn derivative(&self, x: f64) -> f64 {
        surrogate_grad_value(x, &self.cfg)
    }
}

/// How a continuous prompt becomes the injected prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptTransform {
    /// Raw continuous prompt.
    Identity,
    /// Rate-coded prompt only.
    FilterOnly,
    /// Thresholded raw prompt, no filtering layer.
    SpikeOnly,
    /// Filtering layer followed by discretization.
    FilterThenSpike,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikePath {
    pub if_cfg: IfConfig,
    pub sd_cfg: SpikeConfig,
    pub rate_gradient: RateGradient,
}

impl Default for SpikePath {
    fn default() -> Self {
        Self {
            if_cfg: IfConfig::default(),
            sd_cfg: SpikeConfig::default(),
            rate_gradient: RateGradient::ArcTan,
        }
    }
}

impl SpikePath {
    fn rate_coding(&self) -> RateCoding {
        RateCoding {
            if_cfg: self.if_cfg,
            alpha: self.sd_cfg.alpha,
            policy: self.rate_gradient,
        }
    }

    fn discretization(&self) -> SpikeDiscretization {
        SpikeDiscretization { cfg: self.sd_cfg }
    }

    /// Records the transform on `tape`.
    pub fn apply_tape(&self, tape: &mut Tape<'_>, x: Var, how: PromptTransform) -> Result<Var> {
        match how {
            PromptTransform::Identity => Ok(x),
            PromptTransform::FilterOnly => tape.apply_custom(x, &self.rate_coding()),
            PromptTransform::SpikeOnly => tape.apply_custom(x, &self.discretization()),
            PromptTransform::FilterThenSpike => {
                let rate = tape.apply_custom(x, &self.rate_coding())?;
                tape.apply_custom(rate, &self.discretization())
            }
        }
    }

    /// Value-only transform.
    pub fn apply(&self, x: &Tensor, how: PromptTransform) -> Result<Tensor> {
        Ok(match how {
            PromptTransform::Identity => x.detached(),
            PromptTransform::FilterOnly => sf_layer_rate(x, &self.if_cfg)?,
            PromptTransform::SpikeOnly => sd_unit(x, &self.sd_cfg),
            PromptTransform::FilterThenSpike => {
                sd_unit(&sf_layer_rate(x, &self.if_cfg)?, &self.sd_cfg)
            }
        })
    }
}

/// Per-layer continuous prompts `P_i`, each `[K, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptStack {
    pub prompts: Vec<Tensor>,
    pub prompt_len: usize,
    pub layer_count: usize,
}

impl PromptStack {
    /// Seeded normal initialization. With `reserve_extra` the stack holds
    /// `layer_count + 1` prompts; otherwise one per encoder layer.
    pub fn init(
        layer_count: usize,
        prompt_len: usize,
        dim: usize,
        seed: u64,
        std: f64,
        reserve_extra: bool,
    ) -> Result<Self> {
        let count = layer_count + usize::from(reserve_extra);
        let prompts = (0..count)
            .map(|i| {
                Tensor::randn(&[prompt_len, dim], seed.wrapping_add(i as u64), std)
                    .map(Tensor::with_grad)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompts,
            prompt_len,
            layer_count,
        })
    }

    pub fn from_prompts(prompts: Vec<Tensor>, layer_count: usize) -> Result<Self> {
        let first = prompts
            .first()
            .ok_or_else(|| Error::Contract("prompt stack needs at least one prompt".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 2 || prompts.iter().any(|p| p.shape() != shape.as_slice()) {
            return Err(shape_err!("prompts must share one [K, D] shape"));
        }
        if prompts.len() != layer_count && prompts.len() != layer_count + 1 {
            return Err(Error::Contract(format!(
                "{} prompts for {layer_count} layers",
                prompts.len()
            )));
        }
        Ok(Self {
            prompt_len: shape[0],
            prompts,
            layer_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.prompts[0].shape()[1]
    }
}

/// `sd_unit(sf_layer_rate(P_i))` for every prompt, without a tape.
pub fn spike_prompt_forward(stack: &PromptStack, if_cfg: &IfConfig, sd_cfg: &SpikeConfig) -> Result<Vec<Tensor>> {
    stack
        .prompts
        .iter()
        .map(|p| Ok(sd_unit(&sf_layer_rate(p, if_cfg)?, sd_cfg)))
        .collect()
}

/// Detached binary prompts for deployment; inference reads these directly.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPrompts(pub Vec<Tensor>);

pub fn freeze_spike_prompts(stack: &PromptStack, if_cfg: &IfConfig, sd_cfg: &SpikeConfig) -> Result<FrozenPrompts> {
    Ok(FrozenPrompts(spike_prompt_forward(stack, if_cfg, sd_cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_rate(p: f64, cfg: &IfConfig) -> f64 {
        sf_layer_rate(&Tensor::scalar(p), cfg).unwrap().data()[0]
    }

    #[test]
    fn single_step_cases() {
        let cfg = IfConfig::default();
        let cases = [
            (0.0, 0.012, 1.0, 0.0),
            (0.0, 0.004, 0.0, 0.004),
        ];
        for (v0, i, spike, v_after) in cases {
            let mut st = IfState::from_potentials(vec![v0]);
            let s = st.step(&Tensor::scalar(i), &cfg).unwrap();
            assert_eq!(s.data(), &[spike], "v0={v0} i={i}");
            assert_eq!(st.potentials(), &[v_after]);
        }
    }

    #[test]
    fn boundary_fires() {
        // 0.009 + 0.001 rounds to 0.009999999999999998 in f64, so pick an
        // input whose sum lands exactly on the threshold.
        let cfg = IfConfig::default();
        for (v0, i) in [(0.009, cfg.v_th - 0.009), (0.005, 0.005), (0.0, cfg.v_th)] {
            assert_eq!(v0 + i, cfg.v_th);
            let mut st = IfState::from_potentials(vec![v0]);
            let s = st.step(&Tensor::scalar(i), &cfg).unwrap();
            assert_eq!(s.data(), &[1.0]);
            assert_eq!(st.potentials(), &[0.0]);
        }
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let cfg = IfConfig::default();
        let mut st = IfState::new(3, &cfg);
        assert!(matches!(st.step(&Tensor::scalar(0.1), &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn rate_examples() {
        let cfg = IfConfig::default();
        assert_eq!(scalar_rate(0.01, &cfg), 1.0);
        assert_eq!(scalar_rate(0.004, &cfg), 0.3125);
        assert_eq!(scalar_rate(-0.2, &cfg), 0.0);
    }

    #[test]
    fn rate_spike_times_for_small_input() {
        let cfg = IfConfig::default();
        let mut st = IfState::new(1, &cfg);
        let fired: Vec<usize> = (1..=16)
            .filter(|_| st.step(&Tensor::scalar(0.004), &cfg).unwrap().data()[0] == 1.0)
            .collect();
        assert_eq!(fired, vec![3, 6, 9, 12, 15]);
    }

    #[test]
    fn closed_form_examples() {
        let cfg = IfConfig::default();
        assert_eq!(if_rate_closed_form(0.004, &cfg).unwrap(), 0.3125);
        assert_eq!(if_rate_closed_form(0.5, &cfg).unwrap(), 1.0);
        assert_eq!(if_rate_closed_form(0.0, &cfg).unwrap(), 0.0);
        let soft = IfConfig::new(0.01, -0.005, 16).unwrap();
        assert!(matches!(if_rate_closed_form(0.1, &soft), Err(Error::Contract(_))));
    }

    #[test]
    fn config_validation() {
        assert!(IfConfig::new(0.0, 0.0, 16).is_err());
        assert!(IfConfig::new(0.01, 0.0, 0).is_err());
        assert!(IfConfig::new(0.01, 0.02, 4).is_err());
        assert!(SpikeConfig::new(0.01, 0.0).is_err());
        assert!(SpikeConfig::new(1.5, 2.0).is_err());
    }

    #[test]
    fn sd_unit_examples() {
        let cfg = SpikeConfig::default();
        let t = Tensor::new(&[3], vec![0.3125, 0.0, 0.01]).unwrap();
        assert_eq!(sd_unit(&t, &cfg).data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn surrogate_examples() {
        let cfg = SpikeConfig::default();
        assert_eq!(surrogate_grad_value(cfg.theta, &cfg), 1.0);
        let x = cfg.theta + 1.0 / std::f64::consts::PI;
        assert!((surrogate_grad_value(x, &cfg) - 0.5).abs() < 1e-15);
        assert!(surrogate_grad_value(cfg.theta + 100.0, &cfg) < 1e-4);
    }

    #[test]
    fn oracle_equivalence_on_random_inputs() {
        let cfg = IfConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let p: f64 = rng.random_range(-0.05..0.05);
            assert_eq!(scalar_rate(p, &cfg), if_rate_closed_form(p, &cfg).unwrap(), "p={p}");
        }
    }

    #[test]
    fn rate_coding_forward_matches_bank() {
        let path = SpikePath::default();
        let rc = path.rate_coding();
        let x = Tensor::randn(&[64], 5, 0.01).unwrap();
        let bank = rc.forward_all(x.data());
        for (xi, b) in x.data().iter().zip(&bank) {
            assert_eq!(rc.forward(*xi), *b);
        }
    }

    #[test]
    fn spike_forward_extremes() {
        let if_cfg = IfConfig::default();
        let sd_cfg = SpikeConfig::default();
        let zeros = PromptStack::from_prompts(vec![Tensor::zeros(&[2, 3]).unwrap(); 2], 2).unwrap();
        let out = spike_prompt_forward(&zeros, &if_cfg, &sd_cfg).unwrap();
        assert!(out.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));

        let at_th = PromptStack::from_prompts(vec![Tensor::full(&[2, 3], if_cfg.v_th).unwrap(); 2], 2).unwrap();
        let out = spike_prompt_forward(&at_th, &if_cfg, &sd_cfg).unwrap();
        assert!(out.iter().all(|t| t.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn spike_forward_equals_oracle_composition() {
        let if_cfg = IfConfig::default();
        let sd_cfg = SpikeConfig::default();
        let stack = PromptStack::init(1, 10, 16, 9, 0.01, false).unwrap();
        let out = spike_prompt_forward(&stack, &if_cfg, &sd_cfg).unwrap();
        for (p, s) in stack.prompts[0].data().iter().zip(out[0].data()) {
            let rate = if_rate_closed_form(*p, &if_cfg).unwrap();
            let want = if rate - sd_cfg.theta >= 0.0 { 1.0 } else { 0.0 };
            assert_eq!(*s, want);
        }
    }

    #[test]
    fn end_to_end_gradient_is_product_of_surrogates() {
        let path = SpikePath::default();
        let p = Tensor::randn(&[4, 4], 3, 0.01).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.param(&p);
        let s = path.apply_tape(&mut tape, v, PromptTransform::FilterThenSpike).unwrap();
        let total = tape.sum(s).unwrap();
        tape.backward(total).unwrap();
        let g = tape.grad(v).unwrap();
        for (i, &x) in p.data().iter().enumerate() {
            let rate = if_rate_closed_form(x, &path.if_cfg).unwrap();
            let want = surrogate_grad_value(rate, &path.sd_cfg)
                * arctan_surrogate(x - path.if_cfg.v_th, path.sd_cfg.alpha);
            assert_eq!(g[i], want);
        }
    }

    #[test]
    fn frozen_prompts_are_detached() {
        let if_cfg = IfConfig::default();
        let sd_cfg = SpikeConfig::default();
        let mut stack = PromptStack::init(2, 3, 4, 1, 0.01, false).unwrap();
        let frozen = freeze_spike_prompts(&stack, &if_cfg, &sd_cfg).unwrap();
        assert_eq!(frozen.0, spike_prompt_forward(&stack, &if_cfg, &sd_cfg).unwrap());
        let before = frozen.clone();
        stack.prompts[0].data_mut().iter_mut().for_each(|v| *v = -1.0);
        assert_eq!(frozen, before);
        assert!(frozen.0.iter().all(|t| !t.requires_grad));
    }

    proptest! {
        #[test]
        fn rate_is_monotone(a in -0.05f64..0.05, b in -0.05f64..0.05) {
            let cfg = IfConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(scalar_rate(lo, &cfg) <= scalar_rate(hi, &cfg));
        }

        #[test]
        fn rate_lives_on_the_grid(p in -0.1f64..0.1, t in 1usize..32) {
            let cfg = IfConfig::new(0.01, 0.0, t).unwrap();
            let r = scalar_rate(p, &cfg);
            let k = r * t as f64;
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(k, k.round());
        }

        #[test]
        fn membrane_stays_below_threshold(inputs in proptest::collection::vec(-0.05f64..0.05, 1..20),
                                          reset in -0.02f64..0.009) {
            let cfg = IfConfig::new(0.01, reset, 8).unwrap();
            let x = Tensor::new(&[inputs.len()], inputs).unwrap();
            let mut st = IfState::new(x.len(), &cfg);
            for _ in 0..cfg.t_steps {
                st.step(&x, &cfg).unwrap();
                prop_assert!(st.potentials().iter().all(|&v| v < cfg.v_th));
            }
        }

        #[test]
        fn surrogate_is_symmetric(d in -10.0f64..10.0) {
            let cfg = SpikeConfig::default();
            let up = surrogate_grad_value(cfg.theta + d, &cfg);
            let down = surrogate_grad_value(cfg.theta - d, &cfg);
            prop_assert!((up - down).abs() <= 1e-12 * up);
            prop_assert!(up <= cfg.alpha / 2.0);
        }

        #[test]
        fn sd_unit_is_idempotent(xs in proptest::collection::vec(0.0f64..=1.0, 1..32)) {
            let cfg = SpikeConfig::default();
            let t = Tensor::new(&[xs.len()], xs).unwrap();
            let once = sd_unit(&t, &cfg);
            prop_assert_eq!(sd_unit(&once, &cfg), once);
        }
    }
}
