//! Finite-difference checks for every differentiable tape op, a full
//! prompted forward pass, and the surrogate-gradient path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{forward_tape, patch_embed_tape, BackboneCheckpoint, BackboneConfig, BackboneVars, Head};
use crate::error::Result;
use crate::spiking::{arctan_surrogate, PromptTransform, SpikeConfig, SpikePath};
use crate::tensor::check::{partial, relative_error};
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const SURROGATE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub samples: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.samples > 0
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<22} samples={:<4} max_rel_err={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.samples,
            self.max_rel_error,
            self.tolerance
        )
    }
}

type Build = dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>;

/// Contracts the op output with a fixed random tensor to get a scalar, then
/// compares tape gradients against central differences for every input.
fn check_op(name: &str, inputs: &[Tensor], seed: u64, max_per_input: usize, build: &Build) -> Result<CheckResult> {
    let probe = |tape: &mut Tape<'_>, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        let shape = tape.shape(out).to_vec();
        let r = tape.constant(Tensor::randn(&shape, seed ^ 0xabcd, 1.0)?);
        let prod = tape.mul(out, r)?;
        tape.sum(prod)
    };
    let owned: Vec<Tensor> = inputs.iter().map(|t| t.detached().with_grad()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = owned.iter().map(|t| tape.param(t)).collect();
    let loss = probe(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut samples) = (0.0f64, 0usize);
    for (which, input) in inputs.iter().enumerate() {
        let f = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, orig)| {
                    let data = if j == which { x.to_vec() } else { orig.data().to_vec() };
                    t.constant(Tensor::new(orig.shape(), data).expect("same shape"))
                })
                .collect();
            let l = probe(&mut t, &vs).expect("probe rebuild");
            t.value(l).data()[0]
        };
        let n = input.len();
        let picks: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            (0..max_per_input).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let numeric = partial(&f, input.data(), i, FD_STEP);
            worst = worst.max(relative_error(analytic[which][i], numeric));
            samples += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        samples,
        max_rel_error: worst,
        tolerance: FD_TOLERANCE,
    })
}

fn rand(shape: &[usize], seed: u64) -> Result<Tensor> {
    Tensor::randn(shape, seed, 1.0)
}

/// One check per differentiable tape operation.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let s = seed;
    let a34 = rand(&[3, 4], s + 1)?;
    let b34 = rand(&[3, 4], s + 2)?;
    let b45 = rand(&[4, 5], s + 3)?;
    let b54 = rand(&[5, 4], s + 4)?;
    let r4 = rand(&[1, 4], s + 5)?;
    let a24 = rand(&[2, 4], s + 6)?;
    let a32 = rand(&[3, 2], s + 7)?;
    let k = 16;
    let mut out = Vec::new();
    out.push(check_op("matmul", &[a34.clone(), b45], s, k, &|t, v| t.matmul(v[0], v[1]))?);
    out.push(check_op("matmul_nt", &[a34.clone(), b54], s, k, &|t, v| t.matmul_nt(v[0], v[1]))?);
    out.push(check_op("add", &[a34.clone(), b34.clone()], s, k, &|t, v| t.add(v[0], v[1]))?);
    out.push(check_op("sub", &[a34.clone(), b34.clone()], s, k, &|t, v| t.sub(v[0], v[1]))?);
    out.push(check_op("mul", &[a34.clone(), b34.clone()], s, k, &|t, v| t.mul(v[0], v[1]))?);
    out.push(check_op("add_row", &[a34.clone(), r4.clone()], s, k, &|t, v| t.add_row(v[0], v[1]))?);
    out.push(check_op("mul_row", &[a34.clone(), r4.clone()], s, k, &|t, v| t.mul_row(v[0], v[1]))?);
    out.push(check_op("scale", &[a34.clone()], s, k, &|t, v| t.scale(v[0], -1.7))?);
    out.push(check_op("concat_rows", &[a34.clone(), a24.clone()], s, k, &|t, v| {
        t.concat_rows(&[v[0], v[1]])
    })?);
    out.push(check_op("slice_rows", &[a34.clone()], s, k, &|t, v| t.slice_rows(v[0], 1, 2))?);
    out.push(check_op("concat_cols", &[a34.clone(), a32], s, k, &|t, v| t.concat_cols(&[v[0], v[1]]))?);
    out.push(check_op("slice_cols", &[a34.clone()], s, k, &|t, v| t.slice_cols(v[0], 1, 2))?);
    out.push(check_op("transpose", &[a34.clone()], s, k, &|t, v| t.transpose(v[0]))?);
    out.push(check_op("softmax_rows", &[a34.clone()], s, k, &|t, v| t.softmax_rows(v[0]))?);
    out.push(check_op("layernorm_rows", &[a34.clone()], s, k, &|t, v| t.layernorm_rows(v[0], 1e-6))?);
    out.push(check_op("gelu", &[a34.clone()], s, k, &|t, v| t.gelu(v[0]))?);
    out.push(check_op("mean_rows", &[a34.clone()], s, k, &|t, v| t.mean_rows(v[0]))?);
    out.push(check_op("sum", &[a34.clone()], s, k, &|t, v| t.sum(v[0]))?);
    out.push(check_op("cross_entropy", &[a34], s, k, &|t, v| t.cross_entropy(v[0], &[2, 0, 3]))?);
    Ok(out)
}

/// Prompt and head gradients of a 2-layer prompted forward pass.
pub fn prompted_forward_check(seed: u64, samples: usize) -> Result<CheckResult> {
    let cfg = BackboneConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        layer_count: 2,
        head_count: 2,
        mlp_ratio: 2,
        prompt_len: 3,
        ..Default::default()
    };
    let ckpt = BackboneCheckpoint::init_random(cfg.clone(), seed)?;
    let image = Tensor::new(
        &[1, 16, 16],
        Tensor::randn(&[256], seed + 1, 0.3)?.data().iter().map(|v| (v + 0.5).clamp(0.0, 1.0)).collect(),
    )?;
    let prompts: Vec<Tensor> = (0..2)
        .map(|i| Tensor::randn(&[3, 16], seed + 10 + i, 0.5).map(Tensor::with_grad))
        .collect::<Result<_>>()?;
    let head = Head {
        weight: Tensor::randn(&[16, 4], seed + 20, 0.5)?.with_grad(),
        bias: Tensor::randn(&[1, 4], seed + 21, 0.5)?.with_grad(),
    };
    let label = 1;
    let loss_of = |ps: &[Tensor], h: &Head| -> f64 {
        let mut t = Tape::new();
        let vars = BackboneVars::register(&mut t, &ckpt);
        let e = patch_embed_tape(&mut t, &vars, &image, &cfg).expect("embed");
        let hw = t.param(&h.weight);
        let hb = t.param(&h.bias);
        let pv: Vec<Var> = ps.iter().map(|p| t.param(p)).collect();
        let fv = forward_tape(&mut t, &vars, (hw, hb), e, &pv, &cfg).expect("forward");
        let l = t.cross_entropy(fv.logits, &[label]).expect("loss");
        t.value(l).data()[0]
    };

    let mut tape = Tape::new();
    let vars = BackboneVars::register(&mut tape, &ckpt);
    let e = patch_embed_tape(&mut tape, &vars, &image, &cfg)?;
    let hw = tape.param(&head.weight);
    let hb = tape.param(&head.bias);
    let pv: Vec<Var> = prompts.iter().map(|p| tape.param(p)).collect();
    let fv = forward_tape(&mut tape, &vars, (hw, hb), e, &pv, &cfg)?;
    let loss = tape.cross_entropy(fv.logits, &[label])?;
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for n in 0..samples {
        // Alternate between the two prompts and the head weight.
        let (analytic, numeric) = match n % 3 {
            which @ (0 | 1) => {
                let i = rng.random_range(0..prompts[which].len());
                let f = |x: &[f64]| {
                    let mut ps = prompts.clone();
                    ps[which] = Tensor::new(&[3, 16], x.to_vec()).expect("shape");
                    loss_of(&ps, &head)
                };
                (tape.grad(pv[which]).expect("prompt grad")[i], partial(&f, prompts[which].data(), i, FD_STEP))
            }
            _ => {
                let i = rng.random_range(0..head.weight.len());
                let f = |x: &[f64]| {
                    let h = Head {
                        weight: Tensor::new(&[16, 4], x.to_vec()).expect("shape"),
                        bias: head.bias.clone(),
                    };
                    loss_of(&prompts, &h)
                };
                (tape.grad(hw).expect("head grad")[i], partial(&f, head.weight.data(), i, FD_STEP))
            }
        };
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(CheckResult {
        name: "prompted_forward_2l".into(),
        samples,
        max_rel_error: worst,
        tolerance: FD_TOLERANCE,
    })
}

/// Tape gradient through the discretization unit against the closed-form
/// arctan surrogate at `points` random offsets.
pub fn surrogate_check(seed: u64, points: usize) -> Result<CheckResult> {
    let cfg = SpikeConfig::default();
    let path = SpikePath {
        sd_cfg: cfg,
        ..SpikePath::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..points).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(&[points], xs.clone())?.with_grad();
    let mut tape = Tape::new();
    let v = tape.param(&x);
    let y = path.apply_tape(&mut tape, v, PromptTransform::SpikeOnly)?;
    tape.backward_from(&[(y, vec![1.0; points])])?;
    let g = tape.grad(v).expect("gradient");
    let worst = xs
        .iter()
        .zip(g)
        .map(|(&xi, &gi)| relative_error(gi, arctan_surrogate(xi - cfg.theta, cfg.alpha)))
        .fold(0.0, f64::max);
    Ok(CheckResult {
        name: "sd_surrogate".into(),
        samples: points,
        max_rel_error: worst,
        tolerance: SURROGATE_TOLERANCE,
    })
}

/// The full suite run by the `gradcheck` command.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(seed)?;
    out.push(prompted_forward_check(seed, 24)?);
    out.push(surrogate_check(seed, 100)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run_suite(3).unwrap();
        for r in &results {
            assert!(r.passed(), "{}", r.line());
        }
        assert_eq!(results.len(), 21);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let x = Tensor::randn(&[2, 2], 1, 1.0).unwrap();
        // Scaling the probe output after the fact breaks the analytic/numeric match.
        let r = check_op("broken", &[x], 1, 4, &|t, v| {
            let y = t.scale(v[0], 2.0)?;
            let c = t.value(y).detached();
            let k = t.constant(c);
            t.add(y, k)
        })
        .unwrap();
        assert!(!r.passed());
    }
}
