//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function on perturbed,
//! gradient-free copies of the inputs, so it shares nothing with the
//! backward rules it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{render_sample, CONCEPTS};
use crate::error::Result;
use crate::model::{vocab, ForwardOutput, Hyper, ModelParams, Prompt, PromptPoint, SegModel, IMAGE_TOKENS};
use crate::tensor::Tensor;

/// Knobs for a single finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Perturbation half-width `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Gradients smaller than this are compared absolutely instead of
    /// relatively.
    pub floor: f64,
    /// Upper bound on checked entries per input (`None` checks all).
    pub max_entries: Option<usize>,
    /// Seed used to choose the entries when `max_entries` applies.
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, floor: 1e-3, max_entries: None, seed: 0 }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Compares the backward-pass gradient of `f` at `inputs` with central
/// differences and returns the maximum relative error over the checked
/// entries. `f` must return a single-element tensor.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, opts: CheckOptions) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().with_requires_grad(true)).collect();
    let loss = f(&leaves)?;
    loss.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < leaf.numel() => (0..k).map(|_| rng.random_range(0..leaf.numel())).collect(),
            _ => (0..leaf.numel()).collect(),
        };
        for j in entries {
            let numeric = central_difference(inputs, which, j, opts.step, &f)?;
            worst = worst.max(relative_error(analytic[j], numeric, opts.floor));
        }
    }
    Ok(worst)
}

fn central_difference<F>(inputs: &[Tensor<f64>], which: usize, entry: usize, h: f64, f: &F) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let eval = |delta: f64| -> Result<f64> {
        let shifted: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut data = t.to_vec();
                if i == which {
                    data[entry] += delta;
                }
                Tensor::leaf(data, t.shape().to_vec(), false)
            })
            .collect();
        f(&shifted)?.item()
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

/// Result of checking one differentiable operation over many seeds.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub seeds: usize,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::leaf(data, shape.to_vec(), false)
}

/// Values in `[-2, 2]` kept at least `margin` away from zero (for kinks and
/// divisions).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(margin..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::leaf(data, shape.to_vec(), false)
}

type OpFn = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;

struct OpCase {
    name: &'static str,
    inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
    op: OpFn,
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    op: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'static,
) -> OpCase {
    OpCase { name, inputs: Box::new(inputs), op: Box::new(op) }
}

fn op_cases() -> Vec<OpCase> {
    let u = |shape: &'static [usize]| move |r: &mut ChaCha8Rng| vec![uniform(r, shape, -2.0, 2.0)];
    let u2 = |s1: &'static [usize], s2: &'static [usize]| {
        move |r: &mut ChaCha8Rng| vec![uniform(r, s1, -2.0, 2.0), uniform(r, s2, -2.0, 2.0)]
    };
    vec![
        case("add", u2(&[3, 4], &[3, 4]), |x| x[0].add(&x[1])),
        case("add_broadcast", u2(&[3, 4], &[1]), |x| x[0].add(&x[1])),
        case("sub", u2(&[3, 4], &[3, 4]), |x| x[0].sub(&x[1])),
        case("mul", u2(&[3, 4], &[3, 4]), |x| x[0].mul(&x[1])),
        case("mul_broadcast", u2(&[1], &[5]), |x| x[0].mul(&x[1])),
        case(
            "div",
            |r| vec![uniform(r, &[3, 4], -2.0, 2.0), away_from_zero(r, &[3, 4], 0.5)],
            |x| x[0].div(&x[1]),
        ),
        case("add_scalar", u(&[6]), |x| Ok(x[0].add_scalar(0.7))),
        case("mul_scalar", u(&[6]), |x| Ok(x[0].mul_scalar(-1.3))),
        case("exp", u(&[2, 5]), |x| Ok(x[0].exp())),
        case("ln", |r| vec![uniform(r, &[2, 5], 0.25, 2.0)], |x| Ok(x[0].ln())),
        case("relu", |r| vec![away_from_zero(r, &[2, 5], 0.05)], |x| Ok(x[0].relu())),
        case("sigmoid", u(&[2, 5]), |x| Ok(x[0].sigmoid())),
        case("tanh", u(&[2, 5]), |x| Ok(x[0].tanh())),
        case("sum", u(&[3, 3]), |x| Ok(x[0].sum())),
        case("mean", u(&[3, 3]), |x| Ok(x[0].mean())),
        case("matmul", u2(&[3, 4], &[4, 2]), |x| x[0].matmul(&x[1])),
        case("transpose", u(&[3, 4]), |x| x[0].t()),
        case("reshape", u(&[3, 4]), |x| x[0].reshape(&[2, 6])),
        case("softmax_axis0", u(&[3, 4]), |x| x[0].softmax(0)),
        case("softmax_axis1", u(&[3, 4]), |x| x[0].softmax(1)),
        case("log_softmax", u(&[3, 4]), |x| x[0].log_softmax(1)),
        case("conv2d_stride1", u2(&[2, 5, 4], &[3, 2, 3, 3]), |x| x[0].conv2d(&x[1], 1)),
        case("conv2d_stride2", u2(&[2, 6, 5], &[2, 2, 3, 3]), |x| x[0].conv2d(&x[1], 2)),
        case("channel_bias", u2(&[3, 2, 2], &[3]), |x| x[0].add_channel_bias(&x[1])),
        case("bilinear_upsample", u(&[2, 3, 2]), |x| x[0].bilinear_upsample((7, 5))),
        case("avg_pool", u(&[2, 4, 6]), |x| x[0].avg_pool((2, 3))),
        case("concat", u2(&[2, 3], &[2, 2]), |x| Tensor::concat(&[x[0].clone(), x[1].clone()], 1)),
        case("gather_rows", u(&[4, 3]), |x| x[0].gather_rows(&[2, 0, 2])),
        case("repeat_rows", u(&[1, 3]), |x| x[0].repeat_rows(4)),
        case("sigmoid_matmul", u2(&[3, 4], &[4, 3]), |x| Ok(x[0].matmul(&x[1])?.sigmoid())),
    ]
}

/// Runs the finite-difference check on every differentiable operation.
///
/// Each operation's output is reduced to a scalar through a random linear
/// functional, so the whole vector-Jacobian product is exercised (a plain
/// sum would, e.g., make softmax gradients vanish).
pub fn op_suite(seeds: u64, step: f64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for c in op_cases() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9) ^ 0x5EED);
            let inputs = (c.inputs)(&mut rng);
            let probe_shape = (c.op)(&inputs)?.shape().to_vec();
            let probe = uniform(&mut rng, &probe_shape, -1.0, 1.0);
            let op = &c.op;
            let err = check(
                &inputs,
                |x| op(x)?.mul(&probe).map(|t| t.sum()),
                CheckOptions { step, seed, ..CheckOptions::default() },
            )?;
            worst = worst.max(err);
        }
        out.push(OpCheck { name: c.name.to_string(), max_rel_error: worst, seeds: seeds as usize });
    }
    Ok(out)
}

/// Architecture used for the composed-model check; small enough that
/// central differences over every parameter tensor stay fast.
pub fn model_check_hyper() -> Hyper {
    Hyper { channels: 4, width: 8, heads: 2, vocab: 16, max_len: 9, downsample: 4 }
}

// Random functional of the mask plus the next-token loss, so both pathways
// carry gradient.
fn probe_loss(out: &ForwardOutput<f64>, probe: &Tensor<f64>) -> Result<Tensor<f64>> {
    let targets = vocab::next_token_targets(IMAGE_TOKENS, &out.text_tokens);
    let rows: Vec<usize> = (0..targets.len()).map(|k| k * out.next_token_logits.shape()[1] + targets[k]).collect();
    let logp = out.next_token_logits.log_softmax(1)?;
    let flat = logp.reshape(&[logp.numel(), 1])?.gather_rows(&rows)?;
    out.p.mul(probe)?.sum().sub(&flat.mean())
}

/// Checks the gradient of one full forward pass (16×16 image, one point,
/// random concept) with respect to `entries` random entries of every
/// parameter tensor. Returns the maximum relative error.
pub fn model_check(seed: u64, entries: usize) -> Result<f64> {
    let hyper = model_check_hyper();
    let params = ModelParams::<f64>::init(hyper, seed)?;
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = params.bind(false).into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let probe = Tensor::new((0..256).map(|_| rng.random_range(-1.0..1.0)).collect(), &[16, 16])?;
    let img = render_sample(0, 1, 1, &mut ChaCha8Rng::seed_from_u64(seed), (16, 16))?.0.to_tensor();
    let prompt = Prompt::points(vec![PromptPoint::positive(rng.random_range(0..16), rng.random_range(0..16))]);
    let concept = rng.random_range(0..CONCEPTS.len());
    let f = |xs: &[Tensor<f64>]| {
        let map = names.iter().cloned().zip(xs.iter().cloned()).collect();
        let m = SegModel::from_tensors(hyper, map)?;
        probe_loss(&m.forward(&img, &prompt, concept, 1)?, &probe)
    };
    check(&inputs, f, CheckOptions { step: 1e-6, floor: 1e-3, max_entries: Some(entries), seed })
}
