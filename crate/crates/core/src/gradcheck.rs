//! Central finite-difference gradient checking in 64-bit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{adapter_forward, adapter_layout, AdapterConfig, AdapterParams, HostStack};
use crate::autograd::{Graph, Var, OP_NAMES};
use crate::error::{Result, TensorError};
use crate::model::{BoundModel, ClipModel, ModelConfig};
use crate::nn::layers::{block_forward, mha_forward, AttentionParams, BlockParams};
use crate::nn::registry::{stream_rng, BoundParams, ParamDesc};
use crate::objective::{graph_image_ce_loss, similarity_logits};
use crate::tensor::Tensor;
use crate::text::{canonical_prompts, tokenize, TextEncoderConfig, Vocabulary};
use crate::vision::{Pooling, VisionEncoderConfig};

/// Floor on the relative-error denominator. Gradients that are exactly zero
/// (a key bias under softmax, say) leave only rounding noise of about 1e-11
/// in the central difference, which must not read as a relative error of 1.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Which coordinates of each input are perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coordinates {
    All,
    /// At most `per_input` seeded random coordinates per input.
    Sample { per_input: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic| + |numeric|, DENOMINATOR_FLOOR)`.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, step: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    grad_check_inputs(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(input),
        step,
        Coordinates::All,
    )
}

/// Checks the gradient of a scalar function with respect to every input.
pub fn grad_check_inputs<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    coords: Coordinates,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let first = g.value(out).item()?;
    let grads = g.backward(out)?;

    let second = evaluate(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut rng = match coords {
        Coordinates::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coordinates::All => None,
    };
    for (k, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(var).expect("input leaves require grad");
        let n = input.numel();
        let indices: Vec<usize> = match (coords, rng.as_mut()) {
            (Coordinates::Sample { per_input, .. }, Some(rng)) if per_input < n => {
                let mut v = sample(rng, n, per_input).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut perturbed = inputs.to_vec();
        for i in indices {
            let orig = input.data()[i];
            perturbed[k].data_mut()[i] = orig + step;
            let plus = evaluate(&f, &perturbed)?;
            perturbed[k].data_mut()[i] = orig - step;
            let minus = evaluate(&f, &perturbed)?;
            perturbed[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(DENOMINATOR_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_input = k;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Finite-difference step used by [`run_suite`].
pub const SUITE_STEP: f64 = 1e-5;
/// Largest accepted relative error in [`run_suite`].
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Result of one suite entry.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    /// Primitive op exercised, or `module` for composite checks.
    pub op: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<OpCheck>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.uncovered().is_empty()
    }

    /// Registered ops with no entry in the report.
    pub fn uncovered(&self) -> Vec<&'static str> {
        OP_NAMES
            .iter()
            .copied()
            .filter(|op| !self.checks.iter().any(|c| c.op == *op))
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = stream_rng(seed, &format!("gradcheck/{shape:?}"));
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("non-empty shape")
}

/// `sum(out * w)` with fixed, uneven weights so that no gradient cancels by
/// symmetry (a plain sum through a softmax would have zero gradient).
fn weighted_sum(g: &mut Graph<f64>, out: Var) -> std::result::Result<Var, TensorError> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.1).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let y = g.mul(out, w)?;
    g.sum(y)
}

struct Suite {
    checks: Vec<OpCheck>,
}

impl Suite {
    fn run<F>(&mut self, op: &'static str, name: &str, inputs: Vec<Tensor<f64>>, coords: Coordinates, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, TensorError>,
    {
        let r = grad_check_inputs(
            |g, v| {
                let out = f(g, v)?;
                if g.shape(out).is_empty() {
                    Ok(out)
                } else {
                    weighted_sum(g, out)
                }
            },
            &inputs,
            SUITE_STEP,
            coords,
        )?;
        self.checks.push(OpCheck {
            op,
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            passed: r.max_rel_error < SUITE_TOLERANCE,
            detail: format!(
                "input {} index {}: analytic {:e}, numeric {:e}",
                r.worst_input, r.worst_index, r.analytic, r.numeric
            ),
        });
        Ok(())
    }

    fn op<F>(&mut self, op: &'static str, name: &str, inputs: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, TensorError>,
    {
        self.run(op, name, inputs, Coordinates::All, f)
    }
}

fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed, -1.0, 1.0)
}

fn primitive_checks(s: &mut Suite) -> Result<()> {
    s.op("add", "add", vec![t(&[3, 4], 1), t(&[3, 4], 2)], |g, v| g.add(v[0], v[1]))?;
    s.op("sub", "sub", vec![t(&[3, 4], 3), t(&[3, 4], 4)], |g, v| g.sub(v[0], v[1]))?;
    s.op("mul", "mul", vec![t(&[3, 4], 5), t(&[3, 4], 6)], |g, v| g.mul(v[0], v[1]))?;
    s.op("mul", "mul_shared", vec![t(&[3, 4], 7)], |g, v| g.mul(v[0], v[0]))?;
    s.op("scale", "scale", vec![t(&[3, 4], 8)], |g, v| g.scale(v[0], 1.7))?;
    s.op("add_row", "add_row", vec![t(&[3, 4], 9), t(&[4], 10)], |g, v| g.add_row(v[0], v[1]))?;
    s.op("matmul", "matmul", vec![t(&[3, 4], 11), t(&[4, 5], 12)], |g, v| g.matmul(v[0], v[1]))?;
    s.op("transpose", "transpose", vec![t(&[3, 4], 13)], |g, v| g.transpose(v[0]))?;
    s.op("softmax", "softmax_last_axis", vec![t(&[3, 4], 14)], |g, v| g.softmax(v[0], 1))?;
    s.op("softmax", "softmax_first_axis", vec![t(&[3, 4], 15)], |g, v| g.softmax(v[0], 0))?;
    s.op("softmax", "softmax_middle_axis", vec![t(&[2, 3, 4], 16)], |g, v| g.softmax(v[0], 1))?;
    s.op("causal_softmax", "causal_softmax", vec![t(&[4, 4], 17)], |g, v| g.causal_softmax(v[0]))?;
    s.op(
        "layer_norm",
        "layer_norm",
        vec![t(&[3, 5], 18), random(&[5], 19, 0.5, 1.5), t(&[5], 20)],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    )?;
    s.op("gelu", "gelu", vec![random(&[3, 4], 21, -3.0, 3.0)], |g, v| g.gelu(v[0]))?;
    s.op("map", "map_tanh", vec![t(&[3, 4], 22)], |g, v| {
        g.map(v[0], f64::tanh, |x| 1.0 - x.tanh() * x.tanh())
    })?;
    s.op("concat", "concat_rows", vec![t(&[2, 4], 23), t(&[3, 4], 24)], |g, v| {
        g.concat(&[v[0], v[1]], 0)
    })?;
    s.op("concat", "concat_columns", vec![t(&[3, 2], 25), t(&[3, 4], 26)], |g, v| {
        g.concat(&[v[0], v[1], v[0]], 1)
    })?;
    s.op("slice", "slice", vec![t(&[3, 5], 27)], |g, v| g.slice(v[0], 1, 1, 3))?;
    s.op("reshape", "reshape", vec![t(&[3, 4], 28)], |g, v| g.reshape(v[0], &[2, 6]))?;
    s.op("sum", "sum", vec![t(&[3, 4], 29)], |g, v| g.sum(v[0]))?;
    s.op("sum_axis", "sum_axis", vec![t(&[3, 4], 30)], |g, v| g.sum_axis(v[0], 0))?;
    s.op("sum_axis", "mean_axis", vec![t(&[3, 4], 31)], |g, v| g.mean_axis(v[0], 1))?;
    s.op("patchify", "patchify", vec![t(&[4, 6, 2], 32)], |g, v| g.patchify(v[0], 2))?;
    s.op("gather_rows", "gather_rows", vec![t(&[5, 3], 33)], |g, v| {
        g.gather_rows(v[0], &[0, 3, 3, 1])
    })?;
    s.op("l2_normalize", "l2_normalize", vec![t(&[3, 4], 34)], |g, v| g.l2_normalize(v[0], 1e-12))?;
    s.op("cross_entropy", "cross_entropy", vec![random(&[3, 4], 35, -2.0, 2.0)], |g, v| {
        g.cross_entropy(v[0], &[0, 2, 3])
    })?;
    Ok(())
}

fn descs_inputs(descs: &[ParamDesc], seed: u64) -> Vec<Tensor<f64>> {
    descs
        .iter()
        .enumerate()
        .map(|(i, d)| random(&d.shape, seed + i as u64, -0.5, 0.5))
        .collect()
}

fn bind_descs(descs: &[ParamDesc], vars: &[Var]) -> BoundParams {
    BoundParams::from_vars(descs.iter().map(|d| d.name.as_str()).zip(vars.iter().copied()))
}

fn module_checks(s: &mut Suite) -> Result<()> {
    let width = 8;
    let attn = AttentionParams::layout("attn", width, "attn");
    let n = attn.len();
    for causal in [false, true] {
        let mut inputs = descs_inputs(&attn, 100);
        inputs.push(t(&[5, width], 150));
        let name = if causal { "attention_causal" } else { "attention" };
        s.op("module", name, inputs, |g, v| {
            let b = bind_descs(&attn, &v[..n]);
            let p = AttentionParams::bind(&b, "attn", 2).map_err(to_tensor_error)?;
            mha_forward(g, v[n], &p, causal).map_err(to_tensor_error)
        })?;
    }

    let cfg = AdapterConfig {
        bottleneck_ratio: 4,
        ..AdapterConfig::default()
    };
    let mut block = BlockParams::layout("blk.0", width, "blk.0");
    block.extend(adapter_layout(&[HostStack::new("blk", 1, width)], &cfg)?);
    let n = block.len();
    let mut inputs = descs_inputs(&block, 200);
    inputs.push(t(&[5, width], 250));
    s.op("module", "block_with_adapters", inputs, |g, v| {
        let b = bind_descs(&block, &v[..n]);
        let p = BlockParams::bind(&b, "blk.0", 2).map_err(to_tensor_error)?;
        block_forward(g, v[n], &p, true).map_err(to_tensor_error)
    })?;

    s.op(
        "module",
        "adapter",
        vec![t(&[5, width], 300), t(&[width, 2], 301), t(&[2], 302), t(&[2, width], 303), t(&[width], 304)],
        |g, v| {
            let p = AdapterParams {
                down_w: v[1],
                down_b: v[2],
                up_w: v[3],
                up_b: v[4],
            };
            adapter_forward(g, v[0], &p).map_err(to_tensor_error)
        },
    )?;
    Ok(())
}

fn to_tensor_error(e: crate::error::Error) -> TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => TensorError::invalid("module", other.to_string()),
    }
}

/// The end-to-end check model: 4 views of 16 px with 8 px patches, width
/// 16, two vision blocks (one local, one global) and two text blocks.
pub fn micro_config(vocab_size: usize) -> ModelConfig {
    let mut cfg = ModelConfig::desk(vocab_size);
    cfg.vision = VisionEncoderConfig {
        image_size: 16,
        channels: 3,
        patch_size: 8,
        width: 16,
        heads: 2,
        depth: 2,
        local_depth: 1,
        views: 4,
        embed_dim: 8,
        pooling: Pooling::MeanClassTokens,
        view_embedding: true,
    };
    cfg.text = TextEncoderConfig {
        vocab_size,
        context_length: 32,
        width: 16,
        heads: 2,
        depth: 2,
        embed_dim: 8,
    };
    cfg.adapters.bottleneck_ratio = 4;
    cfg.adapters.zero_init_up = false;
    cfg
}

fn micro_model_check(s: &mut Suite) -> Result<()> {
    let prompts = canonical_prompts();
    let vocab = Vocabulary::build(&prompts.all());
    let cfg = micro_config(vocab.len());
    let model = ClipModel::<f64>::new(cfg.clone(), vocab.clone(), 7)?;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    // Perturb the small initial weights so every gradient is well above the
    // finite-difference noise floor.
    let mut inputs: Vec<Tensor<f64>> = model
        .params
        .iter()
        .enumerate()
        .map(|(i, (_, p))| {
            let noise = random(p.tensor.shape(), 1000 + i as u64, -0.3, 0.3);
            let data = p.tensor.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            Tensor::new(p.tensor.shape().to_vec(), data).expect("same shape")
        })
        .collect();
    let n = inputs.len();
    let cases = 2;
    for k in 0..cases * cfg.vision.views {
        inputs.push(random(&[16, 16, 3], 5000 + k as u64, -1.0, 1.0));
    }
    let pair = [
        tokenize(&prompts.zeroshot_negative, &vocab, cfg.text.context_length)?,
        tokenize(&prompts.zeroshot_positive, &vocab, cfg.text.context_length)?,
    ];
    s.run(
        "module",
        "micro_model",
        inputs,
        Coordinates::Sample { per_input: 3, seed: 11 },
        |g, v| {
            let bp = BoundParams::from_vars(names.iter().map(String::as_str).zip(v[..n].iter().copied()));
            let run = |g: &mut Graph<f64>| -> Result<Var> {
                let b = BoundModel {
                    vision: crate::vision::VisionParams::bind(&bp, &cfg.vision)?,
                    text: crate::text::TextParams::bind(&bp, &cfg.text)?,
                    params: bp.clone(),
                };
                let texts = b.encode_class_texts(g, &pair)?;
                let views = cfg.vision.views;
                let mut rows = Vec::new();
                for c in 0..cases {
                    rows.push(b.encode_case(g, &cfg, &v[n + c * views..n + (c + 1) * views])?);
                }
                let images = g.concat(&rows, 0)?;
                let logits = similarity_logits(g, images, texts, &cfg.head)?;
                graph_image_ce_loss(g, logits, &[0, 1])
            };
            run(g).map_err(to_tensor_error)
        },
    )
}

/// Runs the 64-bit finite-difference suite over every differentiable op,
/// the attention, block and adapter modules, and the micro model.
pub fn run_suite() -> Result<SuiteReport> {
    let mut s = Suite { checks: Vec::new() };
    primitive_checks(&mut s)?;
    module_checks(&mut s)?;
    micro_model_check(&mut s)?;
    Ok(SuiteReport {
        checks: s.checks,
        tolerance: SUITE_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_op_and_passes() {
        let r = run_suite().unwrap();
        assert!(r.uncovered().is_empty(), "{:?}", r.uncovered());
        for c in &r.checks {
            assert!(c.passed, "{} max rel error {:e}: {:?}", c.name, c.max_rel_error, c);
        }
    }
}
