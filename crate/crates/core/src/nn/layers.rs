//! Transformer building blocks on top of the graph.

use crate::adapters::{adapter_forward, AdapterParams};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result, TensorError};
use crate::nn::registry::{BoundParams, Init, ParamDesc, INIT_STD};
use crate::tensor::Real;

/// Layer-norm epsilon used by every block.
pub const LN_EPS: f64 = 1e-5;

/// MLP hidden width is this multiple of the block width.
pub const MLP_RATIO: usize = 4;

fn weight(name: String, shape: impl Into<Vec<usize>>, key: String) -> ParamDesc {
    ParamDesc::new(name, shape, Init::TruncNormal { std: INIT_STD }).with_init_key(key)
}

fn zeros(name: String, shape: impl Into<Vec<usize>>, key: String) -> ParamDesc {
    ParamDesc::new(name, shape, Init::Zeros).with_init_key(key)
}

fn ones(name: String, shape: impl Into<Vec<usize>>, key: String) -> ParamDesc {
    ParamDesc::new(name, shape, Init::Ones).with_init_key(key)
}

/// `x W + b` for `x: [T, in]`, `W: [in, out]`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(match b {
        Some(b) => g.add_row(y, b)?,
        None => y,
    })
}

/// Splits an `H x W x C` image into `P x P` patches and maps each flattened
/// patch linearly to width D: output `[(H/P)*(W/P), D]`.
pub fn patch_embed<T: Real>(
    g: &mut Graph<T>,
    image: Var,
    patch_size: usize,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let patches = g.patchify(image, patch_size)?;
    linear(g, patches, weight, bias)
}

/// Prepends the class token and adds positional embeddings:
/// `[L, D]` patches to a `[(1+L), D]` sequence.
pub fn assemble_sequence<T: Real>(
    g: &mut Graph<T>,
    patches: Var,
    class_token: Var,
    pos_embed: Var,
) -> Result<Var> {
    let d = *g.shape(class_token).last().ok_or_else(|| {
        Error::Tensor(TensorError::invalid("assemble_sequence", "class token has rank 0"))
    })?;
    let cls = if g.shape(class_token) == [1, d] {
        class_token
    } else {
        g.reshape(class_token, &[1, d])?
    };
    let seq = g.concat(&[cls, patches], 0)?;
    Ok(g.add(seq, pos_embed)?)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNormParams {
    pub fn bind(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: p.get(&format!("{prefix}.gamma"))?,
            beta: p.get(&format!("{prefix}.beta"))?,
        })
    }

    pub fn layout(prefix: &str, width: usize, key: &str) -> Vec<ParamDesc> {
        vec![
            ones(format!("{prefix}.gamma"), [width], format!("{key}.gamma")),
            zeros(format!("{prefix}.beta"), [width], format!("{key}.beta")),
        ]
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, self.gamma, self.beta, LN_EPS)?)
    }
}

/// Query/key/value/output projections (`D x D` each, with biases).
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub o_w: Var,
    pub o_b: Var,
    pub heads: usize,
}

const PROJECTIONS: [&str; 4] = ["q_proj", "k_proj", "v_proj", "out_proj"];

impl AttentionParams {
    pub fn bind(p: &BoundParams, prefix: &str, heads: usize) -> Result<Self> {
        let w = |n: &str| p.get(&format!("{prefix}.{n}.weight"));
        let b = |n: &str| p.get(&format!("{prefix}.{n}.bias"));
        Ok(AttentionParams {
            q_w: w("q_proj")?,
            q_b: b("q_proj")?,
            k_w: w("k_proj")?,
            k_b: b("k_proj")?,
            v_w: w("v_proj")?,
            v_b: b("v_proj")?,
            o_w: w("out_proj")?,
            o_b: b("out_proj")?,
            heads,
        })
    }

    pub fn layout(prefix: &str, width: usize, key: &str) -> Vec<ParamDesc> {
        PROJECTIONS
            .iter()
            .flat_map(|n| {
                [
                    weight(format!("{prefix}.{n}.weight"), [width, width], format!("{key}.{n}.weight")),
                    zeros(format!("{prefix}.{n}.bias"), [width], format!("{key}.{n}.bias")),
                ]
            })
            .collect()
    }
}

/// Multi-head self-attention over `x: [T, D]`; also returns the per-head
/// attention weight matrices `[T, T]`.
pub fn mha_forward_with_weights<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    causal: bool,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(x)[1];
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::Tensor(TensorError::invalid(
            "mha_forward",
            format!("width {d} is not divisible by {} heads", p.heads),
        )));
    }
    let head_dim = d / p.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = linear(g, x, p.q_w, Some(p.q_b))?;
    let k = linear(g, x, p.k_w, Some(p.k_b))?;
    let v = linear(g, x, p.v_w, Some(p.v_b))?;
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 1, h * head_dim, head_dim)?,
                g.slice(k, 1, h * head_dim, head_dim)?,
                g.slice(v, 1, h * head_dim, head_dim)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = if causal {
            g.causal_softmax(scores)?
        } else {
            g.softmax(scores, 1)?
        };
        weights.push(attn);
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    let out = linear(g, merged, p.o_w, Some(p.o_b))?;
    Ok((out, weights))
}

pub fn mha_forward<T: Real>(g: &mut Graph<T>, x: Var, p: &AttentionParams, causal: bool) -> Result<Var> {
    Ok(mha_forward_with_weights(g, x, p, causal)?.0)
}

/// Expand (`D -> 4D`) and contract (`4D -> D`) layers.
#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl MlpParams {
    pub fn bind(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(MlpParams {
            fc1_w: p.get(&format!("{prefix}.fc1.weight"))?,
            fc1_b: p.get(&format!("{prefix}.fc1.bias"))?,
            fc2_w: p.get(&format!("{prefix}.fc2.weight"))?,
            fc2_b: p.get(&format!("{prefix}.fc2.bias"))?,
        })
    }

    pub fn layout(prefix: &str, width: usize, key: &str) -> Vec<ParamDesc> {
        let hidden = MLP_RATIO * width;
        vec![
            weight(format!("{prefix}.fc1.weight"), [width, hidden], format!("{key}.fc1.weight")),
            zeros(format!("{prefix}.fc1.bias"), [hidden], format!("{key}.fc1.bias")),
            weight(format!("{prefix}.fc2.weight"), [hidden, width], format!("{key}.fc2.weight")),
            zeros(format!("{prefix}.fc2.bias"), [width], format!("{key}.fc2.bias")),
        ]
    }
}

/// `contract(gelu(expand(x)))`.
pub fn mlp_forward<T: Real>(g: &mut Graph<T>, x: Var, p: &MlpParams) -> Result<Var> {
    let h = linear(g, x, p.fc1_w, Some(p.fc1_b))?;
    let h = g.gelu(h)?;
    linear(g, h, p.fc2_w, Some(p.fc2_b))
}

/// One pre-norm transformer block with optional adapters after the MSA and
/// MLP residual sums.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
    pub adapter1: Option<AdapterParams>,
    pub adapter2: Option<AdapterParams>,
}

impl BlockParams {
    /// Binds the block at `prefix`; adapters are picked up when present.
    pub fn bind(p: &BoundParams, prefix: &str, heads: usize) -> Result<Self> {
        Ok(BlockParams {
            ln1: LayerNormParams::bind(p, &format!("{prefix}.ln1"))?,
            attn: AttentionParams::bind(p, &format!("{prefix}.msa"), heads)?,
            ln2: LayerNormParams::bind(p, &format!("{prefix}.ln2"))?,
            mlp: MlpParams::bind(p, &format!("{prefix}.mlp"))?,
            adapter1: AdapterParams::bind_optional(p, &format!("{prefix}.adapter1"))?,
            adapter2: AdapterParams::bind_optional(p, &format!("{prefix}.adapter2"))?,
        })
    }

    /// Descriptors for the block body (no adapters). `key` names the random
    /// stream family so equal-depth blocks initialize identically.
    pub fn layout(prefix: &str, width: usize, key: &str) -> Vec<ParamDesc> {
        let mut v = LayerNormParams::layout(&format!("{prefix}.ln1"), width, &format!("{key}.ln1"));
        v.extend(AttentionParams::layout(&format!("{prefix}.msa"), width, &format!("{key}.msa")));
        v.extend(LayerNormParams::layout(&format!("{prefix}.ln2"), width, &format!("{key}.ln2")));
        v.extend(MlpParams::layout(&format!("{prefix}.mlp"), width, &format!("{key}.mlp")));
        v
    }
}

/// `z~ = Adap1(MSA(LN(z)) + z)`, `z' = Adap2(MLP(LN(z~)) + z~)`; a missing
/// adapter is the identity.
pub fn block_forward<T: Real>(g: &mut Graph<T>, x: Var, p: &BlockParams, causal: bool) -> Result<Var> {
    let h = p.ln1.forward(g, x)?;
    let h = mha_forward(g, h, &p.attn, causal)?;
    let mut z = g.add(h, x)?;
    if let Some(a) = &p.adapter1 {
        z = adapter_forward(g, z, a)?;
    }
    let h = p.ln2.forward(g, z)?;
    let h = mlp_forward(g, h, &p.mlp)?;
    let mut out = g.add(h, z)?;
    if let Some(a) = &p.adapter2 {
        out = adapter_forward(g, out, a)?;
    }
    Ok(out)
}
