//! Multi-view image encoder.
//!
//! Every view is patch-embedded and run through `N_l` local blocks whose
//! weights are shared across views. The per-view sequences are then
//! concatenated along the token axis and the fused sequence passes through
//! `N_g` global blocks, where attention spans all views. The `V` class tokens
//! of the final sequence are pooled and projected into the shared space.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::HostStack;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result, TensorError};
use crate::nn::layers::{assemble_sequence, block_forward, patch_embed, BlockParams};
use crate::nn::registry::{BoundParams, Init, ParamDesc, ParamLayout, INIT_STD};
use crate::tensor::Real;

/// Mammographic views in fusion order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "LCC")]
    Lcc,
    #[serde(rename = "RCC")]
    Rcc,
    #[serde(rename = "LMLO")]
    Lmlo,
    #[serde(rename = "RMLO")]
    Rmlo,
}

impl View {
    pub const ALL: [View; 4] = [View::Lcc, View::Rcc, View::Lmlo, View::Rmlo];

    /// Views used for a given view count: all four, the CC pair, or LCC alone.
    pub fn order(count: usize) -> Result<&'static [View]> {
        match count {
            4 => Ok(&View::ALL),
            2 => Ok(&View::ALL[..2]),
            1 => Ok(&View::ALL[..1]),
            n => Err(Error::ViewCount {
                expected: 4,
                found: n,
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Lcc => "LCC",
            View::Rcc => "RCC",
            View::Lmlo => "LMLO",
            View::Rmlo => "RMLO",
        }
    }

    pub fn is_right(self) -> bool {
        matches!(self, View::Rcc | View::Rmlo)
    }

    pub fn parse(s: &str) -> Option<View> {
        View::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    MeanClassTokens,
    FirstClassToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionEncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    /// Total depth `N_l + N_g`.
    pub depth: usize,
    pub local_depth: usize,
    pub views: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub view_embedding: bool,
}

impl VisionEncoderConfig {
    /// Small configuration for experiments on a CPU.
    pub fn desk() -> Self {
        VisionEncoderConfig {
            image_size: 64,
            channels: 3,
            patch_size: 8,
            width: 64,
            heads: 4,
            depth: 4,
            local_depth: 2,
            views: 4,
            embed_dim: 32,
            pooling: Pooling::MeanClassTokens,
            view_embedding: false,
        }
    }

    pub fn global_depth(&self) -> usize {
        self.depth - self.local_depth.min(self.depth)
    }

    /// Patches per view, `L = (H/P)^2`.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size.max(1);
        g * g
    }

    pub fn view_len(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn fused_len(&self) -> usize {
        self.views * self.view_len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("vision: {msg}")));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return bad("image_size, patch_size and channels must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.local_depth > self.depth {
            return bad(format!(
                "local_depth {} exceeds depth {}",
                self.local_depth, self.depth
            ));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        View::order(self.views)?;
        Ok(())
    }

    /// Parameter descriptors. Blocks are keyed by overall depth so moving the
    /// local/global split does not change any initial value.
    pub fn layout(&self) -> ParamLayout {
        let d = self.width;
        let p = self.patch_size;
        let mut l = ParamLayout::new();
        l.push(ParamDesc::new(
            "vision.patch_embed.weight",
            [p * p * self.channels, d],
            Init::TruncNormal { std: INIT_STD },
        ));
        l.push(ParamDesc::new("vision.patch_embed.bias", [d], Init::Zeros));
        l.push(ParamDesc::new("vision.class_token", [d], Init::TruncNormal { std: INIT_STD }));
        l.push(ParamDesc::new(
            "vision.pos_embed",
            [self.view_len(), d],
            Init::TruncNormal { std: INIT_STD },
        ));
        if self.view_embedding {
            l.push(ParamDesc::new(
                "vision.view_embed",
                [self.views, d],
                Init::TruncNormal { std: INIT_STD },
            ));
        }
        for n in 0..self.depth {
            let prefix = if n < self.local_depth {
                format!("vision.local.{n}")
            } else {
                format!("vision.global.{}", n - self.local_depth)
            };
            l.extend(BlockParams::layout(&prefix, d, &format!("vision.block.{n}")));
        }
        l.push(ParamDesc::new(
            "vision.proj.weight",
            [d, self.embed_dim],
            Init::TruncNormal { std: INIT_STD },
        ));
        l
    }

    pub fn host_stacks(&self) -> Vec<HostStack> {
        vec![
            HostStack::new("vision.local", self.local_depth, self.width).with_key("vision.block", 0),
            HostStack::new("vision.global", self.global_depth(), self.width)
                .with_key("vision.block", self.local_depth),
        ]
    }
}

/// Vision parameters bound into a graph.
#[derive(Clone, Debug)]
pub struct VisionParams {
    pub patch_w: Var,
    pub patch_b: Var,
    pub class_token: Var,
    pub pos_embed: Var,
    pub view_embed: Option<Var>,
    pub local: Vec<BlockParams>,
    pub global: Vec<BlockParams>,
    pub proj: Var,
}

impl VisionParams {
    pub fn bind(p: &BoundParams, cfg: &VisionEncoderConfig) -> Result<Self> {
        let local = (0..cfg.local_depth)
            .map(|n| BlockParams::bind(p, &format!("vision.local.{n}"), cfg.heads))
            .collect::<Result<_>>()?;
        let global = (0..cfg.global_depth())
            .map(|n| BlockParams::bind(p, &format!("vision.global.{n}"), cfg.heads))
            .collect::<Result<_>>()?;
        Ok(VisionParams {
            patch_w: p.get("vision.patch_embed.weight")?,
            patch_b: p.get("vision.patch_embed.bias")?,
            class_token: p.get("vision.class_token")?,
            pos_embed: p.get("vision.pos_embed")?,
            view_embed: if cfg.view_embedding {
                Some(p.get("vision.view_embed")?)
            } else {
                None
            },
            local,
            global,
            proj: p.get("vision.proj.weight")?,
        })
    }
}

/// Tokens of all views concatenated along the token axis.
#[derive(Clone, Debug)]
pub struct FusedSequence {
    pub tokens: Var,
    /// Row index of each view's class token.
    pub offsets: Vec<usize>,
    pub view_len: usize,
}

/// Patch embedding, class token and positions for one view: `[(1+L), D]`.
pub fn embed_view<T: Real>(
    g: &mut Graph<T>,
    image: Var,
    params: &VisionParams,
    cfg: &VisionEncoderConfig,
    view_index: usize,
) -> Result<Var> {
    let expect = [cfg.image_size, cfg.image_size, cfg.channels];
    if g.shape(image) != expect {
        return Err(Error::ImageSize {
            expected: expect.to_vec(),
            found: g.shape(image).to_vec(),
        });
    }
    let patches = patch_embed(g, image, cfg.patch_size, params.patch_w, Some(params.patch_b))?;
    let mut seq = assemble_sequence(g, patches, params.class_token, params.pos_embed)?;
    if let Some(table) = params.view_embed {
        let row = g.slice(table, 0, view_index, 1)?;
        let row = g.reshape(row, &[cfg.width])?;
        seq = g.add_row(seq, row)?;
    }
    Ok(seq)
}

/// Runs the shared local blocks over every view independently.
pub fn local_stack_forward<T: Real>(
    g: &mut Graph<T>,
    views: &[Var],
    blocks: &[BlockParams],
) -> Result<Vec<Var>> {
    check_same_shapes(g, views, "local_stack_forward")?;
    views
        .iter()
        .map(|&v| blocks.iter().try_fold(v, |x, b| block_forward(g, x, b, false)))
        .collect()
}

fn check_same_shapes<T: Real>(g: &Graph<T>, seqs: &[Var], op: &'static str) -> Result<()> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Tensor(TensorError::invalid(op, "no views")))?;
    for &s in &seqs[1..] {
        if g.shape(s) != g.shape(*first) {
            return Err(Error::Tensor(TensorError::ShapeMismatch {
                op,
                lhs: g.shape(*first).to_vec(),
                rhs: g.shape(s).to_vec(),
            }));
        }
    }
    Ok(())
}

/// Concatenates per-view sequences in the given (fusion) order.
pub fn fuse_tokens<T: Real>(g: &mut Graph<T>, seqs: &[Var]) -> Result<FusedSequence> {
    check_same_shapes(g, seqs, "fuse_tokens")?;
    let view_len = g.shape(seqs[0])[0];
    let tokens = if seqs.len() == 1 {
        seqs[0]
    } else {
        g.concat(seqs, 0)?
    };
    Ok(FusedSequence {
        tokens,
        offsets: (0..seqs.len()).map(|k| k * view_len).collect(),
        view_len,
    })
}

/// Inverse of [`fuse_tokens`].
pub fn split_fused<T: Real>(g: &mut Graph<T>, fused: &FusedSequence) -> Result<Vec<Var>> {
    fused
        .offsets
        .iter()
        .map(|&o| Ok(g.slice(fused.tokens, 0, o, fused.view_len)?))
        .collect()
}

/// Runs the global blocks over the whole fused sequence.
pub fn global_stack_forward<T: Real>(
    g: &mut Graph<T>,
    fused: FusedSequence,
    blocks: &[BlockParams],
) -> Result<FusedSequence> {
    let tokens = blocks
        .iter()
        .try_fold(fused.tokens, |x, b| block_forward(g, x, b, false))?;
    Ok(FusedSequence { tokens, ..fused })
}

/// Pools the class tokens and projects to the embedding width: `[1, D_e]`.
pub fn pool_and_project<T: Real>(
    g: &mut Graph<T>,
    fused: &FusedSequence,
    proj: Var,
    pooling: Pooling,
) -> Result<Var> {
    let pooled = match pooling {
        Pooling::FirstClassToken => g.slice(fused.tokens, 0, fused.offsets[0], 1)?,
        Pooling::MeanClassTokens => {
            let cls = g.gather_rows(fused.tokens, &fused.offsets)?;
            if fused.offsets.len() == 1 {
                cls
            } else {
                let width = g.shape(cls)[1];
                let m = g.mean_axis(cls, 0)?;
                g.reshape(m, &[1, width])?
            }
        }
    };
    Ok(g.matmul(pooled, proj)?)
}

/// Full encoder for one case. `images` are `H x W x C` in fusion order.
/// Returns the case embedding as a `[1, D_e]` row.
pub fn encode_views<T: Real>(
    g: &mut Graph<T>,
    images: &[Var],
    params: &VisionParams,
    cfg: &VisionEncoderConfig,
) -> Result<Var> {
    if images.len() != cfg.views {
        return Err(Error::ViewCount {
            expected: cfg.views,
            found: images.len(),
        });
    }
    let seqs = images
        .iter()
        .enumerate()
        .map(|(k, &img)| embed_view(g, img, params, cfg, k))
        .collect::<Result<Vec<_>>>()?;
    let seqs = local_stack_forward(g, &seqs, &params.local)?;
    let fused = fuse_tokens(g, &seqs)?;
    let fused = global_stack_forward(g, fused, &params.global)?;
    pool_and_project(g, &fused, params.proj, cfg.pooling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::registry::GradMode;
    use crate::tensor::Tensor;

    #[test]
    fn fused_offsets_for_four_views() {
        let mut g = Graph::<f64>::new();
        let seqs: Vec<Var> = (0..4)
            .map(|k| g.constant(Tensor::full([50, 8], k as f64).unwrap()))
            .collect();
        let fused = fuse_tokens(&mut g, &seqs).unwrap();
        assert_eq!(g.shape(fused.tokens), [200, 8]);
        assert_eq!(fused.offsets, [0, 50, 100, 150]);
        let back = split_fused(&mut g, &fused).unwrap();
        for (a, b) in back.iter().zip(&seqs) {
            assert_eq!(g.value(*a), g.value(*b));
        }
    }

    #[test]
    fn two_views_fuse_to_two_plus_two_l() {
        let mut g = Graph::<f32>::new();
        let seqs: Vec<Var> = (0..2).map(|_| g.constant(Tensor::zeros([17, 4]).unwrap())).collect();
        let fused = fuse_tokens(&mut g, &seqs).unwrap();
        assert_eq!(g.shape(fused.tokens), [2 + 2 * 16, 4]);
    }

    #[test]
    fn fuse_rejects_mismatched_views() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([5, 4]).unwrap());
        let b = g.constant(Tensor::zeros([6, 4]).unwrap());
        assert!(fuse_tokens(&mut g, &[a, b]).is_err());
    }

    #[test]
    fn pool_and_project_matches_hand_chain() {
        let mut g = Graph::<f64>::new();
        let tokens = Tensor::<f64>::from_fn([3 * 4, 8], |i| ((i * 7919) % 23) as f64 / 23.0 - 0.5).unwrap();
        let proj = Tensor::<f64>::from_fn([8, 4], |i| ((i * 31) % 13) as f64 / 13.0 - 0.4).unwrap();
        let tv = g.constant(tokens.clone());
        let pv = g.constant(proj.clone());
        let fused = FusedSequence {
            tokens: tv,
            offsets: vec![0, 3, 6, 9],
            view_len: 3,
        };
        let out = pool_and_project(&mut g, &fused, pv, Pooling::MeanClassTokens).unwrap();
        for e in 0..4 {
            let mut s = 0.0;
            for c in 0..8 {
                let mean = [0, 3, 6, 9].iter().map(|&r| tokens.at(&[r, c])).sum::<f64>() / 4.0;
                s += mean * proj.at(&[c, e]);
            }
            assert!((g.value(out).at(&[0, e]) - s).abs() <= 1e-6);
        }
        let first = pool_and_project(&mut g, &fused, pv, Pooling::FirstClassToken).unwrap();
        for e in 0..4 {
            let s: f64 = (0..8).map(|c| tokens.at(&[0, c]) * proj.at(&[c, e])).sum();
            assert!((g.value(first).at(&[0, e]) - s).abs() <= 1e-12);
        }
    }

    fn tiny() -> VisionEncoderConfig {
        VisionEncoderConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            width: 8,
            heads: 2,
            depth: 2,
            local_depth: 1,
            views: 4,
            embed_dim: 4,
            pooling: Pooling::MeanClassTokens,
            view_embedding: false,
        }
    }

    #[test]
    fn wrong_view_count_and_size_are_rejected() {
        let cfg = tiny();
        let reg = cfg.layout().instantiate::<f64>(0).unwrap();
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &reg, GradMode::None);
        let p = VisionParams::bind(&b, &cfg).unwrap();
        let img = g.constant(Tensor::zeros([8, 8, 1]).unwrap());
        assert!(matches!(
            encode_views(&mut g, &[img; 3], &p, &cfg),
            Err(Error::ViewCount { .. })
        ));
        let small = g.constant(Tensor::zeros([4, 4, 1]).unwrap());
        assert!(matches!(
            encode_views(&mut g, &[small; 4], &p, &cfg),
            Err(Error::ImageSize { .. })
        ));
    }

    #[test]
    fn validate_catches_bad_configs() {
        let mut c = tiny();
        c.local_depth = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.views = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.patch_size = 3;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn view_parse_round_trip() {
        for v in View::ALL {
            assert_eq!(View::parse(&v.to_string()), Some(v));
        }
        assert_eq!(View::parse("lmlo"), Some(View::Lmlo));
        assert_eq!(View::parse("XCC"), None);
    }
}
