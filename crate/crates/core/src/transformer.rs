//! Patch embedding, self-attention and the block variants, assembled into
//! small multi-stage classification models with an optional box head.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::acp::{max_n_lpu, Acp, AcpConfig};
use crate::autodiff::{Graph, Var};
use crate::cat::{Cat, CatConfig, CatTrace};
use crate::error::{Error, Result};
use crate::nn::{from_tokens, to_tokens, Bound, Conv2d, InitRng, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// `x + mhsa(LN(x))`, then `+ mlp(LN(.))`.
    Baseline,
    /// Pooling pyramid only in front of attention.
    AcpOnly,
    /// Conceptual attention only in front of attention.
    CatOnly,
    /// `u = cat(LN(acp(x)))`, then `u + mhsa(LN(u))`, then `+ mlp(LN(.))`.
    #[default]
    Enhanced,
}

impl BlockKind {
    pub fn has_acp(self) -> bool {
        matches!(self, BlockKind::AcpOnly | BlockKind::Enhanced)
    }

    pub fn has_cat(self) -> bool {
        matches!(self, BlockKind::CatOnly | BlockKind::Enhanced)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Baseline => "baseline",
            BlockKind::AcpOnly => "acp-only",
            BlockKind::CatOnly => "cat-only",
            BlockKind::Enhanced => "enhanced",
        }
    }
}

/// What to do when `n_lpu` exceeds the bound of a stage's token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcpBound {
    /// Refuse to build.
    #[default]
    Strict,
    /// Use the largest legal depth for that stage.
    Clamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    /// Embedding dimension per stage.
    pub dims: Vec<usize>,
    /// Blocks per stage.
    pub depths: Vec<usize>,
    /// Attention heads per stage.
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
    /// Biases on the query and value projections. Keys never carry one: a
    /// key bias shifts every logit of a query row equally and cancels in
    /// the softmax.
    pub qkv_bias: bool,
    /// Learned absolute position embedding added after patch embedding.
    pub pos_embed: bool,
    pub block_kind: BlockKind,
    pub acp_bound: AcpBound,
    pub num_classes: usize,
    pub box_head: bool,
    /// Weight initialisation seed.
    pub init_seed: u64,
    pub acp: AcpConfig,
    pub cat: CatConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            in_channels: 3,
            patch_size: 4,
            dims: vec![16, 32],
            depths: vec![2, 2],
            heads: vec![2, 4],
            mlp_ratio: 2,
            qkv_bias: true,
            pos_embed: true,
            block_kind: BlockKind::Enhanced,
            acp_bound: AcpBound::Strict,
            num_classes: 3,
            box_head: true,
            init_seed: 0,
            acp: AcpConfig::default(),
            cat: CatConfig {
                num_concepts: Some(16),
                ..CatConfig::default()
            },
        }
    }
}

impl ModelConfig {
    /// Token grid extent of each stage.
    pub fn stage_grids(&self) -> Vec<usize> {
        let mut g = self.image_size / self.patch_size.max(1);
        let mut out = Vec::with_capacity(self.dims.len());
        for i in 0..self.dims.len() {
            if i > 0 {
                g /= 2;
            }
            out.push(g);
        }
        out
    }

    /// Pyramid depth actually used in each stage.
    pub fn effective_n_lpu(&self) -> Vec<usize> {
        self.stage_grids()
            .iter()
            .map(|&g| match self.acp_bound {
                AcpBound::Strict => self.acp.n_lpu,
                AcpBound::Clamp => self.acp.n_lpu.min(max_n_lpu(g, g)),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.is_empty() {
            return bad("model.dims must list at least one stage".into());
        }
        if self.depths.len() != self.dims.len() || self.heads.len() != self.dims.len() {
            return bad(format!(
                "model.dims, depths and heads need equal lengths, got {}, {}, {}",
                self.dims.len(),
                self.depths.len(),
                self.heads.len()
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad("in_channels, num_classes and mlp_ratio must be positive".into());
        }
        for (i, (&d, &h)) in self.dims.iter().zip(&self.heads).enumerate() {
            if d == 0 || h == 0 || d % h != 0 {
                return bad(format!("stage {i}: dim {d} not divisible by heads {h}"));
            }
        }
        let mut g = self.image_size / self.patch_size;
        for i in 1..self.dims.len() {
            if !g.is_multiple_of(2) || g < 2 {
                return bad(format!("stage {i}: token grid {g} cannot be halved"));
            }
            g /= 2;
        }
        if self.block_kind.has_acp() && self.acp_bound == AcpBound::Strict {
            for (i, g) in self.stage_grids().into_iter().enumerate() {
                if self.acp.n_lpu > max_n_lpu(g, g) {
                    return bad(format!(
                        "stage {i}: n_lpu={} exceeds floor(log2({g}))={}",
                        self.acp.n_lpu,
                        max_n_lpu(g, g)
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Multi-head self-attention over channel-last tokens `[N, T, C]`.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Mhsa {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        qkv_bias: bool,
        rng: &mut InitRng,
    ) -> Self {
        Mhsa {
            heads,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, qkv_bias, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, qkv_bias, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
        }
    }

    fn split_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, t, c) = (s[0], s[1], s[2]);
        let d = c / self.heads;
        let r = g.reshape(x, &[n, t, self.heads, d])?;
        let r = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(r, &[n * self.heads, t, d])
    }

    /// Returns the output tokens and the attention probabilities
    /// `[N * heads, T, T]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(self.heads) {
            return Err(crate::error::shape_err(
                "mhsa",
                format!("tokens {s:?} with {} heads", self.heads),
            ));
        }
        let (n, t, c) = (s[0], s[1], s[2]);
        let d = c / self.heads;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = g.softmax(scores, 2)?;
        let o = g.bmm(attn, v, false)?;
        let o = g.reshape(o, &[n, self.heads, t, d])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[n, t, c])?;
        Ok((self.out.forward(g, p, o)?, attn))
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, ratio: usize, rng: &mut InitRng) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * ratio, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * ratio, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, p, h)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub kind: BlockKind,
    pub dim: usize,
    pub acp: Option<Acp>,
    pub cat_norm: Option<LayerNorm>,
    pub cat: Option<Cat>,
    pub norm1: LayerNorm,
    pub attn: Mhsa,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

/// One block's observable intermediates.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub out: Var,
    /// `[N * heads, HW, HW]`
    pub attn: Var,
    pub cat: Option<CatTrace>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: BlockKind,
        dim: usize,
        heads: usize,
        grid: usize,
        cfg: &ModelConfig,
        n_lpu: usize,
        rng: &mut InitRng,
    ) -> Result<Self> {
        let acp = if kind.has_acp() {
            let acp_cfg = AcpConfig {
                n_lpu,
                ..cfg.acp.clone()
            };
            Some(Acp::new(store, &format!("{name}.acp"), dim, &acp_cfg, rng)?)
        } else {
            None
        };
        let (cat_norm, cat) = if kind.has_cat() {
            (
                Some(LayerNorm::new(store, &format!("{name}.cat_norm"), dim)),
                Some(Cat::new(store, &format!("{name}.cat"), dim, grid, grid, &cfg.cat, rng)?),
            )
        } else {
            (None, None)
        };
        Ok(Block {
            kind,
            dim,
            acp,
            cat_norm,
            cat,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Mhsa::new(store, &format!("{name}.attn"), dim, heads, cfg.qkv_bias, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, cfg.mlp_ratio, rng),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_trace(g, p, x)?.out)
    }

    /// `x` and the result are `[N, C, H, W]`.
    pub fn forward_trace<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<BlockTrace> {
        let s = g.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let mut u = x;
        if let Some(acp) = &self.acp {
            u = acp.forward(g, p, u)?;
        }
        let mut cat_trace = None;
        if let (Some(norm), Some(cat)) = (&self.cat_norm, &self.cat) {
            let n = norm.forward(g, p, u, 1)?;
            let tr = cat.forward_trace(g, p, n)?;
            u = tr.out;
            cat_trace = Some(tr);
        }
        let t = to_tokens(g, u)?;
        let n1 = self.norm1.forward(g, p, t, 2)?;
        let (a, attn) = self.attn.forward(g, p, n1)?;
        let t = g.add(t, a)?;
        let n2 = self.norm2.forward(g, p, t, 2)?;
        let m = self.mlp.forward(g, p, n2)?;
        let t = g.add(t, m)?;
        let out = from_tokens(g, t, h, w)?;
        Ok(BlockTrace {
            out,
            attn,
            cat: cat_trace,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub grid: usize,
    pub down: Option<Conv2d>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub patch: Conv2d,
    pub pos: Option<ParamId>,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub box_head: Option<Linear>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[N, num_classes]`
    pub logits: Var,
    /// `[N, 4]` normalised `(cx, cy, w, h)`.
    pub boxes: Option<Var>,
    /// Every block in execution order.
    pub blocks: Vec<BlockTrace>,
}

impl Model {
    /// Builds the model and its freshly initialised parameters.
    pub fn new<T: Scalar>(cfg: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = InitRng::seed_from_u64(cfg.init_seed);
        let ps = cfg.patch_size;
        let patch = Conv2d::new(&mut store, "patch_embed", cfg.in_channels, cfg.dims[0], ps, ps, 0, true, &mut rng);
        let grids = cfg.stage_grids();
        let pos = cfg.pos_embed.then(|| {
            let g0 = grids[0];
            let t = Tensor::from_fn(&[cfg.dims[0], g0, g0], |_| T::from_f64(rng.gen_range(-0.02..0.02)));
            store.add("pos_embed", t)
        });
        let n_lpu = cfg.effective_n_lpu();
        let mut stages = Vec::with_capacity(cfg.dims.len());
        for (si, &dim) in cfg.dims.iter().enumerate() {
            let down = (si > 0).then(|| {
                Conv2d::new(&mut store, &format!("stage{si}.down"), cfg.dims[si - 1], dim, 2, 2, 0, true, &mut rng)
            });
            let blocks = (0..cfg.depths[si])
                .map(|bi| {
                    Block::new(
                        &mut store,
                        &format!("stage{si}.block{bi}"),
                        cfg.block_kind,
                        dim,
                        cfg.heads[si],
                        grids[si],
                        cfg,
                        n_lpu[si],
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?;
            stages.push(Stage {
                grid: grids[si],
                down,
                blocks,
            });
        }
        let last = *cfg.dims.last().expect("validated");
        let norm = LayerNorm::new(&mut store, "norm", last);
        let head = Linear::new(&mut store, "head", last, cfg.num_classes, true, &mut rng);
        let box_head = cfg
            .box_head
            .then(|| Linear::new(&mut store, "box_head", last, 4, true, &mut rng));
        let model = Model {
            cfg: cfg.clone(),
            patch,
            pos,
            stages,
            norm,
            head,
            box_head,
        };
        Ok((model, store))
    }

    /// `images` is `[N, in_channels, image_size, image_size]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<ModelOutput> {
        let s = g.shape(images);
        let want = [self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(crate::error::shape_err(
                "model",
                format!("images {s:?}, expected [N,{},{},{}]", want[0], want[1], want[2]),
            ));
        }
        let mut x = self.patch.forward(g, p, images)?;
        if let Some(pos) = self.pos {
            x = g.add_broadcast(x, p.var(pos))?;
        }
        let mut traces = Vec::new();
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                x = down.forward(g, p, x)?;
            }
            for block in &stage.blocks {
                let tr = block.forward_trace(g, p, x)?;
                x = tr.out;
                traces.push(tr);
            }
        }
        let x = self.norm.forward(g, p, x, 1)?;
        let pooled = g.avgpool_spatial(x)?;
        let logits = self.head.forward(g, p, pooled)?;
        let boxes = match &self.box_head {
            Some(bh) => {
                let b = bh.forward(g, p, pooled)?;
                Some(g.sigmoid(b)?)
            }
            None => None,
        };
        Ok(ModelOutput {
            logits,
            boxes,
            blocks: traces,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }
}

/// Total scalar parameter count of the model `cfg` describes.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    let (_, store) = Model::new::<f32>(cfg)?;
    Ok(store.count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::uniform;

    fn tiny(kind: BlockKind) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 2,
            dims: vec![8],
            depths: vec![2],
            heads: vec![2],
            block_kind: kind,
            acp: AcpConfig {
                n_lpu: 1,
                ..AcpConfig::default()
            },
            cat: CatConfig {
                num_concepts: Some(4),
                ..CatConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_config_validates_and_grids_halve() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.stage_grids(), vec![8, 4]);
    }

    #[test]
    fn strict_bound_rejects_deep_pyramids() {
        let mut cfg = ModelConfig::default();
        cfg.acp.n_lpu = 3;
        assert!(cfg.validate().is_err());
        cfg.acp_bound = AcpBound::Clamp;
        cfg.validate().unwrap();
        assert_eq!(cfg.effective_n_lpu(), vec![3, 2]);
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut cfg = ModelConfig::default();
        cfg.heads = vec![3, 4];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes_for_every_kind() {
        for kind in [BlockKind::Baseline, BlockKind::AcpOnly, BlockKind::CatOnly, BlockKind::Enhanced] {
            let mut cfg = ModelConfig::default();
            cfg.block_kind = kind;
            let (model, store) = Model::new::<f32>(&cfg).unwrap();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(uniform(&[2, 3, 32, 32], 0).cast());
            let out = model.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.shape(out.logits), &[2, 3]);
            assert_eq!(g.shape(out.boxes.unwrap()), &[2, 4]);
            assert_eq!(out.blocks.len(), 4);
            assert_eq!(g.shape(out.blocks[3].out), &[2, 32, 4, 4]);
        }
    }

    #[test]
    fn single_token_attention_is_out_proj_of_values() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = InitRng::seed_from_u64(0);
        let mhsa = Mhsa::new(&mut store, "a", 4, 2, true, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(uniform(&[1, 1, 4], 1));
        let (y, attn) = mhsa.forward(&mut g, &p, x).unwrap();
        assert!(g.value(attn).data().iter().all(|&a| a == 1.0));
        let v = mhsa.v.forward(&mut g, &p, x).unwrap();
        let o = mhsa.out.forward(&mut g, &p, v).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(o)) < 1e-15);
    }

    #[test]
    fn count_params_changes_with_kind() {
        let base = count_params(&tiny(BlockKind::Baseline)).unwrap();
        let ei = count_params(&tiny(BlockKind::Enhanced)).unwrap();
        assert!(ei > base);
    }
}
