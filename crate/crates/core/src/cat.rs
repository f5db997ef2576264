//! Conceptual attention.
//!
//! Positionally mixed features `X_p` are scored against `L` concept
//! hyperplanes, softmax-normalised over positions, and pooled into concept
//! tokens `T_c [L, C]`. A backward flow `attn_mu [HW, L]`, built from the
//! attention plus a learned diversity term `alpha`, spreads the tokens back
//! over the grid; the mixed result is added to a linear projection of the
//! input, so the output has the input's shape.

use serde::{Deserialize, Serialize};

use crate::acp::{max_n_lpu, Acp, AcpConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{arg_err, Result};
use crate::nn::{
    from_tokens, identity, orthogonal, to_tokens, Bound, Conv2d, InitRng, Linear, ParamId, ParamStore,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConceptMode {
    /// Fixed learned hyperplanes `W_con [C, L]`.
    #[default]
    InputIndependent,
    /// Hyperplanes regressed per sample from the features.
    InputDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    /// Learned `[L, HW]` bias.
    #[default]
    Positional,
    /// Pooling pyramid over the input followed by a 1x1 conv to `L` channels.
    FeatureDependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatConfig {
    /// Number of concepts `L`; `None` means the layer's channel count.
    pub num_concepts: Option<usize>,
    pub concept_mode: ConceptMode,
    pub alpha_mode: AlphaMode,
    /// Conv/ReLU/pool stages before global pooling in input-dependent mode.
    pub extractor_stages: usize,
    /// Pyramid depth of the feature-dependent alpha extractor, capped by the
    /// map size.
    pub alpha_n_lpu: usize,
}

impl Default for CatConfig {
    fn default() -> Self {
        CatConfig {
            num_concepts: None,
            concept_mode: ConceptMode::InputIndependent,
            alpha_mode: AlphaMode::Positional,
            extractor_stages: 2,
            alpha_n_lpu: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Concepts {
    Independent { w_con: ParamId },
    Dependent { stages: Vec<Conv2d>, head: Linear },
}

#[derive(Debug, Clone)]
pub enum Alpha {
    Positional { alpha: ParamId },
    FeatureDependent { acp: Box<Acp>, proj: Conv2d },
}

#[derive(Debug, Clone)]
pub struct Cat {
    pub channels: usize,
    pub num_concepts: usize,
    pub height: usize,
    pub width: usize,
    pub pe: ParamId,
    pub mix: Conv2d,
    pub concepts: Concepts,
    pub alpha: Alpha,
    /// Linear map over the concept axis, stored as a `[L, L]` linear weight.
    pub flow: ParamId,
    pub w_m: Linear,
    pub w_o: Conv2d,
}

/// Every intermediate of one forward pass, batch-leading.
#[derive(Debug, Clone, Copy)]
pub struct CatTrace {
    /// `[N, C, H, W]`
    pub x_p: Var,
    /// `[N, HW, C]`
    pub x_p_tokens: Var,
    /// `[N, L, HW]`
    pub attn_s: Var,
    /// `[N, L, HW]`, rows sum to one.
    pub attn: Var,
    /// `[N, L, C]`
    pub t_c: Var,
    /// `[N, L, HW]`
    pub alpha: Var,
    /// `[N, HW, L]`
    pub attn_mu: Var,
    /// `[N, C, H, W]`
    pub phi: Var,
    pub out: Var,
}

impl Cat {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        cfg: &CatConfig,
        rng: &mut InitRng,
    ) -> Result<Self> {
        let c = channels;
        let l = cfg.num_concepts.unwrap_or(c);
        if l == 0 {
            return Err(arg_err("cat", "num_concepts must be at least 1"));
        }
        let hw = height * width;
        let pe = store.add(format!("{name}.pe"), Tensor::zeros(&[c, height, width]));
        let mix = Conv2d::same3(store, &format!("{name}.mix"), c, c, rng);
        let concepts = match cfg.concept_mode {
            ConceptMode::InputIndependent => Concepts::Independent {
                w_con: store.add(format!("{name}.w_con"), orthogonal(c, l, rng)),
            },
            ConceptMode::InputDependent => {
                let stages = (0..cfg.extractor_stages)
                    .map(|i| Conv2d::same3(store, &format!("{name}.extract{i}"), c, c, rng))
                    .collect();
                let head = Linear::new(store, &format!("{name}.extract_head"), c, c * l, true, rng);
                Concepts::Dependent { stages, head }
            }
        };
        let alpha = match cfg.alpha_mode {
            AlphaMode::Positional => Alpha::Positional {
                alpha: store.add(format!("{name}.alpha"), Tensor::zeros(&[l, hw])),
            },
            AlphaMode::FeatureDependent => {
                let acp_cfg = AcpConfig {
                    n_lpu: cfg.alpha_n_lpu.min(max_n_lpu(height, width)),
                    ..AcpConfig::default()
                };
                let acp = Acp::new(store, &format!("{name}.alpha_acp"), c, &acp_cfg, rng)?;
                let proj = Conv2d::pointwise(store, &format!("{name}.alpha_proj"), c, l, true, rng);
                Alpha::FeatureDependent {
                    acp: Box::new(acp),
                    proj,
                }
            }
        };
        let flow = store.add(format!("{name}.flow"), identity(l));
        let w_m = Linear::new(store, &format!("{name}.w_m"), c, c, false, rng);
        let w_o = Conv2d::pointwise(store, &format!("{name}.w_o"), c, c, false, rng);
        *store.get_mut(w_o.w) = identity::<T>(c).reshape(&[c, c, 1, 1])?;
        Ok(Cat {
            channels: c,
            num_concepts: l,
            height,
            width,
            pe,
            mix,
            concepts,
            alpha,
            flow,
            w_m,
            w_o,
        })
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<usize> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != [self.channels, self.height, self.width] {
            return Err(arg_err(
                "cat",
                format!(
                    "expected [N,{},{},{}], got {s:?}",
                    self.channels, self.height, self.width
                ),
            ));
        }
        Ok(s[0])
    }

    /// `X_p = Conv3x3(X + PE)`.
    pub fn positional_mix<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let xe = g.add_broadcast(x, p.var(self.pe))?;
        self.mix.forward(g, p, xe)
    }

    /// Unnormalised scores `[N, L, HW]` from `X_p` and its tokens.
    pub fn concept_scores<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x_p: Var,
        tokens: Var,
    ) -> Result<Var> {
        let scores = match &self.concepts {
            Concepts::Independent { w_con } => g.linear(tokens, p.var(*w_con), None)?,
            Concepts::Dependent { stages, head } => {
                let hyper = self.hyperplanes_dependent(g, p, x_p, stages, head)?;
                g.bmm(tokens, hyper, false)?
            }
        };
        g.permute(scores, &[0, 2, 1])
    }

    fn hyperplanes_dependent<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x_p: Var,
        stages: &[Conv2d],
        head: &Linear,
    ) -> Result<Var> {
        let n = g.shape(x_p)[0];
        let mut f = x_p;
        for conv in stages {
            f = conv.forward(g, p, f)?;
            f = g.relu(f)?;
            f = g.maxpool2d(f)?;
        }
        let pooled = g.avgpool_spatial(f)?;
        let h = head.forward(g, p, pooled)?;
        g.reshape(h, &[n, self.channels, self.num_concepts])
    }

    /// Per-sample hyperplanes `[N, C, L]` (input-independent mode repeats
    /// `W_con`).
    pub fn hyperplanes<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = self.check_input(g, x)?;
        let x_p = self.positional_mix(g, p, x)?;
        match &self.concepts {
            Concepts::Independent { w_con } => {
                let zeros = g.constant(Tensor::zeros(&[n, self.channels, self.num_concepts]));
                g.add_broadcast(zeros, p.var(*w_con))
            }
            Concepts::Dependent { stages, head } => self.hyperplanes_dependent(g, p, x_p, stages, head),
        }
    }

    /// Diversity term `[N, L, HW]`, or `[L, HW]` in positional mode.
    fn alpha_term<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        match &self.alpha {
            Alpha::Positional { alpha } => Ok(p.var(*alpha)),
            Alpha::FeatureDependent { acp, proj } => {
                let n = g.shape(x)[0];
                let f = acp.forward(g, p, x)?;
                let a = proj.forward(g, p, f)?;
                g.reshape(a, &[n, self.num_concepts, self.height * self.width])
            }
        }
    }

    /// `attn_mu = (W (attn + alpha))^T`, shape `[N, HW, L]`.
    pub fn backward_flow<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        attn: Var,
        alpha: Var,
    ) -> Result<Var> {
        let expected = [self.num_concepts, self.height * self.width];
        let sa = g.shape(alpha);
        if sa != expected && sa[1..] != expected {
            return Err(arg_err("cat", format!("alpha {sa:?} does not match {expected:?}")));
        }
        let shifted = if g.shape(alpha).len() == 2 {
            g.add_broadcast(attn, alpha)?
        } else {
            g.add(attn, alpha)?
        };
        let t = g.permute(shifted, &[0, 2, 1])?;
        g.linear(t, p.var(self.flow), None)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_trace(g, p, x)?.out)
    }

    pub fn forward_trace<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<CatTrace> {
        let n = self.check_input(g, x)?;
        let x_p = self.positional_mix(g, p, x)?;
        let x_p_tokens = to_tokens(g, x_p)?;
        let attn_s = self.concept_scores(g, p, x_p, x_p_tokens)?;
        let attn = g.softmax(attn_s, 2)?;
        let t_c = g.bmm(attn, x_p_tokens, false)?;
        let alpha_raw = self.alpha_term(g, p, x)?;
        let attn_mu = self.backward_flow(g, p, attn, alpha_raw)?;
        let alpha = if g.shape(alpha_raw).len() == 2 {
            let zeros = g.constant(Tensor::zeros(&[n, self.num_concepts, self.height * self.width]));
            g.add_broadcast(zeros, alpha_raw)?
        } else {
            alpha_raw
        };
        let mixed = g.bmm(attn_mu, t_c, false)?;
        let m = self.w_m.forward(g, p, mixed)?;
        let phi_tokens = g.gelu(m)?;
        let phi = from_tokens(g, phi_tokens, self.height, self.width)?;
        let lin = self.w_o.forward(g, p, x)?;
        let out = g.add(lin, phi)?;
        Ok(CatTrace {
            x_p,
            x_p_tokens,
            attn_s,
            attn,
            t_c,
            alpha,
            attn_mu,
            phi,
            out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(c: usize, h: usize, l: usize, cfg: CatConfig) -> (Cat, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = InitRng::seed_from_u64(5);
        let cfg = CatConfig {
            num_concepts: Some(l),
            ..cfg
        };
        let cat = Cat::new(&mut store, "cat", c, h, h, &cfg, &mut rng).unwrap();
        (cat, store)
    }

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        crate::autodiff::uniform(shape, seed)
    }

    #[test]
    fn shape_preserved() {
        let (cat, store) = build(12, 8, 6, CatConfig::default());
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(input(&[2, 12, 8, 8], 0));
        let t = cat.forward_trace(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(t.out), &[2, 12, 8, 8]);
        assert_eq!(g.shape(t.attn), &[2, 6, 64]);
        assert_eq!(g.shape(t.t_c), &[2, 6, 12]);
        assert_eq!(g.shape(t.attn_mu), &[2, 64, 6]);
    }

    #[test]
    fn zero_pe_delta_conv_is_identity_mix() {
        let (cat, mut store) = build(3, 4, 2, CatConfig::default());
        let w = store.get_mut(cat.mix.w);
        *w = Tensor::from_fn(&[3, 3, 3, 3], |i| {
            let (co, ci, k) = (i / 27, (i / 9) % 3, i % 9);
            if co == ci && k == 4 {
                1.0
            } else {
                0.0
            }
        });
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(input(&[1, 3, 4, 4], 1));
        let xp = cat.positional_mix(&mut g, &p, x).unwrap();
        assert_eq!(g.value(xp), g.value(x));
    }

    #[test]
    fn one_hot_hyperplane_selects_channel() {
        let (cat, mut store) = build(4, 4, 2, CatConfig::default());
        let Concepts::Independent { w_con } = cat.concepts else {
            unreachable!()
        };
        *store.get_mut(w_con) = Tensor::from_fn(&[4, 2], |i| match i {
            // column 0 -> channel 2, column 1 -> channel 0
            4 | 1 => 1.0,
            _ => 0.0,
        });
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(input(&[1, 4, 4, 4], 2));
        let t = cat.forward_trace(&mut g, &p, x).unwrap();
        let xp = g.value(t.x_p);
        let s = g.value(t.attn_s);
        for q in 0..16 {
            assert_eq!(s.get(&[0, 0, q]), xp.get(&[0, 2, q / 4, q % 4]));
            assert_eq!(s.get(&[0, 1, q]), xp.get(&[0, 0, q / 4, q % 4]));
        }
    }

    #[test]
    fn zero_mixing_weight_leaves_linear_path() {
        let (cat, mut store) = build(4, 4, 3, CatConfig::default());
        store.get_mut(cat.w_m.w).data_mut().fill(0.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(input(&[1, 4, 4, 4], 3));
        let y = cat.forward(&mut g, &p, x).unwrap();
        // W_o starts at the identity
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn identity_flow_and_zero_alpha_transpose_attention() {
        let (cat, store) = build(4, 4, 3, CatConfig::default());
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(input(&[1, 4, 4, 4], 4));
        let t = cat.forward_trace(&mut g, &p, x).unwrap();
        let a = g.value(t.attn);
        let mu = g.value(t.attn_mu);
        for l in 0..3 {
            for q in 0..16 {
                assert_eq!(mu.get(&[0, q, l]), a.get(&[0, l, q]));
            }
        }
    }

    #[test]
    fn independent_scores_do_not_leak_across_batch() {
        let (cat, store) = build(4, 4, 3, CatConfig::default());
        let a = input(&[2, 4, 4, 4], 5);
        let mut b = a.clone();
        b.data_mut()[64..].iter_mut().for_each(|v| *v = -*v * 3.0);
        let scores = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(t.clone());
            let tr = cat.forward_trace(&mut g, &p, x).unwrap();
            g.value(tr.attn_s).data()[..48].to_vec()
        };
        assert_eq!(scores(&a), scores(&b));
    }

    #[test]
    fn dependent_hyperplanes_follow_input_scale() {
        let cfg = CatConfig {
            concept_mode: ConceptMode::InputDependent,
            ..CatConfig::default()
        };
        let (dep, dstore) = build(4, 8, 3, cfg);
        let (ind, istore) = build(4, 8, 3, CatConfig::default());
        let x1 = input(&[1, 4, 8, 8], 6);
        let x2 = x1.map(|v| 2.0 * v);
        let planes = |cat: &Cat, store: &ParamStore<f64>, t: &Tensor<f64>| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(t.clone());
            let h = cat.hyperplanes(&mut g, &p, x).unwrap();
            g.value(h).clone()
        };
        assert_ne!(planes(&dep, &dstore, &x1), planes(&dep, &dstore, &x2));
        assert_eq!(planes(&ind, &istore, &x1), planes(&ind, &istore, &x2));
    }

    #[test]
    fn feature_dependent_alpha_shape() {
        let cfg = CatConfig {
            alpha_mode: AlphaMode::FeatureDependent,
            ..CatConfig::default()
        };
        let (cat, store) = build(4, 8, 5, cfg);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(input(&[2, 4, 8, 8], 7));
        let t = cat.forward_trace(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(t.alpha), &[2, 5, 64]);
        assert_eq!(g.shape(t.out), &[2, 4, 8, 8]);
    }

    #[test]
    fn rejects_wrong_spatial_extent() {
        let (cat, store) = build(4, 8, 5, CatConfig::default());
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(input(&[1, 4, 4, 4], 8));
        assert!(cat.forward(&mut g, &p, x).is_err());
    }
}
