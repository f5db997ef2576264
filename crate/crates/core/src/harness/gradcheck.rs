//! The registered gradient checks behind the `gradcheck` subcommand: every
//! differentiable graph op plus composed ACP, CAT, attention, MLP, block and
//! a two-block model, each compared against central differences at 64-bit.

use rand::SeedableRng;

use crate::acp::{Acp, AcpConfig};
use crate::autodiff::{grad_check, random_projection, uniform, GradCheckOptions, GradCheckReport, Graph, Var};
use crate::cat::{AlphaMode, Cat, CatConfig, ConceptMode};
use crate::error::Result;
use crate::nn::{Bound, InitRng, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{Block, BlockKind, Mhsa, Mlp, Model, ModelConfig};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

type CheckFn = Box<dyn Fn(u64) -> Result<GradCheckReport> + Send + Sync>;

pub struct RegisteredCheck {
    pub name: &'static str,
    pub tolerance: f64,
    run: CheckFn,
}

impl RegisteredCheck {
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        (self.run)(seed)
    }
}

impl std::fmt::Debug for RegisteredCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegisteredCheck")
            .field("name", &self.name)
            .field("tolerance", &self.tolerance)
            .finish()
    }
}

fn opts(seed: u64, cap: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-5,
        max_coords_per_input: cap,
        seed,
    }
}

/// Check of a graph op over random inputs of the given shapes, reduced to a
/// scalar through a seeded random projection.
fn op_check<F>(name: &'static str, shapes: &'static [&'static [usize]], f: F) -> RegisteredCheck
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + Copy + 'static,
{
    RegisteredCheck {
        name,
        tolerance: DEFAULT_TOLERANCE,
        run: Box::new(move |seed| {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| uniform(s, seed.wrapping_mul(31).wrapping_add(i as u64)))
                .collect();
            grad_check(
                |g, v| {
                    let y = f(g, v)?;
                    random_projection(g, y, seed)
                },
                &inputs,
                &opts(seed, None),
            )
        }),
    }
}

/// Check of a parameterised module: `x` plus every parameter are inputs.
fn module_check<B>(name: &'static str, x_shape: &'static [usize], cap: usize, build: B) -> RegisteredCheck
where
    B: Fn(&mut ParamStore<f64>, &mut InitRng) -> Result<ModuleFn> + Send + Sync + 'static,
{
    RegisteredCheck {
        name,
        tolerance: DEFAULT_TOLERANCE,
        run: Box::new(move |seed| {
            let mut store = ParamStore::new();
            let mut rng = InitRng::seed_from_u64(seed);
            let forward = build(&mut store, &mut rng)?;
            let mut inputs = vec![uniform(x_shape, seed ^ 0x5eed)];
            // perturb the initialisation so zero/identity inits are not special points
            for (i, t) in store.tensors().iter().enumerate() {
                let noise = uniform(t.shape(), seed.wrapping_add(1000 + i as u64));
                let d: Vec<f64> = t.data().iter().zip(noise.data()).map(|(a, b)| a + 0.1 * b).collect();
                inputs.push(Tensor::new(t.shape().to_vec(), d)?);
            }
            grad_check(
                |g, v| {
                    let p = Bound(v[1..].to_vec());
                    let y = forward(g, &p, v[0])?;
                    random_projection(g, y, seed)
                },
                &inputs,
                &opts(seed, Some(cap)),
            )
        }),
    }
}

type ModuleFn = Box<dyn Fn(&mut Graph<f64>, &Bound, Var) -> Result<Var> + Send + Sync>;

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 2,
        dims: vec![8],
        depths: vec![2],
        heads: vec![2],
        block_kind: BlockKind::Enhanced,
        acp: AcpConfig {
            n_lpu: 2,
            ..AcpConfig::default()
        },
        cat: CatConfig {
            num_concepts: Some(4),
            ..CatConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn cat_check(name: &'static str, concept_mode: ConceptMode, alpha_mode: AlphaMode) -> RegisteredCheck {
    module_check(name, &[2, 4, 4, 4], 24, move |store, rng| {
        let cfg = CatConfig {
            num_concepts: Some(3),
            concept_mode,
            alpha_mode,
            extractor_stages: 1,
            alpha_n_lpu: 1,
        };
        let cat = Cat::new(store, "cat", 4, 4, 4, &cfg, rng)?;
        Ok(Box::new(move |g, p, x| cat.forward(g, p, x)))
    })
}

/// Every registered check, in a fixed order.
pub fn registered_checks() -> Vec<RegisteredCheck> {
    vec![
        op_check("add", &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1])),
        op_check("sub", &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1])),
        op_check("mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1])),
        op_check("scale", &[&[5]], |g, v| g.scale(v[0], -1.7)),
        op_check("add_broadcast", &[&[2, 3, 4], &[3, 4]], |g, v| g.add_broadcast(v[0], v[1])),
        op_check("relu", &[&[4, 5]], |g, v| g.relu(v[0])),
        op_check("gelu", &[&[4, 5]], |g, v| g.gelu(v[0])),
        op_check("sigmoid", &[&[4, 5]], |g, v| g.sigmoid(v[0])),
        op_check("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        op_check("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        op_check("sum", &[&[3, 4]], |g, v| g.sum(v[0])),
        op_check("mean", &[&[3, 4]], |g, v| g.mean(v[0])),
        op_check("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        op_check("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false)),
        op_check("bmm_trans_b", &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true)),
        op_check("linear", &[&[2, 3, 4], &[4, 5], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        op_check("conv2d", &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        op_check("conv2d_strided", &[&[1, 2, 7, 7], &[3, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], None, 2, 1)),
        op_check("depthwise_conv2d", &[&[2, 3, 5, 4], &[3, 1, 3, 3], &[3]], |g, v| {
            g.depthwise_conv2d(v[0], v[1], Some(v[2]))
        }),
        op_check("maxpool2d", &[&[2, 2, 5, 6]], |g, v| g.maxpool2d(v[0])),
        op_check("avgpool_spatial", &[&[2, 3, 4, 5]], |g, v| g.avgpool_spatial(v[0])),
        op_check("upsample_nearest2x", &[&[1, 2, 3, 3]], |g, v| g.upsample_nearest2x(v[0], Some((5, 6)))),
        op_check("resize_nearest", &[&[1, 2, 3, 4]], |g, v| g.resize_nearest(v[0], 7, 5)),
        op_check("softmax", &[&[3, 5]], |g, v| g.softmax(v[0], 1)),
        op_check("softmax_axis0", &[&[4, 3]], |g, v| g.softmax(v[0], 0)),
        op_check("layernorm", &[&[2, 5, 3], &[5], &[5]], |g, v| g.layernorm(v[0], v[1], v[2], 1)),
        op_check("cross_entropy", &[&[4, 3]], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])),
        op_check("l1_loss", &[&[3, 4]], |g, v| {
            let target = Tensor::from_fn(&[3, 4], |i| 0.1 * i as f64 - 0.5);
            g.l1_loss(v[0], &target, &[true, false, true])
        }),
        module_check("acp", &[2, 4, 8, 8], 24, |store, rng| {
            let cfg = AcpConfig {
                n_lpu: 3,
                ..AcpConfig::default()
            };
            let acp = Acp::new(store, "acp", 4, &cfg, rng)?;
            Ok(Box::new(move |g, p, x| acp.forward(g, p, x)))
        }),
        cat_check("cat", ConceptMode::InputIndependent, AlphaMode::Positional),
        cat_check("cat_input_dependent", ConceptMode::InputDependent, AlphaMode::FeatureDependent),
        module_check("mhsa", &[2, 5, 8], 32, |store, rng| {
            let m = Mhsa::new(store, "attn", 8, 2, true, rng);
            Ok(Box::new(move |g, p, x| Ok(m.forward(g, p, x)?.0)))
        }),
        module_check("mlp", &[2, 5, 4], 32, |store, rng| {
            let m = Mlp::new(store, "mlp", 4, 2, rng);
            Ok(Box::new(move |g, p, x| m.forward(g, p, x)))
        }),
        module_check("enhanced_block", &[2, 8, 4, 4], 16, |store, rng| {
            let cfg = tiny_model_config();
            let b = Block::new(store, "block", BlockKind::Enhanced, 8, 2, 4, &cfg, 2, rng)?;
            Ok(Box::new(move |g, p, x| b.forward(g, p, x)))
        }),
        RegisteredCheck {
            name: "tiny_model",
            tolerance: DEFAULT_TOLERANCE,
            run: Box::new(|seed| {
                let mut cfg = tiny_model_config();
                cfg.init_seed = seed;
                let (model, store) = Model::new::<f64>(&cfg)?;
                let mut inputs = vec![uniform(&[2, 3, 8, 8], seed ^ 0x1a6e)];
                for (i, t) in store.tensors().iter().enumerate() {
                    let noise = uniform(t.shape(), seed.wrapping_add(2000 + i as u64));
                    let d: Vec<f64> = t.data().iter().zip(noise.data()).map(|(a, b)| a + 0.1 * b).collect();
                    inputs.push(Tensor::new(t.shape().to_vec(), d)?);
                }
                let target = Tensor::from_fn(&[2, 4], |i| 0.2 + 0.1 * i as f64 / 8.0);
                grad_check(
                    |g, v| {
                        let p = Bound(v[1..].to_vec());
                        let out = model.forward(g, &p, v[0])?;
                        let ce = g.cross_entropy(out.logits, &[1, 2])?;
                        let l1 = g.l1_loss(out.boxes.expect("box head on"), &target, &[true, true])?;
                        g.add(ce, l1)
                    },
                    &inputs,
                    &opts(seed, Some(12)),
                )
            }),
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: &'static str,
    pub seed: u64,
    pub tolerance: f64,
    /// `Err` holds the message of a check that could not run.
    pub outcome: std::result::Result<GradCheckReport, String>,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        matches!(&self.outcome, Ok(r) if r.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.outcome.as_ref().map_or(f64::INFINITY, |r| r.max_rel_error)
    }
}

/// Runs every registered check whose name contains `filter` at each seed.
pub fn run_suite(seeds: &[u64], filter: Option<&str>) -> Vec<SuiteRow> {
    let mut rows = Vec::new();
    for check in registered_checks() {
        if filter.is_some_and(|f| !check.name.contains(f)) {
            continue;
        }
        for &seed in seeds {
            rows.push(SuiteRow {
                name: check.name,
                seed,
                tolerance: check.tolerance,
                outcome: check.run(seed).map_err(|e| e.to_string()),
            });
        }
    }
    rows
}
