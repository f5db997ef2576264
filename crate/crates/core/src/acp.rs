//! Aggressive convolutional pooling.
//!
//! Level `k` holds `C * 2^k` channels at `1 / 2^k` resolution. Each level
//! refines its input with a local perception unit (depthwise conv plus
//! residual), sends the result back to full resolution through `k`
//! upsample/conv blocks and a 1x1 projection, and then downsamples it
//! (3x3 conv doubling channels, ReLU, 2x2 max pool) to feed level `k + 1`.
//! The output is the sum of a 1x1 projection of the input and every level's
//! projected contribution, so input and output shapes match.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{arg_err, Result};
use crate::nn::{Bound, Conv2d, DepthwiseConv2d, InitRng, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcpConfig {
    /// Number of pyramid levels.
    pub n_lpu: usize,
    /// Depthwise kernel of the local perception unit.
    pub lpu_kernel: usize,
}

impl Default for AcpConfig {
    fn default() -> Self {
        AcpConfig {
            n_lpu: 2,
            lpu_kernel: 3,
        }
    }
}

/// Largest legal `n_lpu` for an `h x w` map: `floor(log2(min(h, w)))`.
pub fn max_n_lpu(h: usize, w: usize) -> usize {
    let m = h.min(w);
    if m == 0 {
        0
    } else {
        m.ilog2() as usize
    }
}

pub fn check_bound(n_lpu: usize, h: usize, w: usize) -> Result<()> {
    let max = max_n_lpu(h, w);
    if n_lpu > max {
        return Err(arg_err(
            "acp",
            format!("n_lpu={n_lpu} exceeds floor(log2(min({h},{w})))={max}"),
        ));
    }
    Ok(())
}

/// One pyramid level.
#[derive(Debug, Clone)]
pub struct AcpLevel {
    pub depth: usize,
    pub lpu: DepthwiseConv2d,
    /// `depth` blocks, each halving channels on the way up.
    pub up: Vec<Conv2d>,
    pub proj: Conv2d,
    /// Absent on the last level, whose downscaled map would go unused.
    pub down: Option<Conv2d>,
}

impl AcpLevel {
    /// `DWConv(x) + x`.
    pub fn lpu<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let d = self.lpu.forward(g, p, x)?;
        g.add(d, x)
    }

    /// 3x3 conv to twice the channels, ReLU, 2x2 max pool.
    pub fn downscale<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Option<Var>> {
        let Some(conv) = &self.down else {
            return Ok(None);
        };
        let y = conv.forward(g, p, x)?;
        let y = g.relu(y)?;
        g.maxpool2d(y).map(Some)
    }

    /// Upsample/conv/ReLU blocks back to the level-0 grid. `shapes[j]` is the
    /// spatial extent of level `j`; each block upsamples to exactly that
    /// extent so ceil-pooled shapes are restored without a final resize.
    /// Returns the `C`-channel map before the 1x1 projection.
    pub fn upscale_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        mut y: Var,
        shapes: &[(usize, usize)],
    ) -> Result<Var> {
        for (j, conv) in (1..=self.depth).rev().zip(&self.up) {
            y = g.upsample_nearest2x(y, Some(shapes[j - 1]))?;
            y = conv.forward(g, p, y)?;
            y = g.relu(y)?;
        }
        Ok(y)
    }

    pub fn upscale_path<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        y: Var,
        shapes: &[(usize, usize)],
    ) -> Result<Var> {
        let f = self.upscale_features(g, p, y, shapes)?;
        self.proj.forward(g, p, f)
    }
}

#[derive(Debug, Clone)]
pub struct Acp {
    pub channels: usize,
    pub n_lpu: usize,
    pub f0_proj: Conv2d,
    pub levels: Vec<AcpLevel>,
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub struct AcpParts {
    pub out: Var,
    /// The `C`-channel maps entering each 1x1 projection: the raw input
    /// first, then one per level.
    pub pre_projection: Vec<Var>,
}

impl Acp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: &AcpConfig,
        rng: &mut InitRng,
    ) -> Result<Self> {
        if cfg.lpu_kernel.is_multiple_of(2) {
            return Err(arg_err("acp", format!("lpu_kernel must be odd, got {}", cfg.lpu_kernel)));
        }
        let c = channels;
        let f0_proj = Conv2d::pointwise(store, &format!("{name}.f0_proj"), c, c, true, rng);
        let mut levels = Vec::with_capacity(cfg.n_lpu);
        for k in 0..cfg.n_lpu {
            let ck = c << k;
            let pre = format!("{name}.level{k}");
            let lpu = DepthwiseConv2d::new(store, &format!("{pre}.lpu"), ck, cfg.lpu_kernel, rng);
            let up = (1..=k)
                .rev()
                .map(|j| {
                    Conv2d::same3(store, &format!("{pre}.up{j}"), c << j, c << (j - 1), rng)
                })
                .collect();
            let proj = Conv2d::pointwise(store, &format!("{pre}.proj"), c, c, true, rng);
            let down = (k + 1 < cfg.n_lpu)
                .then(|| Conv2d::same3(store, &format!("{pre}.down"), ck, 2 * ck, rng));
            levels.push(AcpLevel {
                depth: k,
                lpu,
                up,
                proj,
                down,
            });
        }
        Ok(Acp {
            channels,
            n_lpu: cfg.n_lpu,
            f0_proj,
            levels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_parts(g, p, x)?.out)
    }

    pub fn forward_parts<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x0: Var) -> Result<AcpParts> {
        let shape = g.shape(x0).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(arg_err(
                "acp",
                format!("expected [N,{},H,W], got {shape:?}", self.channels),
            ));
        }
        check_bound(self.n_lpu, shape[2], shape[3])?;
        let mut out = self.f0_proj.forward(g, p, x0)?;
        let mut pre_projection = vec![x0];
        let mut shapes = Vec::with_capacity(self.n_lpu);
        let mut x = x0;
        for level in &self.levels {
            let s = g.shape(x);
            shapes.push((s[2], s[3]));
            let y = level.lpu(g, p, x)?;
            let f = level.upscale_features(g, p, y, &shapes)?;
            let contribution = level.proj.forward(g, p, f)?;
            out = g.add(out, contribution)?;
            pre_projection.push(f);
            match level.downscale(g, p, y)? {
                Some(next) => x = next,
                None => break,
            }
        }
        Ok(AcpParts {
            out,
            pre_projection,
        })
    }

    /// Every projection's `(weight, bias)` in the order of
    /// [`AcpParts::pre_projection`].
    pub fn projections(&self) -> Vec<&Conv2d> {
        std::iter::once(&self.f0_proj)
            .chain(self.levels.iter().map(|l| &l.proj))
            .collect()
    }
}

/// Input pixels whose value influences the summed output channels at one
/// spatial site, found from the input gradient. Row-major `[H*W]` mask.
pub fn receptive_field_probe(
    acp: &Acp,
    store: &ParamStore<f64>,
    x: &crate::tensor::Tensor<f64>,
    site: (usize, usize),
) -> Result<Vec<bool>> {
    let s = x.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xv = g.param(x.clone());
    let out = acp.forward(&mut g, &p, xv)?;
    let mut sel = crate::tensor::Tensor::zeros(g.shape(out));
    for ch in 0..c {
        sel.data_mut()[(ch * h + site.0) * w + site.1] = 1.0;
    }
    let selv = g.constant(sel);
    let picked = g.mul(out, selv)?;
    let loss = g.sum(picked)?;
    g.backward(loss)?;
    let grad = g.grad_tensor(xv);
    Ok((0..h * w)
        .map(|i| (0..c).any(|ch| grad.data()[ch * h * w + i] != 0.0))
        .collect())
}

/// Probe inputs for [`receptive_field_union`]: one random base map plus a
/// copy for each cell of a 4x4 grid where that cell is raised, then lowered,
/// by `spike`. Max-pool routes gradient only through window maxima, so a
/// single input gives a lower bound on the influence set; the spikes steer
/// the maxima through every region.
pub fn probe_inputs(c: usize, h: usize, w: usize, spike: f64, seed: u64) -> Vec<crate::tensor::Tensor<f64>> {
    let base = crate::autodiff::uniform(&[1, c, h, w], seed);
    let (th, tw) = (h.div_ceil(4), w.div_ceil(4));
    let mut out = vec![base.clone()];
    for sign in [1.0, -1.0] {
        for cell in 0..16 {
            out.push(crate::tensor::Tensor::from_fn(&[1, c, h, w], |i| {
                let (y, x) = ((i / w) % h, i % w);
                let hit = (y / th) * 4 + x / tw == cell;
                base.data()[i] + if hit { sign * spike } else { 0.0 }
            }));
        }
    }
    out
}

/// Union of [`receptive_field_probe`] masks over several inputs.
pub fn receptive_field_union(
    acp: &Acp,
    store: &ParamStore<f64>,
    inputs: &[crate::tensor::Tensor<f64>],
    site: (usize, usize),
) -> Result<Vec<bool>> {
    let mut acc: Option<Vec<bool>> = None;
    for x in inputs {
        let m = receptive_field_probe(acp, store, x, site)?;
        match &mut acc {
            Some(a) => a.iter_mut().zip(m).for_each(|(a, b)| *a |= b),
            None => acc = Some(m),
        }
    }
    acc.ok_or_else(|| arg_err("receptive_field_union", "no probe inputs"))
}
