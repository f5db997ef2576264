use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};
use crate::tensor::{Scalar, Tensor};

use super::BBox;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Disc,
    Square,
    Triangle,
}

impl ShapeClass {
    pub fn from_label(label: usize) -> Self {
        match label % NUM_CLASSES {
            0 => ShapeClass::Disc,
            1 => ShapeClass::Square,
            _ => ShapeClass::Triangle,
        }
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeClass::Disc => dx * dx + dy * dy <= r * r,
            ShapeClass::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            ShapeClass::Triangle => {
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= r * t
            }
        }
    }
}

/// One image with a single foreground object.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    pub bbox: BBox,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// `[3, H, W]` row-major, values in `0..=255`.
    pub image: Vec<u8>,
}

impl Sample {
    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[3, self.height, self.width], |i| T::from_f64(self.image[i] as f64))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

// texture parameters, in 8-bit intensity units
const NOISE_AMP: f64 = 28.0;
const EDGE_CONTRAST: f64 = 300.0;
const INTERIOR_SHIFT: f64 = 150.0;

/// Per-image texture: a base colour, a sum of oriented sinusoids and a
/// white-noise field twice the image size. Background and foreground both
/// read this same field, the foreground at a displaced origin.
struct Texture {
    base: [f64; 3],
    gain: [f64; 3],
    waves: Vec<(f64, f64, f64, f64)>,
    noise: Vec<f64>,
    nw: usize,
}

impl Texture {
    fn new(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let base = [0; 3].map(|_| rng.gen_range(70.0..180.0));
        let gain = [0; 3].map(|_| rng.gen_range(0.7..1.3));
        let waves = (0..3)
            .map(|_| {
                let amp = rng.gen_range(8.0..16.0);
                let freq = rng.gen_range(0.15..0.5);
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (amp, freq * theta.cos(), freq * theta.sin(), phase)
            })
            .collect();
        let (nh, nw) = (2 * h, 2 * w);
        let noise = (0..3 * nh * nw).map(|_| rng.gen_range(-NOISE_AMP..NOISE_AMP)).collect();
        Texture {
            base,
            gain,
            waves,
            noise,
            nw,
        }
    }

    fn at(&self, c: usize, y: usize, x: usize, nh: usize) -> f64 {
        let (fy, fx) = (y as f64, x as f64);
        let pattern: f64 = self
            .waves
            .iter()
            .map(|&(a, kx, ky, ph)| a * (kx * fx + ky * fy + ph).sin())
            .sum();
        self.base[c] + self.gain[c] * pattern + self.noise[(c * nh + y) * self.nw + x]
    }
}

fn render(label: usize, h: usize, w: usize, difficulty: f64, seed: u64) -> (Vec<u8>, BBox) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::new(h, w, &mut rng);
    let m = h.min(w) as f64;
    let r = rng.gen_range(0.2 * m..0.3 * m);
    let cx = rng.gen_range(r + 1.0..w as f64 - r - 1.0);
    let cy = rng.gen_range(r + 1.0..h as f64 - r - 1.0);
    let (oy, ox) = (rng.gen_range(h / 2..h), rng.gen_range(w / 2..w));
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let class = ShapeClass::from_label(label);

    let mask: Vec<bool> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            class.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r)
        })
        .collect();
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize]
    };
    let nh = 2 * h;
    let mut image = vec![0u8; 3 * h * w];
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let fg = mask[y * w + x];
            let edge = fg && {
                let (iy, ix) = (y as isize, x as isize);
                !(inside(iy - 1, ix) && inside(iy + 1, ix) && inside(iy, ix - 1) && inside(iy, ix + 1))
            };
            if fg {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
            for c in 0..3 {
                let v = if fg {
                    let mut v = tex.at(c, y + oy, x + ox, nh) + sign * difficulty * INTERIOR_SHIFT;
                    if edge {
                        v -= sign * difficulty * EDGE_CONTRAST;
                    }
                    v
                } else {
                    tex.at(c, y, x, nh)
                };
                image[(c * h + y) * w + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let bbox = [
        (x0 + x1) as f64 / (2.0 * w as f64),
        (y0 + y1) as f64 / (2.0 * h as f64),
        (x1 - x0) as f64 / w as f64,
        (y1 - y0) as f64 / h as f64,
    ];
    (image, bbox)
}

/// `n` samples with round-robin class labels, ids `0..n`, each fully
/// determined by `(seed, index, difficulty)`. `difficulty = 0` makes the
/// object a displaced patch of the background texture; larger values add a
/// contrasting boundary ring and an interior intensity shift.
pub fn gen_concealed_shapes(
    n: usize,
    h: usize,
    w: usize,
    difficulty: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if h.min(w) < 12 {
        return Err(arg_err(
            "gen_concealed_shapes",
            format!("{h}x{w} is too small to fit a shape (need 12x12)"),
        ));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(arg_err(
            "gen_concealed_shapes",
            format!("difficulty must lie in [0, 1], got {difficulty}"),
        ));
    }
    Ok((0..n)
        .map(|i| {
            let label = i % NUM_CLASSES;
            let s = sample_seed(seed, i);
            let (image, bbox) = render(label, h, w, difficulty, s);
            Sample {
                id: i,
                label,
                bbox,
                seed: s,
                height: h,
                width: w,
                image,
            }
        })
        .collect())
}
