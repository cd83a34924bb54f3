//! Synthetic bitemporal pairs: a value-noise background with static objects,
//! true changes (objects inserted in or removed from the second image, marked
//! in the label) and a global photometric pseudo-change on the second image
//! (never marked).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::LabelMap;

use super::image::{ImagePair, RgbImage};

const MAX_ATTEMPTS: usize = 64;
const MIN_COLOR_CONTRAST: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub image_size: usize,
    /// Objects that differ between the two dates.
    pub n_shapes: usize,
    /// Objects present at both dates.
    pub n_static: usize,
    pub shape_kinds: Vec<ShapeKind>,
    /// Half-width of the uniform global brightness offset.
    pub brightness: f64,
    /// Half-width of the uniform contrast factor deviation from 1.
    pub contrast: f64,
    /// Half-width of the uniform per-channel gain deviation from 1.
    pub gain: f64,
    /// Std of i.i.d. Gaussian noise added to both images.
    pub noise_sigma: f64,
    /// Accepted band for the changed-pixel fraction when `n_shapes > 0`.
    pub changed_band: (f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_shapes: 2,
            n_static: 2,
            shape_kinds: vec![ShapeKind::Rectangle, ShapeKind::Disc],
            brightness: 0.15,
            contrast: 0.15,
            gain: 0.1,
            noise_sigma: 0.02,
            changed_band: (0.02, 0.20),
        }
    }
}

impl SyntheticConfig {
    /// Same scene model with no true changes.
    pub fn pseudo_change_only(&self) -> Self {
        Self {
            n_shapes: 0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image size {} is too small",
                self.image_size
            )));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::Config("at least one shape kind is required".into()));
        }
        let amps = [self.brightness, self.contrast, self.gain, self.noise_sigma];
        if amps.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Config(
                "pseudo-change amplitudes must be finite and ≥ 0".into(),
            ));
        }
        let (lo, hi) = self.changed_band;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::Config(format!(
                "invalid changed-fraction band ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// One labelled bitemporal pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub pair: ImagePair,
    pub label: LabelMap,
}

/// Float RGB canvas, interleaved.
struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn at(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.size + x) * 3;
        [self.px[i], self.px[i + 1], self.px[i + 2]]
    }

    fn paint(&mut self, mask: &[bool], color: [f64; 3]) {
        for (p, &m) in mask.iter().enumerate() {
            if m {
                self.px[p * 3..p * 3 + 3].copy_from_slice(&color);
            }
        }
    }

    fn quantize(&self) -> RgbImage {
        let bytes = self
            .px
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::new(self.size, self.size, bytes).expect("canvas dimensions")
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Low-frequency value noise: random lattice colours, smoothly interpolated.
fn value_noise(size: usize, cells: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n * 3).map(|_| rng.random_range(lo..hi)).collect();
    let mut out = vec![0.0; size * size * 3];
    for y in 0..size {
        let gy = y as f64 / size as f64 * cells as f64;
        let (y0, ty) = (gy.floor() as usize, smoothstep(gy.fract()));
        for x in 0..size {
            let gx = x as f64 / size as f64 * cells as f64;
            let (x0, tx) = (gx.floor() as usize, smoothstep(gx.fract()));
            for c in 0..3 {
                let l = |yy: usize, xx: usize| lattice[(yy * n + xx) * 3 + c];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
                let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
                out[(y * size + x) * 3 + c] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let coarse = value_noise(size, 4, 0.25, 0.75, rng);
    let fine = value_noise(size, 8, -0.08, 0.08, rng);
    Canvas {
        size,
        px: coarse.iter().zip(&fine).map(|(a, b)| a + b).collect(),
    }
}

fn shape_mask(kind: ShapeKind, size: usize, rng: &mut ChaCha8Rng) -> (Vec<bool>, (usize, usize)) {
    let s = size as f64;
    let mut mask = vec![false; size * size];
    match kind {
        ShapeKind::Rectangle => {
            let (lo, hi) = ((size / 6).max(2), (size / 3).max(3));
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            for y in y0..y0 + h {
                mask[y * size + x0..y * size + x0 + w].fill(true);
            }
            (mask, (x0 + w / 2, y0 + h / 2))
        }
        ShapeKind::Disc => {
            let r = rng.random_range(s / 10.0..s / 6.0);
            let cx = rng.random_range(r..s - r);
            let cy = rng.random_range(r..s - r);
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    mask[y * size + x] = dx * dx + dy * dy <= r * r;
                }
            }
            (mask, (cx as usize, cy as usize))
        }
    }
}

/// A colour at least [`MIN_COLOR_CONTRAST`] away (max-norm) from `base`.
fn contrasting_color(base: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let c = [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ];
        let dist = c
            .iter()
            .zip(&base)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if dist >= MIN_COLOR_CONTRAST {
            return c;
        }
    }
}

fn place_object(
    canvas: &Canvas,
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<bool>, [f64; 3]) {
    let kind = cfg.shape_kinds[rng.random_range(0..cfg.shape_kinds.len())];
    let (mask, (cx, cy)) = shape_mask(kind, cfg.image_size, rng);
    let color = contrasting_color(
        canvas.at(cx.min(canvas.size - 1), cy.min(canvas.size - 1)),
        rng,
    );
    (mask, color)
}

/// Global brightness/contrast shift and per-channel gain.
fn photometric(canvas: &mut Canvas, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) {
    let sym = |a: f64, rng: &mut ChaCha8Rng| {
        if a > 0.0 {
            rng.random_range(-a..a)
        } else {
            0.0
        }
    };
    let shift = sym(cfg.brightness, rng);
    let contrast = 1.0 + sym(cfg.contrast, rng);
    let gains = [
        1.0 + sym(cfg.gain, rng),
        1.0 + sym(cfg.gain, rng),
        1.0 + sym(cfg.gain, rng),
    ];
    for (i, v) in canvas.px.iter_mut().enumerate() {
        *v = ((*v - 0.5) * contrast + 0.5 + shift) * gains[i % 3];
    }
}

fn add_noise(canvas: &mut Canvas, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    canvas.px.iter_mut().for_each(|v| *v += normal.sample(rng));
}

/// Deterministic in `(cfg, seed)`.
pub fn generate_pair(cfg: &SyntheticConfig, seed: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    for _ in 0..MAX_ATTEMPTS {
        let mut t0 = background(size, &mut rng);
        for _ in 0..cfg.n_static {
            let (mask, color) = place_object(&t0, cfg, &mut rng);
            t0.paint(&mask, color);
        }
        let mut t1 = Canvas {
            size,
            px: t0.px.clone(),
        };
        let mut label = vec![0u8; size * size];
        for _ in 0..cfg.n_shapes {
            let inserted = rng.random_bool(0.5);
            let target = if inserted { &t1 } else { &t0 };
            let (mask, color) = place_object(target, cfg, &mut rng);
            if inserted {
                t1.paint(&mask, color);
            } else {
                t0.paint(&mask, color);
            }
            for (l, &m) in label.iter_mut().zip(&mask) {
                *l |= m as u8;
            }
        }
        let label = LabelMap::new(size, size, label)?;
        if cfg.n_shapes > 0 {
            let frac = label.changed_fraction();
            if frac < cfg.changed_band.0 || frac > cfg.changed_band.1 {
                continue;
            }
        }
        photometric(&mut t1, cfg, &mut rng);
        add_noise(&mut t0, cfg.noise_sigma, &mut rng);
        add_noise(&mut t1, cfg.noise_sigma, &mut rng);
        let pair = ImagePair::new(t0.quantize(), t1.quantize())?;
        return Ok(Sample { pair, label });
    }
    Err(Error::Config(format!(
        "could not place {} change objects with a changed fraction inside {:?} after {MAX_ATTEMPTS} attempts",
        cfg.n_shapes, cfg.changed_band
    )))
}

/// `n` pairs whose per-pair seeds are drawn from `seed`.
pub fn generate_dataset(cfg: &SyntheticConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_pair(cfg, rng.random())).collect()
}
