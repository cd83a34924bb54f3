//! Pixel-pair distances, the contrastive baseline, the weighted double-margin
//! contrastive (WDMC) loss, class-frequency weights, and deep supervision.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::tensor::Tensor;

/// Binary change labels, `0` = unchanged, `1` = changed, row-major `H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::Shape(format!(
                "label map {height}×{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!(
                "label entries must be 0 or 1, found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn changed(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }

    pub fn unchanged(&self) -> u64 {
        self.data.len() as u64 - self.changed()
    }

    pub fn changed_fraction(&self) -> f64 {
        self.changed() as f64 / self.data.len() as f64
    }

    /// Reduces resolution by `factor` with a majority vote per cell; ties count
    /// as changed.
    pub fn downsample_majority(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor)
        {
            return Err(Error::Shape(format!(
                "label map {}×{} cannot be reduced by {factor}",
                self.height, self.width
            )));
        }
        let (oh, ow) = (self.height / factor, self.width / factor);
        let cell = factor * factor;
        let mut out = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut count = 0;
                for y in oy * factor..(oy + 1) * factor {
                    for x in ox * factor..(ox + 1) * factor {
                        count += self.data[y * self.width + x] as usize;
                    }
                }
                out.push(u8::from(2 * count >= cell));
            }
        }
        Self::new(oh, ow, out)
    }
}

/// Non-negative per-pixel distances between two feature maps, `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap(Tensor);

impl DistanceMap {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims2()?;
        if t.data().iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Contract(
                "distances must be finite and non-negative".into(),
            ));
        }
        Ok(Self(t))
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(vec![height, width], values)?)
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn max(&self) -> f64 {
        self.values().iter().copied().fold(0.0, f64::max)
    }

    /// Repeats every cell `factor` times along both axes.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Contract("upsampling factor must be positive".into()));
        }
        let (h, w) = self.shape();
        let src = self.values();
        let out = (0..h * factor)
            .flat_map(|y| (0..w * factor).map(move |x| src[(y / factor) * w + x / factor]))
            .collect();
        Self::from_values(h * factor, w * factor, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    L2,
    Cosine,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Self::L2),
            "cosine" | "cos" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown distance metric {other:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::L2 => "l2",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Contrastive,
    Wdmc,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(Self::Contrastive),
            "wdmc" => Ok(Self::Wdmc),
            other => Err(Error::Config(format!("unknown loss mode {other:?}"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Contrastive => "contrastive",
            Self::Wdmc => "wdmc",
        })
    }
}

/// How per-pixel terms are combined into one image loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Sum divided by the number of pixels.
    Mean,
    Sum,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(Error::Config(format!("unknown loss reduction {other:?}"))),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        })
    }
}

/// Margins, class weights and deep-supervision weights.
///
/// The contrastive baseline uses `m2` as its single margin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub m1: f64,
    pub m2: f64,
    pub w1: f64,
    pub w2: f64,
    pub lambda: [f64; 3],
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            m1: 0.3,
            m2: 2.2,
            w1: 1.0,
            w2: 1.0,
            lambda: [1.0, 1.0, 1.0],
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.m1, self.m2, self.w1, self.w2]
            .iter()
            .chain(&self.lambda)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("loss parameters must be finite".into()));
        }
        if self.m1 < 0.0 {
            return Err(Error::Config(format!("m1 must be ≥ 0, got {}", self.m1)));
        }
        if self.m2 <= self.m1 {
            return Err(Error::Config(format!(
                "m2 ({}) must exceed m1 ({})",
                self.m2, self.m1
            )));
        }
        if self.w1 <= 0.0 || self.w2 <= 0.0 {
            return Err(Error::Config("class weights must be positive".into()));
        }
        if self.lambda.iter().any(|&l| l < 0.0) {
            return Err(Error::Config("supervision weights must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Decision threshold at the middle of the `(m1, m2)` dead zone.
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.m1 + self.m2)
    }
}

// Per-pixel kernels: (value, d value / d distance).

fn contrastive_term(d: f64, y: u8, margin: f64) -> (f64, f64) {
    if y == 0 {
        (0.5 * d * d, d)
    } else {
        let h = (margin - d).max(0.0);
        (0.5 * h * h, -h)
    }
}

fn wdmc_term(d: f64, y: u8, cfg: &LossConfig) -> (f64, f64) {
    if y == 0 {
        let h = (d - cfg.m1).max(0.0);
        (0.5 * cfg.w1 * h * h, cfg.w1 * h)
    } else {
        let h = (cfg.m2 - d).max(0.0);
        (0.5 * cfg.w2 * h * h, -cfg.w2 * h)
    }
}

fn check_label(d: (usize, usize), y: &LabelMap) -> Result<()> {
    if d != y.shape() {
        return Err(Error::Shape(format!(
            "distance map {}×{} vs label map {}×{}",
            d.0,
            d.1,
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// `Σ ½[(1−y)·d² + y·max(m − d, 0)²]`.
pub fn contrastive_loss(d: &DistanceMap, y: &LabelMap, margin: f64) -> Result<f64> {
    check_label(d.shape(), y)?;
    if margin.is_nan() || margin < 0.0 {
        return Err(Error::Contract(format!("margin must be ≥ 0, got {margin}")));
    }
    Ok(d.values()
        .iter()
        .zip(y.data())
        .map(|(&dv, &yv)| contrastive_term(dv, yv, margin).0)
        .sum())
}

/// `Σ ½[w1·(1−y)·max(d − m1, 0)² + w2·y·max(m2 − d, 0)²]`.
pub fn wdmc_loss(d: &DistanceMap, y: &LabelMap, cfg: &LossConfig) -> Result<f64> {
    check_label(d.shape(), y)?;
    cfg.validate()?;
    Ok(d.values()
        .iter()
        .zip(y.data())
        .map(|(&dv, &yv)| wdmc_term(dv, yv, cfg).0)
        .sum())
}

/// Inverse class frequencies `(w1, w2) = (1/P_U, 1/P_C)`.
pub fn class_weights(n_changed: u64, n_unchanged: u64) -> Result<(f64, f64)> {
    if n_changed == 0 || n_unchanged == 0 {
        return Err(Error::Degenerate(format!(
            "class weights need both classes present (changed = {n_changed}, unchanged = {n_unchanged}); \
             clamp the counts or rebalance the dataset"
        )));
    }
    let total = (n_changed + n_unchanged) as f64;
    let p_u = n_unchanged as f64 / total;
    let p_c = n_changed as f64 / total;
    Ok((1.0 / p_u, 1.0 / p_c))
}

/// `λ1·L_sa + λ2·L_ca + λ3·L_e`.
pub fn total_loss(l_sa: f64, l_ca: f64, l_e: f64, cfg: &LossConfig) -> f64 {
    let [a, b, c] = cfg.lambda;
    a * l_sa + b * l_ca + c * l_e
}

fn l2_pixel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Returns `(d, cos)`; a zero vector on either side gives `d = 1`.
fn cosine_pixel(a: &[f64], b: &[f64]) -> (f64, Option<(f64, f64, f64)>) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (1.0, None);
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    (1.0 - cos, Some((cos, na, nb)))
}

fn gather(f: &[f64], c: usize, n: usize, pos: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend((0..c).map(|ch| f[ch * n + pos]));
}

fn distances(f0: &Tensor, f1: &Tensor, metric: Metric) -> Result<Tensor> {
    f0.same_shape(f1, "pixel distance between feature maps")?;
    let (c, h, w) = f0.dims3()?;
    let n = h * w;
    let (mut a, mut b) = (Vec::with_capacity(c), Vec::with_capacity(c));
    let mut out = Vec::with_capacity(n);
    for pos in 0..n {
        gather(f0.data(), c, n, pos, &mut a);
        gather(f1.data(), c, n, pos, &mut b);
        out.push(match metric {
            Metric::L2 => l2_pixel(&a, &b),
            Metric::Cosine => cosine_pixel(&a, &b).0,
        });
    }
    Tensor::new(vec![h, w], out)
}

/// Per-pixel distance between the channel vectors of two `C×H×W` maps.
pub fn pixel_distance(f0: &Tensor, f1: &Tensor, metric: Metric) -> Result<DistanceMap> {
    DistanceMap::new(distances(f0, f1, metric)?)
}

struct PixelDistanceOp {
    metric: Metric,
}

impl CustomOp for PixelDistanceOp {
    fn name(&self) -> &'static str {
        "pixel_distance"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (f0, f1) = (inputs[0], inputs[1]);
        let (c, h, w) = f0.dims3().expect("recorded feature map");
        let n = h * w;
        let mut g0 = vec![0.0; f0.numel()];
        let mut g1 = vec![0.0; f1.numel()];
        let (mut a, mut b) = (Vec::with_capacity(c), Vec::with_capacity(c));
        for pos in 0..n {
            let gd = grad[pos];
            if gd == 0.0 {
                continue;
            }
            gather(f0.data(), c, n, pos, &mut a);
            gather(f1.data(), c, n, pos, &mut b);
            match self.metric {
                Metric::L2 => {
                    let d = output.data()[pos];
                    // Subgradient 0 where both vectors coincide.
                    if d == 0.0 {
                        continue;
                    }
                    for ch in 0..c {
                        let k = gd * (a[ch] - b[ch]) / d;
                        g0[ch * n + pos] += k;
                        g1[ch * n + pos] -= k;
                    }
                }
                Metric::Cosine => {
                    let Some((cos, na, nb)) = cosine_pixel(&a, &b).1 else {
                        continue;
                    };
                    // d = 1 − cos; ∂cos/∂a = b/(|a||b|) − cos·a/|a|².
                    for ch in 0..c {
                        let dca = b[ch] / (na * nb) - cos * a[ch] / (na * na);
                        let dcb = a[ch] / (na * nb) - cos * b[ch] / (nb * nb);
                        g0[ch * n + pos] -= gd * dca;
                        g1[ch * n + pos] -= gd * dcb;
                    }
                }
            }
        }
        vec![Some(g0), Some(g1)]
    }
}

/// Records [`pixel_distance`] on the graph.
pub fn pixel_distance_var(g: &mut Graph, f0: Var, f1: Var, metric: Metric) -> Result<Var> {
    let out = distances(g.value(f0), g.value(f1), metric)?;
    g.custom(&[f0, f1], out, Box::new(PixelDistanceOp { metric }))
}

struct PairLossOp {
    labels: Vec<u8>,
    mode: LossMode,
    cfg: LossConfig,
}

impl PairLossOp {
    fn term(&self, d: f64, y: u8) -> (f64, f64) {
        match self.mode {
            LossMode::Contrastive => contrastive_term(d, y, self.cfg.m2),
            LossMode::Wdmc => wdmc_term(d, y, &self.cfg),
        }
    }

    fn norm(&self) -> f64 {
        match self.cfg.reduction {
            Reduction::Mean => 1.0 / self.labels.len() as f64,
            Reduction::Sum => 1.0,
        }
    }
}

impl CustomOp for PairLossOp {
    fn name(&self) -> &'static str {
        "pair_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let k = grad[0] * self.norm();
        let dd = inputs[0]
            .data()
            .iter()
            .zip(&self.labels)
            .map(|(&d, &y)| k * self.term(d, y).1)
            .collect();
        vec![Some(dd)]
    }
}

/// Records the contrastive or WDMC loss of a distance map against labels,
/// reduced according to `cfg.reduction`.
pub fn pair_loss_var(
    g: &mut Graph,
    d: Var,
    y: &LabelMap,
    mode: LossMode,
    cfg: &LossConfig,
) -> Result<Var> {
    let (h, w) = g.value(d).dims2()?;
    check_label((h, w), y)?;
    let op = PairLossOp {
        labels: y.data().to_vec(),
        mode,
        cfg: *cfg,
    };
    let sum: f64 = g
        .value(d)
        .data()
        .iter()
        .zip(y.data())
        .map(|(&dv, &yv)| op.term(dv, yv).0)
        .sum();
    let value = sum * op.norm();
    g.custom(&[d], Tensor::scalar(value), Box::new(op))
}
