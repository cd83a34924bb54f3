//! Shared-weight Siamese convolutional feature extractor.
//!
//! Each block is a same-padded convolution, a ReLU on every block except the
//! last (the output embedding is linear), and an optional 2×2 max pool.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_mismatch, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 3;
/// Smallest feature-map side the decision stage works with.
pub const MIN_FEATURE_SIDE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub downsample: Vec<bool>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32],
            kernel_size: 3,
            downsample: vec![true, true, false],
        }
    }
}

impl EncoderConfig {
    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.channels.len() != self.downsample.len() {
            return Err(Error::Config(format!(
                "encoder has {} channel entries but {} downsample flags",
                self.channels.len(),
                self.downsample.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config(
                "encoder channel counts must be positive".into(),
            ));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size must be a positive odd integer, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Total spatial reduction factor.
    pub fn stride(&self) -> usize {
        1 << self.downsample.iter().filter(|&&d| d).count()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated encoder config")
    }

    /// Feature-map size for an `h×w` input, or a shape error when the input
    /// cannot be reduced cleanly.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.stride();
        if !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            let pad = |x: usize| (s - x % s) % s;
            return Err(Error::Shape(format!(
                "input {h}×{w} is not divisible by the encoder stride {s}; pad by {}×{} to {}×{}",
                pad(h),
                pad(w),
                h + pad(h),
                w + pad(w)
            )));
        }
        let (oh, ow) = (h / s, w / s);
        if oh < MIN_FEATURE_SIDE || ow < MIN_FEATURE_SIDE {
            return Err(Error::Shape(format!(
                "input {h}×{w} yields a {oh}×{ow} feature map; at least {m}×{m} is required",
                m = MIN_FEATURE_SIDE
            )));
        }
        Ok((oh, ow))
    }

    pub fn weight_name(block: usize) -> String {
        format!("enc.block{block}.w")
    }

    pub fn bias_name(block: usize) -> String {
        format!("enc.block{block}.b")
    }

    /// He-normal kernels scaled by fan-in, zero biases.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        let k = self.kernel_size;
        let mut c_in = INPUT_CHANNELS;
        for (i, &c_out) in self.channels.iter().enumerate() {
            let fan_in = (c_in * k * k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| normal.sample(rng));
            store.insert(Self::weight_name(i), w);
            store.insert(Self::bias_name(i), Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        Ok(())
    }
}

/// Runs the encoder on one `3×H×W` image already recorded on `graph`.
pub fn encode(
    graph: &mut Graph,
    image: Var,
    params: &BoundParams,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let (c, h, w) = graph.value(image).dims3()?;
    if c != INPUT_CHANNELS {
        return Err(Error::Shape(format!(
            "encoder expects {INPUT_CHANNELS} input channels, got {c}"
        )));
    }
    cfg.validate()?;
    cfg.output_size(h, w)?;
    let last = cfg.blocks() - 1;
    let mut x = image;
    for block in 0..cfg.blocks() {
        let wv = params.var(&EncoderConfig::weight_name(block))?;
        let bv = params.var(&EncoderConfig::bias_name(block))?;
        x = graph.conv2d(x, wv, Some(bv), 1, cfg.kernel_size / 2)?;
        if block != last {
            x = graph.relu(x)?;
        }
        if cfg.downsample[block] {
            x = graph.max_pool2(x)?;
        }
    }
    Ok(x)
}

/// Encodes both images of a bitemporal pair with the same bound weights.
pub fn encode_pair(
    graph: &mut Graph,
    t0: Var,
    t1: Var,
    params: &BoundParams,
    cfg: &EncoderConfig,
) -> Result<(Var, Var)> {
    let (s0, s1) = (graph.value(t0).shape(), graph.value(t1).shape());
    if s0 != s1 {
        return Err(shape_mismatch("bitemporal images differ in shape", s0, s1));
    }
    let f0 = encode(graph, t0, params, cfg)?;
    let f1 = encode(graph, t1, params, cfg)?;
    Ok((f0, f1))
}

/// Forward-only feature pair for two `3×H×W` images.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    pub f_t0: Tensor,
    pub f_t1: Tensor,
}

impl FeaturePair {
    pub fn compute(
        t0: &Tensor,
        t1: &Tensor,
        store: &ParamStore,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let params = BoundParams::bind(&mut g, store);
        let a = g.constant(t0.clone());
        let b = g.constant(t1.clone());
        let (f0, f1) = encode_pair(&mut g, a, b, &params, cfg)?;
        Ok(Self {
            f_t0: g.value(f0).clone(),
            f_t1: g.value(f1).clone(),
        })
    }

    pub fn swap(self) -> Self {
        Self {
            f_t0: self.f_t1,
            f_t1: self.f_t0,
        }
    }
}
