//! Plain-text `key=value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::attention::AttentionConfig;
use crate::data::{ShapeKind, SyntheticConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossMode, Metric, Reduction};

/// Where `w1`/`w2` come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// Inverse class frequencies of the training labels.
    Dataset,
    Manual,
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset" => Ok(Self::Dataset),
            "manual" => Ok(Self::Manual),
            other => Err(Error::Config(format!("unknown weight_mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits {
    pub generator: SyntheticConfig,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SyntheticSplits {
    fn default() -> Self {
        Self {
            generator: SyntheticConfig::default(),
            train: 200,
            val: 25,
            test: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSplits),
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub loss_mode: LossMode,
    pub metric: Metric,
    pub loss: LossConfig,
    pub weight_mode: WeightMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Decision threshold; `None` means the `(m1 + m2) / 2` midpoint.
    pub threshold: Option<f64>,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            loss_mode: LossMode::Wdmc,
            metric: Metric::L2,
            loss: LossConfig::default(),
            weight_mode: WeightMode::Dataset,
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 20,
            seed: 0,
            threshold: None,
            data: DataSource::Synthetic(SyntheticSplits::default()),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

fn parse_list<T>(key: &str, value: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    value.split(',').map(|v| item(key, v.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or_else(|| self.loss.midpoint())
    }

    fn synthetic_mut(&mut self) -> &mut SyntheticSplits {
        if !matches!(self.data, DataSource::Synthetic(_)) {
            self.data = DataSource::Synthetic(SyntheticSplits::default());
        }
        match &mut self.data {
            DataSource::Synthetic(s) => s,
            DataSource::Manifest(_) => unreachable!(),
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "channels" => self.encoder.channels = parse_list(key, value, parse)?,
            "kernel_size" => self.encoder.kernel_size = parse(key, value)?,
            "downsample" => self.encoder.downsample = parse_list(key, value, parse_bool)?,
            "spatial_attention" => self.attention.spatial = parse_bool(key, value)?,
            "channel_attention" => self.attention.channel = parse_bool(key, value)?,
            "loss" => self.loss_mode = value.parse()?,
            "metric" => self.metric = value.parse()?,
            "m1" => self.loss.m1 = parse(key, value)?,
            "m2" => self.loss.m2 = parse(key, value)?,
            "w1" => self.loss.w1 = parse(key, value)?,
            "w2" => self.loss.w2 = parse(key, value)?,
            "lambda1" => self.loss.lambda[0] = parse(key, value)?,
            "lambda2" => self.loss.lambda[1] = parse(key, value)?,
            "lambda3" => self.loss.lambda[2] = parse(key, value)?,
            "reduction" => self.loss.reduction = value.parse::<Reduction>()?,
            "weight_mode" => self.weight_mode = value.parse()?,
            "lr" | "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threshold" => {
                self.threshold = match value {
                    "" | "midpoint" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "manifest" => self.data = DataSource::Manifest(PathBuf::from(value)),
            "data" if value == "synthetic" => {
                self.synthetic_mut();
            }
            "train_pairs" => self.synthetic_mut().train = parse(key, value)?,
            "val_pairs" => self.synthetic_mut().val = parse(key, value)?,
            "test_pairs" => self.synthetic_mut().test = parse(key, value)?,
            "image_size" => self.synthetic_mut().generator.image_size = parse(key, value)?,
            "n_shapes" => self.synthetic_mut().generator.n_shapes = parse(key, value)?,
            "n_static" => self.synthetic_mut().generator.n_static = parse(key, value)?,
            "shape_kinds" => {
                self.synthetic_mut().generator.shape_kinds =
                    parse_list(key, value, |k, v| match v {
                        "rectangle" => Ok(ShapeKind::Rectangle),
                        "disc" => Ok(ShapeKind::Disc),
                        _ => Err(Error::Config(format!("{k}: unknown shape {v:?}"))),
                    })?
            }
            "brightness" => self.synthetic_mut().generator.brightness = parse(key, value)?,
            "contrast" => self.synthetic_mut().generator.contrast = parse(key, value)?,
            "gain" => self.synthetic_mut().generator.gain = parse(key, value)?,
            "noise_sigma" => self.synthetic_mut().generator.noise_sigma = parse(key, value)?,
            "changed_min" => self.synthetic_mut().generator.changed_band.0 = parse(key, value)?,
            "changed_max" => self.synthetic_mut().generator.changed_band.1 = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Parses a `key=value` document over the defaults. Blank lines and `#`
    /// comments are ignored.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("channels", join(&self.encoder.channels));
        put("kernel_size", self.encoder.kernel_size.to_string());
        put("downsample", join(&self.encoder.downsample));
        put("spatial_attention", self.attention.spatial.to_string());
        put("channel_attention", self.attention.channel.to_string());
        put("loss", self.loss_mode.to_string());
        put("metric", self.metric.to_string());
        put("m1", self.loss.m1.to_string());
        put("m2", self.loss.m2.to_string());
        put("w1", self.loss.w1.to_string());
        put("w2", self.loss.w2.to_string());
        put("lambda1", self.loss.lambda[0].to_string());
        put("lambda2", self.loss.lambda[1].to_string());
        put("lambda3", self.loss.lambda[2].to_string());
        put("reduction", self.loss.reduction.to_string());
        put(
            "weight_mode",
            match self.weight_mode {
                WeightMode::Dataset => "dataset",
                WeightMode::Manual => "manual",
            }
            .into(),
        );
        put("lr", self.learning_rate.to_string());
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("seed", self.seed.to_string());
        put(
            "threshold",
            self.threshold.map_or("midpoint".into(), |t| t.to_string()),
        );
        match &self.data {
            DataSource::Manifest(p) => put("manifest", p.display().to_string()),
            DataSource::Synthetic(s) => {
                let g = &s.generator;
                put("data", "synthetic".into());
                put("train_pairs", s.train.to_string());
                put("val_pairs", s.val.to_string());
                put("test_pairs", s.test.to_string());
                put("image_size", g.image_size.to_string());
                put("n_shapes", g.n_shapes.to_string());
                put("n_static", g.n_static.to_string());
                put(
                    "shape_kinds",
                    g.shape_kinds
                        .iter()
                        .map(|k| match k {
                            ShapeKind::Rectangle => "rectangle",
                            ShapeKind::Disc => "disc",
                        })
                        .collect::<Vec<_>>()
                        .join(","),
                );
                put("brightness", g.brightness.to_string());
                put("contrast", g.contrast.to_string());
                put("gain", g.gain.to_string());
                put("noise_sigma", g.noise_sigma.to_string());
                put("changed_min", g.changed_band.0.to_string());
                put("changed_max", g.changed_band.1.to_string());
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(t) = self.threshold {
            if t.is_nan() || t < 0.0 {
                return Err(Error::Config(format!("threshold must be ≥ 0, got {t}")));
            }
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.generator.validate()?;
            self.encoder
                .output_size(s.generator.image_size, s.generator.image_size)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_desk_settings() {
        let c = RunConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.epochs, 20);
        assert_eq!((c.loss.m1, c.loss.m2), (0.3, 2.2));
        assert_eq!(c.loss.lambda, [1.0; 3]);
        assert_eq!(c.threshold(), 1.25);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = RunConfig::default();
        c.apply_kv("loss=contrastive\nmetric=cosine # inline\nlr=0.001\nchannels=8,8\ndownsample=true,false\nthreshold=0.9\nlambda2=0.25\n")
            .unwrap();
        assert_eq!(c.loss_mode, LossMode::Contrastive);
        assert_eq!(c.encoder.channels, vec![8, 8]);
        assert_eq!(c.threshold(), 0.9);
        let back = RunConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn manifest_source_round_trips() {
        let c = RunConfig::from_kv("manifest=/tmp/m.tsv\n").unwrap();
        assert_eq!(c.data, DataSource::Manifest("/tmp/m.tsv".into()));
        assert_eq!(RunConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_kv("bogus=1").is_err());
        assert!(RunConfig::from_kv("epochs=-1").is_err());
        assert!(RunConfig::from_kv("no equals sign").is_err());
        let c = RunConfig::from_kv("m2=0.1").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_kv("image_size=18").unwrap();
        assert!(c.validate().is_err());
    }
}
