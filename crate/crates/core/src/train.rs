//! Optimisation, checkpoints, evaluation, prediction and gradient checking.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{CA_GAMMA, SA_ETA};
use crate::check::GradComparison;
use crate::checkpoint;
use crate::config::{DataSource, RunConfig, WeightMode};
use crate::data::{
    self, generate_dataset, generate_pair, ImagePair, Manifest, Split, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{class_weights, DistanceMap, LabelMap};
use crate::metrics::{confusion, metrics, threshold, ChangeMap, Confusion, MetricsReport};
use crate::model::{DasNet, ModelConfig};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_REL_TOL: f64 = 1e-4;
pub const GRADCHECK_ABS_TOL: f64 = 1e-8;
const GRADCHECK_IMAGE_SIZE: usize = 16;

const META_CONFIG: &str = "meta.config";
const META_EPOCH: &str = "meta.epoch";
const META_HISTORY: &str = "meta.loss_history";

/// Adam with bias correction; moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if g.len() != p.numel() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    g.len(),
                    p.numel()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// An image pair ready for the network, with its image-resolution label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub pair: ImagePair,
    pub label: LabelMap,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Seeds for the independent random streams of a run, all drawn from one
/// run seed.
#[derive(Clone, Copy, Debug)]
struct Seeds {
    init: u64,
    shuffle: u64,
    data: [u64; 3],
}

impl Seeds {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            init: rng.random(),
            shuffle: rng.random(),
            data: [rng.random(), rng.random(), rng.random()],
        }
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic(s) => {
            let seeds = Seeds::new(cfg.seed).data;
            let make = |n, seed| -> Result<Vec<Example>> {
                Ok(generate_dataset(&s.generator, n, seed)?
                    .into_iter()
                    .map(|s| Example {
                        pair: s.pair,
                        label: s.label,
                    })
                    .collect())
            };
            Ok(Dataset {
                train: make(s.train, seeds[0])?,
                val: make(s.val, seeds[1])?,
                test: make(s.test, seeds[2])?,
            })
        }
        DataSource::Manifest(path) => {
            let manifest = Manifest::load(path)?;
            let mut out = Dataset::default();
            for entry in &manifest.entries {
                let (pair, label) = data::load_pair(entry)?;
                pair.check_bounds(data::MIN_SIDE, data::MAX_SIDE)?;
                let ex = Example { pair, label };
                match entry.split {
                    Split::Train => out.train.push(ex),
                    Split::Val => out.val.push(ex),
                    Split::Test => out.test.push(ex),
                }
            }
            Ok(out)
        }
    }
}

/// A trained model with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Snapshot with class weights already resolved.
    pub config: RunConfig,
    pub model: DasNet,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

impl Checkpoint {
    pub fn to_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let text: Vec<f64> = self.config.to_kv().bytes().map(f64::from).collect();
        let mut out = vec![
            (
                META_CONFIG.to_string(),
                Tensor::new(vec![text.len()], text)?,
            ),
            (META_EPOCH.to_string(), Tensor::scalar(self.epoch as f64)),
        ];
        if !self.loss_history.is_empty() {
            out.push((
                META_HISTORY.to_string(),
                Tensor::new(vec![self.loss_history.len()], self.loss_history.clone())?,
            ));
        }
        out.extend(
            self.model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone())),
        );
        Ok(out)
    }

    pub fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut config = None;
        let mut epoch = None;
        let mut loss_history = Vec::new();
        let mut params = ParamStore::new();
        for (name, t) in tensors {
            match name.as_str() {
                META_CONFIG => {
                    let bytes: Option<Vec<u8>> = t
                        .data()
                        .iter()
                        .map(|&v| {
                            (v.fract() == 0.0 && (0.0..256.0).contains(&v)).then_some(v as u8)
                        })
                        .collect();
                    let text = bytes
                        .and_then(|b| String::from_utf8(b).ok())
                        .ok_or_else(|| Error::Format("configuration record is not text".into()))?;
                    config =
                        Some(RunConfig::from_kv(&text).map_err(|e| Error::Format(e.to_string()))?);
                }
                META_EPOCH => epoch = Some(t.item()? as usize),
                META_HISTORY => loss_history = t.into_data(),
                _ => params.insert(name, t),
            }
        }
        let config =
            config.ok_or_else(|| Error::Format(format!("missing {META_CONFIG} record")))?;
        let epoch = epoch.ok_or_else(|| Error::Format(format!("missing {META_EPOCH} record")))?;
        let model_cfg = ModelConfig::from(&config);
        let reference = DasNet::init(model_cfg.clone(), 0)?;
        let expected: Vec<_> = reference
            .params
            .iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        let found: Vec<_> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(Error::Format(format!(
                "parameters do not match the stored configuration: expected {:?}, found {:?}",
                expected.iter().map(|p| p.0).collect::<Vec<_>>(),
                found.iter().map(|p| p.0).collect::<Vec<_>>()
            )));
        }
        Ok(Self {
            config,
            model: DasNet::new(model_cfg, params),
            epoch,
            loss_history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Network inputs precomputed once per example.
struct Prepared {
    t0: Tensor,
    t1: Tensor,
    label: LabelMap,
}

fn resolve_weights(cfg: &mut RunConfig, labels: &[LabelMap]) -> Result<()> {
    if cfg.weight_mode == WeightMode::Dataset {
        let changed: u64 = labels.iter().map(LabelMap::changed).sum();
        let unchanged: u64 = labels.iter().map(LabelMap::unchanged).sum();
        let (w1, w2) = class_weights(changed, unchanged)?;
        cfg.loss.w1 = w1;
        cfg.loss.w2 = w2;
    }
    Ok(())
}

/// Total loss, its `(L_sa, L_ca, L_e)` parts, and parameter gradients.
type ExampleGrads = (f64, [Option<f64>; 3], BTreeMap<String, Vec<f64>>);

fn example_grads(model: &DasNet, ex: &Prepared) -> Result<ExampleGrads> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &model.params);
    let a = g.constant(ex.t0.clone());
    let b = g.constant(ex.t1.clone());
    let fwd = model.forward_graph(&mut g, &bound, a, b)?;
    let l = model.loss_graph(&mut g, &fwd, &ex.label)?;
    let value = |v: Option<_>| v.map(|v| g.value(v).data()[0]);
    let parts = [value(l.l_sa), value(l.l_ca), value(Some(l.l_e))];
    let total = g.value(l.total).item()?;
    if !total.is_finite() {
        return Ok((total, parts, BTreeMap::new()));
    }
    let grads = g.backward(l.total)?;
    Ok((total, parts, bound.collect(&g, &grads)))
}

/// Trains from scratch. Every random choice derives from `cfg.seed`, so equal
/// inputs give bit-identical checkpoints.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Degenerate("training split is empty".into()));
    }
    let seeds = Seeds::new(cfg.seed);
    let mut cfg = cfg.clone();
    let stride = cfg.encoder.stride();
    let prepared = data
        .train
        .iter()
        .map(|ex| {
            cfg.encoder.output_size(ex.pair.height(), ex.pair.width())?;
            Ok(Prepared {
                t0: ex.pair.t0.to_tensor(),
                t1: ex.pair.t1.to_tensor(),
                label: ex.label.downsample_majority(stride)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<_> = prepared.iter().map(|p| p.label.clone()).collect();
    resolve_weights(&mut cfg, &labels)?;

    let mut model = DasNet::init(ModelConfig::from(&cfg), seeds.init)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &i in batch {
                let (loss, parts, grads) = example_grads(&model, &prepared[i])?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch}, batch {batch_no}, example {i}: \
                         L_sa={:?} L_ca={:?} L_e={:?}",
                        parts[0], parts[1], parts[2]
                    )));
                }
                epoch_loss += loss;
                for (name, gv) in grads {
                    match acc.get_mut(&name) {
                        Some(a) => a.iter_mut().zip(&gv).for_each(|(a, g)| *a += g),
                        None => {
                            acc.insert(name, gv);
                        }
                    }
                }
            }
            let k = 1.0 / batch.len() as f64;
            for gv in acc.values_mut() {
                gv.iter_mut().for_each(|g| *g *= k);
            }
            if let Some((name, _)) = acc.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged(format!(
                    "non-finite gradient for {name} at epoch {epoch}, batch {batch_no}"
                )));
            }
            adam.step(&mut model.params, &acc)?;
        }
        let report = EpochReport {
            epoch: epoch + 1,
            mean_loss: epoch_loss / prepared.len() as f64,
        };
        history.push(report.mean_loss);
        on_epoch(&report);
    }

    Ok(Checkpoint {
        config: cfg.clone(),
        model,
        epoch: cfg.epochs,
        loss_history: history,
    })
}

/// Feature-resolution distance maps paired with labels reduced to the same
/// grid, the resolution the loss is trained at.
pub fn distance_maps(model: &DasNet, examples: &[Example]) -> Result<Vec<(DistanceMap, LabelMap)>> {
    examples
        .iter()
        .map(|ex| {
            Ok((
                model.distance_pair(&ex.pair)?,
                model.feature_label(&ex.label)?,
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Micro-averaged over all pixels of the split.
    pub overall: MetricsReport,
    pub per_image: Vec<MetricsReport>,
    pub threshold: f64,
}

pub fn evaluate(model: &DasNet, examples: &[Example], t: f64) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Degenerate("evaluation split is empty".into()));
    }
    let mut per_image = Vec::with_capacity(examples.len());
    let mut total = Confusion::default();
    for (d, label) in distance_maps(model, examples)? {
        let c = confusion(&threshold(&d, t), &label)?;
        total.merge(&c);
        per_image.push(metrics(c));
    }
    Ok(EvalReport {
        overall: metrics(total),
        per_image,
        threshold: t,
    })
}

/// Prediction for one pair. Feature cells are repeated to the image size so
/// `change` is exactly `threshold(distance, t)` at every image pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub distance: DistanceMap,
    pub change: ChangeMap,
    /// Distance represented by one grey level in the saved distance image.
    pub scale: f64,
}

pub fn predict(model: &DasNet, pair: &ImagePair, t: f64) -> Result<Prediction> {
    let distance = model
        .distance_pair(pair)?
        .upsample_nearest(model.config.encoder.stride())?;
    let change = threshold(&distance, t);
    let max = distance.max();
    let scale = if max > 0.0 { max / 255.0 } else { 1.0 };
    Ok(Prediction {
        distance,
        change,
        scale,
    })
}

impl Prediction {
    /// Writes `distance.png`, `distance_scale.txt` and `change.png` to `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (h, w) = self.distance.shape();
        let grey: Vec<u8> = self
            .distance
            .values()
            .iter()
            .map(|&d| (d / self.scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        data::save_gray(&dir.join("distance.png"), w, h, &grey)?;
        fs::write(
            dir.join("distance_scale.txt"),
            format!(
                "distance_per_level={}\nmax_distance={}\n",
                self.scale,
                self.distance.max()
            ),
        )?;
        data::save_change_map(&dir.join("change.png"), &self.change)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub comparison: GradComparison,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub probes: Vec<Probe>,
    pub max_relative: f64,
    pub max_absolute: f64,
    pub passed: bool,
}

fn total_loss(model: &DasNet, ex: &Prepared) -> Result<f64> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &model.params);
    let a = g.constant(ex.t0.clone());
    let b = g.constant(ex.t1.clone());
    let fwd = model.forward_graph(&mut g, &bound, a, b)?;
    let l = model.loss_graph(&mut g, &fwd, &ex.label)?;
    g.value(l.total).item()
}

/// Compares analytic gradients of the total loss against central differences
/// at `n_probes` random parameter entries. Attention scales are set away from
/// zero so every path carries gradient.
pub fn gradcheck(cfg: &RunConfig, n_probes: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generator = match &cfg.data {
        DataSource::Synthetic(s) => s.generator.clone(),
        DataSource::Manifest(_) => SyntheticConfig::default(),
    };
    let sample = generate_pair(
        &SyntheticConfig {
            image_size: GRADCHECK_IMAGE_SIZE,
            ..generator
        },
        rng.random(),
    )?;
    let mut cfg = cfg.clone();
    let ex = Prepared {
        t0: sample.pair.t0.to_tensor(),
        t1: sample.pair.t1.to_tensor(),
        label: sample.label.downsample_majority(cfg.encoder.stride())?,
    };
    resolve_weights(&mut cfg, std::slice::from_ref(&ex.label))?;
    let mut model = DasNet::init(ModelConfig::from(&cfg), rng.random())?;
    for name in [SA_ETA, CA_GAMMA] {
        if let Ok(p) = model.params.get_mut(name) {
            p.data_mut()[0] = rng.random_range(0.2..0.8);
        }
    }

    let (_, _, analytic) = example_grads(&model, &ex)?;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut probes = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let name = &names[rng.random_range(0..names.len())];
        let len = model.params.get(name)?.numel();
        let index = rng.random_range(0..len);
        let original = model.params.get(name)?.data()[index];
        let mut eval_at = |v: f64| -> Result<f64> {
            model.params.get_mut(name)?.data_mut()[index] = v;
            total_loss(&model, &ex)
        };
        let plus = eval_at(original + GRADCHECK_STEP)?;
        let minus = eval_at(original - GRADCHECK_STEP)?;
        eval_at(original)?;
        let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
        let a = analytic.get(name).map_or(0.0, |g| g[index]);
        probes.push(Probe {
            param: name.clone(),
            index,
            comparison: GradComparison::new(a, numeric),
        });
    }
    let max_relative = probes
        .iter()
        .map(|p| p.comparison.relative)
        .fold(0.0, f64::max);
    let max_absolute = probes
        .iter()
        .map(|p| p.comparison.absolute)
        .fold(0.0, f64::max);
    let passed = probes
        .iter()
        .all(|p| p.comparison.passes(GRADCHECK_REL_TOL, GRADCHECK_ABS_TOL));
    Ok(GradcheckReport {
        probes,
        max_relative,
        max_absolute,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::from_kv(
            "channels=4,6\ndownsample=true,false\nimage_size=16\ntrain_pairs=6\nval_pairs=2\ntest_pairs=2\nepochs=2\nlr=0.01\n",
        )
        .unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let mut adam = Adam::new(0.1);
        let grads = BTreeMap::from([("w".to_string(), vec![2.0, -0.5, 0.0])]);
        adam.step(&mut p, &grads).unwrap();
        let w = p.get("w").unwrap().data();
        // Bias-corrected first step is lr·g/(|g| + eps).
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] - 1.1).abs() < 1e-7);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn adam_rejects_mismatched_gradient() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(&[2]));
        let grads = BTreeMap::from([("w".to_string(), vec![1.0])]);
        assert!(matches!(
            Adam::new(0.1).step(&mut p, &grads),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let cfg = tiny();
        let data = load_dataset(&cfg).unwrap();
        let a = train(&cfg, &data, |_| {}).unwrap();
        let b = train(&cfg, &data, |_| {}).unwrap();
        assert_eq!(a.to_tensors().unwrap(), b.to_tensors().unwrap());
        assert_eq!(a.loss_history.len(), 2);
        assert_eq!(a.config.weight_mode, WeightMode::Dataset);
        assert!(a.config.loss.w2 > a.config.loss.w1);

        let back = Checkpoint::from_tensors(a.to_tensors().unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn diverging_run_reports_components() {
        let mut cfg = tiny();
        cfg.learning_rate = 1e300;
        cfg.epochs = 5;
        let data = load_dataset(&cfg).unwrap();
        match train(&cfg, &data, |_| {}) {
            Err(Error::Diverged(msg)) => assert!(msg.contains("epoch"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_splits_are_rejected() {
        let cfg = tiny();
        let model = DasNet::init(ModelConfig::from(&cfg), 0).unwrap();
        assert!(matches!(
            evaluate(&model, &[], 1.0),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            train(&cfg, &Dataset::default(), |_| {}),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn checkpoint_rejects_foreign_parameters() {
        let cfg = tiny();
        let model = DasNet::init(ModelConfig::from(&cfg), 0).unwrap();
        let ck = Checkpoint {
            config: cfg,
            model,
            epoch: 0,
            loss_history: vec![],
        };
        let mut t = ck.to_tensors().unwrap();
        t.push(("stray".into(), Tensor::zeros(&[1])));
        assert!(matches!(Checkpoint::from_tensors(t), Err(Error::Format(_))));
    }

    #[test]
    fn prediction_is_image_sized_and_consistent() {
        let cfg = tiny();
        let data = load_dataset(&cfg).unwrap();
        let ck = train(&cfg, &data, |_| {}).unwrap();
        let ex = &data.test[0];
        let p = predict(&ck.model, &ex.pair, 0.5).unwrap();
        assert_eq!(p.distance.shape(), (16, 16));
        assert_eq!(p.change, threshold(&p.distance, 0.5));
        let dir = tempfile::tempdir().unwrap();
        p.write(dir.path()).unwrap();
        for f in ["distance.png", "distance_scale.txt", "change.png"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn tiny_gradcheck_passes() {
        let r = gradcheck(&tiny(), 12, 4).unwrap();
        assert_eq!(r.probes.len(), 12);
        assert!(
            r.passed,
            "max rel {} abs {}",
            r.max_relative, r.max_absolute
        );
    }
}
