//! The full network: shared encoder, dual attention, and deeply supervised
//! distance maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{dual_attention_pair, AttentionConfig, BranchOutput};
use crate::config::RunConfig;
use crate::data::ImagePair;
use crate::encoder::{encode_pair, EncoderConfig};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::losses::{
    pair_loss_var, pixel_distance_var, DistanceMap, LabelMap, LossConfig, LossMode, Metric,
};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub metric: Metric,
    pub loss_mode: LossMode,
    pub loss: LossConfig,
}

impl From<&RunConfig> for ModelConfig {
    fn from(c: &RunConfig) -> Self {
        Self {
            encoder: c.encoder.clone(),
            attention: c.attention,
            metric: c.metric,
            loss_mode: c.loss_mode,
            loss: c.loss,
        }
    }
}

/// Distance maps recorded for one pair. `d_sa`/`d_ca` exist only when the
/// corresponding module is active.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub d_sa: Option<Var>,
    pub d_ca: Option<Var>,
    pub d_e: Var,
    pub branches: (BranchOutput, BranchOutput),
}

/// Loss terms for one pair; an inactive module contributes no term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_sa: Option<Var>,
    pub l_ca: Option<Var>,
    pub l_e: Var,
    pub total: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DasNet {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl DasNet {
    pub fn new(config: ModelConfig, params: ParamStore) -> Self {
        Self { config, params }
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.encoder.init_params(&mut params, &mut rng)?;
        config
            .attention
            .init_params(config.encoder.out_channels(), &mut params, &mut rng);
        Ok(Self { config, params })
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        t0: Var,
        t1: Var,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let (f0, f1) = encode_pair(g, t0, t1, bound, &cfg.encoder)?;
        let (b0, b1) = dual_attention_pair(g, f0, f1, bound, cfg.attention)?;
        let pair = |g: &mut Graph, a: Option<Var>, b: Option<Var>| -> Result<Option<Var>> {
            match (a, b) {
                (Some(a), Some(b)) => Ok(Some(pixel_distance_var(g, a, b, cfg.metric)?)),
                _ => Ok(None),
            }
        };
        let d_sa = pair(g, b0.fsa, b1.fsa)?;
        let d_ca = pair(g, b0.fca, b1.fca)?;
        let d_e = pixel_distance_var(g, b0.refined, b1.refined, cfg.metric)?;
        Ok(ForwardVars {
            d_sa,
            d_ca,
            d_e,
            branches: (b0, b1),
        })
    }

    /// Weighted deep-supervision loss against labels at feature resolution.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        fwd: &ForwardVars,
        label: &LabelMap,
    ) -> Result<LossVars> {
        let cfg = &self.config;
        let term = |g: &mut Graph, d: Option<Var>| -> Result<Option<Var>> {
            d.map(|d| pair_loss_var(g, d, label, cfg.loss_mode, &cfg.loss))
                .transpose()
        };
        let l_sa = term(g, fwd.d_sa)?;
        let l_ca = term(g, fwd.d_ca)?;
        let l_e = term(g, Some(fwd.d_e))?.expect("final map always present");
        let [k_sa, k_ca, k_e] = cfg.loss.lambda;
        let mut total = g.mul_const(l_e, k_e)?;
        for (l, k) in [(l_sa, k_sa), (l_ca, k_ca)] {
            if let Some(l) = l {
                let scaled = g.mul_const(l, k)?;
                total = g.add(total, scaled)?;
            }
        }
        Ok(LossVars {
            l_sa,
            l_ca,
            l_e,
            total,
        })
    }

    /// Reduces an image-resolution label to the feature grid.
    pub fn feature_label(&self, label: &LabelMap) -> Result<LabelMap> {
        label.downsample_majority(self.config.encoder.stride())
    }

    /// Final distance map at feature resolution.
    pub fn distance(&self, t0: &Tensor, t1: &Tensor) -> Result<DistanceMap> {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params);
        let a = g.constant(t0.clone());
        let b = g.constant(t1.clone());
        let fwd = self.forward_graph(&mut g, &bound, a, b)?;
        DistanceMap::new(g.value(fwd.d_e).clone())
    }

    /// Final distance map of an image pair, at feature resolution.
    pub fn distance_pair(&self, pair: &ImagePair) -> Result<DistanceMap> {
        self.config
            .encoder
            .output_size(pair.height(), pair.width())?;
        self.distance(&pair.t0.to_tensor(), &pair.t1.to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pair, SyntheticConfig};

    fn net(attention: AttentionConfig) -> DasNet {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                channels: vec![4, 6],
                kernel_size: 3,
                downsample: vec![true, false],
            },
            attention,
            metric: Metric::L2,
            loss_mode: LossMode::Wdmc,
            loss: LossConfig::default(),
        };
        DasNet::init(cfg, 3).unwrap()
    }

    fn sample() -> (Tensor, Tensor, LabelMap) {
        let s = generate_pair(
            &SyntheticConfig {
                image_size: 16,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        (s.pair.t0.to_tensor(), s.pair.t1.to_tensor(), s.label)
    }

    #[test]
    fn identical_inputs_give_zero_distance() {
        let n = net(AttentionConfig::default());
        let (t0, _, _) = sample();
        let d = n.distance(&t0, &t0).unwrap();
        assert_eq!(d.shape(), (8, 8));
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn absent_modules_have_no_terms() {
        let (t0, t1, y) = sample();
        for (att, sa, ca) in [
            (AttentionConfig::default(), true, true),
            (AttentionConfig::none(), false, false),
            (
                AttentionConfig {
                    spatial: true,
                    channel: false,
                },
                true,
                false,
            ),
        ] {
            let n = net(att);
            let y = n.feature_label(&y).unwrap();
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &n.params);
            let (a, b) = (g.constant(t0.clone()), g.constant(t1.clone()));
            let fwd = n.forward_graph(&mut g, &bound, a, b).unwrap();
            let l = n.loss_graph(&mut g, &fwd, &y).unwrap();
            assert_eq!(l.l_sa.is_some(), sa);
            assert_eq!(l.l_ca.is_some(), ca);
            let parts: f64 = [l.l_sa, l.l_ca, Some(l.l_e)]
                .iter()
                .flatten()
                .map(|v| g.value(*v).item().unwrap())
                .sum();
            assert!((g.value(l.total).item().unwrap() - parts).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambdas_zero_every_gradient() {
        let mut n = net(AttentionConfig::default());
        n.config.loss.lambda = [0.0; 3];
        let (t0, t1, y) = sample();
        let y = n.feature_label(&y).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &n.params);
        let (a, b) = (g.constant(t0), g.constant(t1));
        let fwd = n.forward_graph(&mut g, &bound, a, b).unwrap();
        let l = n.loss_graph(&mut g, &fwd, &y).unwrap();
        let grads = g.backward(l.total).unwrap();
        for (name, gv) in bound.collect(&g, &grads) {
            assert!(gv.iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn pair_map_is_at_feature_resolution() {
        let n = net(AttentionConfig::default());
        let s = generate_pair(
            &SyntheticConfig {
                image_size: 16,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let d = n.distance_pair(&s.pair).unwrap();
        assert_eq!(d.shape(), (8, 8));
    }
}
