//! Spatial (position) and channel attention over a `C×H×W` feature map, and
//! their residual fusion.
//!
//! With `N = H·W` and features flattened to `C×N`:
//!
//! * spatial: `Fa, Fb, Fc` are 1×1 projections of `F`;
//!   `fs[j][i] = softmax_i(Fa_i · Fb_j)`, `Fsa_j = η Σ_i fs[j][i] Fc_i + F_j`.
//! * channel: `fx[j][i] = softmax_i(F_i · F_j)` over channels,
//!   `Fca_j = γ Σ_i fx[j][i] F_i + F_j`.
//! * fusion: `Fsa + Fca − F`, which is exactly `F` when `η = γ = 0`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

pub const SA_A: &str = "att.sa.a.w";
pub const SA_B: &str = "att.sa.b.w";
pub const SA_C: &str = "att.sa.c.w";
pub const SA_ETA: &str = "att.sa.eta";
pub const CA_GAMMA: &str = "att.ca.gamma";

/// Which attention modules are active. `(false, false)` is plain Siam-Conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub spatial: bool,
    pub channel: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            spatial: true,
            channel: true,
        }
    }
}

impl AttentionConfig {
    pub fn none() -> Self {
        Self {
            spatial: false,
            channel: false,
        }
    }

    /// Adds the parameters of the active modules: projections drawn from
    /// `N(0, 1/C)`, scale parameters at exactly zero.
    pub fn init_params(&self, channels: usize, store: &mut ParamStore, rng: &mut impl Rng) {
        if self.spatial {
            let normal = Normal::new(0.0, (1.0 / channels as f64).sqrt()).expect("finite std");
            for name in [SA_A, SA_B, SA_C] {
                store.insert(
                    name,
                    Tensor::from_fn(&[channels, channels, 1, 1], |_| normal.sample(rng)),
                );
            }
            store.insert(SA_ETA, Tensor::scalar(0.0));
        }
        if self.channel {
            store.insert(CA_GAMMA, Tensor::scalar(0.0));
        }
    }
}

/// Plain-tensor parameters of the spatial module.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams {
    pub proj_a: Tensor,
    pub proj_b: Tensor,
    pub proj_c: Tensor,
    pub eta: f64,
}

/// Plain-tensor parameters of the channel module. It has no projections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelAttentionParams {
    pub gamma: f64,
}

impl SpatialAttentionParams {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            proj_a: store.get(SA_A)?.clone(),
            proj_b: store.get(SA_B)?.clone(),
            proj_c: store.get(SA_C)?.clone(),
            eta: store.get(SA_ETA)?.item()?,
        })
    }

    /// Returns `(Fsa, fs)`.
    pub fn apply(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let vars = SpatialVars {
            a: g.constant(self.proj_a.clone()),
            b: g.constant(self.proj_b.clone()),
            c: g.constant(self.proj_c.clone()),
            eta: g.constant(Tensor::scalar(self.eta)),
        };
        let (out, fs) = spatial_attention(&mut g, fv, &vars)?;
        Ok((g.value(out).clone(), g.value(fs).clone()))
    }
}

impl ChannelAttentionParams {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            gamma: store.get(CA_GAMMA)?.item()?,
        })
    }

    /// Returns `(Fca, fx)`.
    pub fn apply(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let gamma = g.constant(Tensor::scalar(self.gamma));
        let (out, fx) = channel_attention(&mut g, fv, gamma)?;
        Ok((g.value(out).clone(), g.value(fx).clone()))
    }
}

/// Graph handles for the spatial module's parameters.
#[derive(Clone, Copy, Debug)]
pub struct SpatialVars {
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub eta: Var,
}

impl SpatialVars {
    pub fn bind(params: &BoundParams) -> Result<Self> {
        Ok(Self {
            a: params.var(SA_A)?,
            b: params.var(SA_B)?,
            c: params.var(SA_C)?,
            eta: params.var(SA_ETA)?,
        })
    }
}

fn project(g: &mut Graph, kernel: Var, x: Var, c: usize) -> Result<Var> {
    let ks = g.value(kernel).shape();
    if ks != [c, c, 1, 1] && ks != [c, c] {
        return Err(Error::Shape(format!(
            "attention projection must be {c}×{c}×1×1, got {ks:?}"
        )));
    }
    let w = g.reshape(kernel, &[c, c])?;
    g.matmul(w, x)
}

/// Spatial attention on `f` (`C×H×W`). Returns `(Fsa, fs)` with `fs` of size `N×N`.
pub fn spatial_attention(g: &mut Graph, f: Var, p: &SpatialVars) -> Result<(Var, Var)> {
    let (c, h, w) = g.value(f).dims3()?;
    let n = h * w;
    let flat = g.reshape(f, &[c, n])?;
    let fa = project(g, p.a, flat, c)?;
    let fb = project(g, p.b, flat, c)?;
    let fc = project(g, p.c, flat, c)?;
    // energy[j][i] = Fb_j · Fa_i
    let fb_t = g.transpose(fb)?;
    let energy = g.matmul(fb_t, fa)?;
    let fs = g.softmax_rows(energy)?;
    // ctx[:, j] = Σ_i fs[j][i] Fc[:, i]
    let fs_t = g.transpose(fs)?;
    let ctx = g.matmul(fc, fs_t)?;
    let scaled = g.scale(ctx, p.eta)?;
    let out = g.add(scaled, flat)?;
    Ok((g.reshape(out, &[c, h, w])?, fs))
}

/// Channel attention on `f` (`C×H×W`). Returns `(Fca, fx)` with `fx` of size `C×C`.
pub fn channel_attention(g: &mut Graph, f: Var, gamma: Var) -> Result<(Var, Var)> {
    let (c, h, w) = g.value(f).dims3()?;
    let flat = g.reshape(f, &[c, h * w])?;
    let flat_t = g.transpose(flat)?;
    let energy = g.matmul(flat, flat_t)?;
    let fx = g.softmax_rows(energy)?;
    let ctx = g.matmul(fx, flat)?;
    let scaled = g.scale(ctx, gamma)?;
    let out = g.add(scaled, flat)?;
    Ok((g.reshape(out, &[c, h, w])?, fx))
}

/// `Fsa + Fca − F`.
pub fn fuse(g: &mut Graph, fsa: Var, fca: Var, f: Var) -> Result<Var> {
    let sum = g.add(fsa, fca)?;
    g.sub(sum, f)
}

/// Outputs of the dual-attention stage on one branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    /// Final refined features (`A_F`).
    pub refined: Var,
    pub fsa: Option<Var>,
    pub fca: Option<Var>,
    pub fs: Option<Var>,
    pub fx: Option<Var>,
}

/// Applies the active modules to `f`. With only one module active its output
/// is the refined feature; with none, `f` passes through unchanged.
pub fn dual_attention(
    g: &mut Graph,
    f: Var,
    params: &BoundParams,
    cfg: AttentionConfig,
) -> Result<BranchOutput> {
    let (fsa, fs) = if cfg.spatial {
        let vars = SpatialVars::bind(params)?;
        let (o, m) = spatial_attention(g, f, &vars)?;
        (Some(o), Some(m))
    } else {
        (None, None)
    };
    let (fca, fx) = if cfg.channel {
        let gamma = params.var(CA_GAMMA)?;
        let (o, m) = channel_attention(g, f, gamma)?;
        (Some(o), Some(m))
    } else {
        (None, None)
    };
    let refined = match (fsa, fca) {
        (Some(a), Some(c)) => fuse(g, a, c, f)?,
        (Some(a), None) => a,
        (None, Some(c)) => c,
        (None, None) => f,
    };
    Ok(BranchOutput {
        refined,
        fsa,
        fca,
        fs,
        fx,
    })
}

/// Runs [`dual_attention`] on both branches with the same parameter handles.
pub fn dual_attention_pair(
    g: &mut Graph,
    f_t0: Var,
    f_t1: Var,
    params: &BoundParams,
    cfg: AttentionConfig,
) -> Result<(BranchOutput, BranchOutput)> {
    Ok((
        dual_attention(g, f_t0, params, cfg)?,
        dual_attention(g, f_t1, params, cfg)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn spatial_params(c: usize, eta: f64, rng: &mut impl Rng) -> SpatialAttentionParams {
        SpatialAttentionParams {
            proj_a: random(&[c, c, 1, 1], rng),
            proj_b: random(&[c, c, 1, 1], rng),
            proj_c: random(&[c, c, 1, 1], rng),
            eta,
        }
    }

    #[test]
    fn init_is_zero_scaled_and_structural() {
        let mut store = ParamStore::new();
        AttentionConfig::default().init_params(8, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.get(SA_ETA).unwrap().data(), &[0.0]);
        assert_eq!(store.get(CA_GAMMA).unwrap().data(), &[0.0]);
        assert_eq!(
            store.get(SA_A).unwrap().shape(),
            store.get(SA_C).unwrap().shape()
        );
        assert_ne!(store.get(SA_A).unwrap(), store.get(SA_B).unwrap());
        // channel attention owns exactly one scalar
        let ca: Vec<_> = store.names().filter(|n| n.starts_with("att.ca")).collect();
        assert_eq!(ca, [CA_GAMMA]);
    }

    #[test]
    fn zero_scales_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random(&[3, 4, 5], &mut rng);
        let (fsa, _) = spatial_params(3, 0.0, &mut rng).apply(&f).unwrap();
        assert_eq!(fsa, f);
        let (fca, _) = ChannelAttentionParams { gamma: 0.0 }.apply(&f).unwrap();
        assert_eq!(fca, f);
    }

    #[test]
    fn single_position_and_single_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random(&[3, 1, 1], &mut rng);
        let p = spatial_params(3, 0.5, &mut rng);
        let (fsa, fs) = p.apply(&f).unwrap();
        assert_eq!(fs.data(), &[1.0]);
        let fc = crate::ops::matmul(
            &p.proj_c.reshape(&[3, 3]).unwrap(),
            &f.reshape(&[3, 1]).unwrap(),
        )
        .unwrap();
        for i in 0..3 {
            assert!((fsa.data()[i] - (0.5 * fc.data()[i] + f.data()[i])).abs() < 1e-15);
        }

        let f = random(&[1, 3, 3], &mut rng);
        let (fca, fx) = ChannelAttentionParams { gamma: 0.7 }.apply(&f).unwrap();
        assert_eq!(fx.data(), &[1.0]);
        for (o, i) in fca.data().iter().zip(f.data()) {
            assert!((o - 1.7 * i).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for scale in [1.0, 30.0] {
            let f = Tensor::from_fn(&[4, 3, 3], |_| scale * rng.random_range(-1.0..1.0));
            let (_, fs) = spatial_params(4, 1.0, &mut rng).apply(&f).unwrap();
            let (_, fx) = ChannelAttentionParams { gamma: 1.0 }.apply(&f).unwrap();
            for (m, n) in [(fs, 9), (fx, 4)] {
                assert_eq!(m.shape(), &[n, n]);
                for row in m.data().chunks(n) {
                    assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn channel_attention_is_position_blind() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, n) = (3, 6);
        let f = random(&[c, 2, 3], &mut rng);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let permuted = Tensor::from_fn(&[c, 2, 3], |idx| {
            let (ch, pos) = (idx / n, idx % n);
            f.data()[ch * n + perm[pos]]
        });
        let p = ChannelAttentionParams { gamma: 0.9 };
        let (out, fx) = p.apply(&f).unwrap();
        let (out_p, fx_p) = p.apply(&permuted).unwrap();
        assert!(fx.max_abs_diff(&fx_p) < 1e-12);
        for ch in 0..c {
            for (pos, &src) in perm.iter().enumerate() {
                let a = out_p.data()[ch * n + pos];
                let b = out.data()[ch * n + src];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_reduces_to_sum_when_residual_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 3], &mut rng);
        let y = random(&[2, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let zero = g.constant(Tensor::zeros(&[2, 3, 3]));
        let a = fuse(&mut g, xv, zero, zero).unwrap();
        assert_eq!(g.value(a), &x);
        let b = fuse(&mut g, xv, xv, zero).unwrap();
        assert_eq!(
            g.value(b).data(),
            x.data().iter().map(|v| 2.0 * v).collect::<Vec<_>>()
        );
        let c = fuse(&mut g, xv, yv, zero).unwrap();
        for i in 0..x.numel() {
            assert_eq!(g.value(c).data()[i], x.data()[i] + y.data()[i]);
        }
        let bad = g.constant(Tensor::zeros(&[2, 3, 2]));
        assert!(fuse(&mut g, xv, bad, zero).is_err());
    }
}
