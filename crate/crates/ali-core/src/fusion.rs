//! Fuse hypercolumn features into the intrinsic hierarchy: average-pool the
//! hypercolumn to each level's resolution, apply a per-level 1x1 linear
//! projection, and add the result to that level's intrinsic features.
//!
//! Projections initialize to zero, so a freshly fused model reproduces the
//! base model exactly and the fusion's marginal effect is measurable from
//! step 0.

use crate::encoder::{EncoderConfig, IntrinsicStack};
use crate::error::{AliError, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};
use ndarray::{Array3, Axis};

/// Fused feature hierarchy; level shapes match the source intrinsic stack.
#[derive(Clone, Debug)]
pub struct AliStack<F: Scalar> {
    pub levels: Vec<Array3<F>>,
}

impl<F: Scalar> AliStack<F> {
    pub fn validate_against(&self, intrinsics: &IntrinsicStack<F>) -> Result<()> {
        if self.levels.len() != intrinsics.levels.len() {
            return Err(AliError::Contract("fused stack level count mismatch".into()));
        }
        for (a, s) in self.levels.iter().zip(intrinsics.levels.iter()) {
            if a.shape() != s.shape() {
                return Err(AliError::Contract(format!(
                    "fused level shape {:?} != intrinsic {:?}",
                    a.shape(),
                    s.shape()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(AliError::Contract("fused level has non-finite entries".into()));
            }
        }
        Ok(())
    }
}

/// Per-level 1x1 projections from hypercolumn channels to level channels;
/// parameters live under `theta_prime.`.
#[derive(Clone, Debug)]
pub struct ProjectionLayers {
    pub hyper_channels: usize,
    convs: Vec<Conv2d>,
}

impl ProjectionLayers {
    pub fn new(hyper_channels: usize, enc_cfg: &EncoderConfig) -> Result<Self> {
        enc_cfg.validate()?;
        if hyper_channels == 0 {
            return Err(AliError::Config("hypercolumn has zero channels".into()));
        }
        let convs = enc_cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&format!("theta_prime.proj{i}"), hyper_channels, c, 1, 1, 0))
            .collect();
        Ok(ProjectionLayers {
            hyper_channels,
            convs,
        })
    }

    /// Zero init: fused features start exactly equal to the intrinsics.
    pub fn init_zero<F: Scalar>(&self, store: &mut ParamStore<F>) {
        for c in &self.convs {
            c.init_zero(store);
        }
    }

    /// Batched fusion. `hyper` is `[N, C_H, H, W]` at input resolution;
    /// `intrinsics[i]` is `[N, C_i, H/2^(i+1), W/2^(i+1)]`.
    pub fn fuse_node<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        hyper: Var,
        intrinsics: &[Var],
        trainable: bool,
    ) -> Result<Vec<Var>> {
        let hshape = g.value(hyper).shape().to_vec();
        if hshape.len() != 4 || hshape[1] != self.hyper_channels {
            return Err(AliError::Contract(format!(
                "hypercolumn shape {hshape:?} does not carry {} channels",
                self.hyper_channels
            )));
        }
        if intrinsics.len() != self.convs.len() {
            return Err(AliError::Contract(format!(
                "{} intrinsic levels for {} projections",
                intrinsics.len(),
                self.convs.len()
            )));
        }
        let mut out = Vec::with_capacity(intrinsics.len());
        for (conv, &s_i) in self.convs.iter().zip(intrinsics.iter()) {
            let sshape = g.value(s_i).shape().to_vec();
            let (lh, lw) = (sshape[2], sshape[3]);
            if hshape[2] % lh != 0 || hshape[3] % lw != 0 || hshape[2] / lh != hshape[3] / lw {
                return Err(AliError::Contract(format!(
                    "hypercolumn {}x{} does not pool to level {}x{}",
                    hshape[2], hshape[3], lh, lw
                )));
            }
            let pooled = g.avg_pool2d(hyper, hshape[2] / lh);
            let proj = conv.forward(g, store, pooled, trainable)?;
            out.push(g.add(proj, s_i));
        }
        Ok(out)
    }
}

/// Value-level fusion of one image's hypercolumn into its intrinsic stack.
pub fn fuse<F: Scalar>(
    hyper: &Array3<F>,
    intrinsics: &IntrinsicStack<F>,
    store: &ParamStore<F>,
    proj: &ProjectionLayers,
) -> Result<AliStack<F>> {
    let mut g = Graph::<F>::new();
    let h = g.input(hyper.clone().insert_axis(Axis(0)).into_dyn());
    let svars: Vec<Var> = intrinsics
        .levels
        .iter()
        .map(|l| g.input(l.clone().insert_axis(Axis(0)).into_dyn()))
        .collect();
    let fused = proj.fuse_node(&mut g, store, h, &svars, false)?;
    let stack = AliStack {
        levels: fused
            .iter()
            .map(|&v| {
                g.value(v)
                    .index_axis(Axis(0), 0)
                    .to_owned()
                    .into_dimensionality()
                    .unwrap()
            })
            .collect(),
    };
    stack.validate_against(intrinsics)?;
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_rel_err};
    use crate::rng::stream;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: vec![4, 8],
            code_dim: 4,
        }
    }

    fn rand_stack(seed: u64, h: usize) -> IntrinsicStack<f64> {
        let mut rng = stream(seed, "fusion/test");
        IntrinsicStack {
            levels: vec![
                Array3::from_shape_fn((4, h / 2, h / 2), |_| rng.gen_range(-1.0..1.0)),
                Array3::from_shape_fn((8, h / 4, h / 4), |_| rng.gen_range(-1.0..1.0)),
            ],
        }
    }

    fn rand_hyper(seed: u64, c: usize, h: usize) -> Array3<f64> {
        let mut rng = stream(seed, "fusion/hyper");
        Array3::from_shape_fn((c, h, h), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_projection_returns_intrinsics() {
        let cfg = enc_cfg();
        let proj = ProjectionLayers::new(6, &cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        proj.init_zero(&mut store);
        let stack = rand_stack(1, 8);
        let hyper = rand_hyper(2, 6, 8);
        let fused = fuse(&hyper, &stack, &store, &proj).unwrap();
        for (a, s) in fused.levels.iter().zip(stack.levels.iter()) {
            assert_eq!(a, s);
        }
    }

    #[test]
    fn identity_projection_passes_pooled_hypercolumn() {
        // C_H = C_i, W = identity, b = 0, S = 0 -> A equals the pooled hypercolumn.
        let cfg = EncoderConfig {
            channels: vec![3, 3],
            code_dim: 2,
        };
        let proj = ProjectionLayers::new(3, &cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        proj.init_zero(&mut store);
        for lvl in 0..2 {
            let w = store
                .get_mut(&format!("theta_prime.proj{lvl}.weight"))
                .unwrap();
            for c in 0..3 {
                w[[c, c, 0, 0]] = 1.0;
            }
        }
        let stack = IntrinsicStack {
            levels: vec![Array3::zeros((3, 4, 4)), Array3::zeros((3, 2, 2))],
        };
        let hyper = rand_hyper(3, 3, 8);
        let fused = fuse(&hyper, &stack, &store, &proj).unwrap();
        // Check one pooled entry by hand: level 0 pools 2x2 windows.
        let mean = (hyper[[1, 0, 0]] + hyper[[1, 0, 1]] + hyper[[1, 1, 0]] + hyper[[1, 1, 1]]) / 4.0;
        assert!((fused.levels[0][[1, 0, 0]] - mean).abs() < 1e-12);
    }

    #[test]
    fn fused_shapes_match_intrinsics() {
        let cfg = enc_cfg();
        let proj = ProjectionLayers::new(10, &cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        proj.init_zero(&mut store);
        let stack = rand_stack(4, 16);
        let hyper = rand_hyper(5, 10, 16);
        let fused = fuse(&hyper, &stack, &store, &proj).unwrap();
        for (a, s) in fused.levels.iter().zip(stack.levels.iter()) {
            assert_eq!(a.shape(), s.shape());
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let cfg = enc_cfg();
        let proj = ProjectionLayers::new(10, &cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        proj.init_zero(&mut store);
        let stack = rand_stack(4, 8);
        let hyper = rand_hyper(5, 7, 8); // 7 != 10 channels
        assert!(matches!(
            fuse(&hyper, &stack, &store, &proj),
            Err(AliError::Contract(_))
        ));
    }

    #[test]
    fn fusion_linear_in_hypercolumn_with_zero_bias() {
        let cfg = enc_cfg();
        let proj = ProjectionLayers::new(5, &cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        proj.init_zero(&mut store);
        let mut rng = stream(6, "fusion/randw");
        for lvl in 0..2 {
            let w = store
                .get_mut(&format!("theta_prime.proj{lvl}.weight"))
                .unwrap();
            w.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let stack = rand_stack(7, 8);
        let h1 = rand_hyper(8, 5, 8);
        let h2 = rand_hyper(9, 5, 8);
        let (alpha, beta) = (0.7, -1.3);
        let combo = h1.mapv(|v| v * alpha) + &h2.mapv(|v| v * beta);

        let f1 = fuse(&h1, &stack, &store, &proj).unwrap();
        let f2 = fuse(&h2, &stack, &store, &proj).unwrap();
        let fc = fuse(&combo, &stack, &store, &proj).unwrap();
        for ((a1, a2), (ac, s)) in f1
            .levels
            .iter()
            .zip(f2.levels.iter())
            .zip(fc.levels.iter().zip(stack.levels.iter()))
        {
            let lhs = ac - s;
            let rhs = (a1 - s).mapv(|v| v * alpha) + &(a2 - s).mapv(|v| v * beta);
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let cfg = enc_cfg();
        let proj = ProjectionLayers::new(5, &cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        proj.init_zero(&mut store);
        let mut rng = stream(10, "fusion/gradw");
        for lvl in 0..2 {
            let w = store
                .get_mut(&format!("theta_prime.proj{lvl}.weight"))
                .unwrap();
            w.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let stack = rand_stack(11, 8);
        let hyper = rand_hyper(12, 5, 8);

        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::<f64>::new();
            let h = g.input(hyper.clone().insert_axis(Axis(0)).into_dyn());
            let svars: Vec<Var> = stack
                .levels
                .iter()
                .map(|l| g.input(l.clone().insert_axis(Axis(0)).into_dyn()))
                .collect();
            let fused = proj.fuse_node(&mut g, store, h, &svars, true).unwrap();
            let mut total = None;
            for f in fused {
                let sq = g.square(f);
                let s = g.sum_all(sq);
                total = Some(match total {
                    Some(t) => g.add(t, s),
                    None => s,
                });
            }
            g.scalar(total.unwrap())
        };

        // Analytic gradients
        let mut g = Graph::<f64>::new();
        let h = g.input(hyper.clone().insert_axis(Axis(0)).into_dyn());
        let svars: Vec<Var> = stack
            .levels
            .iter()
            .map(|l| g.input(l.clone().insert_axis(Axis(0)).into_dyn()))
            .collect();
        let fused = proj.fuse_node(&mut g, &store, h, &svars, true).unwrap();
        let mut total = None;
        for f in fused {
            let sq = g.square(f);
            let s = g.sum_all(sq);
            total = Some(match total {
                Some(t) => g.add(t, s),
                None => s,
            });
        }
        let grads = g.backward(total.unwrap());

        for lvl in 0..2 {
            for part in ["weight", "bias"] {
                let name = format!("theta_prime.proj{lvl}.{part}");
                let base = store.get(&name).unwrap().clone();
                let numeric = finite_diff_grad(
                    |probe: &ArrayD<f64>| {
                        let mut s2 = store.clone();
                        *s2.get_mut(&name).unwrap() = probe.clone();
                        Ok(loss_of(&s2))
                    },
                    &base,
                    1e-5,
                )
                .unwrap();
                let analytic = grads.by_param.get(&name).unwrap();
                let err = max_rel_err(analytic, &numeric);
                assert!(err < 1e-4, "{name}: rel err {err}");
            }
        }
    }

    #[test]
    fn batched_fuse_matches_per_image_fuse() {
        let cfg = enc_cfg();
        let proj = ProjectionLayers::new(5, &cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        proj.init_zero(&mut store);
        let mut rng = stream(13, "fusion/batch");
        store
            .get_mut("theta_prime.proj0.weight")
            .unwrap()
            .mapv_inplace(|_| rng.gen_range(-0.5..0.5));

        let stacks = [rand_stack(14, 8), rand_stack(15, 8)];
        let hypers = [rand_hyper(16, 5, 8), rand_hyper(17, 5, 8)];

        let mut g = Graph::<f64>::new();
        let hb = {
            let mut b = ndarray::Array4::<f64>::zeros((2, 5, 8, 8));
            for n in 0..2 {
                b.index_axis_mut(Axis(0), n).assign(&hypers[n]);
            }
            g.input(b.into_dyn())
        };
        let svars: Vec<Var> = (0..2)
            .map(|lvl| {
                let l0 = &stacks[0].levels[lvl];
                let sh = l0.shape();
                let mut b = ArrayD::<f64>::zeros(IxDyn(&[2, sh[0], sh[1], sh[2]]));
                for n in 0..2 {
                    b.index_axis_mut(Axis(0), n).assign(&stacks[n].levels[lvl]);
                }
                g.input(b)
            })
            .collect();
        let fused = proj.fuse_node(&mut g, &store, hb, &svars, false).unwrap();

        for n in 0..2 {
            let single = fuse(&hypers[n], &stacks[n], &store, &proj).unwrap();
            for (lvl, f) in fused.iter().enumerate() {
                let batched = g.value(*f).index_axis(Axis(0), n).to_owned();
                for (x, y) in batched.iter().zip(single.levels[lvl].iter()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
