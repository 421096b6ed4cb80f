//! Training objectives: reconstruction, the coding-rate regularizer toward
//! hyperspherical samples, the mean-deviation intrinsics loss, and the
//! stage-1 composite.
//!
//! Each loss exists once, as a graph builder; the plain-value entry points
//! wrap the builder so the tested path and the trained path cannot drift.

use crate::error::{AliError, Result};
use crate::rng::{child_seed, stream};
use crate::scalar::Scalar;
use crate::tensor::{coding_rate_forward, Graph, Var};
use ndarray::{Array2, ArrayD};
use rand_distr::{Distribution, StandardNormal};

/// Coding-rate temperature; `d` and `n` are read from the input matrix.
#[derive(Clone, Copy, Debug)]
pub struct RegConfig {
    pub lambda: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig { lambda: 1.0 }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(AliError::Config(format!(
                "regularizer temperature must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `R(A) = log det(I + d/(n lambda^2) A^T A)` for an `n x d` matrix.
pub fn coding_rate(a: &Array2<f64>, lambda: f64) -> Result<f64> {
    RegConfig { lambda }.validate()?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(AliError::Contract("coding_rate: non-finite input".into()));
    }
    Ok(coding_rate_forward(a, lambda))
}

/// `n` independent uniform samples on the unit `(d-1)`-sphere.
pub fn sample_hypersphere(n: usize, d: usize, seed: u64) -> Array2<f64> {
    assert!(n >= 1 && d >= 1, "sample_hypersphere needs n, d >= 1");
    let mut rng = stream(seed, "losses/hypersphere");
    let mut out = Array2::<f64>::zeros((n, d));
    for mut row in out.rows_mut() {
        loop {
            let mut norm2 = 0.0;
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z;
                norm2 += z * z;
            }
            if norm2.sqrt() > 1e-12 {
                let inv = 1.0 / norm2.sqrt();
                row.mapv_inplace(|v| v * inv);
                break;
            }
        }
    }
    out
}

/// Reference rate for a fresh hyperspherical draw of the same shape.
pub fn reference_rate(n: usize, d: usize, lambda: f64, seed: u64) -> f64 {
    coding_rate_forward(&sample_hypersphere(n, d, seed), lambda)
}

/// Graph node for `(R(normalize_rows(A)) - R(A_hat))^2` given a precomputed
/// reference rate. Gradients flow through `A` only.
pub fn reg_loss_node<F: Scalar>(g: &mut Graph<F>, a: Var, lambda: f64, r_hat: f64) -> Var {
    let normed = g.row_normalize(a);
    let rate = g.coding_rate(normed, lambda);
    let diff = g.scale_add(rate, 1.0, -r_hat);
    g.square(diff)
}

/// `(R(A) - R(A_hat))^2` with rows of `A` L2-normalized and `A_hat` freshly
/// drawn from the hypersphere with the given seed.
pub fn reg_loss(a: &Array2<f64>, lambda: f64, seed: u64) -> Result<f64> {
    RegConfig { lambda }.validate()?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(AliError::Contract("reg_loss: non-finite input".into()));
    }
    let r_hat = reference_rate(a.nrows(), a.ncols(), lambda, seed);
    let mut g = Graph::<f64>::new();
    let av = g.input(a.clone().into_dyn());
    let loss = reg_loss_node(&mut g, av, lambda, r_hat);
    Ok(g.scalar(loss))
}

/// Reinterpret a `[C,h,w]` (or `[1,C,h,w]`) level tensor as the `[h*w, C]`
/// matrix whose rows are spatial locations.
pub fn level_to_matrix<F: Scalar>(g: &mut Graph<F>, level: Var) -> Var {
    let shape = g.value(level).shape().to_vec();
    let (c, hw) = match shape.len() {
        3 => (shape[0], shape[1] * shape[2]),
        4 => {
            assert_eq!(shape[0], 1, "level_to_matrix expects a single sample");
            (shape[1], shape[2] * shape[3])
        }
        _ => panic!("level_to_matrix expects rank 3 or 4, got {shape:?}"),
    };
    let flat = g.reshape(level, &[c, hw]);
    g.transpose2(flat)
}

/// Sum over levels and lightings of the L2 distance to the per-level mean
/// across lightings. `stacks[m][i]` is level `i` under lighting `m`; all
/// lightings must agree on per-level shapes.
pub fn improved_intrinsics_node<F: Scalar>(g: &mut Graph<F>, stacks: &[Vec<Var>]) -> Var {
    let m_count = stacks.len();
    assert!(m_count >= 1, "improved intrinsics needs at least one lighting");
    let n_levels = stacks[0].len();
    let inv_m = 1.0 / m_count as f64;

    let mut total: Option<Var> = None;
    for i in 0..n_levels {
        let mut mean = stacks[0][i];
        for s in stacks.iter().skip(1) {
            mean = g.add(mean, s[i]);
        }
        let mean = g.scale_add(mean, inv_m, 0.0);
        for s in stacks.iter() {
            let diff = g.sub(s[i], mean);
            let sq = g.square(diff);
            let ssq = g.sum_all(sq);
            let norm = g.sqrt(ssq);
            total = Some(match total {
                Some(t) => g.add(t, norm),
                None => norm,
            });
        }
    }
    total.unwrap()
}

/// Value-level improved intrinsics loss over per-lighting level lists.
pub fn improved_intrinsics_loss(stacks: &[Vec<ArrayD<f64>>]) -> Result<f64> {
    if stacks.is_empty() {
        return Err(AliError::Contract(
            "improved_intrinsics_loss: need >= 1 lighting".into(),
        ));
    }
    let n_levels = stacks[0].len();
    for s in stacks {
        if s.len() != n_levels {
            return Err(AliError::Contract(
                "improved_intrinsics_loss: stacks disagree on level count".into(),
            ));
        }
        for (a, b) in s.iter().zip(stacks[0].iter()) {
            if a.shape() != b.shape() {
                return Err(AliError::Contract(
                    "improved_intrinsics_loss: level shape mismatch".into(),
                ));
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let vars: Vec<Vec<Var>> = stacks
        .iter()
        .map(|s| s.iter().map(|lvl| g.input(lvl.clone())).collect())
        .collect();
    let node = improved_intrinsics_node(&mut g, &vars);
    Ok(g.scalar(node))
}

/// Mean absolute per-pixel error node.
pub fn mae_node<F: Scalar>(g: &mut Graph<F>, pred: Var, target: Var) -> Var {
    let diff = g.sub(pred, target);
    let a = g.abs(diff);
    g.mean_all(a)
}

/// Mean squared error node.
pub fn mse_node<F: Scalar>(g: &mut Graph<F>, pred: Var, target: Var) -> Var {
    let diff = g.sub(pred, target);
    let sq = g.square(diff);
    g.mean_all(sq)
}

/// Reconstruction loss: mean absolute per-pixel error.
pub fn relight_recon_loss(pred: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(AliError::Contract(format!(
            "relight_recon_loss: shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut g = Graph::<f64>::new();
    let p = g.input(pred.clone());
    let t = g.input(target.clone());
    let node = mae_node(&mut g, p, t);
    Ok(g.scalar(node))
}

/// Graph nodes of the stage-1 composite, one per reported term.
pub struct Stage1Nodes {
    pub total: Var,
    pub relight: Var,
    pub intrinsics: Var,
    pub reg_a: Var,
    pub reg_l: Var,
}

/// Per-term values of the stage-1 loss (logging schema: step, total,
/// relight, intrinsics, reg_a, reg_l).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Breakdown {
    pub total: f64,
    pub relight: f64,
    pub intrinsics: f64,
    pub reg_a: f64,
    pub reg_l: f64,
}

/// Build the unweighted stage-1 composite:
/// relight + improved intrinsics + mean-over-lightings of the per-level
/// feature regularizers + the regularizer on the stacked lighting codes.
///
/// `stacks[m][i]`: level `i` of lighting `m` (`[C,h,w]` or `[1,C,h,w]`);
/// `codes`: `[M, d_L]`. Hypersphere references are derived from `seed` per
/// term so every call is reproducible.
pub fn stage1_total_node<F: Scalar>(
    g: &mut Graph<F>,
    pred: Var,
    target: Var,
    stacks: &[Vec<Var>],
    codes: Var,
    lambda: f64,
    seed: u64,
) -> Result<Stage1Nodes> {
    RegConfig { lambda }.validate()?;
    if stacks.is_empty() {
        return Err(AliError::Contract("stage1: need >= 1 lighting".into()));
    }
    let relight = mae_node(g, pred, target);
    let intrinsics = improved_intrinsics_node(g, stacks);

    let m_count = stacks.len();
    let inv_m = 1.0 / m_count as f64;
    let mut reg_a_sum: Option<Var> = None;
    for (m, stack) in stacks.iter().enumerate() {
        for (i, &level) in stack.iter().enumerate() {
            let mat = level_to_matrix(g, level);
            let (n, d) = {
                let s = g.value(mat).shape().to_vec();
                (s[0], s[1])
            };
            let term_seed = child_seed(seed, &format!("reg_a/m{m}/lvl{i}"));
            let r_hat = reference_rate(n, d, lambda, term_seed);
            let node = reg_loss_node(g, mat, lambda, r_hat);
            reg_a_sum = Some(match reg_a_sum {
                Some(t) => g.add(t, node),
                None => node,
            });
        }
    }
    let reg_a = g.scale_add(reg_a_sum.unwrap(), inv_m, 0.0);

    let (cn, cd) = {
        let s = g.value(codes).shape().to_vec();
        assert_eq!(s.len(), 2, "codes must be [M, d_L]");
        (s[0], s[1])
    };
    let r_hat_l = reference_rate(cn, cd, lambda, child_seed(seed, "reg_l"));
    let reg_l = reg_loss_node(g, codes, lambda, r_hat_l);

    let t0 = g.add(relight, intrinsics);
    let t1 = g.add(t0, reg_a);
    let total = g.add(t1, reg_l);
    Ok(Stage1Nodes {
        total,
        relight,
        intrinsics,
        reg_a,
        reg_l,
    })
}

/// Value-level stage-1 composite with its per-term breakdown.
pub fn stage1_total(
    pred: &ArrayD<f64>,
    target: &ArrayD<f64>,
    stacks: &[Vec<ArrayD<f64>>],
    codes: &Array2<f64>,
    lambda: f64,
    seed: u64,
) -> Result<Stage1Breakdown> {
    if pred.shape() != target.shape() {
        return Err(AliError::Contract(
            "stage1_total: pred/target shape mismatch".into(),
        ));
    }
    if codes.nrows() != stacks.len() {
        return Err(AliError::Contract(format!(
            "stage1_total: {} lighting codes for {} stacks",
            codes.nrows(),
            stacks.len()
        )));
    }
    let mut g = Graph::<f64>::new();
    let p = g.input(pred.clone());
    let t = g.input(target.clone());
    let vars: Vec<Vec<Var>> = stacks
        .iter()
        .map(|s| s.iter().map(|lvl| g.input(lvl.clone())).collect())
        .collect();
    let c = g.input(codes.clone().into_dyn());
    let nodes = stage1_total_node(&mut g, p, t, &vars, c, lambda, seed)?;
    Ok(Stage1Breakdown {
        total: g.scalar(nodes.total),
        relight: g.scalar(nodes.relight),
        intrinsics: g.scalar(nodes.intrinsics),
        reg_a: g.scalar(nodes.reg_a),
        reg_l: g.scalar(nodes.reg_l),
    })
}
