//! Parameter storage, parameter groups, layer builders, and AdamW.
//!
//! Parameters live in a flat name -> tensor map. Names are prefixed by their
//! group (`theta.`, `theta_prime.`, `phi.`, `phi_prime.`, `prior.`), which is
//! what stage plans freeze and what digests are computed over.

use crate::digest;
use crate::error::{AliError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

/// The named parameter groups of the model.
#[derive(Clone, Copy, PartialEq, Eq, Debug, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    /// Relighting encoder.
    Theta,
    /// Hypercolumn projection layers.
    ThetaPrime,
    /// Base (deterministic) decoder.
    Phi,
    /// Diffusion decoder.
    PhiPrime,
    /// Frozen visual prior.
    Prior,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Theta,
        ParamGroup::ThetaPrime,
        ParamGroup::Phi,
        ParamGroup::PhiPrime,
        ParamGroup::Prior,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Theta => "theta.",
            ParamGroup::ThetaPrime => "theta_prime.",
            ParamGroup::Phi => "phi.",
            ParamGroup::PhiPrime => "phi_prime.",
            ParamGroup::Prior => "prior.",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Theta => "theta",
            ParamGroup::ThetaPrime => "theta_prime",
            ParamGroup::Phi => "phi",
            ParamGroup::PhiPrime => "phi_prime",
            ParamGroup::Prior => "prior",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

/// Flat named-tensor store holding all model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Scalar> {
    map: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<F>) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<F>> {
        self.map
            .get(name)
            .ok_or_else(|| AliError::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<F>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| AliError::Contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Number of scalar parameters in one group.
    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        self.map
            .iter()
            .filter(|(n, _)| n.starts_with(group.prefix()))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Content digest of one parameter group (bit-exact).
    pub fn group_digest(&self, group: ParamGroup) -> String {
        let filtered: BTreeMap<String, ArrayD<F>> = self
            .map
            .iter()
            .filter(|(n, _)| n.starts_with(group.prefix()))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        digest::digest_tensors(&filtered)
    }

    /// Digests of every group present in the store.
    pub fn all_group_digests(&self) -> BTreeMap<String, String> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| self.map.keys().any(|n| n.starts_with(g.prefix())))
            .map(|g| (g.name().to_string(), self.group_digest(g)))
            .collect()
    }

    /// Bind a stored parameter into a graph, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<F>, name: &str, trainable: bool) -> Result<Var> {
        let v = self.get(name)?;
        Ok(g.leaf(name, v.clone(), trainable))
    }
}

fn randn<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<F> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let z: f64 = StandardNormal.sample(rng);
        F::from_f64(z * std)
    })
}

/// 2-D convolution layer description; parameters live in the store.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d { name: name.to_string(), cin, cout, k, stride, pad }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// He-normal weights, zero bias.
    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let std = (2.0 / fan_in).sqrt();
        store.insert(
            &self.weight_name(),
            randn(rng, &[self.cout, self.cin, self.k, self.k], std),
        );
        store.insert(&self.bias_name(), ArrayD::zeros(IxDyn(&[self.cout])));
    }

    /// Zero weights and bias (used for the fusion projection).
    pub fn init_zero<F: Scalar>(&self, store: &mut ParamStore<F>) {
        store.insert(
            &self.weight_name(),
            ArrayD::zeros(IxDyn(&[self.cout, self.cin, self.k, self.k])),
        );
        store.insert(&self.bias_name(), ArrayD::zeros(IxDyn(&[self.cout])));
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let w = store.bind(g, &self.weight_name(), trainable)?;
        let b = store.bind(g, &self.bias_name(), trainable)?;
        Ok(g.conv2d(x, w, b, self.stride, self.pad))
    }
}

/// Fully connected layer description.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: &str, din: usize, dout: usize) -> Self {
        Linear { name: name.to_string(), din, dout }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let std = (2.0 / self.din as f64).sqrt();
        store.insert(&self.weight_name(), randn(rng, &[self.dout, self.din], std));
        store.insert(&self.bias_name(), ArrayD::zeros(IxDyn(&[self.dout])));
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let w = store.bind(g, &self.weight_name(), trainable)?;
        let b = store.bind(g, &self.bias_name(), trainable)?;
        Ok(g.linear(x, w, b))
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    state: BTreeMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update to every parameter that has a gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &BTreeMap<String, ArrayD<F>>,
    ) -> Result<()> {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        let wd = F::from_f64(self.weight_decay * self.lr);
        let inv_bc1 = F::from_f64(1.0 / bc1);
        let inv_bc2 = F::from_f64(1.0 / bc2);

        for (name, grad) in grads {
            let p = store.get_mut(name)?;
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(AliError::Training(format!("non-finite gradient for {name}")));
            }
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|pi, mi, vi, &gi| {
                    *mi = b1 * *mi + (one - b1) * gi;
                    *vi = b2 * *vi + (one - b2) * gi * gi;
                    let mhat = *mi * inv_bc1;
                    let vhat = *vi * inv_bc2;
                    *pi = *pi - lr * mhat / (vhat.sqrt() + eps) - wd * *pi;
                });
        }
        Ok(())
    }

    /// Flatten optimizer state into named tensors for checkpointing.
    pub fn export_state(&self) -> BTreeMap<String, ArrayD<F>> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.state {
            out.insert(format!("opt.m.{name}"), m.clone());
            out.insert(format!("opt.v.{name}"), v.clone());
        }
        out
    }

    pub fn import_state(&mut self, tensors: &BTreeMap<String, ArrayD<F>>, t: u64) {
        self.t = t;
        self.state.clear();
        for (name, m) in tensors.iter().filter(|(n, _)| n.starts_with("opt.m.")) {
            let pname = name.trim_start_matches("opt.m.").to_string();
            if let Some(v) = tensors.get(&format!("opt.v.{pname}")) {
                self.state.insert(pname, (m.clone(), v.clone()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn group_digest_changes_only_with_its_group() {
        let mut store = ParamStore::<f32>::new();
        store.insert("theta.a", arr1(&[1.0f32]).into_dyn());
        store.insert("phi.b", arr1(&[2.0f32]).into_dyn());
        let d_theta = store.group_digest(ParamGroup::Theta);
        let d_phi = store.group_digest(ParamGroup::Phi);
        *store.get_mut("phi.b").unwrap() = arr1(&[3.0f32]).into_dyn();
        assert_eq!(d_theta, store.group_digest(ParamGroup::Theta));
        assert_ne!(d_phi, store.group_digest(ParamGroup::Phi));
    }

    #[test]
    fn adamw_reduces_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("theta.x", arr1(&[5.0f64, -3.0]).into_dyn());
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            let x = store.get("theta.x").unwrap().clone();
            let mut grads = BTreeMap::new();
            grads.insert("theta.x".to_string(), x.clone());
            opt.step(&mut store, &grads).unwrap();
        }
        let x = store.get("theta.x").unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-2), "did not converge: {x:?}");
    }

    #[test]
    fn param_group_of_name() {
        assert_eq!(ParamGroup::of("theta.enc.w"), Some(ParamGroup::Theta));
        assert_eq!(ParamGroup::of("theta_prime.p"), Some(ParamGroup::ThetaPrime));
        assert_eq!(ParamGroup::of("misc"), None);
    }
}
