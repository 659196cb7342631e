use std::collections::BTreeMap;

use super::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

/// Named trainable tensors with their Adam moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
    state: BTreeMap<String, AdamState>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.state.insert(name.to_string(), AdamState { m: Tensor::zeros(t.shape()), v: Tensor::zeros(t.shape()), step: 0 });
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Overwrites an existing tensor of the same shape, keeping its state.
    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))?;
        p.same_shape(&t, "replace")?;
        *p = t;
        Ok(())
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.state.get(name)
    }

    pub fn set_state(&mut self, name: &str, st: AdamState) -> Result<()> {
        let p = self.params.get(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))?;
        p.same_shape(&st.m, "adam state")?;
        p.same_shape(&st.v, "adam state")?;
        self.state.insert(name.to_string(), st);
        Ok(())
    }

    /// Largest Adam step count over all parameters.
    pub fn state_step(&self) -> usize {
        self.state.values().map(|s| s.step as usize).max().unwrap_or(0)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Adds every parameter to the graph as a leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams { ids: self.params.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone()))).collect() }
    }
}

/// Parameter leaves of one graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        match self.ids.get(name) {
            Some(&id) => id,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.ids.values().copied().collect()
    }

    /// Only names accepted by `filter` are returned.
    pub fn collect(&self, grads: &Gradients, filter: impl Fn(&str) -> bool) -> BTreeMap<String, Tensor> {
        self.ids.iter().filter(|(k, _)| filter(k)).filter_map(|(k, id)| grads.get(*id).map(|g| (k.clone(), g.clone()))).collect()
    }

    pub fn filtered_ids(&self, filter: impl Fn(&str) -> bool) -> Vec<NodeId> {
        self.ids.iter().filter(|(k, _)| filter(k)).map(|(_, &v)| v).collect()
    }
}

/// One bias-corrected Adam update. Parameters absent from `grads` are left
/// untouched (their step counters do not advance).
pub fn adam_step(p: &mut ParamSet, grads: &BTreeMap<String, Tensor>, cfg: AdamConfig) -> Result<()> {
    for (name, g) in grads {
        let param = p.params.get(name).ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
        param.same_shape(g, "adam_step")?;
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    for (name, g) in grads {
        let param = p.params.get_mut(name).expect("validated");
        let st = p.state.get_mut(name).expect("state exists for every parameter");
        st.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
        let pd = param.data_mut();
        let md = st.m.data_mut();
        let vd = st.v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = single(1.5);
        let g = BTreeMap::from([("w".to_string(), Tensor::scalar(0.0))]);
        adam_step(&mut p, &g, AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.5);
        assert_eq!(p.state("w").unwrap().step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let mut p = single(0.0);
        let g = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        adam_step(&mut p, &g, AdamConfig::with_lr(0.1)).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_names_parameter() {
        let mut p = single(0.0);
        let g = BTreeMap::from([("w".to_string(), Tensor::scalar(f64::NAN))]);
        match adam_step(&mut p, &g, AdamConfig::default()) {
            Err(Error::NonFiniteGradient(n)) => assert_eq!(n, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.get("w").unwrap().item(), 0.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = single(0.0);
        assert!(p.insert("w", Tensor::scalar(1.0)).is_err());
    }
}
