//! Named parameter storage and per-pass binding onto a tape.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{AttentionWeights, Tape, Tensor, Var};

/// Every model parameter, keyed by a `/`-separated path such as
/// `text_mixer/blocks.3/mlp.lin1.weight`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar count over entries whose name starts with `prefix`.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) {
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn linear<R: Rng>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut R) {
        self.normal(&format!("{prefix}.weight"), &[fan_in, fan_out], std, rng);
        self.zeros(&format!("{prefix}.bias"), &[fan_out]);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.insert(format!("{prefix}.gain"), Tensor::ones(&[d]));
        self.zeros(&format!("{prefix}.bias"), &[d]);
    }

    /// Projections `q/k/v: d → internal`, `out: internal → d`.
    pub fn attention<R: Rng>(&mut self, prefix: &str, d: usize, internal: usize, std: f64, rng: &mut R) {
        for p in ["q_proj", "k_proj", "v_proj"] {
            self.linear(&format!("{prefix}.{p}"), d, internal, std, rng);
        }
        self.linear(&format!("{prefix}.out_proj"), internal, d, std, rng);
    }
}

/// One forward (and optionally backward) pass. Parameters are copied onto
/// the tape the first time they are used; only names in the trainable set
/// become gradient-carrying leaves.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    trainable: Option<&'a BTreeSet<String>>,
    bound: HashMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a BTreeSet<String>) -> Self {
        Session {
            tape: Tape::new(),
            store,
            trainable: Some(trainable),
            bound: HashMap::new(),
        }
    }

    /// Session in which nothing receives gradients.
    pub fn inference(store: &'a ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            store,
            trainable: None,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let rg = self.trainable.is_some_and(|t| t.contains(name));
        let v = self.tape.leaf(value, rg);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        crate::numerics::linear(&mut self.tape, x, w, b)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, crate::numerics::LN_EPS)
    }

    pub fn attention_weights(&mut self, prefix: &str) -> Result<AttentionWeights> {
        let mut p = |s: &str| self.param(&format!("{prefix}.{s}"));
        Ok(AttentionWeights {
            q_w: p("q_proj.weight")?,
            q_b: p("q_proj.bias")?,
            k_w: p("k_proj.weight")?,
            k_b: p("k_proj.bias")?,
            v_w: p("v_proj.weight")?,
            v_b: p("v_proj.bias")?,
            out_w: p("out_proj.weight")?,
            out_b: p("out_proj.bias")?,
        })
    }

    pub fn attention(
        &mut self,
        prefix: &str,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Var>,
    ) -> Result<Var> {
        let w = self.attention_weights(prefix)?;
        crate::numerics::mha(&mut self.tape, &w, q, k, v, heads, mask)
    }

    /// Gradients of every bound parameter after `tape.backward`. Parameters
    /// that were used but received nothing report an all-zero tensor.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .tape
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}
