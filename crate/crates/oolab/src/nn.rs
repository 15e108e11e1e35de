//! Parameter storage and graph binding for small feed-forward networks.
//!
//! A [`ParamSet`] maps stable names to tensors (sorted, so iteration and
//! serialization are deterministic). A [`Session`] owns one define-by-run
//! graph and interns each parameter as a single leaf per graph, which makes
//! gradient accumulation correct when a subnetwork appears several times in
//! one loss (the detector and fusion tail do, during robust training).

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::tensor::Tensor;

/// Named parameter tensors with deterministic iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                if slot.shape() != tensor.shape() {
                    return Err(Error::shape(
                        "param_set",
                        format!("{name}: {:?} vs {:?}", slot.shape(), tensor.shape()),
                    ));
                }
                *slot = tensor;
                Ok(())
            }
            None => Err(Error::Contract(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Little-endian byte image of all values under a name prefix, used by
    /// freeze checks to assert bit-identity.
    pub fn byte_image(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, tensor) in &self.map {
            if name.starts_with(prefix) {
                out.extend_from_slice(name.as_bytes());
                for v in tensor.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }
}

/// Which parameters receive gradients in a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope {
    /// Inference / attack target: no parameter gradients.
    Frozen,
    /// Every parameter is trainable.
    All,
    /// Only names starting with one of these prefixes are trainable.
    Prefixes(Vec<String>),
}

impl Scope {
    pub fn trainable(&self, name: &str) -> bool {
        match self {
            Scope::Frozen => false,
            Scope::All => true,
            Scope::Prefixes(prefixes) => prefixes.iter().any(|p| name.starts_with(p)),
        }
    }
}

/// One forward/backward pass: a graph plus parameter interning.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamSet,
    scope: Scope,
    bound: HashMap<String, VarId>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamSet, scope: Scope) -> Self {
        Session {
            graph: Graph::new(),
            params,
            scope,
            bound: HashMap::new(),
        }
    }

    /// Leaf for a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<VarId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let tensor = self.params.get(name)?.clone();
        let id = self.graph.leaf(tensor, self.scope.trainable(name));
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients of every trainable parameter touched by this session.
    /// Parameters the root does not depend on come back as exact zeros.
    pub fn trainable_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            if self.scope.trainable(name) {
                if let Some(g) = self.graph.grad(id) {
                    out.insert(name.clone(), g.to_vec());
                }
            }
        }
        out
    }
}

// ── Layers ──────────────────────────────────────────────────────────────

/// Fully connected stack: `dims = [in, h1, ..., out]`, relu between layers,
/// linear output. Parameters live under `prefix.l{i}.{w,b}`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeedForward {
    pub prefix: String,
    pub dims: Vec<usize>,
}

impl FeedForward {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>) -> Self {
        debug_assert!(dims.len() >= 2);
        FeedForward {
            prefix: prefix.into(),
            dims,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Kaiming-uniform fan-in initialization, seed-controlled via `rng`.
    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for (i, pair) in self.dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let bb = 1.0 / (fan_in as f64).sqrt();
            let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bb..bb)).collect();
            params.insert(
                format!("{}.l{i}.w", self.prefix),
                Tensor::matrix(fan_in, fan_out, w).expect("init"),
            );
            params.insert(
                format!("{}.l{i}.b", self.prefix),
                Tensor::vector(&b).expect("init"),
            );
        }
    }

    /// Forward `x [batch × in] -> [batch × out]`.
    pub fn forward(&self, sess: &mut Session, x: VarId) -> Result<VarId> {
        let layers = self.dims.len() - 1;
        let mut h = x;
        for i in 0..layers {
            let w = sess.param(&format!("{}.l{i}.w", self.prefix))?;
            let b = sess.param(&format!("{}.l{i}.b", self.prefix))?;
            let lin = sess.graph.matmul(h, w)?;
            h = sess.graph.add(lin, b)?;
            if i + 1 < layers {
                h = sess.graph.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.dims.len() - 1 {
            names.push(format!("{}.l{i}.w", self.prefix));
            names.push(format!("{}.l{i}.b", self.prefix));
        }
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn param_interning_reuses_one_leaf() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(2.0).unwrap());
        let mut sess = Session::new(&params, Scope::All);
        let a = sess.param("w").unwrap();
        let b = sess.param("w").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shared_parameter_grads_accumulate_across_uses() {
        // loss = w*c1 + w*c2 => dw = c1 + c2
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.5).unwrap());
        let mut sess = Session::new(&params, Scope::All);
        let w1 = sess.param("w").unwrap();
        let w2 = sess.param("w").unwrap();
        let c1 = sess.graph.constant(Tensor::scalar(3.0).unwrap());
        let c2 = sess.graph.constant(Tensor::scalar(4.0).unwrap());
        let p1 = sess.graph.mul(w1, c1).unwrap();
        let p2 = sess.graph.mul(w2, c2).unwrap();
        let total = sess.graph.add(p1, p2).unwrap();
        sess.graph.backward(total).unwrap();
        assert_eq!(sess.trainable_grads()["w"], vec![7.0]);
    }

    #[test]
    fn feed_forward_with_zero_params_maps_to_zero() {
        let ff = FeedForward::new("net", vec![3, 4, 2]);
        let mut params = ParamSet::new();
        let mut r = rng::rng(0);
        ff.init(&mut params, &mut r);
        for name in ff.param_names() {
            let shape = params.get(&name).unwrap().shape().to_vec();
            params.set(&name, Tensor::zeros(shape)).unwrap();
        }
        let mut sess = Session::new(&params, Scope::Frozen);
        let x = sess
            .graph
            .leaf(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap(), false);
        let y = ff.forward(&mut sess, x).unwrap();
        assert_eq!(sess.graph.value(y).values(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn scope_prefix_freezes_other_params() {
        let mut params = ParamSet::new();
        params.insert("ext.w", Tensor::scalar(2.0).unwrap());
        params.insert("tail.w", Tensor::scalar(3.0).unwrap());
        let mut sess = Session::new(&params, Scope::Prefixes(vec!["tail.".into()]));
        let e = sess.param("ext.w").unwrap();
        let t = sess.param("tail.w").unwrap();
        let prod = sess.graph.mul(e, t).unwrap();
        sess.graph.backward(prod).unwrap();
        let grads = sess.trainable_grads();
        assert!(grads.contains_key("tail.w"));
        assert!(!grads.contains_key("ext.w"));
        assert!(sess.graph.grad(e).is_none());
    }
}
