use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Gradients, Graph};
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

/// How a new parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// He initialisation, `std = sqrt(2 / fan_in)`.
    He(usize),
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let n: usize = shape.iter().product();
        let data: Vec<S> = match init {
            Init::Zeros => vec![S::zero(); n],
            Init::Ones => vec![S::one(); n],
            Init::Normal(std) => normal(rng, n, std),
            Init::He(fan_in) => normal(rng, n, (2.0 / fan_in.max(1) as f64).sqrt()),
        };
        self.names.push(name.to_string());
        self.tensors.push(Tensor::from_vec(shape, data));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor<S>> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    /// Overwrites every parameter from `map`; names and shapes must match exactly.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor<S>>) -> Result<(), String> {
        if map.len() != self.tensors.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                map.len()
            ));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = map
                .get(name)
                .ok_or_else(|| format!("missing tensor {name}"))?;
            if src.shape() != t.shape() {
                return Err(format!(
                    "tensor {name}: shape {:?} does not match {:?}",
                    src.shape(),
                    t.shape()
                ));
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

fn normal<S: Scalar, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<S> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::from_f64_lossy(z * std)
        })
        .collect()
}

/// Dense gradient buffer aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamGrads<S> {
    grads: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamGrads<S> {
    pub fn zeros_like(params: &ParamSet<S>) -> Self {
        ParamGrads {
            grads: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Adds the gradients of all parameters bound into `graph`.
    pub fn accumulate(&mut self, graph: &Graph<S>, grads: &Gradients<S>) {
        for (id, var) in graph.bound_params() {
            if let Some(g) = grads.get(var) {
                self.grads[id.0].add_assign(g);
            }
        }
    }

    pub fn merge(&mut self, other: &ParamGrads<S>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: S) {
        for g in self.grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.0]
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|t| t.all_finite())
    }
}

/// Adam optimiser state.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamSet<S>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet<S>, grads: &ParamGrads<S>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::from_f64_lossy(self.beta1), S::from_f64_lossy(self.beta2));
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        let lr = S::from_f64_lossy(self.lr);
        let eps = S::from_f64_lossy(self.eps);
        for i in 0..params.tensors.len() {
            let g = grads.grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensors[i].data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimises_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("x", &[2], Init::Normal(1.0), &mut rng);
        let mut opt = Adam::new(&ps, 0.05);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let x = g.param(&ps, id);
            let sq = g.mul(x, x);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            let mut pg = ParamGrads::zeros_like(&ps);
            pg.accumulate(&g, &grads);
            opt.update(&mut ps, &pg);
        }
        assert!(ps.tensor(id).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn load_map_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f64>::new();
        ps.add("a", &[2, 2], Init::Zeros, &mut rng);
        let mut map = ps.to_map();
        assert!(ps.load_map(&map).is_ok());
        map.insert("a".into(), Tensor::zeros(&[3]));
        assert!(ps.load_map(&map).is_err());
    }
}
