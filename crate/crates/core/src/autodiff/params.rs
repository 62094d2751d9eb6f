use std::collections::HashMap;

use super::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Owns every learnable tensor of a model. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::Invalid {
                op: "param",
                msg: format!("duplicate parameter name `{name}`"),
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Invalid {
                op: "param",
                msg: format!("`{name}`: shape {shape:?} vs {} values", data.len()),
            });
        }
        self.by_name.insert(name.to_owned(), self.params.len());
        self.params.push(Parameter {
            name: name.to_owned(),
            shape: shape.to_vec(),
            data,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Plain gradient step `p -= rate * g`.
    pub fn apply_step(&mut self, grads: &Gradients, rate: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.bufs) {
            for (x, dx) in p.data.iter_mut().zip(g) {
                *x -= rate * dx;
            }
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            bufs: store.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    /// Adds `scale * g` for every parameter gradient produced by a graph.
    pub fn accumulate<'a>(&mut self, grads: impl IntoIterator<Item = (ParamId, &'a [f64])>, scale: f64) {
        for (id, g) in grads {
            for (a, b) in self.bufs[id.0].iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.bufs
            .iter()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            let s = max_norm / n;
            self.bufs.iter_mut().flatten().for_each(|x| *x *= s);
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|x| x.is_finite())
    }
}

/// First and second moment estimates for an Adam update.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Bias-corrected Adam step with decoupled weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, rate: f64, weight_decay: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.bufs[i]);
            for (j, x) in p.data.iter_mut().enumerate() {
                m[j] = B1 * m[j] + (1.0 - B1) * g[j];
                v[j] = B2 * v[j] + (1.0 - B2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + EPS);
                *x -= rate * (update + weight_decay * *x);
            }
        }
    }
}
