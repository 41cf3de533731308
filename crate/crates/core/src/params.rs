//! Named parameter tensors and their binding onto a tape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: Arc<HashMap<String, usize>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        Arc::make_mut(&mut self.index).insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), values)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, true)
    }

    /// Puts every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, leaf: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| if leaf { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound {
            vars,
            index: Arc::clone(&self.index),
        }
    }
}

/// Tape handles for a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: Arc<HashMap<String, usize>>,
}

impl Bound {
    /// Wraps vars already on a tape, one per store entry in store order.
    pub fn from_vars(store: &ParamStore, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Config(format!("{} vars for {} parameters", vars.len(), store.len())));
        }
        Ok(Self {
            vars,
            index: Arc::clone(&store.index),
        })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; unreachable parameters get zeros.
    pub fn gradients(&self, store: &ParamStore, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(store.iter())
            .map(|(v, (_, t))| grads.get(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    }
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Config(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for ((_, t), g) in store.entries.iter().zip(grads) {
            if t.numel() != g.len() {
                return Err(Error::Config(format!("gradient of length {} for {} values", g.len(), t.numel())));
            }
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, t)) in store.entries.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.values_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / b1t;
                let vh = v[j] / b2t;
                *p -= lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::vector(vec![1.0, -2.0])).unwrap();
        s.insert("b", Tensor::scalar(0.5)).unwrap();
        s
    }

    #[test]
    fn registry_rules() {
        let mut s = store();
        assert!(s.insert("a", Tensor::scalar(0.0)).is_err());
        assert_eq!((s.len(), s.numel()), (2, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        s.insert_uniform("w", &[3, 4], 4, &mut rng).unwrap();
        assert!(s.get("w").unwrap().values().iter().all(|v| v.abs() <= 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = store();
        t.insert_uniform("w", &[3, 4], 4, &mut rng).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr() {
        let mut s = store();
        let before = s.clone();
        let mut adam = Adam::new(&s);
        adam.update(&mut s, &[vec![0.0, 0.0], vec![0.0]], 0.1).unwrap();
        assert_eq!(s, before);
        adam.update(&mut s, &[vec![3.0, -1.0], vec![7.0]], 0.0).unwrap();
        assert_eq!(s, before);
        assert!(adam.update(&mut s, &[vec![0.0]], 0.1).is_err());
    }

    #[test]
    fn adam_constant_gradient_step_is_lr() {
        let mut s = store();
        let mut adam = Adam::new(&s);
        let lr = 1e-3;
        let mut prev = s.get("a").unwrap().values().to_vec();
        for k in 1..=200 {
            adam.update(&mut s, &[vec![2.5, -4.0], vec![1e-3]], lr).unwrap();
            let now = s.get("a").unwrap().values().to_vec();
            // With a constant gradient, m_hat = g and v_hat = g^2 exactly.
            let expect = lr * 2.5 / (2.5 + 1e-8);
            assert!(((prev[0] - now[0]) - expect).abs() < 1e-12, "step {k}");
            assert!(((now[1] - prev[1]) - lr * 4.0 / (4.0 + 1e-8)).abs() < 1e-12);
            prev = now;
        }
        let b = s.get("b").unwrap().values()[0];
        assert!((0.5 - b - 200.0 * lr * 1e-3 / (1e-3 + 1e-8)).abs() < 1e-9);
    }
}
