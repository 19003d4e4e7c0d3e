//! SGD with momentum.

use std::path::Path;

use crate::autodiff::checkpoint::Record;
use crate::autodiff::{Bound, Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `v ← μ·v − lr·g; w ← w + v`. A missing gradient counts as zero.
pub fn sgd_momentum_step<T: Scalar>(
    w: &mut Tensor<T>,
    g: Option<&Tensor<T>>,
    v: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if w.shape() != v.shape() || g.is_some_and(|g| g.shape() != w.shape()) {
        return Err(Error::ShapeMismatch {
            op: "sgd",
            left: w.shape().to_vec(),
            right: g.map_or_else(|| v.shape().to_vec(), |g| g.shape().to_vec()),
        });
    }
    let (lr, mu) = (T::lit(lr), T::lit(momentum));
    match g {
        Some(g) => {
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
                *vi = mu * *vi - lr * gi;
                *wi += *vi;
            }
        }
        None => {
            for (vi, wi) in v.data_mut().iter_mut().zip(w.data_mut()) {
                *vi = mu * *vi;
                *wi += *vi;
            }
        }
    }
    Ok(())
}

/// Per-parameter velocities for a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar = f64> {
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

const PREFIX: &str = "velocity.";

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Updates every parameter of `store` from gradients of its bound leaves.
    pub fn step(&mut self, store: &mut ParamStore<T>, bound: &Bound, grads: &Gradients<T>, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for (id, v) in ids.into_iter().zip(&mut self.velocity) {
            let g = grads.get(bound.var(id));
            sgd_momentum_step(&mut store.get_mut(id).value, g, v, lr, self.momentum)?;
        }
        Ok(())
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn records(&self, store: &ParamStore<T>) -> Vec<Record> {
        store
            .iter()
            .zip(&self.velocity)
            .map(|((_, p), v)| Record {
                name: format!("{PREFIX}{}", p.name),
                shape: v.shape().to_vec(),
                values: v.to_f64_vec(),
            })
            .collect()
    }

    /// Restores velocities from `records`, matched by parameter name.
    pub fn load_records(&mut self, store: &ParamStore<T>, records: &[Record], origin: &Path) -> Result<()> {
        for ((_, p), v) in store.iter().zip(&mut self.velocity) {
            let name = format!("{PREFIX}{}", p.name);
            let r = records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::format(origin, format!("missing {name}")))?;
            if r.shape != v.shape() {
                return Err(Error::format(origin, format!("{name}: shape {:?}", r.shape)));
            }
            *v = Tensor::from_f64(&r.shape, &r.values)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(w: &mut Tensor, v: &mut Tensor, g: f64) {
        sgd_momentum_step(w, Some(&Tensor::vector(vec![g])), v, 0.001, 0.9).unwrap();
    }

    #[test]
    fn first_steps_by_hand() {
        let mut w = Tensor::vector(vec![1.0]);
        let mut v = Tensor::vector(vec![0.0]);
        step(&mut w, &mut v, 1.0);
        assert_eq!(v.data(), &[-0.001]);
        assert!((w.data()[0] - 0.999).abs() < 1e-15);
        step(&mut w, &mut v, 1.0);
        assert!((v.data()[0] + 0.0019).abs() < 1e-15);
        assert!((w.data()[0] - (1.0 - 0.0029)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        let mut w = Tensor::vector(vec![0.0]);
        let mut v = Tensor::vector(vec![1.0]);
        let mut expect: f64 = 1.0;
        for _ in 0..5 {
            sgd_momentum_step(&mut w, None, &mut v, 0.1, 0.9).unwrap();
            expect *= 0.9;
            assert!((v.data()[0] - expect).abs() < 1e-15);
        }
        let mut v2 = Tensor::vector(vec![1.0]);
        step(&mut w, &mut v2, 0.0);
        assert_eq!(v2.data(), &[0.9]);
    }

    #[test]
    fn shape_mismatch() {
        let mut w = Tensor::vector(vec![0.0; 2]);
        let mut v = Tensor::vector(vec![0.0; 2]);
        let g = Tensor::vector(vec![0.0; 3]);
        assert!(sgd_momentum_step(&mut w, Some(&g), &mut v, 0.1, 0.9).is_err());
    }
}
