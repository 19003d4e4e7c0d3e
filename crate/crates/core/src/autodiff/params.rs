//! Named parameter storage that outlives the per-iteration tape.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::checkpoint::{self, Record};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f64> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

/// Parameters of one store bound as leaves on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binding from explicit tape nodes, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    /// He-normal weight with the given fan-in.
    pub fn add_he(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    /// Same as [`bind`](Self::bind) but as constants.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        }
    }

    pub fn records(&self) -> Vec<Record> {
        self.params
            .iter()
            .map(|p| Record {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.to_f64_vec(),
            })
            .collect()
    }

    /// Overwrites values from records by name. Every parameter must be present.
    pub fn load_records(&mut self, records: &[Record], origin: &Path) -> Result<()> {
        let found: HashMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        for p in &mut self.params {
            let r = found
                .get(p.name.as_str())
                .ok_or_else(|| Error::format(origin, format!("missing parameter {}", p.name)))?;
            if r.shape != p.value.shape() {
                return Err(Error::format(
                    origin,
                    format!("{}: shape {:?} vs expected {:?}", p.name, r.shape, p.value.shape()),
                ));
            }
            p.value = Tensor::from_f64(&r.shape, &r.values)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.records())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let records = checkpoint::read(path)?;
        self.load_records(&records, path)
    }
}
