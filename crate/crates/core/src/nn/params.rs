use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which part of the model owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    ReconHead,
    /// Classification head for the given task id.
    ClsHead(usize),
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies (false for biases and norms).
    pub decay: bool,
}

/// Ordered collection of every learnable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            group,
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar elements.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Overwrites every parameter value, checking names and shapes.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, (name, v)) in self.params.iter_mut().zip(values) {
            if p.name != name || p.value.shape() != v.shape() {
                return Err(Error::Validation(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    v.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` means "not touched".
#[derive(Clone, Debug)]
pub struct GradStore<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor<T>) -> Result<()> {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    /// Adds every parameter gradient found on `tape` into the store.
    pub fn absorb(&mut self, tape: &Tape<T>, grads: &mut Gradients<T>) -> Result<()> {
        let leaves: Vec<(usize, Var)> = tape.keyed_leaves().collect();
        for (key, var) in leaves {
            if let Some(g) = grads.take(var) {
                self.accumulate(ParamId(key), g)?;
            }
        }
        Ok(())
    }

    /// Moves every gradient of `other` into `self`, in parameter order.
    pub fn merge(&mut self, other: GradStore<T>) -> Result<()> {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g)?;
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }
}

/// Draws from N(0, std²) truncated to ±2·std by rejection.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(T::lit(z * std));
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Records parameters on a tape on demand (each one at most once per tape).
pub struct Binder<'a, T> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamStore<T>,
    trainable: bool,
}

impl<'a, T: Scalar> Binder<'a, T> {
    /// `trainable = false` binds parameters as constants (evaluation).
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape,
            params,
            trainable,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let params = self.params;
        self.tape
            .keyed_leaf(id.0, self.trainable, || params.get(id).value.clone())
    }
}
