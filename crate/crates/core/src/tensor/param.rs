use std::collections::BTreeMap;

use super::value::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A trainable value with its gradient accumulator and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
    frozen: bool,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let zeros = value.map(|_| 0.0);
        Self {
            name,
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            step: 0,
            frozen: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn moments(&self) -> (&Tensor, &Tensor) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn parts_mut(
        &mut self,
    ) -> (&mut Tensor, &mut Tensor, &mut Tensor, &mut Tensor, &mut u64) {
        (
            &mut self.value,
            &mut self.grad,
            &mut self.first_moment,
            &mut self.second_moment,
            &mut self.step,
        )
    }
}

/// Owns every parameter of a model, addressable by id or by dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "parameter" });
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
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

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites a value (initialization, tests, checkpoint loading).
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Err(Error::FrozenParameter(p.name.clone()));
        }
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set-value",
                format!(
                    "`{}` is {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    value.shape()
                ),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn restore(
        &mut self,
        id: ParamId,
        value: Tensor,
        first: Tensor,
        second: Tensor,
        step: u64,
        frozen: bool,
    ) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape()
            || first.shape() != value.shape()
            || second.shape() != value.shape()
        {
            return Err(Error::Format(format!(
                "parameter `{}` expects shape {:?}, checkpoint has {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        p.first_moment = first;
        p.second_moment = second;
        p.step = step;
        p.frozen = frozen;
        p.grad = p.value.map(|_| 0.0);
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Err(Error::FrozenParameter(p.name.clone()));
        }
        if p.grad.shape() != grad.shape() {
            return Err(Error::shape(
                "accumulate-grad",
                format!(
                    "`{}` is {:?}, got {:?}",
                    p.name,
                    p.grad.shape(),
                    grad.shape()
                ),
            ));
        }
        for (a, g) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *a += g;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}
