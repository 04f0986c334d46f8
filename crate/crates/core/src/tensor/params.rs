use std::collections::BTreeMap;

use super::{Scalar, Tensor, TensorError};

pub type ParamId = usize;

/// Which training group a parameter belongs to. `Base` tensors are the
/// pre-existing encoder-decoder weights; `New` tensors are the
/// speaker-conditioning additions that start at identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Base,
    New,
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub group: ParamGroup,
    /// Whether weight decay applies (matrices yes, biases and norms no).
    pub decay: bool,
}

/// Named parameter collection with stable, insertion-ordered ids.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<F>,
        group: ParamGroup,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            group,
            decay,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.id(name).map(|id| &self.params[id])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.id(name).map(move |id| &mut self.params[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<F>)> {
        self.params.iter_mut().enumerate()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replace the value of `name`, checking shape agreement.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<(), TensorError> {
        let p = self
            .by_name_mut(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    group: p.group,
                    decay: p.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }
}
