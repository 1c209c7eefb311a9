use std::collections::{BTreeMap, HashMap};

use crate::num::{AdamConfig, AdamState, Array};

use super::NnError;

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
    /// Running statistics are stored here too but never touched by the optimizer.
    pub trainable: bool,
}

/// Named parameter arrays shared by one or more models.
///
/// Models refer to parameters by name, so two specs that use the same layer
/// names share weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Incremented on every optimizer update; tapes remember the value they saw.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId, NnError> {
        self.id(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id].value
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.id(name).map(|id| &self.params[id].value)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Inserts a parameter unless one with the same name exists; returns its id.
    pub fn get_or_insert_with(
        &mut self,
        name: &str,
        trainable: bool,
        init: impl FnOnce() -> Array,
    ) -> ParamId {
        if let Some(id) = self.id(name) {
            return id;
        }
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value: init(),
            trainable,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    /// Overwrites a value with one of identical shape.
    pub fn set(&mut self, name: &str, value: Array) -> Result<(), NnError> {
        let id = self.require(name)?;
        let slot = &mut self.params[id].value;
        if slot.shape() != value.shape() {
            return Err(NnError::ShapeMismatch {
                context: format!("parameter {name}"),
                expected: slot.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *slot = value;
        self.version += 1;
        Ok(())
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].trainable)
            .collect()
    }

    /// Fresh Adam state with one slot per trainable parameter.
    pub fn adam(&self, config: AdamConfig) -> AdamState {
        let shapes: Vec<Vec<usize>> = self
            .trainable_ids()
            .into_iter()
            .map(|i| self.params[i].value.shape().to_vec())
            .collect();
        AdamState::new(config, &shapes)
    }

    /// One Adam step; parameters without a gradient get a zero gradient.
    pub fn apply_adam(&mut self, adam: &mut AdamState, grads: &Gradients) -> Result<(), NnError> {
        let ids = self.trainable_ids();
        let zeros: Vec<Array> = ids
            .iter()
            .map(|&i| Array::zeros(self.params[i].value.shape()))
            .collect();
        let grad_refs: Vec<&Array> = ids
            .iter()
            .zip(&zeros)
            .map(|(i, z)| grads.params.get(i).unwrap_or(z))
            .collect();
        let mut values: Vec<Array> = ids
            .iter()
            .map(|&i| std::mem::replace(&mut self.params[i].value, Array::zeros(&[0])))
            .collect();
        let result = {
            let mut refs: Vec<&mut Array> = values.iter_mut().collect();
            adam.update(&mut refs, &grad_refs)
        };
        for (&i, v) in ids.iter().zip(values) {
            self.params[i].value = v;
        }
        result?;
        self.version += 1;
        Ok(())
    }

    /// Writes batch-norm running statistics recorded by a training forward pass.
    pub fn commit_running_stats(&mut self, updates: &[(ParamId, Array)]) {
        for (id, value) in updates {
            self.params[*id].value = value.clone();
        }
    }

    /// Named copies of every parameter, in insertion order.
    pub fn named_arrays(&self) -> Vec<(String, Array)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

/// Parameter gradients keyed by id, plus the gradient of the model input.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<ParamId, Array>,
    pub input: Option<Array>,
}

impl Gradients {
    pub fn accumulate(&mut self, id: ParamId, grad: Array) {
        match self.params.get_mut(&id) {
            Some(acc) => {
                for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += g;
                }
            }
            None => {
                self.params.insert(id, grad);
            }
        }
    }

    /// Adds every parameter gradient of `other` into `self`.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.params {
            self.accumulate(id, g);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Array::is_finite)
    }
}
