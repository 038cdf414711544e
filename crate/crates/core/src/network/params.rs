use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::network::arch::{ArchitectureSpec, LayerKind};
use crate::ops::batchnorm::{BatchNormState, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::rng::Rng;
use crate::tensor::{Distribution, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        matches!(self, ParamRole::ConvWeight | ParamRole::Gamma | ParamRole::Beta)
    }

    fn suffix(self) -> &'static str {
        match self {
            ParamRole::ConvWeight => "weight",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<S>,
}

/// Named tensors in layer order: trainable weights plus batch-norm running
/// statistics. Trainable tensors are numbered `0..trainable_count()` in the
/// same order, which is the slot order used by gradients and the optimiser.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<S = f32> {
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, usize>,
    trainable: Vec<usize>,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl<S: Scalar> Default for ParameterStore<S> {
    fn default() -> Self {
        ParameterStore {
            entries: Vec::new(),
            index: HashMap::new(),
            trainable: Vec::new(),
            bn_epsilon: DEFAULT_EPSILON,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: &str, role: ParamRole, tensor: Tensor<S>) -> Result<()> {
        let name = format!("{layer}.{}", role.suffix());
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("parameter {name} already present")));
        }
        self.index.insert(name.clone(), self.entries.len());
        if role.trainable() {
            self.trainable.push(self.entries.len());
        }
        self.entries.push(ParamEntry { name, role, tensor });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn get(&self, layer: &str, role: ParamRole) -> Option<&Tensor<S>> {
        self.index
            .get(&format!("{layer}.{}", role.suffix()))
            .map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, layer: &str, role: ParamRole) -> Option<&mut Tensor<S>> {
        let i = *self.index.get(&format!("{layer}.{}", role.suffix()))?;
        Some(&mut self.entries[i].tensor)
    }

    pub(crate) fn require(&self, layer: &str, role: ParamRole) -> Result<&Tensor<S>> {
        self.get(layer, role)
            .ok_or_else(|| Error::ArchitectureMismatch(format!("missing {layer}.{}", role.suffix())))
    }

    /// Trainable slot of `layer.role`.
    pub fn slot(&self, layer: &str, role: ParamRole) -> Option<usize> {
        let i = *self.index.get(&format!("{layer}.{}", role.suffix()))?;
        self.trainable.iter().position(|&t| t == i)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.len()
    }

    pub fn trainable(&self, slot: usize) -> &Tensor<S> {
        &self.entries[self.trainable[slot]].tensor
    }

    pub fn trainable_mut(&mut self, slot: usize) -> &mut Tensor<S> {
        let i = self.trainable[slot];
        &mut self.entries[i].tensor
    }

    pub fn trainable_shapes(&self) -> Vec<Vec<usize>> {
        self.trainable
            .iter()
            .map(|&i| self.entries[i].tensor.dims().to_vec())
            .collect()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(|&i| self.entries[i].name.as_str())
    }

    /// Batch-norm state for `layer` assembled from the store.
    pub fn bn_state(&self, layer: &str) -> Result<BatchNormState<S>> {
        Ok(BatchNormState {
            gamma: self.require(layer, ParamRole::Gamma)?.clone(),
            beta: self.require(layer, ParamRole::Beta)?.clone(),
            running_mean: self.require(layer, ParamRole::RunningMean)?.clone(),
            running_var: self.require(layer, ParamRole::RunningVar)?.clone(),
            epsilon: self.bn_epsilon,
            momentum: self.bn_momentum,
        })
    }

    pub fn set_running_stats(&mut self, layer: &str, state: &BatchNormState<S>) -> Result<()> {
        for (role, t) in [
            (ParamRole::RunningMean, &state.running_mean),
            (ParamRole::RunningVar, &state.running_var),
        ] {
            *self
                .get_mut(layer, role)
                .ok_or_else(|| Error::ArchitectureMismatch(format!("missing {layer} running stats")))? = t.clone();
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    role: e.role,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
            trainable: self.trainable.clone(),
            bn_epsilon: self.bn_epsilon,
            bn_momentum: self.bn_momentum,
        }
    }

    /// Checks that every tensor the spec needs exists with the right shape.
    pub fn check_against(&self, spec: &ArchitectureSpec) -> Result<()> {
        for (layer, role, dims) in expected_tensors(spec) {
            match self.get(&layer, role) {
                Some(t) if t.dims() == dims.as_slice() => {}
                Some(t) => {
                    return Err(Error::ArchitectureMismatch(format!(
                        "{layer}.{} has shape {:?}, expected {dims:?}",
                        role.suffix(),
                        t.dims()
                    )))
                }
                None => {
                    return Err(Error::ArchitectureMismatch(format!(
                        "missing {layer}.{}",
                        role.suffix()
                    )))
                }
            }
        }
        Ok(())
    }
}

fn expected_tensors(spec: &ArchitectureSpec) -> Vec<(String, ParamRole, Vec<usize>)> {
    let mut out = Vec::new();
    for l in spec.layers() {
        match l.kind {
            LayerKind::Conv {
                extent, c_in, c_out, ..
            } => out.push((l.name.clone(), ParamRole::ConvWeight, vec![c_out, c_in, extent, extent, extent])),
            LayerKind::BatchNorm { channels } => {
                for role in [
                    ParamRole::Gamma,
                    ParamRole::Beta,
                    ParamRole::RunningMean,
                    ParamRole::RunningVar,
                ] {
                    out.push((l.name.clone(), role, vec![channels]));
                }
            }
            _ => {}
        }
    }
    out
}

/// He-normal conv weights with `std = sqrt(2 / fan_in)`, `fan_in = k³·C_in`;
/// `gamma = 1`, `beta = 0`; running mean 0 and variance 1.
pub fn init_parameters<S: Scalar>(spec: &ArchitectureSpec, rng: &mut Rng) -> Result<ParameterStore<S>> {
    let mut store = ParameterStore::new();
    for (layer, role, dims) in expected_tensors(spec) {
        let t = match role {
            ParamRole::ConvWeight => {
                let fan_in = dims[1] * dims[2] * dims[3] * dims[4];
                let std = (2.0 / fan_in as f64).sqrt();
                Tensor::random_fill(rng, Distribution::Normal { mean: 0.0, std }, dims)?
            }
            ParamRole::Gamma | ParamRole::RunningVar => Tensor::full(dims, S::one())?,
            ParamRole::Beta | ParamRole::RunningMean => Tensor::zeros(dims)?,
        };
        store.insert(&layer, role, t)?;
    }
    Ok(store)
}

/// Sum of element counts of every trainable tensor.
pub fn count_parameters<S: Scalar>(store: &ParameterStore<S>) -> usize {
    store
        .entries
        .iter()
        .filter(|e| e.role.trainable())
        .map(|e| e.tensor.numel())
        .sum()
}

/// Trainable count restricted to convolution weights.
pub fn count_conv_parameters<S: Scalar>(store: &ParameterStore<S>) -> usize {
    store
        .entries
        .iter()
        .filter(|e| e.role == ParamRole::ConvWeight)
        .map(|e| e.tensor.numel())
        .sum()
}
