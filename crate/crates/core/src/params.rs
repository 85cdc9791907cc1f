//! Named, ordered parameter storage shared by the model, optimizer and checkpoints.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer parameter group. Feature extractors train at their own learning
/// rate and can be frozen independently of everything else.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Extractor,
    Other,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
    frozen_extractor: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, group });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_extractor_frozen(&mut self, frozen: bool) {
        self.frozen_extractor = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen_extractor && self.params[id.0].group == ParamGroup::Extractor
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Rounds every parameter through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for x in p.value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Overwrites the value of parameter `name`, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("model has no parameter `{name}`")))?;
        let current = self.value(id);
        if current.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}`: model expects {:?}, checkpoint has {:?}",
                current.shape(),
                value.shape()
            )));
        }
        self.params[id.0].value = value;
        Ok(())
    }
}

/// Uniform Xavier (Glorot) initialization for a weight of shape `[fan_out, fan_in]`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_out: usize, fan_in: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_out, fan_in], data).expect("xavier shape")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2]), ParamGroup::Other).unwrap();
        assert!(s.add("w", Tensor::zeros(&[2]), ParamGroup::Other).is_err());
    }

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = xavier_uniform(&mut rng, 16, 48);
        let limit = (6.0f64 / 64.0).sqrt();
        assert_eq!(w.shape(), &[16, 48]);
        assert!(w.data().iter().all(|x| x.abs() < limit));
    }

    #[test]
    fn assign_checks_shape() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2]), ParamGroup::Other).unwrap();
        let err = s.assign("w", Tensor::zeros(&[4])).unwrap_err().to_string();
        assert!(err.contains("`w`"), "{err}");
    }
}
