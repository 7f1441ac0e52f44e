use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_dimension, BitString, ProblemInstance};
use crate::error::Result;

/// OneMax-style instance: the objective of `x` is the dimension minus the
/// Hamming distance to a hidden target string, maximized exactly at the
/// target.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OneMaxInstance {
    id: String,
    target: BitString,
}

impl OneMaxInstance {
    pub fn new(id: impl Into<String>, target: BitString) -> Self {
        Self {
            id: id.into(),
            target,
        }
    }

    pub fn random<R: Rng + ?Sized>(id: impl Into<String>, dim: usize, rng: &mut R) -> Self {
        Self::new(id, BitString::random(dim, rng))
    }

    pub fn target(&self) -> &BitString {
        &self.target
    }
}

impl ProblemInstance for OneMaxInstance {
    fn dimension(&self) -> usize {
        self.target.len()
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn evaluate(&self, x: &BitString) -> Result<f64> {
        check_dimension(self.target.len(), x)?;
        let d = self.target.len();
        Ok((d - self.target.hamming(x)?) as f64)
    }
}
