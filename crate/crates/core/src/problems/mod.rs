//! Problem-instance abstraction and the built-in problem classes.

mod bitstring;
mod ccp;
mod comic;
mod external;
mod graph;
mod onemax;

pub use bitstring::BitString;
pub use ccp::{ccp_domain_mutate, CcpInstance, CcpScenario};
pub use comic::{comic_repaired, repair_seed_set, ComicInstance, ComicParams};
pub use external::ExternalInstance;
pub use graph::Graph;
pub use onemax::OneMaxInstance;

use crate::error::Result;

/// A binary optimization problem instance under the maximization convention.
///
/// Implementations must be deterministic: repeated `evaluate` calls on equal
/// inputs return equal values, and `dimension` is fixed for the instance's
/// lifetime.
pub trait ProblemInstance: Send + Sync {
    /// Number of decision variables.
    fn dimension(&self) -> usize;

    /// Stable unique identifier.
    fn id(&self) -> &str;

    /// Objective value of `x` (larger is better).
    fn evaluate(&self, x: &BitString) -> Result<f64>;

    /// Evaluate many solutions. Implementations with a cheaper vectorized
    /// path (e.g. neural surrogates) override this.
    fn evaluate_batch(&self, xs: &[BitString]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.evaluate(x)).collect()
    }
}

pub(crate) fn check_dimension(expected: usize, x: &BitString) -> Result<()> {
    if x.len() != expected {
        return Err(crate::error::Error::LengthMismatch {
            expected,
            got: x.len(),
        });
    }
    Ok(())
}
