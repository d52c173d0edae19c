//! Random instances with a minimum gap.

use collab_bandit::{BanditInstance, Matrix, WeightMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Candidates drawn before giving up on the gap floor.
pub const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenerateError {
    #[error("need at least one arm and one agent, got K={arms}, M={agents}")]
    Empty { arms: usize, agents: usize },
    #[error("gap floor must be positive and finite, got {0}")]
    BadFloor(f64),
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("no instance with minimum gap {floor} found in {attempts} attempts")]
    Infeasible { floor: f64, attempts: usize },
}

/// Draws a column-stochastic `W` and means in `[0, 1]` until every gap
/// (best arms included) is at least `gap_floor`.
pub fn generate_instance(
    arms: usize,
    agents: usize,
    gap_floor: f64,
    sigma: f64,
    seed: u64,
) -> Result<BanditInstance, GenerateError> {
    if arms == 0 || agents == 0 {
        return Err(GenerateError::Empty { arms, agents });
    }
    if !(gap_floor > 0.0 && gap_floor.is_finite()) {
        return Err(GenerateError::BadFloor(gap_floor));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(GenerateError::BadSigma(sigma));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let mut w = Matrix::from_fn(agents, agents, |_, _| rng.random::<f64>());
        for m in 0..agents {
            let total: f64 = w.column(m).iter().sum();
            for n in 0..agents {
                w[(n, m)] /= total;
            }
        }
        let Ok(weights) = WeightMatrix::from_matrix(w) else {
            continue;
        };
        let mu = Matrix::from_fn(arms, agents, |_, _| rng.random::<f64>());
        let Ok(instance) = BanditInstance::new(mu, sigma, weights) else {
            continue;
        };
        if instance.gaps().delta_min >= gap_floor {
            return Ok(instance);
        }
    }
    Err(GenerateError::Infeasible {
        floor: gap_floor,
        attempts: MAX_ATTEMPTS,
    })
}
