use rand::Rng;

use super::StageContext;
use crate::error::{Error, Result};
use crate::model::Sample;
use crate::params::ParameterVector;
use crate::stream::draw_with_replacement;

/// Trace of the empirical covariance of the step direction at `theta`.
///
/// Each of the `n_draws` draws takes a fresh current batch from
/// `current_pool` and, when the context has history, a fresh replay batch
/// from `replay_pool`, both of size `batch_size` and with replacement. The
/// covariance uses the unbiased `n − 1` normalisation.
pub fn estimator_variance<R: Rng + ?Sized>(
    ctx: &StageContext<'_>,
    current_pool: &[Sample],
    replay_pool: &[Sample],
    batch_size: usize,
    theta: &ParameterVector,
    n_draws: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_draws < 2 {
        return Err(Error::config("variance needs at least two draws"));
    }
    if current_pool.is_empty() || batch_size == 0 {
        return Err(Error::config(
            "variance needs a non-empty pool and batch size",
        ));
    }
    let p = theta.dim();
    let mut mean = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    for n in 1..=n_draws {
        let cur = draw_with_replacement(current_pool, batch_size, rng);
        let replay = if ctx.weights.has_history() {
            if replay_pool.is_empty() {
                return Err(Error::state("replay pool is empty"));
            }
            Some(draw_with_replacement(replay_pool, batch_size, rng))
        } else {
            None
        };
        let v = ctx.estimate(&cur, replay.as_deref(), theta)?.vector;
        // Welford update per coordinate
        for i in 0..p {
            let delta = v[i] - mean[i];
            mean[i] += delta / n as f64;
            m2[i] += delta * (v[i] - mean[i]);
        }
    }
    Ok(m2.iter().sum::<f64>() / (n_draws - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{CalibratorState, CombinedForm, Method, TaskWeights};
    use crate::model::ModelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_samples_have_zero_er_variance() {
        let model = ModelSpec::ridge(2, 0.1);
        let pool = vec![Sample::new(vec![1.0, -2.0], 3); 5];
        let state = CalibratorState::new(ParameterVector::zeros(2));
        let ctx = StageContext::prepare(
            Method::Er,
            &model,
            &state,
            TaskWeights::uniform(2),
            &pool,
            &pool,
            &pool,
            0.0,
            CombinedForm::CurrentTask,
        )
        .unwrap();
        let theta = ParameterVector::new(vec![0.3, 0.4]).unwrap();
        let var = estimator_variance(
            &ctx,
            &pool,
            &pool,
            2,
            &theta,
            50,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(var, 0.0);
        assert!(estimator_variance(
            &ctx,
            &pool,
            &pool,
            2,
            &theta,
            1,
            &mut ChaCha8Rng::seed_from_u64(1)
        )
        .is_err());
    }
}
