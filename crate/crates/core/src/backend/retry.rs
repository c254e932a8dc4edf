//! Exponential backoff with full jitter.

use std::future::Future;
use std::time::Duration;

use rand::Rng;

use super::BackendError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the sleep after failed attempt `attempt` (0-based).
    pub fn delay_cap(&self, attempt: u32) -> Duration {
        let scaled = self.base_delay.as_secs_f64() * self.factor.powi(attempt as i32);
        Duration::from_secs_f64(scaled.min(300.0))
    }

    /// Full jitter: uniform in `[0, delay_cap(attempt)]`.
    pub fn jittered_delay<R: Rng + ?Sized>(&self, attempt: u32, rng: &mut R) -> Duration {
        let cap = self.delay_cap(attempt).as_secs_f64();
        Duration::from_secs_f64(rng.random::<f64>() * cap)
    }

    /// Runs `op` until it succeeds, fails permanently, or the attempt cap is
    /// reached. Exhausted rate limits surface as `RateLimited`, other
    /// exhausted transient errors as `Unavailable`.
    pub async fn run<T, F, Fut>(&self, mut op: F) -> Result<T, BackendError>
    where
        F: FnMut(u32) -> Fut,
        Fut: Future<Output = Result<T, BackendError>>,
    {
        let max = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op(attempt).await {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt + 1 < max => {
                    let delay = self.jittered_delay(attempt, &mut rand::rng());
                    tracing::debug!(attempt, ?delay, error = %e, "retrying provider call");
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
                Err(BackendError::RateLimitHit) => {
                    return Err(BackendError::RateLimited {
                        attempts: attempt + 1,
                    })
                }
                Err(BackendError::Transient(last)) => {
                    return Err(BackendError::Unavailable {
                        attempts: attempt + 1,
                        last,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}
