//! Retry policy shared by the tile fetcher and the external embedding
//! provider client.

use std::time::Duration;

/// Up to `retries` extra attempts after the first, waiting
/// `base_backoff * 2^i` before retry `i`. Each attempt is bounded by `timeout`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    /// 3 retries after 0.5 s, 1 s and 2 s; 30 s per attempt.
    fn default() -> Self {
        RetryPolicy {
            retries: 3,
            base_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn attempts(&self) -> u32 {
        self.retries + 1
    }

    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        self.base_backoff.saturating_mul(1u32 << retry.min(16))
    }
}

/// Outcome of one attempt.
pub(crate) enum Attempt<T, E> {
    Done(T),
    Retry(E),
    Fail(E),
}

/// Runs `op` under `policy`, sleeping between retryable failures.
pub(crate) async fn run<T, E, F, Fut>(policy: &RetryPolicy, mut op: F) -> Result<T, E>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Attempt<T, E>>,
{
    let mut retry = 0;
    loop {
        match op().await {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fail(e) => return Err(e),
            Attempt::Retry(e) if retry >= policy.retries => return Err(e),
            Attempt::Retry(_) => {
                tokio::time::sleep(policy.backoff(retry)).await;
                retry += 1;
            }
        }
    }
}
