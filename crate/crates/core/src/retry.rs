//! Exponential backoff shared by the HTTP clients.

use std::time::Duration;

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: usize,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Wait before retry number `retry` (1-based): base · 2^(retry−1).
    pub fn delay(&self, retry: usize) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1) as u32)
    }
}
