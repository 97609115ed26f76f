use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Retry budget for transport-level failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    #[serde(with = "millis")]
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            base_delay: Duration::ZERO,
        }
    }

    /// Runs `op` until it succeeds, fails with a non-transport error, or the
    /// budget is spent.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut delay = self.base_delay;
        let attempts = self.attempts.max(1);
        for attempt in 1..=attempts {
            match op() {
                Err(Error::Transport(msg)) if attempt < attempts => {
                    tracing::warn!(attempt, %msg, "transport failure, retrying");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    delay *= 2;
                }
                other => return other,
            }
        }
        unreachable!("loop returns on the last attempt")
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retries_only_transport_errors() {
        let mut calls = 0;
        let r: Result<()> = RetryPolicy::immediate(3).run(|| {
            calls += 1;
            Err(Error::Transport("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls, 3);

        let mut calls = 0;
        let r: Result<()> = RetryPolicy::immediate(3).run(|| {
            calls += 1;
            Err(Error::invalid("bad"))
        });
        assert!(matches!(r, Err(Error::InvalidInput(_))));
        assert_eq!(calls, 1);

        let mut calls = 0;
        let r = RetryPolicy::immediate(3).run(|| {
            calls += 1;
            if calls < 2 {
                Err(Error::Transport("blip".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(r.unwrap(), 7);
    }
}
