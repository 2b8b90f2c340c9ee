use serde::{Deserialize, Serialize};

/// A central value with a one-standard-deviation uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uncertain {
    pub value: f64,
    pub sigma: f64,
}

impl Uncertain {
    pub fn new(value: f64, sigma: f64) -> Self {
        Self { value, sigma }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, sigma: 0.0 }
    }

    pub fn relative_sigma(&self) -> f64 {
        self.sigma / self.value.abs()
    }

    /// First-order propagation through `1/x`.
    pub fn recip(self) -> Self {
        Self {
            value: 1.0 / self.value,
            sigma: self.sigma / (self.value * self.value),
        }
    }

    pub fn scale(self, factor: f64) -> Self {
        Self {
            value: self.value * factor,
            sigma: self.sigma * factor.abs(),
        }
    }

    /// True when `truth` lies within `k` standard deviations.
    pub fn covers(&self, truth: f64, k: f64) -> bool {
        (self.value - truth).abs() <= k * self.sigma
    }
}

impl std::fmt::Display for Uncertain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4e} ± {:.2e}", self.value, self.sigma)
    }
}
