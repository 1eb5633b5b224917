use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Uniform grid `t_i = i·T/n`, `i = 0..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct UniformGrid<T: Real> {
    t_end: T,
    steps: usize,
}

impl<T: Real> UniformGrid<T> {
    pub fn new(t_end: T, steps: usize) -> Result<Self> {
        if !(t_end > T::zero() && t_end.finite()) {
            return Err(Error::Grid(format!("horizon must be positive, got {t_end}")));
        }
        if steps == 0 {
            return Err(Error::Grid("grid needs at least one step".into()));
        }
        Ok(Self { t_end, steps })
    }

    /// `2^level` steps on `[0, T]`.
    pub fn dyadic(t_end: T, level: u32) -> Result<Self> {
        if level > 30 {
            return Err(Error::Grid(format!("dyadic level {level} too deep")));
        }
        Self::new(t_end, 1usize << level)
    }

    pub fn t_end(&self) -> T {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&self) -> T {
        self.t_end / T::from_usize_lossy(self.steps)
    }

    pub fn time(&self, i: usize) -> T {
        self.step() * T::from_usize_lossy(i)
    }

    pub fn times(&self) -> Vec<T> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }

    /// Fine steps per coarse step when `self` refines `coarse`.
    pub fn refinement_of(&self, coarse: &Self) -> Result<usize> {
        let rel = ((self.t_end - coarse.t_end) / coarse.t_end).abs();
        if rel > T::lit(1e-12) || coarse.steps == 0 || self.steps % coarse.steps != 0 {
            return Err(Error::Grid(format!(
                "grid with {} steps does not refine grid with {} steps on the same horizon",
                self.steps, coarse.steps
            )));
        }
        Ok(self.steps / coarse.steps)
    }

    /// Dyadic level if the step count is a power of two.
    pub fn level(&self) -> Option<u32> {
        self.steps.is_power_of_two().then(|| self.steps.trailing_zeros())
    }
}
