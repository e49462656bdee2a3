//! Welford's single-pass mean and variance.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WelfordState {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl WelfordState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
        // rounding can push m2 a hair below zero on constant input
        if self.m2 < 0.0 {
            self.m2 = 0.0;
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    /// Sample variance (`m2 / (n - 1)`); undefined below two observations.
    pub fn variance(&self) -> Option<f64> {
        (self.count >= 2).then(|| self.m2 / (self.count - 1) as f64)
    }

    pub fn std_dev(&self) -> Option<f64> {
        self.variance().map(f64::sqrt)
    }
}

impl Extend<f64> for WelfordState {
    fn extend<T: IntoIterator<Item = f64>>(&mut self, iter: T) {
        for x in iter {
            self.update(x);
        }
    }
}

impl FromIterator<f64> for WelfordState {
    fn from_iter<T: IntoIterator<Item = f64>>(iter: T) -> Self {
        let mut s = Self::new();
        s.extend(iter);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_pass(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn hand_computed() {
        let s: WelfordState = [2.0, 4.0, 6.0].into_iter().collect();
        assert_eq!(s.mean(), Some(4.0));
        assert_eq!(s.variance(), Some(4.0));
    }

    #[test]
    fn single_value_has_no_variance() {
        let s: WelfordState = [7.0].into_iter().collect();
        assert_eq!(s.mean(), Some(7.0));
        assert_eq!(s.variance(), None);
        assert_eq!(WelfordState::new().mean(), None);
    }

    proptest! {
        #[test]
        fn agrees_with_two_pass(xs in prop::collection::vec(-1e6f64..1e6, 2..400)) {
            let s: WelfordState = xs.iter().copied().collect();
            let (mean, var) = two_pass(&xs);
            let scale = xs.iter().fold(1.0f64, |a, x| a.max(x.abs()));
            prop_assert!((s.mean().unwrap() - mean).abs() <= 1e-9 * scale);
            prop_assert!((s.variance().unwrap() - var).abs() <= 1e-9 * var.max(scale));
            prop_assert!(s.m2 >= 0.0);
        }
    }
}
