//! Streaming quantile estimation with five markers and piecewise-parabolic
//! height adjustment (the P² algorithm).

use serde::{Deserialize, Serialize};

use crate::error::StatsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2State {
    quantile: f64,
    count: u64,
    heights: [f64; 5],
    positions: [i64; 5],
    desired: [f64; 5],
    increments: [f64; 5],
}

impl P2State {
    pub fn new(quantile: f64) -> Result<Self, StatsError> {
        if !(quantile > 0.0 && quantile < 1.0) {
            return Err(StatsError::BadQuantile(quantile));
        }
        let p = quantile;
        Ok(Self {
            quantile,
            count: 0,
            heights: [0.0; 5],
            positions: [1, 2, 3, 4, 5],
            desired: [1.0, 1.0 + 2.0 * p, 1.0 + 4.0 * p, 3.0 + 2.0 * p, 5.0],
            increments: [0.0, p / 2.0, p, (1.0 + p) / 2.0, 1.0],
        })
    }

    pub fn quantile(&self) -> f64 {
        self.quantile
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn heights(&self) -> &[f64; 5] {
        &self.heights
    }

    pub fn positions(&self) -> &[i64; 5] {
        &self.positions
    }

    pub fn update(&mut self, x: f64) {
        if self.count < 5 {
            self.heights[self.count as usize] = x;
            self.count += 1;
            if self.count == 5 {
                self.heights.sort_by(f64::total_cmp);
            }
            return;
        }
        self.count += 1;

        let h = &mut self.heights;
        let k = if x < h[0] {
            h[0] = x;
            0
        } else if x >= h[4] {
            h[4] = x;
            3
        } else {
            // h[k] <= x < h[k + 1]
            (1..5).find(|&i| x < h[i]).expect("x < h[4]") - 1
        };
        for pos in &mut self.positions[k + 1..] {
            *pos += 1;
        }
        for (d, inc) in self.desired.iter_mut().zip(self.increments) {
            *d += inc;
        }

        for i in 1..4 {
            let d = self.desired[i] - self.positions[i] as f64;
            let gap_up = self.positions[i + 1] - self.positions[i];
            let gap_down = self.positions[i - 1] - self.positions[i];
            if (d >= 1.0 && gap_up > 1) || (d <= -1.0 && gap_down < -1) {
                let step: i64 = if d > 0.0 { 1 } else { -1 };
                let candidate = self.parabolic(i, step as f64);
                self.heights[i] = if self.heights[i - 1] < candidate && candidate < self.heights[i + 1] {
                    candidate
                } else {
                    self.linear(i, step)
                };
                self.positions[i] += step;
            }
        }

        assert!(
            self.heights.windows(2).all(|w| w[0] <= w[1]),
            "P2 marker heights out of order: {:?}",
            self.heights
        );
    }

    fn parabolic(&self, i: usize, d: f64) -> f64 {
        let q = &self.heights;
        let n: [f64; 5] = self.positions.map(|p| p as f64);
        q[i] + d / (n[i + 1] - n[i - 1])
            * ((n[i] - n[i - 1] + d) * (q[i + 1] - q[i]) / (n[i + 1] - n[i])
                + (n[i + 1] - n[i] - d) * (q[i] - q[i - 1]) / (n[i] - n[i - 1]))
    }

    fn linear(&self, i: usize, step: i64) -> f64 {
        let j = (i as i64 + step) as usize;
        let q = &self.heights;
        q[i] + step as f64 * (q[j] - q[i]) / (self.positions[j] - self.positions[i]) as f64
    }

    /// Current estimate of the target quantile; requires five observations.
    pub fn estimate(&self) -> Result<f64, StatsError> {
        if self.count < 5 {
            return Err(StatsError::NotEnoughObservations {
                needed: 5,
                have: self.count,
            });
        }
        Ok(self.heights[2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim_core::{rng_stream, StreamId};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn initialization_is_a_sort() {
        let mut p = P2State::new(0.5).unwrap();
        for x in [5.0, 1.0, 4.0, 2.0, 3.0] {
            p.update(x);
        }
        assert_eq!(p.heights(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(p.estimate().unwrap(), 3.0);
    }

    #[test]
    fn estimate_before_five_is_an_error() {
        let mut p = P2State::new(0.6).unwrap();
        assert!(p.estimate().is_err());
        for x in 0..4 {
            p.update(x as f64);
        }
        assert_eq!(
            p.estimate(),
            Err(StatsError::NotEnoughObservations { needed: 5, have: 4 })
        );
    }

    #[test]
    fn rejects_degenerate_quantiles() {
        assert!(P2State::new(0.0).is_err());
        assert!(P2State::new(1.0).is_err());
        assert!(P2State::new(f64::NAN).is_err());
    }

    #[test]
    fn uniform_sixtieth_percentile() {
        let mut rng = rng_stream(11, StreamId::Aux, 0);
        let mut p = P2State::new(0.6).unwrap();
        for _ in 0..10_000 {
            p.update(rng.random::<f64>());
        }
        assert!((p.estimate().unwrap() - 0.6).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn markers_stay_ordered(xs in prop::collection::vec(-1e3f64..1e3, 5..300), q in 0.05f64..0.95) {
            let mut p = P2State::new(q).unwrap();
            for x in &xs {
                p.update(*x);
            }
            prop_assert!(p.heights().windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(p.positions().windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(p.positions()[0], 1);
            prop_assert_eq!(p.positions()[4] as u64, p.count());
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e = p.estimate().unwrap();
            prop_assert!(lo <= e && e <= hi);
        }
    }
}
