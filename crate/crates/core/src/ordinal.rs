//! Cumulative link for ordinal levels under multiplicative IG(1,1) noise.
//!
//! With inverse thresholds `gamma_0 > ... > gamma_V = 0` the cdf is
//! `P(y <= v | lambda) = exp(-lambda * gamma_v)`. Gaps `delta_v =
//! gamma_{v-1} - gamma_v` are the free parameters; they are re-estimated in
//! closed form from augmented counts.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::ztp_unchecked;

/// Floor applied to re-estimated gaps so the thresholds stay strictly
/// decreasing when a level is absent from a batch.
pub const DELTA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrdinalError {
    #[error("threshold gap {index} must be positive, got {value}")]
    NonPositiveDelta { index: usize, value: f64 },
    #[error("level {level} outside 0..={max}")]
    LevelOutOfRange { level: u32, max: u32 },
    #[error("denominator for level {level} is zero")]
    EmptyDenominator { level: usize },
    #[error("at least one positive level is required")]
    NoLevels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdModel {
    gamma: Vec<f64>,
    delta: Vec<f64>,
}

impl TryFrom<Vec<f64>> for ThresholdModel {
    type Error = OrdinalError;

    fn try_from(delta: Vec<f64>) -> Result<Self, Self::Error> {
        ThresholdModel::from_deltas(&delta)
    }
}

impl From<ThresholdModel> for Vec<f64> {
    fn from(tm: ThresholdModel) -> Self {
        tm.delta
    }
}

impl ThresholdModel {
    /// Builds `gamma_v = sum_{l > v} delta_l`.
    pub fn from_deltas(delta: &[f64]) -> Result<Self, OrdinalError> {
        if delta.is_empty() {
            return Err(OrdinalError::NoLevels);
        }
        for (index, &value) in delta.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(OrdinalError::NonPositiveDelta { index: index + 1, value });
            }
        }
        let v = delta.len();
        let mut gamma = vec![0.0; v + 1];
        for l in (0..v).rev() {
            gamma[l] = gamma[l + 1] + delta[l];
        }
        Ok(ThresholdModel {
            gamma,
            delta: delta.to_vec(),
        })
    }

    /// Evenly spaced thresholds, `delta_l = 1 / V`.
    pub fn uniform(levels: u32) -> Result<Self, OrdinalError> {
        Self::from_deltas(&vec![1.0 / f64::from(levels); levels as usize])
    }

    /// Number of positive levels V.
    pub fn levels(&self) -> u32 {
        self.delta.len() as u32
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// Gaps `delta_1..delta_V` (index 0 holds `delta_1`).
    pub fn deltas(&self) -> &[f64] {
        &self.delta
    }

    /// Gap for level `v >= 1`.
    #[inline]
    pub fn delta(&self, v: u32) -> f64 {
        self.delta[v as usize - 1]
    }

    /// Boundaries `b_v = 1 / gamma_v` for v = 0..V (`b_V` is infinite).
    pub fn boundaries(&self) -> Vec<f64> {
        self.gamma.iter().map(|g| 1.0 / g).collect()
    }

    /// Linear coefficient of `lambda` in `log p(y, n | lambda)`: `gamma_0` for
    /// level 0 and `gamma_{y-1}` otherwise.
    #[inline]
    pub fn exposure(&self, level: u32) -> f64 {
        if level == 0 {
            self.gamma[0]
        } else {
            self.gamma[level as usize - 1]
        }
    }

    fn check_level(&self, v: u32) -> Result<(), OrdinalError> {
        if v > self.levels() {
            Err(OrdinalError::LevelOutOfRange {
                level: v,
                max: self.levels(),
            })
        } else {
            Ok(())
        }
    }

    pub fn cdf(&self, lambda: f64, v: u32) -> Result<f64, OrdinalError> {
        self.check_level(v)?;
        Ok((-lambda * self.gamma[v as usize]).exp())
    }

    pub fn pmf(&self, lambda: f64, v: u32) -> Result<f64, OrdinalError> {
        self.check_level(v)?;
        Ok(self.pmf_unchecked(lambda, v))
    }

    #[inline]
    pub(crate) fn pmf_unchecked(&self, lambda: f64, v: u32) -> f64 {
        if v == 0 {
            (-lambda * self.gamma[0]).exp()
        } else {
            (-lambda * self.gamma[v as usize]).exp() * -(-lambda * self.delta(v)).exp_m1()
        }
    }

    pub fn log_lik(&self, lambda: f64, v: u32) -> Result<f64, OrdinalError> {
        self.check_level(v)?;
        Ok(self.log_lik_unchecked(lambda, v))
    }

    #[inline]
    pub(crate) fn log_lik_unchecked(&self, lambda: f64, v: u32) -> f64 {
        if v == 0 {
            -lambda * self.gamma[0]
        } else {
            -lambda * self.gamma[v as usize] + ln_one_minus_exp(lambda * self.delta(v))
        }
    }

    /// Level `v` with `b_{v-1} <= x < b_v`, taking `b_{-1} = 0`.
    pub fn quantize(&self, x: f64) -> u32 {
        // x * gamma_v < 1 is the same test as x < b_v without dividing by zero
        self.gamma
            .iter()
            .position(|&g| x * g < 1.0)
            .expect("gamma_V = 0 admits every finite x") as u32
    }

    /// Latent count behind an observed level: zero for level 0, otherwise
    /// zero-truncated Poisson with rate `lambda * delta_y`.
    pub fn sample_latent_count<R: Rng + ?Sized>(
        &self,
        level: u32,
        lambda: f64,
        rng: &mut R,
    ) -> Result<u64, OrdinalError> {
        self.check_level(level)?;
        Ok(self.latent_count_unchecked(level, lambda, rng))
    }

    #[inline]
    pub(crate) fn latent_count_unchecked<R: Rng + ?Sized>(&self, level: u32, lambda: f64, rng: &mut R) -> u64 {
        if level == 0 {
            0
        } else {
            let rate = lambda * self.delta(level);
            if rate > 0.0 {
                ztp_unchecked(rate, rng)
            } else {
                1
            }
        }
    }
}

/// `ln(1 - exp(-x))` for `x > 0`, accurate at both ends.
#[inline]
pub fn ln_one_minus_exp(x: f64) -> f64 {
    if x > std::f64::consts::LN_2 {
        (-(-x).exp()).ln_1p()
    } else {
        (-(-x).exp_m1()).ln()
    }
}

/// Sufficient statistics for the closed-form gap update.
///
/// `num[l-1] = sum 1[y = l] n`, `den[l-1] = sum 1[y <= l] lambda` over all
/// cells, level-0 cells included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl ThresholdStats {
    /// Value of `sum_l num_l ln delta_l - den_l delta_l`, the part of the
    /// complete-data log likelihood that depends on the gaps.
    pub fn objective(&self, delta: &[f64]) -> f64 {
        self.num
            .iter()
            .zip(&self.den)
            .zip(delta)
            .map(|((&n, &d), &x)| if n > 0.0 { n * x.ln() - d * x } else { -d * x })
            .sum()
    }
}

/// Mergeable per-level accumulator feeding [`ThresholdStats`].
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdAccumulator {
    counts: Vec<f64>,
    lambda_by_level: Vec<f64>,
}

impl ThresholdAccumulator {
    pub fn new(levels: u32) -> Self {
        ThresholdAccumulator {
            counts: vec![0.0; levels as usize],
            lambda_by_level: vec![0.0; levels as usize + 1],
        }
    }

    /// Record one cell with level `level`, latent count `n`, rate `lambda`.
    #[inline]
    pub fn observe(&mut self, level: u32, n: u64, lambda: f64) {
        if level > 0 {
            self.counts[level as usize - 1] += n as f64;
        }
        self.lambda_by_level[level as usize] += lambda;
    }

    /// Record total rate mass of level-0 cells in one step.
    pub fn observe_zero_mass(&mut self, lambda_total: f64) {
        self.lambda_by_level[0] += lambda_total.max(0.0);
    }

    pub fn merge(&mut self, other: &ThresholdAccumulator) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.lambda_by_level.iter_mut().zip(&other.lambda_by_level) {
            *a += b;
        }
    }

    pub fn finish(&self) -> ThresholdStats {
        let mut den = Vec::with_capacity(self.counts.len());
        let mut running = self.lambda_by_level[0];
        for l in 1..self.lambda_by_level.len() {
            running += self.lambda_by_level[l];
            den.push(running);
        }
        ThresholdStats {
            num: self.counts.clone(),
            den,
        }
    }
}

/// Closed-form maximizer `delta_l = num_l / den_l` of the gap objective.
pub fn em_update(stats: &ThresholdStats) -> Result<ThresholdModel, OrdinalError> {
    let mut delta = Vec::with_capacity(stats.num.len());
    for (l, (&n, &d)) in stats.num.iter().zip(&stats.den).enumerate() {
        if !(d > 0.0) {
            return Err(OrdinalError::EmptyDenominator { level: l + 1 });
        }
        delta.push((n / d).max(DELTA_FLOOR));
    }
    ThresholdModel::from_deltas(&delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Phase, RngStream};
    use proptest::prelude::*;

    fn tm(delta: &[f64]) -> ThresholdModel {
        ThresholdModel::from_deltas(delta).unwrap()
    }

    #[test]
    fn partial_sums() {
        assert_eq!(tm(&[1.0, 1.0, 1.0]).gamma(), &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(tm(&[1.0]).gamma(), &[1.0, 0.0]);
        assert_eq!(tm(&[0.5, 0.25]).gamma(), &[0.75, 0.25, 0.0]);
        assert_eq!(
            ThresholdModel::from_deltas(&[1.0, 0.0]),
            Err(OrdinalError::NonPositiveDelta { index: 2, value: 0.0 })
        );
        assert_eq!(ThresholdModel::uniform(4).unwrap().deltas(), &[0.25; 4]);
    }

    #[test]
    fn cdf_values() {
        let t = tm(&[1.0, 1.0, 1.0]);
        assert_eq!(t.cdf(17.3, 3).unwrap(), 1.0);
        assert!((tm(&[1.0]).cdf(std::f64::consts::LN_2, 0).unwrap() - 0.5).abs() < 1e-15);
        assert!((t.cdf(2.0, 1).unwrap() - 0.018_315_638_888_734).abs() < 1e-12);
        assert!(t.cdf(1.0, 4).is_err());
    }

    #[test]
    fn pmf_values() {
        let t = tm(&[1.0, 1.0, 1.0]);
        let expected = [0.049_787_068_367_864, 0.085_548_214_868_000, 0.232_544_157_934_830, 0.632_120_558_828_558];
        for (v, e) in expected.iter().enumerate() {
            assert!((t.pmf(1.0, v as u32).unwrap() - e).abs() < 1e-12);
        }
        let berpo = tm(&[1.0]);
        for lambda in [0.01, 0.7, 3.0] {
            assert!((berpo.pmf(lambda, 1).unwrap() - (1.0 - (-lambda).exp())).abs() < 1e-15);
        }
        let tiny = t.pmf(1e-12, 0).unwrap();
        assert!((tiny - 1.0).abs() < 1e-11);
        assert!(t.pmf(1e-12, 3).unwrap() < 1e-11);
    }

    #[test]
    fn log_lik_values() {
        let t = tm(&[0.4, 0.3, 0.2]);
        assert_eq!(t.log_lik(2.5, 0).unwrap(), -2.5 * t.gamma()[0]);
        let small = tm(&[1.0]).log_lik(1e-8, 1).unwrap();
        assert!((small - 1e-8f64.ln()).abs() < 1e-7, "{small}");
        assert!(t.log_lik(1.0, 9).is_err());
    }

    #[test]
    fn quantize_brackets() {
        let t = tm(&[1.0, 1.0, 1.0]);
        // b = [1/3, 1/2, 1, inf]
        assert_eq!(t.quantize(0.4), 1);
        assert_eq!(t.quantize(1e-9), 0);
        assert_eq!(t.quantize(5.0), 3);
        assert_eq!(t.quantize(0.5), 2);
        assert_eq!(t.quantize(1.0), 3);
    }

    #[test]
    fn latent_count_branches() {
        let mut rng = RngStream::new(3).for_key(Phase::Init, 0, 0, 0);
        let t = tm(&[1.0, 1.0]);
        assert_eq!(t.sample_latent_count(0, 50.0, &mut rng).unwrap(), 0);
        let mean = (0..1_000_000)
            .map(|_| t.sample_latent_count(2, 1.0, &mut rng).unwrap() as f64)
            .sum::<f64>()
            / 1e6;
        assert!((mean - 1.0 / (1.0 - (-1.0f64).exp())).abs() < 0.01, "{mean}");
        for _ in 0..1000 {
            assert_eq!(t.sample_latent_count(1, 1e-13, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn em_examples() {
        let mut acc = ThresholdAccumulator::new(1);
        acc.observe(1, 2, 4.0);
        assert_eq!(em_update(&acc.finish()).unwrap().deltas(), &[0.5]);

        let mut acc = ThresholdAccumulator::new(1);
        acc.observe(0, 0, 1.0);
        acc.observe(1, 3, 2.0);
        assert_eq!(em_update(&acc.finish()).unwrap().deltas(), &[1.0]);

        let stats = ThresholdStats {
            num: vec![0.0; 3],
            den: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(em_update(&stats).unwrap().deltas(), &[DELTA_FLOOR; 3]);

        let empty = ThresholdStats {
            num: vec![1.0, 1.0],
            den: vec![0.0, 1.0],
        };
        assert_eq!(em_update(&empty), Err(OrdinalError::EmptyDenominator { level: 1 }));
    }

    #[test]
    fn accumulator_merge_is_additive() {
        let mut a = ThresholdAccumulator::new(3);
        let mut b = ThresholdAccumulator::new(3);
        let mut whole = ThresholdAccumulator::new(3);
        for (i, (level, n, lambda)) in [(0, 0, 0.3), (1, 2, 1.0), (3, 1, 2.0), (2, 4, 0.5)].into_iter().enumerate() {
            whole.observe(level, n, lambda);
            if i % 2 == 0 { a.observe(level, n, lambda) } else { b.observe(level, n, lambda) }
        }
        a.merge(&b);
        assert_eq!(a.finish(), whole.finish());
        let stats = whole.finish();
        assert!(stats.den.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(stats.den, vec![1.3, 1.8, 3.8]);
    }

    fn arb_model() -> impl Strategy<Value = ThresholdModel> {
        proptest::collection::vec(0.01f64..3.0, 1..=8).prop_map(|d| tm(&d))
    }

    proptest! {
        #[test]
        fn pmf_normalizes_and_matches_cdf(t in arb_model(), lambda in 1e-3f64..100.0) {
            let v_max = t.levels();
            let pmf: Vec<f64> = (0..=v_max).map(|v| t.pmf(lambda, v).unwrap()).collect();
            prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let mut running = 0.0;
            let mut prev = 0.0;
            for v in 0..=v_max {
                running += pmf[v as usize];
                let c = t.cdf(lambda, v).unwrap();
                prop_assert!(c >= prev);
                prop_assert!((c - running).abs() < 1e-10);
                prev = c;
                let ll = t.log_lik(lambda, v).unwrap();
                if pmf[v as usize] > 1e-300 {
                    prop_assert!((ll - pmf[v as usize].ln()).abs() < 1e-10 * ll.abs().max(1.0));
                }
            }
        }

        #[test]
        fn augmentation_marginalizes_to_pmf(t in arb_model(), lambda in 1e-3f64..5.0, pick in 0u32..8) {
            let v = 1 + pick % t.levels();
            let rate = lambda * t.delta(v);
            // sum_{n>=1} Pois(n; rate) exp(-lambda gamma_v)
            let mut term = (-rate).exp();
            let mut total = 0.0;
            for n in 1..=200 {
                term *= rate / n as f64;
                total += term;
            }
            let marginal = total * (-lambda * t.gamma()[v as usize]).exp();
            prop_assert!((marginal - t.pmf(lambda, v).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn quantize_matches_boundaries(t in arb_model(), x in 1e-4f64..50.0) {
            let v = t.quantize(x) as usize;
            let g = t.gamma();
            prop_assert!(x * g[v] < 1.0);
            if v > 0 { prop_assert!(x * g[v - 1] >= 1.0); }
        }
    }
}
