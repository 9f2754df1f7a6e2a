//! Seeded, stream-splittable sampling for every distribution the Gibbs sweep
//! draws from.
//!
//! Streams are derived by hashing `(seed, phase, layer, sweep, key)` into a
//! ChaCha8 key, so every unit of parallel work (a user row, an edge, a
//! community column) owns a private generator whose output does not depend on
//! thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use thiserror::Error;

/// Generator type handed to samplers.
pub type Stream = ChaCha8Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("parameter `{name}` must be positive and finite, got {value}")]
    NonPositiveParameter { name: &'static str, value: f64 },
    #[error("multinomial weights are all zero")]
    AllZeroWeights,
}

/// Work phases used as stream tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Phase {
    AugmentRatings = 1,
    AugmentEdges = 2,
    Loadings = 3,
    Factors = 4,
    CommunityScale = 5,
    Hyper = 6,
    Tables = 7,
    Init = 8,
    Simulate = 9,
    Split = 10,
    InitFactors = 11,
    InitLoadings = 12,
    InitScales = 13,
    SimulateGraph = 14,
}

/// Stream identity below the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamTag {
    pub phase: Phase,
    pub layer: u32,
    pub sweep: u64,
    pub key: u64,
}

impl StreamTag {
    pub fn new(phase: Phase, layer: u32, sweep: u64, key: u64) -> Self {
        StreamTag {
            phase,
            layer,
            sweep,
            key,
        }
    }
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Master seed from which all tagged streams are split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed }
    }

    pub fn stream(&self, tag: StreamTag) -> Stream {
        // every word is absorbed into an already-hashed state, so distinct
        // tags cannot cancel each other the way raw XORs would
        let mut state = self.seed;
        let mut absorb = |word: u64| {
            let mut h = splitmix64(&mut state);
            state = h ^ splitmix64(&mut h) ^ word;
        };
        absorb(tag.phase as u64);
        absorb(u64::from(tag.layer));
        absorb(tag.sweep);
        absorb(tag.key);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }

    /// Stream for work keyed by a single entity (user, item, community).
    pub fn for_key(&self, phase: Phase, layer: u32, sweep: u64, key: u64) -> Stream {
        self.stream(StreamTag::new(phase, layer, sweep, key))
    }

    /// Stream for an unordered pair of entity keys; symmetric in its arguments.
    pub fn for_pair(&self, phase: Phase, layer: u32, sweep: u64, a: u64, b: u64) -> Stream {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut s = lo;
        let key = splitmix64(&mut s) ^ hi.rotate_left(29);
        self.stream(StreamTag::new(phase, layer, sweep, key))
    }
}

fn check_positive(name: &'static str, value: f64) -> Result<(), SampleError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(SampleError::NonPositiveParameter { name, value })
    }
}

#[inline]
fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Natural log of a Gamma(shape, 1) draw.
///
/// Marsaglia-Tsang squeeze for shape >= 1; shapes below one are boosted
/// through `G(a) = G(a+1) * U^(1/a)` evaluated in log space, so tiny shapes
/// return a finite (very negative) log instead of underflowing.
pub(crate) fn ln_gamma_unit<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let boosted = ln_gamma_unit(shape + 1.0, rng);
        return boosted + open01(rng).ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = open01(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return (d * v).ln();
        }
    }
}

/// Gamma draw with no parameter checks; result clamped into the positive
/// normal range.
#[inline]
pub(crate) fn gamma_unchecked<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let x = (ln_gamma_unit(shape, rng) + scale.ln()).exp();
    if x < f64::MIN_POSITIVE {
        f64::MIN_POSITIVE
    } else if x.is_finite() {
        x
    } else {
        f64::MAX
    }
}

/// Draw from Gamma(shape, scale) (mean `shape * scale`).
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64, SampleError> {
    check_positive("shape", shape)?;
    check_positive("scale", scale)?;
    Ok(gamma_unchecked(shape, scale, rng))
}

/// Dirichlet draw written into `out`, normalized in log space.
pub(crate) fn dirichlet_into<R: Rng + ?Sized>(alphas: &[f64], out: &mut [f64], rng: &mut R) {
    debug_assert_eq!(alphas.len(), out.len());
    if alphas.len() == 1 {
        out[0] = 1.0;
        return;
    }
    let mut max = f64::NEG_INFINITY;
    for (o, &a) in out.iter_mut().zip(alphas) {
        *o = ln_gamma_unit(a, rng);
        max = max.max(*o);
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Normalized independent `Gam(alpha_i, 1 / rate_i)` draws: a scaled
/// Dirichlet, density proportional to
/// `prod phi_i^(alpha_i - 1) * (sum rate_i phi_i)^(-sum alpha_i)`.
pub(crate) fn scaled_dirichlet_into<R: Rng + ?Sized>(alphas: &[f64], rates: &[f64], out: &mut [f64], rng: &mut R) {
    debug_assert_eq!(alphas.len(), out.len());
    debug_assert_eq!(rates.len(), out.len());
    if alphas.len() == 1 {
        out[0] = 1.0;
        return;
    }
    let mut max = f64::NEG_INFINITY;
    for ((o, &a), &b) in out.iter_mut().zip(alphas).zip(rates) {
        *o = ln_gamma_unit(a, rng) - b.ln();
        max = max.max(*o);
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn sample_dirichlet<R: Rng + ?Sized>(alphas: &[f64], rng: &mut R) -> Result<Vec<f64>, SampleError> {
    if alphas.is_empty() {
        return Err(SampleError::NonPositiveParameter {
            name: "alphas.len",
            value: 0.0,
        });
    }
    for &a in alphas {
        check_positive("alpha", a)?;
    }
    let mut out = vec![0.0; alphas.len()];
    dirichlet_into(alphas, &mut out, rng);
    Ok(out)
}

const ZTP_INVERSION_LIMIT: f64 = 5.0;

#[inline]
pub(crate) fn ztp_unchecked<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> u64 {
    if rate < ZTP_INVERSION_LIMIT {
        // P(k) = rate^k / (k! (e^rate - 1))
        let u: f64 = rng.random();
        let mut k = 1u64;
        let mut p = rate / rate.exp_m1();
        let mut cdf = p;
        while u > cdf && k < 1_000 {
            k += 1;
            p *= rate / k as f64;
            if p == 0.0 {
                break;
            }
            cdf += p;
        }
        k
    } else {
        let poisson = Poisson::new(rate).expect("rate validated");
        loop {
            let k = poisson.sample(rng) as u64;
            if k > 0 {
                return k;
            }
        }
    }
}

/// Draw from Poisson(rate) conditioned on being at least one.
pub fn sample_ztp<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> Result<u64, SampleError> {
    check_positive("rate", rate)?;
    Ok(ztp_unchecked(rate, rng))
}

/// Untruncated Poisson; a zero rate yields zero.
pub fn sample_poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> Result<u64, SampleError> {
    if rate == 0.0 {
        return Ok(0);
    }
    check_positive("rate", rate)?;
    Ok(Poisson::new(rate).expect("rate validated").sample(rng) as u64)
}

const CRT_EXACT_LIMIT: u64 = 10_000;

#[inline]
pub(crate) fn crt_unchecked<R: Rng + ?Sized>(n: u64, concentration: f64, rng: &mut R) -> u64 {
    if n <= 1 {
        return n;
    }
    if n <= CRT_EXACT_LIMIT {
        let mut tables = 1;
        for i in 1..n {
            let p = concentration / (concentration + i as f64);
            if rng.random::<f64>() < p {
                tables += 1;
            }
        }
        tables
    } else {
        let (mut mean, mut var) = (0.0, 0.0);
        for i in 0..n {
            let p = concentration / (concentration + i as f64);
            mean += p;
            var += p * (1.0 - p);
        }
        let z: f64 = rng.sample(StandardNormal);
        let draw = (mean + var.sqrt() * z).round();
        draw.clamp(1.0, n as f64) as u64
    }
}

/// Chinese-restaurant-table count for `n` customers at `concentration`.
pub fn sample_crt<R: Rng + ?Sized>(n: u64, concentration: f64, rng: &mut R) -> Result<u64, SampleError> {
    check_positive("concentration", concentration)?;
    Ok(crt_unchecked(n, concentration, rng))
}

const THIN_CATEGORICAL_LIMIT: u64 = 16;

/// Multinomial split of `n` into `out` with unnormalized `weights`.
/// Caller guarantees a positive, finite weight total.
pub(crate) fn thin_into<R: Rng + ?Sized>(n: u64, weights: &[f64], total: f64, out: &mut [u64], rng: &mut R) {
    debug_assert_eq!(weights.len(), out.len());
    out.iter_mut().for_each(|c| *c = 0);
    if n == 0 {
        return;
    }
    if weights.len() == 1 {
        out[0] = n;
        return;
    }
    if n <= THIN_CATEGORICAL_LIMIT {
        let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1);
        for _ in 0..n {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = last;
            for (k, &w) in weights.iter().enumerate().take(last) {
                acc += w;
                if target < acc {
                    pick = k;
                    break;
                }
            }
            out[pick] += 1;
        }
        return;
    }
    let mut remaining = n;
    let mut remaining_weight = total;
    for (k, &w) in weights.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if w <= 0.0 {
            continue;
        }
        let p = (w / remaining_weight).min(1.0);
        let draw = if p >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, p).expect("p in [0,1)").sample(rng)
        };
        out[k] = draw;
        remaining -= draw;
        remaining_weight -= w;
        if remaining_weight <= 0.0 {
            out[k] += remaining;
            remaining = 0;
        }
    }
    if remaining > 0 {
        // rounding left mass on the table; give it to the last positive weight
        let last = weights.iter().rposition(|&w| w > 0.0).expect("positive total");
        out[last] += remaining;
    }
}

/// Split `n` into counts distributed Mult(n; weights / sum(weights)).
pub fn multinomial_thin<R: Rng + ?Sized>(n: u64, weights: &[f64], rng: &mut R) -> Result<Vec<u64>, SampleError> {
    let mut total = 0.0;
    for &w in weights {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(SampleError::NonPositiveParameter {
                name: "weight",
                value: w,
            });
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(SampleError::AllZeroWeights);
    }
    let mut out = vec![0; weights.len()];
    thin_into(n, weights, total, &mut out, rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(key: u64) -> Stream {
        RngStream::new(7).for_key(Phase::Init, 0, 0, key)
    }

    fn moments(xs: impl Iterator<Item = f64>) -> (f64, f64) {
        let v: Vec<f64> = xs.collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn gamma_exponential_case() {
        let mut r = rng(1);
        let (mean, _) = moments((0..1_000_000).map(|_| sample_gamma(1.0, 1.0, &mut r).unwrap()));
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn gamma_moments() {
        let mut r = rng(2);
        let (mean, var) = moments((0..1_000_000).map(|_| sample_gamma(2.0, 3.0, &mut r).unwrap()));
        assert!((mean - 6.0).abs() < 0.05, "{mean}");
        assert!((var - 18.0).abs() < 0.5, "{var}");
    }

    #[test]
    fn gamma_small_shape_stays_positive() {
        let mut r = rng(3);
        for shape in [0.01, 0.001] {
            for _ in 0..100_000 {
                let x = sample_gamma(shape, 1.0, &mut r).unwrap();
                assert!(x > 0.0 && x.is_finite());
            }
        }
        // E[G(0.3)] = 0.3 checks the boost path is unbiased
        let (mean, _) = moments((0..1_000_000).map(|_| sample_gamma(0.3, 1.0, &mut r).unwrap()));
        assert!((mean - 0.3).abs() < 0.005, "{mean}");
    }

    #[test]
    fn gamma_rejects_bad_parameters() {
        let mut r = rng(4);
        assert!(matches!(
            sample_gamma(0.0, 1.0, &mut r),
            Err(SampleError::NonPositiveParameter { name: "shape", .. })
        ));
        assert!(sample_gamma(1.0, -1.0, &mut r).is_err());
        assert!(sample_gamma(f64::NAN, 1.0, &mut r).is_err());
    }

    #[test]
    fn dirichlet_means() {
        let mut r = rng(5);
        let n = 1_000_000;
        let mut sym = 0.0;
        let mut skew = 0.0;
        for _ in 0..n {
            let d = sample_dirichlet(&[1.0, 1.0], &mut r).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            sym += d[0];
            skew += sample_dirichlet(&[2.0, 6.0], &mut r).unwrap()[0];
        }
        assert!((sym / n as f64 - 0.5).abs() < 0.005);
        assert!((skew / n as f64 - 0.25).abs() < 0.005);
        assert_eq!(sample_dirichlet(&[5.0], &mut r).unwrap(), vec![1.0]);
        assert!(sample_dirichlet(&[1.0, 0.0], &mut r).is_err());
    }

    #[test]
    fn dirichlet_tiny_concentrations_normalize() {
        let mut r = rng(6);
        let alphas = vec![1e-3; 500];
        for _ in 0..100 {
            let d = sample_dirichlet(&alphas, &mut r).unwrap();
            assert!(d.iter().all(|&x| x >= 0.0 && x.is_finite()));
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ztp_limits_and_means() {
        let mut r = rng(7);
        let ones = (0..1_000_000).filter(|_| sample_ztp(1e-9, &mut r).unwrap() == 1).count();
        assert!(ones as f64 / 1e6 >= 0.999_999);

        let mean2 = (0..1_000_000).map(|_| sample_ztp(2.0, &mut r).unwrap() as f64).sum::<f64>() / 1e6;
        assert!((mean2 - 2.0 / (1.0 - (-2.0f64).exp())).abs() < 0.01, "{mean2}");

        let mean20 = (0..1_000_000).map(|_| sample_ztp(20.0, &mut r).unwrap() as f64).sum::<f64>() / 1e6;
        assert!((mean20 - 20.0).abs() < 0.05, "{mean20}");
        assert!(sample_ztp(0.0, &mut r).is_err());
        assert!(sample_ztp(f64::INFINITY, &mut r).is_err());
    }

    #[test]
    fn ztp_chi_square_fit() {
        // bins {1..10, >=11} against the analytic truncated pmf at rate 3
        let rate: f64 = 3.0;
        let norm = 1.0 - (-rate).exp();
        let mut pmf = Vec::new();
        let mut p = (-rate).exp();
        for k in 1..=10 {
            p *= rate / k as f64;
            pmf.push(p / norm);
        }
        pmf.push(1.0 - pmf.iter().sum::<f64>());
        let mut observed = vec![0u64; 11];
        let mut r = rng(8);
        let n = 1_000_000;
        for _ in 0..n {
            let k = sample_ztp(rate, &mut r).unwrap() as usize;
            observed[(k - 1).min(10)] += 1;
        }
        let chi2: f64 = observed
            .iter()
            .zip(&pmf)
            .map(|(&o, &p)| {
                let e = p * n as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        // chi-square 0.999 quantile with 10 degrees of freedom
        assert!(chi2 < 29.588, "chi2 = {chi2}");
    }

    #[test]
    fn crt_edge_cases_and_mean() {
        let mut r = rng(9);
        assert_eq!(sample_crt(0, 3.0, &mut r).unwrap(), 0);
        assert_eq!(sample_crt(1, 0.01, &mut r).unwrap(), 1);
        assert!(sample_crt(5, 0.0, &mut r).is_err());
        let expected: f64 = (1..=10).map(|i| 2.0 / (2.0 + i as f64 - 1.0)).sum();
        let mean = (0..1_000_000).map(|_| sample_crt(10, 2.0, &mut r).unwrap() as f64).sum::<f64>() / 1e6;
        assert!((mean - expected).abs() < 0.01, "{mean} vs {expected}");
        for n in [20_000u64, 50_000] {
            let t = sample_crt(n, 1.5, &mut r).unwrap();
            assert!((1..=n).contains(&t));
        }
    }

    #[test]
    fn thin_degenerate_cases() {
        let mut r = rng(10);
        assert_eq!(multinomial_thin(5, &[1.0, 0.0], &mut r).unwrap(), vec![5, 0]);
        assert_eq!(multinomial_thin(0, &[1.0, 2.0, 3.0], &mut r).unwrap(), vec![0, 0, 0]);
        assert_eq!(multinomial_thin(3, &[0.0, 0.0], &mut r), Err(SampleError::AllZeroWeights));
        assert_eq!(multinomial_thin(1000, &[0.0, 2.0, 0.0], &mut r).unwrap(), vec![0, 1000, 0]);
    }

    #[test]
    fn thin_large_proportions() {
        let mut r = rng(11);
        let n = 6_000_000;
        let counts = multinomial_thin(n, &[1.0, 2.0, 3.0], &mut r).unwrap();
        assert_eq!(counts.iter().sum::<u64>(), n);
        for (c, p) in counts.iter().zip([1.0 / 6.0, 1.0 / 3.0, 0.5]) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.001);
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let master = RngStream::new(42);
        let a: Vec<u64> = (0..4).map(|_| 0).scan(master.for_key(Phase::Factors, 1, 3, 9), |r, _| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(master.for_key(Phase::Factors, 1, 3, 9), |r, _| Some(r.random())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(master.for_key(Phase::Factors, 1, 4, 9), |r, _| Some(r.random())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut p = master.for_pair(Phase::AugmentEdges, 1, 0, 3, 8);
        let mut q = master.for_pair(Phase::AugmentEdges, 1, 0, 8, 3);
        assert_eq!(p.random::<u64>(), q.random::<u64>());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn thin_sums_to_n(n in 0u64..5_000, w in proptest::collection::vec(0.0f64..10.0, 1..8), seed in any::<u64>()) {
                prop_assume!(w.iter().sum::<f64>() > 0.0);
                let mut r = RngStream::new(seed).for_key(Phase::Init, 0, 0, 0);
                let out = multinomial_thin(n, &w, &mut r).unwrap();
                prop_assert_eq!(out.iter().sum::<u64>(), n);
                for (c, wk) in out.iter().zip(&w) {
                    if *wk == 0.0 { prop_assert_eq!(*c, 0); }
                }
            }

            #[test]
            fn crt_bounds(n in 0u64..500, conc in 0.001f64..50.0, seed in any::<u64>()) {
                let mut r = RngStream::new(seed).for_key(Phase::Tables, 0, 0, 0);
                let t = sample_crt(n, conc, &mut r).unwrap();
                prop_assert!(t <= n);
                if n >= 1 { prop_assert!(t >= 1); }
            }

            #[test]
            fn ztp_never_zero(rate in 1e-12f64..60.0, seed in any::<u64>()) {
                let mut r = RngStream::new(seed).for_key(Phase::Init, 0, 0, 1);
                prop_assert!(sample_ztp(rate, &mut r).unwrap() >= 1);
            }
        }
    }
}
