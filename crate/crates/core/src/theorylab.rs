//! Sample-complexity bounds for recovering pairwise preferences and their
//! Monte-Carlo checks.
//!
//! [`bound_theorem1`] is the majority-vote bound as published. Its constant
//! is four times smaller than what Hoeffding's inequality gives for the same
//! argument, so [`bound_majority_hoeffding`] provides that version as well.

use crate::error::{Error, Result};
use crate::mathcore::RandomStream;

/// Largest `N` the ERM simulation will agree to draw per trial.
pub const DEFAULT_N_CAP: u64 = 5_000_000;

/// Pair universe of the ERM simulation.
pub const ERM_PAIRS: usize = 32;

fn check_open_unit(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must lie in (0, 1), got {x}")))
    }
}

fn check_eta(eta: f64) -> Result<()> {
    check_open_unit("eta", eta)?;
    if eta == 0.5 {
        return Err(Error::domain(
            "eta = 1/2 makes the vote uninformative; the bound diverges",
        ));
    }
    Ok(())
}

fn ceil_count(x: f64) -> Result<u64> {
    if !x.is_finite() || x > u64::MAX as f64 {
        return Err(Error::Numeric(format!(
            "sample bound {x} is not representable"
        )));
    }
    Ok(x.ceil().max(1.0) as u64)
}

/// `⌈ln(1/δ) / (2(1−2η)²)⌉`
pub fn bound_theorem1(eta: f64, delta: f64) -> Result<u64> {
    check_eta(eta)?;
    check_open_unit("delta", delta)?;
    let gap = 1.0 - 2.0 * eta;
    ceil_count((1.0 / delta).ln() / (2.0 * gap * gap))
}

/// `⌈2 ln(1/δ) / (1−2η)²⌉`, the Hoeffding bound on `P(X̄ ≤ 1/2)` for a mean
/// of `N` Bernoulli(η) votes.
pub fn bound_majority_hoeffding(eta: f64, delta: f64) -> Result<u64> {
    check_eta(eta)?;
    check_open_unit("delta", delta)?;
    let gap = 1.0 - 2.0 * eta;
    ceil_count(2.0 * (1.0 / delta).ln() / (gap * gap))
}

/// Fraction of `trials` in which at most half of `n` Bernoulli(η) votes are
/// correct (ties count as failures). `η < 1/2` is mirrored.
pub fn simulate_voting(eta: f64, n: u64, trials: u64, stream: &mut RandomStream) -> Result<f64> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::domain(format!("eta must lie in [0, 1], got {eta}")));
    }
    if n == 0 || trials == 0 {
        return Err(Error::domain(
            "voting needs at least one vote and one trial",
        ));
    }
    let p = eta.max(1.0 - eta);
    let mut failures = 0u64;
    for _ in 0..trials {
        let correct = (0..n).filter(|_| stream.bernoulli(p)).count() as u64;
        if 2 * correct <= n {
            failures += 1;
        }
    }
    Ok(failures as f64 / trials as f64)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// Exact `P(X ≤ ⌊n/2⌋)` for `X ~ Binomial(n, max(η, 1−η))`.
pub fn voting_failure_exact(eta: f64, n: u64) -> f64 {
    let p = eta.max(1.0 - eta);
    if p == 1.0 {
        return 0.0;
    }
    (0..=n / 2)
        .map(|k| (ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp())
        .sum()
}

/// `⌈2 ln(2|F|/δ) / (ε²(1−2ζ)²)⌉`
pub fn bound_theorem2(hypotheses: u64, delta: f64, epsilon: f64, zeta: f64) -> Result<u64> {
    if hypotheses == 0 {
        return Err(Error::domain("the hypothesis set must be nonempty"));
    }
    check_open_unit("delta", delta)?;
    check_open_unit("epsilon", epsilon)?;
    if !(0.0..0.5).contains(&zeta) {
        return Err(Error::domain(format!(
            "zeta must lie in [0, 0.5), got {zeta}"
        )));
    }
    let gap = 1.0 - 2.0 * zeta;
    ceil_count(2.0 * (2.0 * hypotheses as f64 / delta).ln() / (epsilon * epsilon * gap * gap))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErmOutcome {
    /// Noisy samples drawn per trial.
    pub n: u64,
    pub failure_rate: f64,
}

/// Per trial: a random true ordering of [`ERM_PAIRS`] item pairs, a set of
/// `hypotheses` candidate orderings (the truth plus random ones), and `N`
/// uniformly drawn pairs whose labels are flipped with probability `ζ`. The
/// empirical-mismatch minimizer (ties broken uniformly) fails when it
/// disagrees with the truth on more than an `ε` share of pairs.
pub fn simulate_noisy_erm(
    zeta: f64,
    epsilon: f64,
    delta: f64,
    hypotheses: u64,
    trials: u64,
    n_cap: u64,
    stream: &RandomStream,
) -> Result<ErmOutcome> {
    let n = bound_theorem2(hypotheses, delta, epsilon, zeta)?;
    if n > n_cap {
        return Err(Error::domain(format!(
            "the bound asks for {n} samples per trial, above the cap of {n_cap}"
        )));
    }
    if trials == 0 {
        return Err(Error::domain("at least one trial is needed"));
    }
    let h = hypotheses as usize;
    let mut failures = 0u64;
    for trial in 0..trials {
        let mut s = stream.derive_indexed("trial", trial);
        let truth: Vec<bool> = (0..ERM_PAIRS).map(|_| s.bernoulli(0.5)).collect();
        let truth_at = s.index(h);
        let set: Vec<Vec<bool>> = (0..h)
            .map(|k| {
                if k == truth_at {
                    truth.clone()
                } else {
                    (0..ERM_PAIRS).map(|_| s.bernoulli(0.5)).collect()
                }
            })
            .collect();
        let mut seen = [[0u64; 2]; ERM_PAIRS];
        for _ in 0..n {
            let pair = s.index(ERM_PAIRS);
            let label = truth[pair] ^ s.bernoulli(zeta);
            seen[pair][usize::from(label)] += 1;
        }
        let mismatches: Vec<u64> = set
            .iter()
            .map(|hyp| (0..ERM_PAIRS).map(|p| seen[p][usize::from(!hyp[p])]).sum())
            .collect();
        let best = *mismatches.iter().min().unwrap();
        let tied: Vec<usize> = (0..h).filter(|&k| mismatches[k] == best).collect();
        let pick = tied[s.index(tied.len())];
        let wrong = (0..ERM_PAIRS).filter(|&p| set[pick][p] != truth[p]).count();
        if wrong as f64 / ERM_PAIRS as f64 > epsilon {
            failures += 1;
        }
    }
    Ok(ErmOutcome {
        n,
        failure_rate: failures as f64 / trials as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn theorem1_examples() {
        assert_eq!(bound_theorem1(0.75, 0.05).unwrap(), 6);
        assert_eq!(bound_theorem1(0.6, 0.05).unwrap(), 38);
        assert!(bound_theorem1(0.5, 0.05).is_err());
        // mirrored hardness gives the same count
        assert_eq!(bound_theorem1(0.25, 0.05).unwrap(), 6);
    }

    #[test]
    fn theorem1_grows_toward_one_half() {
        let grid = [0.9, 0.8, 0.7, 0.6, 0.55, 0.52, 0.51, 0.505];
        let ns: Vec<u64> = grid
            .iter()
            .map(|&e| bound_theorem1(e, 0.05).unwrap())
            .collect();
        assert!(ns.windows(2).all(|w| w[0] <= w[1]), "{ns:?}");
        assert!(ns.last().unwrap() > &10_000);
    }

    #[test]
    fn theorem2_examples() {
        assert_eq!(bound_theorem2(100, 0.05, 0.1, 0.25).unwrap(), 6636);
        let base = (2.0 * (2.0 * 100.0f64 / 0.05).ln() / 0.01).ceil() as u64;
        assert_eq!(bound_theorem2(100, 0.05, 0.1, 0.0).unwrap(), base);
        assert_eq!(bound_theorem2(16, 0.1, 0.2, 0.25).unwrap(), 1154);
        assert!(bound_theorem2(16, 0.1, 0.2, 0.5).is_err());
        let ns: Vec<u64> = [0.0, 0.1, 0.2, 0.3, 0.4, 0.45]
            .iter()
            .map(|&z| bound_theorem2(16, 0.1, 0.2, z).unwrap())
            .collect();
        assert!(ns.windows(2).all(|w| w[0] < w[1]), "{ns:?}");
    }

    #[test]
    fn voting_edge_cases() {
        let mut s = RandomStream::new(1);
        for n in [1, 2, 7] {
            assert_eq!(simulate_voting(1.0, n, 1000, &mut s).unwrap(), 0.0);
        }
        let rate = simulate_voting(0.55, 1, 100_000, &mut s).unwrap();
        let sigma = (0.45f64 * 0.55 / 100_000.0).sqrt();
        assert!((rate - 0.45).abs() < 3.0 * sigma, "{rate}");
    }

    #[test]
    fn exact_tail_by_hand() {
        // P(X ≤ 3), X ~ Bin(6, 3/4): (1 + 18 + 135 + 540) / 4096
        let expected = (1.0 + 18.0 + 135.0 + 540.0) / 4096.0;
        assert!((voting_failure_exact(0.75, 6) - expected).abs() < 1e-12);
    }

    #[test]
    fn simulation_tracks_exact_tail() {
        let mut s = RandomStream::new(2);
        for (eta, n) in [(0.6, 38), (0.8, 5), (0.7, 9)] {
            let trials = 100_000;
            let p = voting_failure_exact(eta, n);
            let rate = simulate_voting(eta, n, trials, &mut s).unwrap();
            let sigma = (p * (1.0 - p) / trials as f64).sqrt();
            assert!((rate - p).abs() < 3.0 * sigma, "{eta} {n}: {rate} vs {p}");
        }
    }

    #[test]
    fn hoeffding_bound_holds() {
        for eta in [0.6, 0.7, 0.8] {
            for delta in [0.05, 0.1] {
                let n = bound_majority_hoeffding(eta, delta).unwrap();
                assert!(voting_failure_exact(eta, n) <= delta);
            }
        }
    }

    #[test]
    fn noiseless_erm_with_many_samples_never_fails() {
        let out = simulate_noisy_erm(
            0.0,
            0.01,
            1e-6,
            8,
            200,
            DEFAULT_N_CAP,
            &RandomStream::new(3),
        )
        .unwrap();
        assert_eq!(out.failure_rate, 0.0);
    }

    #[test]
    fn erm_refuses_huge_bounds() {
        let err = simulate_noisy_erm(
            0.49,
            0.05,
            0.05,
            16,
            1,
            DEFAULT_N_CAP,
            &RandomStream::new(0),
        )
        .unwrap_err();
        assert!(err.to_string().contains("cap"), "{err}");
    }

    proptest! {
        #[test]
        fn bounds_are_monotone(e1 in 0.51f64..0.99, e2 in 0.51f64..0.99, d1 in 0.01f64..0.9, d2 in 0.01f64..0.9) {
            let (lo_e, hi_e) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            let (lo_d, hi_d) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(bound_theorem1(lo_e, lo_d).unwrap() >= bound_theorem1(hi_e, lo_d).unwrap());
            prop_assert!(bound_theorem1(lo_e, lo_d).unwrap() >= bound_theorem1(lo_e, hi_d).unwrap());
            prop_assert!(bound_theorem2(16, lo_d, 0.2, 0.1).unwrap() >= bound_theorem2(16, hi_d, 0.2, 0.1).unwrap());
            prop_assert!(bound_theorem2(16, 0.1, lo_d, 0.1).unwrap() >= bound_theorem2(16, 0.1, hi_d, 0.1).unwrap());
        }
    }
}
