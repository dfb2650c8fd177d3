//! Statistical primitives: normal CDF, exact binomial tails and the
//! hypothesis tests used to gate trend comparisons.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::factorial::ln_binomial;

/// Largest `n` for which binomial tails are summed exactly. Beyond it a
/// continuity-corrected normal approximation is used.
pub const EXACT_BINOMIAL_LIMIT: u64 = 100_000;

/// Standard normal CDF, `0.5 * erfc(-x / sqrt 2)`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `P[X <= k]` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_half_cdf(k: u64, n: u64) -> f64 {
    if k >= n {
        return 1.0;
    }
    if n > EXACT_BINOMIAL_LIMIT {
        let sd = (n as f64).sqrt() / 2.0;
        return normal_cdf((k as f64 + 0.5 - n as f64 / 2.0) / sd);
    }
    // Walk down from the term at k; terms shrink by j / (n - j + 1).
    let mut term = (ln_binomial(n, k) - n as f64 * std::f64::consts::LN_2).exp();
    let mut terms = Vec::with_capacity(k as usize + 1);
    terms.push(term);
    for j in (1..=k).rev() {
        term *= j as f64 / (n - j + 1) as f64;
        if term == 0.0 {
            break;
        }
        terms.push(term);
    }
    terms.iter().rev().sum::<f64>().min(1.0)
}

/// `P[X >= k]` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_half_sf(k: u64, n: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    binomial_half_cdf(n - k, n)
}

/// Exact two-sided p-value of `successes` out of `n` fair trials:
/// `min(1, 2 * min(P[X <= S], P[X >= S]))`.
pub fn binom_two_sided_pvalue(successes: u64, n: u64) -> f64 {
    assert!(n >= 1, "binomial test needs at least one trial");
    assert!(successes <= n, "successes exceed trials");
    let k = successes.min(n - successes);
    if 2 * k == n {
        return 1.0;
    }
    (2.0 * binomial_half_cdf(k, n)).min(1.0)
}

/// Draws from `Binomial(n, 1/2)` by counting set bits of `n` fair coin flips.
pub fn sample_binomial_half<R: Rng + ?Sized>(n: u64, rng: &mut R) -> u64 {
    let mut remaining = n;
    let mut count = 0u64;
    while remaining >= 64 {
        count += rng.next_u64().count_ones() as u64;
        remaining -= 64;
    }
    if remaining > 0 {
        let mask = (1u64 << remaining) - 1;
        count += (rng.next_u64() & mask).count_ones() as u64;
    }
    count
}

/// Outcome of a one-sided paired sign test of "first beats second".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignTest {
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    /// `P[Binomial(wins + losses, 1/2) >= wins]`.
    pub p_value: f64,
}

impl SignTest {
    pub fn significant(&self, level: f64) -> bool {
        self.p_value < level
    }
}

pub fn sign_test(first: &[f64], second: &[f64]) -> SignTest {
    assert_eq!(first.len(), second.len(), "paired samples differ in length");
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (a, b) in first.iter().zip(second) {
        if a > b {
            wins += 1;
        } else if a < b {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let p_value = if wins + losses == 0 {
        1.0
    } else {
        binomial_half_sf(wins, wins + losses)
    };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

/// Ranks with ties sharing their average rank (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided p-value from the t approximation with `n - 2` degrees of freedom.
    pub p_value: f64,
}

pub fn spearman(x: &[f64], y: &[f64]) -> Spearman {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    assert!(n >= 3, "spearman needs at least three points");
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rho = pearson(&rx, &ry);
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else if rho.is_nan() {
        1.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Spearman { rho, p_value }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test against Uniform(0, 1).
pub fn ks_uniform(samples: &[f64]) -> KsTest {
    assert!(!samples.is_empty());
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let sqrt_n = n.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * statistic;
    KsTest {
        statistic,
        p_value: kolmogorov_sf(lambda),
    }
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Wilson score interval for a binomial proportion at ~95% (z = 1.96).
pub fn wilson_interval(successes: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let denom = 1.0 + z * z / n_f;
    let center = (p + z * z / (2.0 * n_f)) / denom;
    let half = z * ((p * (1.0 - p) + z * z / (4.0 * n_f)) / n_f).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}
