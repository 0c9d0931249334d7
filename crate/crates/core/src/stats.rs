//! Descriptive statistics, hypothesis tests and density estimates used by
//! the report.
//!
//! The t and F tail probabilities come from a continued-fraction
//! regularized incomplete beta; normal tails and quantiles come from
//! `statrs`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} observations, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("all differences are zero")]
    AllZero,
    #[error("sample has zero variance")]
    ZeroVariance,
    #[error("cell ({0}, {1}) is empty")]
    EmptyCell(usize, usize),
}

fn check_finite(x: &[f64]) -> Result<(), StatsError> {
    if x.is_empty() {
        return Err(StatsError::Empty);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n - 1); `None` for n < 2.
fn sd(x: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    Some((ss / (x.len() - 1) as f64).sqrt())
}

/// Type-7 quantile (linear interpolation between order statistics) of an
/// ascending sample.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub n: usize,
    pub mean: f64,
    /// `None` when n < 2.
    pub sd: Option<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

pub fn describe(x: &[f64]) -> Result<Description, StatsError> {
    check_finite(x)?;
    let s = sorted(x);
    Ok(Description {
        n: x.len(),
        mean: mean(x),
        sd: sd(x),
        median: quantile_sorted(&s, 0.5),
        q1: quantile_sorted(&s, 0.25),
        q3: quantile_sorted(&s, 0.75),
        min: s[0],
        max: s[s.len() - 1],
    })
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for `I_x(a, b)` by the modified Lentz method; valid
/// (fast) for `x < (a + 1) / (a + b + 2)`.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut f = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        // even step
        let num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + num * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        f *= d * c;
        // odd step
        let num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + num * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + num / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        f *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    f
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64, StatsError> {
    if !(0.0..=1.0).contains(&x) || !(a > 0.0) || !(b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(StatsError::Domain(format!(
            "I_x(a,b) with x={x}, a={a}, b={b}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    let value = if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a) / b
    };
    Ok(value.clamp(0.0, 1.0))
}

/// Two-sided tail probability `P(|T| >= |t|)` of Student's t.
pub fn t_two_sided_p(t: f64, df: f64) -> Result<f64, StatsError> {
    if !(df > 0.0) {
        return Err(StatsError::Domain(format!("df={df}")));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    if t.is_nan() {
        return Err(StatsError::Domain("t is NaN".into()));
    }
    regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5)
}

/// Student's t CDF.
pub fn t_cdf(t: f64, df: f64) -> Result<f64, StatsError> {
    let tail = t_two_sided_p(t, df)? / 2.0;
    Ok(if t >= 0.0 { 1.0 - tail } else { tail })
}

/// Student's t quantile by bisection on the CDF.
pub fn t_quantile(p: f64, df: f64) -> Result<f64, StatsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(StatsError::Domain(format!("p={p}")));
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    while t_cdf(lo, df)? > p {
        lo *= 2.0;
    }
    while t_cdf(hi, df)? < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Upper tail `P(F >= f)` of the F distribution.
pub fn f_upper_p(f: f64, df1: f64, df2: f64) -> Result<f64, StatsError> {
    if !(df1 > 0.0) || !(df2 > 0.0) {
        return Err(StatsError::Domain(format!("df1={df1}, df2={df2}")));
    }
    if f.is_nan() {
        return Err(StatsError::Domain("F is NaN".into()));
    }
    if f <= 0.0 {
        return Ok(1.0);
    }
    if f.is_infinite() {
        return Ok(0.0);
    }
    regularized_incomplete_beta(df2 / (df2 + df1 * f), df2 / 2.0, df1 / 2.0)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn normal_upper(z: f64) -> f64 {
    std_normal().sf(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub name: String,
    pub statistic: f64,
    pub df: Option<f64>,
    pub df2: Option<f64>,
    pub p_value: f64,
    /// p from an exact null distribution rather than an approximation.
    pub exact: bool,
    /// Statistic undefined in the usual sense (e.g. zero variance).
    pub degenerate: bool,
}

impl TestResult {
    fn new(name: &str, statistic: f64, p_value: f64) -> Self {
        Self {
            name: name.to_string(),
            statistic,
            df: None,
            df2: None,
            p_value: p_value.clamp(0.0, 1.0),
            exact: false,
            degenerate: false,
        }
    }
}

/// Two-tailed paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatsError::TooFew {
            need: 2,
            got: a.len(),
        });
    }
    check_finite(a)?;
    check_finite(b)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let s = sd(&d).unwrap_or(0.0);
    let df = n - 1.0;
    let mut result = if s > 0.0 {
        let t = m / (s / n.sqrt());
        TestResult::new("paired_t", t, t_two_sided_p(t, df)?)
    } else {
        let (t, p) = if m == 0.0 {
            (0.0, 1.0)
        } else {
            (m.signum() * f64::INFINITY, 0.0)
        };
        let mut r = TestResult::new("paired_t", t, p);
        r.degenerate = true;
        r
    };
    result.df = Some(df);
    Ok(result)
}

/// Mid-ranks (1-based) of `x`; also returns the sizes of tie groups.
pub fn midranks(x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn tie_sum(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t * t * t - t) as f64).sum()
}

/// Exact null distribution of a sum of a random subset of `ranks`, each
/// rank included independently with probability 1/2 (all 2^n sign
/// patterns). Ranks are doubled to stay integral with mid-ranks. Returns
/// (P(S <= s), P(S >= s)).
pub fn signed_rank_exact_tails(ranks: &[f64], s: f64) -> (f64, f64) {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    // counts as f64 to avoid overflow for larger n
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for v in (r..=total).rev() {
            counts[v] += counts[v - r];
        }
    }
    let norm: f64 = counts.iter().sum();
    let target = (2.0 * s).round() as usize;
    let le: f64 = counts[..=target.min(total)].iter().sum();
    let ge: f64 = counts[target.min(total + 1).min(total)..].iter().sum();
    let ge = if target > total { 0.0 } else { ge };
    (le / norm, ge / norm)
}

/// Largest n for which the signed-rank p-value is exact.
pub const WILCOXON_EXACT_MAX_N: usize = 20;

/// Wilcoxon signed-rank test on `a - b`; zero differences dropped, ties
/// mid-ranked. The statistic is `W+`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    check_finite(a)?;
    check_finite(b)?;
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0)
        .collect();
    if d.is_empty() {
        return Err(StatsError::AllZero);
    }
    if d.len() < 5 {
        return Err(StatsError::TooFew {
            need: 5,
            got: d.len(),
        });
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = midranks(&abs);
    let w_plus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = d.len() as f64;
    let mut result = if d.len() <= WILCOXON_EXACT_MAX_N {
        let (le, ge) = signed_rank_exact_tails(&ranks, w_plus);
        let mut r = TestResult::new("wilcoxon_signed_rank", w_plus, (2.0 * le.min(ge)).min(1.0));
        r.exact = true;
        r
    } else {
        let mu = n * (n + 1.0) / 4.0;
        let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_sum(&ties) / 48.0;
        let p = if var > 0.0 {
            let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
            2.0 * normal_upper(z)
        } else {
            1.0
        };
        TestResult::new("wilcoxon_signed_rank", w_plus, p.min(1.0))
    };
    result.df = None;
    Ok(result)
}

/// Normal-approximation p for the signed-rank statistic (continuity and tie
/// corrected), exposed for agreement checks against the exact path.
pub fn wilcoxon_normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let (_, ties) = midranks(ranks);
    let mu = n * (n + 1.0) / 4.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_sum(&ties) / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * normal_upper(z)).min(1.0)
}

/// Largest combined size for which the rank-sum p-value is exact.
pub const MANN_WHITNEY_EXACT_MAX_N: usize = 12;

/// Mann-Whitney U for `x` against `y` (statistic is U of `x`).
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.is_empty() || y.is_empty() {
        return Err(StatsError::Empty);
    }
    check_finite(x)?;
    check_finite(y)?;
    let (n1, n2) = (x.len(), y.len());
    if n1 < 3 || n2 < 3 {
        return Err(StatsError::TooFew {
            need: 3,
            got: n1.min(n2),
        });
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let (f1, f2) = (n1 as f64, n2 as f64);
    if n1 + n2 <= MANN_WHITNEY_EXACT_MAX_N {
        let (le, ge) = rank_sum_exact_tails(&ranks, n1, r1);
        let mut r = TestResult::new("mann_whitney_u", u, (2.0 * le.min(ge)).min(1.0));
        r.exact = true;
        return Ok(r);
    }
    let n = f1 + f2;
    let mu = f1 * f2 / 2.0;
    let var = f1 * f2 / 12.0 * ((n + 1.0) - tie_sum(&ties) / (n * (n - 1.0)));
    if var <= 0.0 {
        let mut r = TestResult::new("mann_whitney_u", u, 1.0);
        r.degenerate = true;
        return Ok(r);
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(TestResult::new("mann_whitney_u", u, 2.0 * normal_upper(z)))
}

/// Exact tails of the rank sum of a size-`k` subset of `ranks`, by
/// enumerating all C(n, k) subsets.
fn rank_sum_exact_tails(ranks: &[f64], k: usize, observed: f64) -> (f64, f64) {
    let n = ranks.len();
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    let tol = 1e-9;
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let s: f64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        total += 1;
        if s <= observed + tol {
            le += 1;
        }
        if s >= observed - tol {
            ge += 1;
        }
    }
    (le as f64 / total as f64, ge as f64 / total as f64)
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

pub const SHAPIRO_WILK_MAX_N: usize = 50;

/// Shapiro-Wilk W and p by Royston's AS R94 approximation.
pub fn shapiro_wilk(x: &[f64]) -> Result<TestResult, StatsError> {
    check_finite(x)?;
    let n = x.len();
    if !(3..=SHAPIRO_WILK_MAX_N).contains(&n) {
        return Err(StatsError::Domain(format!(
            "Shapiro-Wilk needs 3 <= n <= {SHAPIRO_WILK_MAX_N}, got {n}"
        )));
    }
    let xs = sorted(x);
    let range = xs[n - 1] - xs[0];
    if !(range > 0.0) {
        return Err(StatsError::ZeroVariance);
    }
    let a = shapiro_wilk_coefficients(n);

    // W as the squared correlation between data and coefficients
    let half = n / 2;
    let mut full = vec![0.0; n];
    for i in 0..half {
        full[i] = -a[i];
        full[n - 1 - i] = a[i];
    }
    let xm = mean(&xs);
    let am = mean(&full);
    let (mut sxx, mut saa, mut sax) = (0.0, 0.0, 0.0);
    for (xi, ai) in xs.iter().zip(&full) {
        let (dx, da) = ((xi - xm) / range, ai - am);
        sxx += dx * dx;
        saa += da * da;
        sax += da * dx;
    }
    let w = (sax * sax / (saa * sxx)).min(1.0);
    let w1 = 1.0 - w;

    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::FRAC_PI_3;
        (pi6 * (w.sqrt().asin() - stqr)).max(0.0)
    } else if w1 <= 0.0 {
        1.0
    } else {
        let an = n as f64;
        let mut y = w1.ln();
        let (m, s) = if n <= 11 {
            let gamma = poly(&[-2.273, 0.459], an);
            if y >= gamma {
                return Ok(sw_result(w, 1e-99));
            }
            y = -(gamma - y).ln();
            (
                poly(&[0.544, -0.39978, 0.025054, -6.714e-4], an),
                poly(&[1.3822, -0.77857, 0.062767, -0.0020322], an).exp(),
            )
        } else {
            let xx = an.ln();
            (
                poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], xx),
                poly(&[-0.4803, -0.082676, 0.0030302], xx).exp(),
            )
        };
        normal_upper((y - m) / s)
    };
    Ok(sw_result(w, p))
}

fn sw_result(w: f64, p: f64) -> TestResult {
    TestResult::new("shapiro_wilk", w, p)
}

/// The `n / 2` positive AS R94 coefficients, largest first.
pub fn shapiro_wilk_coefficients(n: usize) -> Vec<f64> {
    let half = n / 2;
    if n == 3 {
        return vec![std::f64::consts::FRAC_1_SQRT_2];
    }
    let an = n as f64;
    let an25 = an + 0.25;
    let normal = std_normal();
    let m: Vec<f64> = (1..=half)
        .map(|i| normal.inverse_cdf((i as f64 - 0.375) / an25))
        .collect();
    let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
    let ssumm2 = summ2.sqrt();
    let rsn = 1.0 / an.sqrt();
    let c1 = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
    let c2 = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    let a1 = poly(&c1, rsn) - m[0] / ssumm2;
    let mut a = vec![0.0; half];
    let (first, fac) = if n > 5 {
        let a2 = -m[1] / ssumm2 + poly(&c2, rsn);
        a[1] = a2;
        let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1])
            / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
            .sqrt();
        (2, fac)
    } else {
        let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
        (1, fac)
    };
    a[0] = a1;
    for i in first..half {
        a[i] = -m[i] / fac;
    }
    a
}

/// One observation for [`two_way_anova`]: level of factor A, level of
/// factor B, response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub a: usize,
    pub b: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaTable {
    pub ss_a: f64,
    pub ss_b: f64,
    pub ss_ab: f64,
    pub ss_error: f64,
    pub df_a: f64,
    pub df_b: f64,
    pub df_ab: f64,
    pub df_error: f64,
    pub a: TestResult,
    pub b: TestResult,
    pub interaction: TestResult,
}

/// Two-way ANOVA with interaction, sums of squares from cell means.
///
/// Exact (and equal to sequential sums of squares) when cell counts are
/// proportional to the margins, which includes balanced designs.
pub fn two_way_anova(
    obs: &[Observation],
    levels_a: usize,
    levels_b: usize,
) -> Result<AnovaTable, StatsError> {
    if obs.is_empty() {
        return Err(StatsError::Empty);
    }
    if obs.iter().any(|o| !o.value.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    if let Some(o) = obs.iter().find(|o| o.a >= levels_a || o.b >= levels_b) {
        return Err(StatsError::Domain(format!(
            "level ({}, {}) out of range",
            o.a, o.b
        )));
    }
    let mut count = vec![vec![0usize; levels_b]; levels_a];
    let mut sum = vec![vec![0.0; levels_b]; levels_a];
    for o in obs {
        count[o.a][o.b] += 1;
        sum[o.a][o.b] += o.value;
    }
    for (i, row) in count.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                return Err(StatsError::EmptyCell(i, j));
            }
        }
    }
    let n = obs.len() as f64;
    let grand = obs.iter().map(|o| o.value).sum::<f64>() / n;
    let cell_mean = |i: usize, j: usize| sum[i][j] / count[i][j] as f64;
    let n_a: Vec<f64> = (0..levels_a)
        .map(|i| count[i].iter().sum::<usize>() as f64)
        .collect();
    let n_b: Vec<f64> = (0..levels_b)
        .map(|j| (0..levels_a).map(|i| count[i][j]).sum::<usize>() as f64)
        .collect();
    let mean_a: Vec<f64> = (0..levels_a)
        .map(|i| sum[i].iter().sum::<f64>() / n_a[i])
        .collect();
    let mean_b: Vec<f64> = (0..levels_b)
        .map(|j| (0..levels_a).map(|i| sum[i][j]).sum::<f64>() / n_b[j])
        .collect();
    let ss_a: f64 = (0..levels_a)
        .map(|i| n_a[i] * (mean_a[i] - grand).powi(2))
        .sum();
    let ss_b: f64 = (0..levels_b)
        .map(|j| n_b[j] * (mean_b[j] - grand).powi(2))
        .sum();
    let mut ss_cells = 0.0;
    for i in 0..levels_a {
        for j in 0..levels_b {
            ss_cells += count[i][j] as f64 * (cell_mean(i, j) - grand).powi(2);
        }
    }
    let ss_ab = (ss_cells - ss_a - ss_b).max(0.0);
    let ss_error: f64 = obs
        .iter()
        .map(|o| (o.value - cell_mean(o.a, o.b)).powi(2))
        .sum();
    let df_a = (levels_a - 1) as f64;
    let df_b = (levels_b - 1) as f64;
    let df_ab = df_a * df_b;
    let df_error = n - (levels_a * levels_b) as f64;
    if df_error < 1.0 || df_a < 1.0 || df_b < 1.0 {
        return Err(StatsError::TooFew {
            need: levels_a * levels_b + 1,
            got: obs.len(),
        });
    }
    let ms_error = ss_error / df_error;
    let effect = |name: &str, ss: f64, df: f64| -> Result<TestResult, StatsError> {
        let ms = ss / df;
        let (f, degenerate) = if ms_error > 0.0 {
            (ms / ms_error, false)
        } else if ms > 0.0 {
            (f64::INFINITY, true)
        } else {
            (0.0, true)
        };
        let mut r = TestResult::new(name, f, f_upper_p(f, df, df_error)?);
        r.df = Some(df);
        r.df2 = Some(df_error);
        r.degenerate = degenerate;
        Ok(r)
    };
    Ok(AnovaTable {
        a: effect("anova_condition", ss_a, df_a)?,
        b: effect("anova_angle_band", ss_b, df_b)?,
        interaction: effect("anova_interaction", ss_ab, df_ab)?,
        ss_a,
        ss_b,
        ss_ab,
        ss_error,
        df_a,
        df_b,
        df_ab,
        df_error,
    })
}

/// Silverman's rule of thumb from summary values.
pub fn silverman_bandwidth_from(sd: f64, iqr: f64, n: usize) -> f64 {
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (n as f64).powf(-0.2)
}

pub fn silverman_bandwidth(x: &[f64]) -> Result<f64, StatsError> {
    check_finite(x)?;
    if x.len() < 2 {
        return Err(StatsError::TooFew {
            need: 2,
            got: x.len(),
        });
    }
    let s = sd(x).unwrap_or(0.0);
    if !(s > 0.0) {
        return Err(StatsError::ZeroVariance);
    }
    let xs = sorted(x);
    let iqr = quantile_sorted(&xs, 0.75) - quantile_sorted(&xs, 0.25);
    Ok(silverman_bandwidth_from(s, iqr, x.len()))
}

/// Gaussian kernel density estimate evaluated on `grid`.
pub fn kde_density(x: &[f64], grid: &[f64]) -> Result<Vec<f64>, StatsError> {
    let h = silverman_bandwidth(x)?;
    let norm = 1.0 / (x.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|g| {
            x.iter()
                .map(|xi| (-0.5 * ((g - xi) / h).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect())
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Counts of `x` in bins delimited by ascending `edges`; the last bin is
/// closed on the right.
pub fn histogram(x: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len().saturating_sub(1);
    let mut counts = vec![0usize; bins];
    if bins == 0 {
        return counts;
    }
    for &v in x {
        if v < edges[0] || v > edges[bins] {
            continue;
        }
        let k = edges
            .partition_point(|e| *e <= v)
            .saturating_sub(1)
            .min(bins - 1);
        counts[k] += 1;
    }
    counts
}

/// Mean with a two-sided 95% t confidence interval; `None` bounds when
/// n < 2.
pub fn mean_ci95(x: &[f64]) -> Result<(f64, Option<(f64, f64)>), StatsError> {
    check_finite(x)?;
    let m = mean(x);
    match sd(x) {
        Some(s) => {
            let half = t_quantile(0.975, (x.len() - 1) as f64)? * s / (x.len() as f64).sqrt();
            Ok((m, Some((m - half, m + half))))
        }
        None => Ok((m, None)),
    }
}
