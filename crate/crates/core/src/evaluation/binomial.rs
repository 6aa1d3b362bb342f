//! Exact binomial tails and Clopper-Pearson intervals.

/// `ln C(n, i)` for `i = 0..=n`.
fn ln_binomials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    out.push(acc);
    for i in 1..=n {
        acc += ((n - i + 1) as f64).ln() - (i as f64).ln();
        out.push(acc);
    }
    out
}

fn log_sum_exp(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn ln_pmf(lnc: &[f64], n: u64, i: u64, p: f64) -> f64 {
    let a = if i == 0 { 0.0 } else { i as f64 * p.ln() };
    let b = if i == n { 0.0 } else { (n - i) as f64 * (-p).ln_1p() };
    lnc[i as usize] + a + b
}

/// `P(X <= x)` for `X ~ Binomial(n, p)`.
pub fn binomial_cdf(x: u64, n: u64, p: f64) -> f64 {
    if x >= n {
        return 1.0;
    }
    let lnc = ln_binomials(n);
    log_sum_exp((0..=x).map(|i| ln_pmf(&lnc, n, i, p))).exp().min(1.0)
}

fn binomial_sf(x: u64, n: u64, p: f64) -> f64 {
    // P(X >= x)
    if x == 0 {
        return 1.0;
    }
    let lnc = ln_binomials(n);
    log_sum_exp((x..=n).map(|i| ln_pmf(&lnc, n, i, p))).exp().min(1.0)
}

/// Root of a monotone function on `[0, 1]` by bisection.
fn bisect(f: impl Fn(f64) -> f64, increasing: bool) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (f(mid) < 0.0) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two-sided `1 - alpha` exact interval for `x` successes in `n` trials.
pub fn clopper_pearson(x: u64, n: u64, alpha: f64) -> (f64, f64) {
    assert!(n > 0 && x <= n, "need 0 <= x <= n, n > 0");
    let half = alpha / 2.0;
    let lo = if x == 0 { 0.0 } else { bisect(|p| binomial_sf(x, n, p) - half, true) };
    let hi = if x == n { 1.0 } else { bisect(|p| binomial_cdf(x, n, p) - half, false) };
    (lo, hi)
}
