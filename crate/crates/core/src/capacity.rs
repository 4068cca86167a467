//! Watermarking capacity.
//!
//! With `J` keys of `N` codes already embedded, a new key's code collides
//! with an established one when their (post-)trigger images fall within the
//! same fuzzy-match sphere of `S(eps)` codes and their labels differ. The
//! collision count is approximated as Gaussian with
//!
//! ```text
//! mu(J)      = J N^2 (C-1) S / (|U| C)
//! sigma^2(J) = mu(J) (1 - J N (C-1) S / (|U| C))
//! ```
//!
//! and a key fails when at least `NC/(C-1)` of its codes collide. Note that
//! this threshold always exceeds `N`, so the literal event cannot happen to
//! a single key; the formulas are kept as written and the report says so.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::verifier::gaussian_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapacityParams {
    /// Codes per key.
    pub n: u64,
    /// Classes.
    pub c: u64,
    /// `log2 |U|`.
    pub log2_u: f64,
    /// Confusion-sphere size `S(eps)`.
    pub s_eps: u64,
    /// Required probability that all keys embed correctly.
    pub zeta: f64,
    /// Performance floor behind `n_hat`.
    pub gamma: f64,
}

impl Default for CapacityParams {
    fn default() -> Self {
        CapacityParams {
            n: 50,
            c: 10,
            log2_u: 16.0,
            s_eps: 8,
            zeta: 0.95,
            gamma: 0.9,
        }
    }
}

impl CapacityParams {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("N must be at least 1"));
        }
        if self.c < 2 {
            return Err(Error::param("C must be at least 2"));
        }
        if !(self.log2_u.is_finite() && self.log2_u >= 0.0) {
            return Err(Error::param("log2 |U| must be finite and non-negative"));
        }
        if (self.s_eps as f64) > self.u_size() {
            return Err(Error::param("S(eps) cannot exceed |U|"));
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(Error::param("zeta must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn u_size(&self) -> f64 {
        self.log2_u.exp2()
    }

    /// Per-pair collision probability `S (C-1) / (|U| C)`.
    pub fn pair_probability(&self) -> f64 {
        let c = self.c as f64;
        self.s_eps as f64 * (c - 1.0) / (self.u_size() * c)
    }

    /// Failure threshold `N C / (C-1)`.
    pub fn threshold(&self) -> f64 {
        let c = self.c as f64;
        self.n as f64 * c / (c - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mu: f64,
    pub sigma2: f64,
}

/// `mu(J)` and `sigma^2(J)` as written; a negative `sigma^2` is an error.
pub fn collision_moments(j: u64, p: &CapacityParams) -> Result<Moments> {
    if j == 0 {
        return Err(Error::param("J must be at least 1"));
    }
    let (jf, n, c) = (j as f64, p.n as f64, p.c as f64);
    let s = p.s_eps as f64;
    let u = p.u_size();
    let mu = jf * n * n * (c - 1.0) * s / (u * c);
    let sigma2 = mu * (1.0 - jf * n * (c - 1.0) * s / (u * c));
    if sigma2 < 0.0 {
        return Err(Error::ApproximationInvalid { j, sigma2 });
    }
    Ok(Moments { mu, sigma2 })
}

/// Binomial variance `J N^2 q (1 - q)` for the per-pair probability `q`.
pub fn textbook_variance(j: u64, p: &CapacityParams) -> f64 {
    let q = p.pair_probability();
    j as f64 * (p.n as f64).powi(2) * q * (1.0 - q)
}

pub fn p_fail(j: u64, p: &CapacityParams) -> Result<f64> {
    let m = collision_moments(j, p)?;
    let thr = p.threshold();
    if m.sigma2 == 0.0 {
        return Ok(if m.mu < thr { 0.0 } else { 1.0 });
    }
    Ok(gaussian_cdf((m.mu - thr) / m.sigma2.sqrt()))
}

/// `prod_{j=1..J} (1 - P_Fail(j))`.
pub fn p_success(j: u64, p: &CapacityParams) -> Result<f64> {
    let mut prod = 1.0;
    for i in 1..=j {
        prod *= 1.0 - p_fail(i, p)?;
    }
    Ok(prod)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub j: u64,
    pub mu: f64,
    pub sigma2: f64,
    pub p_fail: f64,
    pub p_success: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "j")]
pub enum JStar {
    /// Largest `J` with `P_Success >= zeta`.
    Finite(u64),
    /// `S(eps) = 0`: collisions never happen.
    Unbounded,
    /// The scan reached its cap while still above `zeta`.
    AtLeast(u64),
    /// `sigma^2` went negative at `J+1` while still above `zeta`; `J` is
    /// the last valid value.
    ApproximationInvalid(u64),
}

impl JStar {
    fn value(self) -> f64 {
        match self {
            JStar::Unbounded => f64::INFINITY,
            JStar::Finite(j) | JStar::AtLeast(j) | JStar::ApproximationInvalid(j) => j as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub params: CapacityParams,
    pub rows: Vec<CapacityRow>,
    pub j_star: JStar,
    pub n_hat: u64,
    /// `N_hat / N`.
    pub performance_term: f64,
    /// `min(N_hat / N, J_star)`.
    pub bound: f64,
    /// Whole keys that fit under the bound.
    pub embeddable_keys: u64,
    pub notes: Vec<String>,
}

/// Scans `J = 1, 2, ...` (at most `j_max`) for the collision term and
/// combines it with the performance term `n_hat / N`.
pub fn capacity_bound(p: &CapacityParams, n_hat: u64, j_max: u64) -> Result<CapacityReport> {
    p.validate()?;
    let mut rows = Vec::new();
    let j_star = if p.s_eps == 0 {
        JStar::Unbounded
    } else {
        let mut prod = 1.0;
        let mut found = JStar::AtLeast(j_max);
        for j in 1..=j_max {
            let m = match collision_moments(j, p) {
                Ok(m) => m,
                Err(Error::ApproximationInvalid { .. }) => {
                    found = JStar::ApproximationInvalid(j - 1);
                    break;
                }
                Err(e) => return Err(e),
            };
            let pf = p_fail(j, p)?;
            prod *= 1.0 - pf;
            rows.push(CapacityRow {
                j,
                mu: m.mu,
                sigma2: m.sigma2,
                p_fail: pf,
                p_success: prod,
            });
            if prod < p.zeta {
                found = JStar::Finite(j - 1);
                break;
            }
        }
        found
    };
    let performance_term = n_hat as f64 / p.n as f64;
    let bound = performance_term.min(j_star.value());
    let mut notes = vec![format!(
        "failure threshold NC/(C-1) = {:.3} exceeds N = {}; a single key cannot reach it",
        p.threshold(),
        p.n
    )];
    if let JStar::ApproximationInvalid(j) = j_star {
        notes.push(format!("sigma^2 turns negative after J = {j}; collision term truncated there"));
    }
    if let JStar::AtLeast(j) = j_star {
        notes.push(format!("P_Success still >= zeta at the scan cap J = {j}"));
    }
    Ok(CapacityReport {
        params: *p,
        rows,
        j_star,
        n_hat,
        performance_term,
        bound,
        embeddable_keys: bound.floor() as u64,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub trials: usize,
    pub mean: f64,
    pub var: f64,
    pub warning: Option<String>,
}

/// Monte Carlo collision count of one new key against `J N` established
/// codes on a 1-D torus of size `|U|`. A code `x` is confusable with the `S`
/// codes `x - floor(S/2) ..= x - floor(S/2) + S - 1`; each confusable pair
/// collides independently with probability `(C-1)/C` (labels differ).
pub fn simulate_collisions(j: u64, p: &CapacityParams, trials: usize, seed: u64, exec: Exec) -> Result<SimResult> {
    p.validate()?;
    if p.log2_u > 32.0 || p.log2_u.fract() != 0.0 {
        return Err(Error::param("simulation needs an integral log2 |U| <= 32"));
    }
    if trials < 2 {
        return Err(Error::param("need at least two trials"));
    }
    let u = 1u64 << p.log2_u as u32;
    let established = (j * p.n) as usize;
    let differ = (p.c - 1) as f64 / p.c as f64;
    let s = p.s_eps;
    let half = s / 2;
    let counts = exec.map(trials, |t| {
        let mut r = rng::stream(seed, t as u64);
        let mut codes: Vec<u64> = (0..established).map(|_| r.random_range(0..u)).collect();
        codes.sort_unstable();
        let mut hits = 0u64;
        for _ in 0..p.n {
            let x = r.random_range(0..u);
            let confusable = window_count(&codes, x, half, s, u);
            for _ in 0..confusable {
                if r.random_bool(differ) {
                    hits += 1;
                }
            }
        }
        hits as f64
    });
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let warning = (trials < 1000).then(|| format!("only {trials} trials; moments are rough"));
    Ok(SimResult {
        trials,
        mean,
        var,
        warning,
    })
}

/// Established codes in the half-open torus window of `s` codes starting at
/// `x - half`.
fn window_count(sorted: &[u64], x: u64, half: u64, s: u64, u: u64) -> u64 {
    if s == 0 {
        return 0;
    }
    if s >= u {
        return sorted.len() as u64;
    }
    let start = (x + u - half % u) % u;
    let end = start + s; // exclusive, may wrap past u
    let below = |v: u64| sorted.partition_point(|&c| c < v) as u64;
    if end <= u {
        below(end) - below(start)
    } else {
        (sorted.len() as u64 - below(start)) + below(end - u)
    }
}

/// Injection sweep for `N_hat(gamma)`: `accuracy_at(n)` must return test
/// accuracy after injecting `n` post-triggers. Sizes run `batch, 2 batch,
/// ...` up to `n_max`; the sweep stops at the first accuracy below `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NHat {
    pub n_hat: u64,
    pub curve: Vec<(u64, f64)>,
}

pub fn measure_n_hat<F>(gamma: f64, batch: u64, n_max: u64, mut accuracy_at: F) -> Result<NHat>
where
    F: FnMut(u64) -> Result<f64>,
{
    if batch == 0 {
        return Err(Error::param("batch must be at least 1"));
    }
    let mut curve = Vec::new();
    let mut n_hat = 0;
    let mut n = batch;
    while n <= n_max {
        let acc = accuracy_at(n)?;
        curve.push((n, acc));
        if acc < gamma {
            break;
        }
        n_hat = n;
        n += batch;
    }
    Ok(NHat { n_hat, curve })
}

/// CSV with header `J,mu,sigma2,p_fail,p_success,empirical_mean,empirical_var`;
/// empirical columns are empty where no simulation was run.
pub fn to_csv(report: &CapacityReport, sims: &[(u64, SimResult)]) -> String {
    let mut out = String::from("J,mu,sigma2,p_fail,p_success,empirical_mean,empirical_var\n");
    for row in &report.rows {
        let sim = sims.iter().find(|(j, _)| *j == row.j).map(|(_, s)| s);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.j,
            row.mu,
            row.sigma2,
            row.p_fail,
            row.p_success,
            sim.map_or(String::new(), |s| s.mean.to_string()),
            sim.map_or(String::new(), |s| s.var.to_string()),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> CapacityParams {
        CapacityParams {
            n: 50,
            c: 10,
            log2_u: 16.0,
            s_eps: 8,
            zeta: 0.95,
            gamma: 0.9,
        }
    }

    #[test]
    fn toy_moments_by_hand() {
        let m = collision_moments(4, &toy()).unwrap();
        let mu = 4.0 * 2500.0 * 9.0 * 8.0 / (65536.0 * 10.0);
        assert!((m.mu - mu).abs() / mu < 1e-12);
        assert!((m.mu - 1.0986328125).abs() < 1e-12);
        let sigma2 = mu * (1.0 - 4.0 * 50.0 * 9.0 * 8.0 / 655360.0);
        assert!((m.sigma2 - sigma2).abs() < 1e-12);
        let m2 = collision_moments(8, &toy()).unwrap();
        assert!((m2.mu - 2.0 * m.mu).abs() < 1e-12);
    }

    #[test]
    fn zero_sphere_never_collides() {
        let p = CapacityParams { s_eps: 0, ..toy() };
        let m = collision_moments(3, &p).unwrap();
        assert_eq!((m.mu, m.sigma2), (0.0, 0.0));
        assert_eq!(p_fail(3, &p).unwrap(), 0.0);
        let r = capacity_bound(&p, 120, 10).unwrap();
        assert_eq!(r.j_star, JStar::Unbounded);
        assert_eq!(r.bound, 120.0 / 50.0);
        assert_eq!(r.embeddable_keys, 2);
        let sim = simulate_collisions(3, &p, 100, 1, Exec::Sequential).unwrap();
        assert_eq!((sim.mean, sim.var), (0.0, 0.0));
    }

    #[test]
    fn simulation_is_independent_of_execution() {
        let a = simulate_collisions(4, &toy(), 300, 5, Exec::Sequential).unwrap();
        let b = simulate_collisions(4, &toy(), 300, 5, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn toy_failure_probability_is_negligible() {
        assert!(p_fail(4, &toy()).unwrap() < 1e-300);
        assert_eq!(p_success(1, &toy()).unwrap(), 1.0);
    }

    #[test]
    fn negative_variance_is_flagged() {
        // J N (C-1) S / (|U| C) > 1 from J = 183 on
        assert!(collision_moments(182, &toy()).is_ok());
        assert!(matches!(
            collision_moments(183, &toy()),
            Err(Error::ApproximationInvalid { j: 183, .. })
        ));
        let r = capacity_bound(&toy(), 500, 1000).unwrap();
        assert_eq!(r.j_star, JStar::ApproximationInvalid(182));
    }

    #[test]
    fn window_counts_wrap_around() {
        let codes = [0, 1, 2, 14, 15];
        // window of 4 starting at 15 - 2 = 13: {13, 14, 15, 0}
        assert_eq!(window_count(&codes, 15, 2, 4, 16), 3);
        // window of 3 starting at 0: {0, 1, 2}
        assert_eq!(window_count(&codes, 1, 1, 3, 16), 3);
        assert_eq!(window_count(&codes, 8, 0, 1, 16), 0);
        assert_eq!(window_count(&codes, 8, 8, 16, 16), 5);
    }

    #[test]
    fn n_hat_sweep() {
        let curve = |n: u64| Ok(1.0 - n as f64 / 1000.0);
        assert_eq!(measure_n_hat(0.0, 50, 1000, curve).unwrap().n_hat, 1000);
        assert_eq!(measure_n_hat(0.92, 50, 1000, curve).unwrap().n_hat, 50);
        let none = measure_n_hat(0.99, 50, 1000, curve).unwrap();
        assert_eq!(none.n_hat, 0);
        assert_eq!(none.curve.len(), 1);
    }

    #[test]
    fn csv_header_and_rows() {
        let p = CapacityParams {
            n: 2,
            c: 2,
            log2_u: 10.0,
            s_eps: 4,
            zeta: 0.95,
            gamma: 0.5,
        };
        let r = capacity_bound(&p, 10, 3).unwrap();
        let sim = simulate_collisions(2, &p, 50, 0, Exec::Sequential).unwrap();
        assert!(sim.warning.is_some());
        let csv = to_csv(&r, &[(2, sim)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "J,mu,sigma2,p_fail,p_success,empirical_mean,empirical_var");
        assert_eq!(lines.len(), 1 + r.rows.len());
        assert!(lines[1].ends_with(",,"));
        assert!(!lines[2].ends_with(",,"));
    }
}
