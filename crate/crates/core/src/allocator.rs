//! Per-chunk split of the compute budget across models.
//!
//! With the discrete assignment relaxed to expected per-model loads `w_m`,
//! the resource subproblem is
//!
//! ```text
//! minimise  sum_m w_m * (xi2_m / (r_m + xi1_m) + xi3_m)
//! s.t.      sum_m r_m = R,  r_m >= 0
//! ```
//!
//! which is separable and convex (the Hessian is diagonal with entries
//! `2 w_m xi2_m / (r_m + xi1_m)^3 > 0`). Stationarity equalises the weighted
//! marginal gains, `w_m xi2_m / (r_m + xi1_m)^2 = lambda`, so
//! `r_m = max(0, sqrt(w_m xi2_m / lambda) - xi1_m)` and `lambda` is fixed by
//! the budget.

use thiserror::Error;

use crate::profiles::{latency, LatencyParams};

const BUDGET_TOL: f64 = 1e-9;
const BRACKET_STEPS: usize = 2100;
const BISECTION_STEPS: usize = 400;
const ORACLE_MAX_MODELS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum AllocError {
    #[error("resource budget must be positive, got {0}")]
    Infeasible(f64),
    #[error("at least one model weight must be positive")]
    NoLoad,
    #[error("invalid allocation problem: {0}")]
    Invalid(String),
    #[error("could not bracket the budget multiplier; latency parameters look degenerate")]
    Bracket,
    #[error("brute-force oracle supports at most {ORACLE_MAX_MODELS} models, got {0}")]
    Scale(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationProblem {
    weights: Vec<f64>,
    params: Vec<LatencyParams>,
    total: f64,
}

impl AllocationProblem {
    pub fn new(weights: Vec<f64>, params: Vec<LatencyParams>, total: f64) -> Result<Self, AllocError> {
        if !(total.is_finite() && total > 0.0) {
            return Err(AllocError::Infeasible(total));
        }
        if weights.len() != params.len() || weights.is_empty() {
            return Err(AllocError::Invalid(format!(
                "{} weights for {} models",
                weights.len(),
                params.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(AllocError::Invalid("weights must be finite and non-negative".into()));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(AllocError::NoLoad);
        }
        for p in &params {
            p.validate().map_err(|e| AllocError::Invalid(e.to_string()))?;
        }
        Ok(Self { weights, params, total })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn params(&self) -> &[LatencyParams] {
        &self.params
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn models(&self) -> usize {
        self.weights.len()
    }

    /// `sum_m w_m * l(r_m)`; zero-weight models contribute nothing and a
    /// loaded model at a singular point makes the objective infinite.
    pub fn objective(&self, r: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(&self.params)
            .zip(r)
            .filter(|((&w, _), _)| w > 0.0)
            .map(|((&w, p), &r)| latency(r, p).map_or(f64::INFINITY, |l| w * l))
            .sum()
    }

    /// `w_m xi2_m / (r_m + xi1_m)^2`, the marginal latency reduction per unit of resource.
    pub fn marginal(&self, m: usize, r: f64) -> f64 {
        let p = &self.params[m];
        let d = r + p.xi1;
        self.weights[m] * p.xi2 / (d * d)
    }

    fn share_at(&self, lambda: f64) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.params)
            .map(|(&w, p)| {
                if w == 0.0 {
                    0.0
                } else {
                    ((w * p.xi2 / lambda).sqrt() - p.xi1).max(0.0)
                }
            })
            .collect()
    }

    // Closed form on a fixed active set; `None` if the set is inconsistent.
    fn polish(&self, active: &[bool]) -> Option<(Vec<f64>, f64)> {
        let mut root_sum = 0.0;
        let mut offset_sum = 0.0;
        for (m, &on) in active.iter().enumerate() {
            if on {
                root_sum += (self.weights[m] * self.params[m].xi2).sqrt();
                offset_sum += self.params[m].xi1;
            }
        }
        if root_sum == 0.0 {
            return None;
        }
        let sqrt_lambda = root_sum / (self.total + offset_sum);
        let lambda = sqrt_lambda * sqrt_lambda;
        let mut r = vec![0.0; self.models()];
        for m in 0..self.models() {
            let unclamped = (self.weights[m] * self.params[m].xi2).sqrt() / sqrt_lambda - self.params[m].xi1;
            if active[m] {
                if unclamped < 0.0 {
                    return None;
                }
                r[m] = unclamped;
            } else if self.weights[m] > 0.0 && unclamped > 0.0 {
                return None;
            }
        }
        Some((r, lambda))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub r: Vec<f64>,
    /// Common weighted marginal value shared by every model with `r_m > 0`.
    pub lambda: f64,
}

impl Allocation {
    pub fn total(&self) -> f64 {
        self.r.iter().sum()
    }

    /// Entire budget on one model.
    pub fn single(models: usize, model: usize, total: f64) -> Self {
        let mut r = vec![0.0; models];
        r[model] = total;
        Self { r, lambda: f64::NAN }
    }

    pub fn even(models: usize, total: f64) -> Self {
        Self {
            r: vec![total / models as f64; models],
            lambda: f64::NAN,
        }
    }
}

/// KKT allocation: bisection on `lambda` until the budget holds to
/// `1e-9 * R`, then the closed form on the resulting active set.
pub fn allocate(p: &AllocationProblem) -> Result<Allocation, AllocError> {
    let total = p.total;
    let demand = |lambda: f64| p.share_at(lambda).iter().sum::<f64>();

    // demand() is non-increasing in lambda; find lo with demand >= R and
    // hi with demand <= R.
    let mut hi = 1.0;
    let mut steps = 0;
    while demand(hi) > total {
        hi *= 2.0;
        steps += 1;
        if steps > BRACKET_STEPS || !hi.is_finite() {
            return Err(AllocError::Bracket);
        }
    }
    let mut lo = hi;
    steps = 0;
    while demand(lo) < total {
        lo *= 0.5;
        steps += 1;
        if steps > BRACKET_STEPS || lo == 0.0 {
            return Err(AllocError::Bracket);
        }
    }

    let mut lambda = lo;
    for _ in 0..BISECTION_STEPS {
        lambda = (lo * hi).sqrt();
        let d = demand(lambda);
        if (d - total).abs() <= BUDGET_TOL * total * 1e-3 {
            break;
        }
        if d > total {
            lo = lambda;
        } else {
            hi = lambda;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    let r = p.share_at(lambda);
    let active: Vec<bool> = r.iter().map(|&x| x > 0.0).collect();
    if let Some((r, lambda)) = p.polish(&active) {
        return Ok(Allocation { r, lambda });
    }

    let sum: f64 = r.iter().sum();
    if (sum - total).abs() > BUDGET_TOL * total {
        return Err(AllocError::Bracket);
    }
    Ok(Allocation { r, lambda })
}

/// Exhaustive grid search over the simplex at resolution `step`. The last
/// model takes whatever the grid leaves, so every point meets the budget.
pub fn bruteforce_allocate(p: &AllocationProblem, step: f64) -> Result<Allocation, AllocError> {
    let m = p.models();
    if m > ORACLE_MAX_MODELS {
        return Err(AllocError::Scale(m));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(AllocError::Invalid(format!("step must be positive, got {step}")));
    }
    let n = (p.total / step + 1e-9).floor() as usize;
    let mut counts = vec![0usize; m.saturating_sub(1)];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut r = vec![0.0; m];

    loop {
        let used: usize = counts.iter().sum();
        if used <= n {
            for (k, &c) in counts.iter().enumerate() {
                r[k] = c as f64 * step;
            }
            r[m - 1] = (p.total - used as f64 * step).max(0.0);
            let obj = p.objective(&r);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, r.clone()));
            }
        }
        // Odometer increment, skipping over budget-infeasible tails.
        let mut k = 0;
        loop {
            if k == counts.len() {
                let (_, r) = best.expect("at least the origin is visited");
                let lambda = oracle_lambda(p, &r);
                return Ok(Allocation { r, lambda });
            }
            counts[k] += 1;
            if counts.iter().sum::<usize>() <= n {
                break;
            }
            counts[k] = 0;
            k += 1;
        }
    }
}

fn oracle_lambda(p: &AllocationProblem, r: &[f64]) -> f64 {
    let active: Vec<f64> = (0..p.models())
        .filter(|&m| p.weights[m] > 0.0 && r[m] > 0.0)
        .map(|m| p.marginal(m, r[m]))
        .collect();
    if active.is_empty() {
        f64::NAN
    } else {
        active.iter().sum::<f64>() / active.len() as f64
    }
}

/// Expected load per model: the size of each complexity group.
pub fn compute_weights<T>(groups: &[Vec<T>]) -> Vec<f64> {
    groups.iter().map(|g| g.len() as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn xi(a: f64, b: f64, c: f64) -> LatencyParams {
        LatencyParams::new(a, b, c).unwrap()
    }

    fn problem(w: &[f64], params: &[LatencyParams], total: f64) -> AllocationProblem {
        AllocationProblem::new(w.to_vec(), params.to_vec(), total).unwrap()
    }

    #[test]
    fn single_model_takes_everything() {
        let a = allocate(&problem(&[1.0], &[xi(0.5, 1.0, 0.1)], 7.0)).unwrap();
        assert!((a.r[0] - 7.0).abs() < 1e-12);
        let b = bruteforce_allocate(&problem(&[1.0], &[xi(0.5, 1.0, 0.1)], 7.0), 0.3).unwrap();
        assert_eq!(b.r, vec![7.0]);
    }

    #[test]
    fn symmetric_split() {
        let p = xi(0.3, 2.0, 0.1);
        let a = allocate(&problem(&[2.0, 2.0], &[p, p], 5.0)).unwrap();
        assert!((a.r[0] - 2.5).abs() < 1e-12 && (a.r[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn sqrt_ratio_instance() {
        // sqrt(1/lambda) + sqrt(4/lambda) = 3  =>  lambda = 1, r = (1, 2).
        let prob = problem(&[1.0, 1.0], &[xi(0.0, 1.0, 0.0), xi(0.0, 4.0, 0.0)], 3.0);
        let a = allocate(&prob).unwrap();
        assert!((a.r[0] - 1.0).abs() < 1e-12 && (a.r[1] - 2.0).abs() < 1e-12, "{a:?}");
        assert!((a.lambda - 1.0).abs() < 1e-12);
        let oracle = bruteforce_allocate(&prob, 0.001).unwrap();
        assert!((prob.objective(&a.r) - prob.objective(&oracle.r)).abs() < 1e-3);
    }

    #[test]
    fn zero_weight_model_gets_nothing() {
        let prob = problem(&[1.0, 0.0], &[xi(0.1, 1.0, 0.0), xi(0.1, 5.0, 0.0)], 2.0);
        let a = allocate(&prob).unwrap();
        assert_eq!(a.r[1], 0.0);
        assert!((a.r[0] - 2.0).abs() < 1e-12);
        let b = bruteforce_allocate(&prob, 0.1).unwrap();
        assert!((b.r[0] - 2.0).abs() < 1e-12 && b.r[1].abs() < 1e-12, "{b:?}");
    }

    #[test]
    fn weak_model_clamped_to_zero() {
        // Model 2's marginal at r = 0 is 0.01 / 1 = 0.01, below model 1's at r = R.
        let prob = problem(&[1.0, 1.0], &[xi(0.0, 1.0, 0.0), xi(1.0, 0.01, 0.0)], 1.0);
        let a = allocate(&prob).unwrap();
        assert_eq!(a.r[1], 0.0);
        assert!((a.total() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn construction_errors() {
        let p = xi(0.1, 1.0, 0.0);
        assert_eq!(AllocationProblem::new(vec![1.0], vec![p], 0.0), Err(AllocError::Infeasible(0.0)));
        assert_eq!(
            AllocationProblem::new(compute_weights::<u8>(&[vec![], vec![], vec![]]), vec![p; 3], 1.0),
            Err(AllocError::NoLoad)
        );
        assert!(matches!(
            AllocationProblem::new(vec![1.0, 1.0], vec![p], 1.0),
            Err(AllocError::Invalid(_))
        ));
        let five = problem(&[1.0; 5], &[p; 5], 1.0);
        assert_eq!(bruteforce_allocate(&five, 0.1), Err(AllocError::Scale(5)));
    }

    #[test]
    fn weights_are_group_sizes() {
        let groups = vec![vec![1, 2, 3], vec![], vec![4, 5, 6, 7, 8]];
        assert_eq!(compute_weights(&groups), vec![3.0, 0.0, 5.0]);
        let p = xi(0.2, 1.0, 0.05);
        let equal = compute_weights(&[vec![0; 10], vec![0; 10], vec![0; 10]]);
        let a = allocate(&problem(&equal, &[p; 3], 3.0)).unwrap();
        for r in &a.r {
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    fn params_strategy() -> impl Strategy<Value = LatencyParams> {
        (0.0..2.0f64, 0.05..5.0f64, 0.0..0.5f64).prop_map(|(a, b, c)| xi(a, b, c))
    }

    proptest! {
        #[test]
        fn budget_and_stationarity(
            params in prop::collection::vec(params_strategy(), 1..6),
            seed_w in prop::collection::vec(0.0..10.0f64, 6),
            total in 0.01..50.0f64,
        ) {
            let m = params.len();
            let mut w: Vec<f64> = seed_w[..m].to_vec();
            w[0] += 0.5;
            let prob = AllocationProblem::new(w, params, total).unwrap();
            let a = allocate(&prob).unwrap();
            prop_assert!((a.total() - total).abs() <= 1e-9 * total);
            prop_assert!(a.r.iter().all(|&r| r >= 0.0));
            let marginals: Vec<f64> = (0..m)
                .filter(|&k| a.r[k] > 0.0)
                .map(|k| prob.marginal(k, a.r[k]))
                .collect();
            let hi = marginals.iter().cloned().fold(f64::MIN, f64::max);
            let lo = marginals.iter().cloned().fold(f64::MAX, f64::min);
            prop_assert!((hi - lo) / hi <= 1e-6);
            // Clamped models cannot gain from their first unit of resource.
            for k in 0..m {
                if a.r[k] == 0.0 && prob.weights()[k] > 0.0 {
                    prop_assert!(prob.marginal(k, 0.0) <= hi * (1.0 + 1e-9));
                }
            }
        }

        #[test]
        fn more_weight_never_less_resource(
            params in prop::collection::vec(params_strategy(), 2..5),
            seed_w in prop::collection::vec(0.1..10.0f64, 5),
            bump in 0.01..10.0f64,
            k in 0usize..5,
            total in 0.1..20.0f64,
        ) {
            let m = params.len();
            let k = k % m;
            let w: Vec<f64> = seed_w[..m].to_vec();
            let base = allocate(&AllocationProblem::new(w.clone(), params.clone(), total).unwrap()).unwrap();
            let mut w2 = w;
            w2[k] += bump;
            let bumped = allocate(&AllocationProblem::new(w2, params, total).unwrap()).unwrap();
            prop_assert!(bumped.r[k] >= base.r[k] - 1e-9 * total);
        }
    }
}
