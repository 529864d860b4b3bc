//! Renyi-DP accounting for the (Poisson-subsampled) Gaussian mechanism.
//!
//! A run is described by its per-step RDP curve `alpha -> eps_RDP(alpha)`.
//! Curves compose additively over steps and are converted to `(eps, delta)`
//! with `eps = min_alpha [eps_RDP(alpha) + ln(1/delta) / (alpha - 1)]`.
//! Neighbouring datasets differ by adding or removing one record.

use serde::{Deserialize, Serialize};

/// Default failure probability.
pub const DEFAULT_DELTA: f64 = 1e-5;
/// Noise-multiplier bracket searched by [`calibrate_sigma`].
pub const SIGMA_BRACKET: (f64, f64) = (1e-2, 1e4);
/// Relative width of the acceptance band below the calibration target.
pub const CALIBRATION_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AccountantError {
    #[error("invalid accountant parameter: {0}")]
    InvalidParameter(String),
    #[error("RDP curve is empty")]
    EmptyCurve,
    #[error(
        "target epsilon {target} is not reachable for sigma in [{sigma_lo}, {sigma_hi}]: \
         epsilon ranges from {eps_at_hi} (sigma={sigma_hi}) to {eps_at_lo} (sigma={sigma_lo})"
    )]
    Infeasible {
        target: f64,
        sigma_lo: f64,
        sigma_hi: f64,
        eps_at_lo: f64,
        eps_at_hi: f64,
    },
}

pub type Result<T, E = AccountantError> = std::result::Result<T, E>;

fn invalid(msg: String) -> AccountantError {
    AccountantError::InvalidParameter(msg)
}

/// Orders used when none are given: integers 2..=256, the quarter orders
/// 1.25, 1.5, 1.75, 2.5, 3.5, and a 0.1-spaced grid on (1, 11).
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (2..=256).map(f64::from).collect();
    orders.extend([1.25, 1.5, 1.75, 2.5, 3.5]);
    orders.extend((11..110).filter(|i| i % 10 != 0).map(|i| f64::from(i) / 10.0));
    orders.sort_by(f64::total_cmp);
    orders.dedup();
    orders
}

fn check_sigma_alpha(sigma: f64, alpha: f64) -> Result<()> {
    if !(sigma >= 0.0) || sigma.is_infinite() {
        return Err(invalid(format!("noise multiplier must be finite and >= 0, got {sigma}")));
    }
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(invalid(format!("Renyi order must be finite and > 1, got {alpha}")));
    }
    Ok(())
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("sampling rate must lie in [0, 1], got {q}")));
    }
    Ok(())
}

/// RDP of the Gaussian mechanism with sensitivity 1: `alpha / (2 sigma^2)`.
///
/// `sigma == 0` yields `f64::INFINITY`.
pub fn rdp_gaussian(sigma: f64, alpha: f64) -> Result<f64> {
    check_sigma_alpha(sigma, alpha)?;
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(alpha / (2.0 * sigma * sigma))
}

/// `ln(e^a + e^b)` without overflow.
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^c - 1)` for `c > 0`.
fn log_expm1(c: f64) -> f64 {
    if c > 30.0 {
        c + (-(-c).exp()).ln_1p()
    } else {
        c.exp_m1().ln()
    }
}

/// Subsampled-Gaussian RDP at an integer order `alpha >= 2`.
///
/// With `A = sum_k C(a,k) (1-q)^(a-k) q^k exp((k^2-k)/(2 sigma^2))` and
/// `eps = ln(A) / (a-1)`. The k=0 and k=1 terms carry no privacy loss, so
/// `A - 1` is summed in log space over `k >= 2` with `exp(c) - 1` factors,
/// which keeps tiny and astronomically large values accurate alike.
fn rdp_subsampled_integer(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = f64::from(alpha);
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let two_var = 2.0 * sigma * sigma;
    let mut ln_binom = 0.0; // ln C(alpha, 0)
    let mut ln_excess = f64::NEG_INFINITY;
    for k in 1..=alpha {
        let kf = f64::from(k);
        ln_binom += ((a - kf + 1.0) / kf).ln();
        if k < 2 {
            continue;
        }
        let c = (kf * kf - kf) / two_var;
        let rest = if k == alpha { 0.0 } else { (a - kf) * ln_1mq };
        let term = ln_binom + kf * ln_q + rest + log_expm1(c);
        ln_excess = log_add_exp(ln_excess, term);
    }
    // ln A = ln(1 + exp(ln_excess))
    let ln_a = if ln_excess < 0.0 {
        ln_excess.exp().ln_1p()
    } else {
        ln_excess + (-ln_excess).exp().ln_1p()
    };
    ln_a / (a - 1.0)
}

/// RDP of the Poisson-subsampled Gaussian mechanism at order `alpha`.
///
/// Integer orders use the exact binomial expansion; fractional orders take
/// the larger value of the neighbouring integer orders (at least 2), which
/// upper-bounds the true value since RDP is non-decreasing in the order.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    check_q(q)?;
    check_sigma_alpha(sigma, alpha)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return rdp_gaussian(sigma, alpha);
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    let eval = |order: f64| rdp_subsampled_integer(q, sigma, order as u32);
    if alpha.fract() == 0.0 {
        return Ok(eval(alpha));
    }
    let lo = alpha.floor().max(2.0);
    let hi = alpha.ceil().max(2.0);
    Ok(eval(lo).max(eval(hi)))
}

/// RDP values over a grid of orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    values: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if orders.len() != values.len() {
            return Err(invalid(format!(
                "{} orders but {} values",
                orders.len(),
                values.len()
            )));
        }
        if orders.iter().any(|&a| !(a > 1.0) || !a.is_finite()) {
            return Err(invalid("every order must be finite and > 1".into()));
        }
        if !orders.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid("orders must be strictly increasing".into()));
        }
        if values.iter().any(|&v| !(v >= 0.0)) {
            return Err(invalid("RDP values must be >= 0".into()));
        }
        Ok(Self { orders, values })
    }

    /// Plain Gaussian mechanism over `orders`.
    pub fn gaussian(sigma: f64, orders: &[f64]) -> Result<Self> {
        let values = orders
            .iter()
            .map(|&a| rdp_gaussian(sigma, a))
            .collect::<Result<_>>()?;
        Self::new(orders.to_vec(), values)
    }

    /// Poisson-subsampled Gaussian mechanism over `orders`.
    pub fn subsampled_gaussian(q: f64, sigma: f64, orders: &[f64]) -> Result<Self> {
        check_q(q)?;
        if q == 0.0 || q == 1.0 || sigma == 0.0 {
            let values = orders
                .iter()
                .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
                .collect::<Result<_>>()?;
            return Self::new(orders.to_vec(), values);
        }
        for &a in orders {
            check_sigma_alpha(sigma, a)?;
        }
        // Memoize integer orders; fractional ones reuse their neighbours.
        let max_order = orders.iter().fold(2.0f64, |m, &a| m.max(a.ceil())) as usize;
        let mut cache = vec![None; max_order + 1];
        let mut at = |k: usize| *cache[k].get_or_insert_with(|| rdp_subsampled_integer(q, sigma, k as u32));
        let values = orders
            .iter()
            .map(|&a| {
                if a.fract() == 0.0 {
                    at(a as usize)
                } else {
                    let lo = at((a.floor() as usize).max(2));
                    let hi = at((a.ceil() as usize).max(2));
                    lo.max(hi)
                }
            })
            .collect();
        Self::new(orders.to_vec(), values)
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// `steps`-fold composition: values scale linearly.
    pub fn compose(&self, steps: u64) -> RdpCurve {
        let t = steps as f64;
        RdpCurve {
            orders: self.orders.clone(),
            values: self
                .values
                .iter()
                .map(|&v| if steps == 0 { 0.0 } else { v * t })
                .collect(),
        }
    }

    /// Pointwise sum of two curves on the same order grid.
    pub fn combine(&self, other: &RdpCurve) -> Result<RdpCurve> {
        if self.orders != other.orders {
            return Err(invalid("curves use different order grids".into()));
        }
        Ok(RdpCurve {
            orders: self.orders.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        })
    }

    /// Convert to `(eps, best_order)` at failure probability `delta`.
    pub fn to_dp(&self, delta: f64) -> Result<(f64, f64)> {
        rdp_to_dp(self, delta)
    }
}

pub fn compose(curve: &RdpCurve, steps: u64) -> RdpCurve {
    curve.compose(steps)
}

/// `eps = min_alpha [eps_RDP(alpha) + ln(1/delta) / (alpha - 1)]` over the
/// curve's orders, together with the minimizing order.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    if curve.is_empty() {
        return Err(AccountantError::EmptyCurve);
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, curve.orders[0]);
    for (&a, &v) in curve.orders.iter().zip(&curve.values) {
        let eps = v + log_inv_delta / (a - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    Ok(best)
}

/// `(eps, best_order)` after `steps` subsampled-Gaussian steps.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64, orders: &[f64]) -> Result<(f64, f64)> {
    RdpCurve::subsampled_gaussian(q, sigma, orders)?
        .compose(steps)
        .to_dp(delta)
}

/// Smallest-found noise multiplier whose accounted epsilon after `steps`
/// lies in `[target (1 - 1e-3), target]`, by bisection on `ln(sigma)`.
pub fn calibrate_sigma(eps_target: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    calibrate_sigma_with_orders(eps_target, delta, q, steps, &default_orders())
}

pub fn calibrate_sigma_with_orders(
    eps_target: f64,
    delta: f64,
    q: f64,
    steps: u64,
    orders: &[f64],
) -> Result<f64> {
    if !(eps_target > 0.0) || !eps_target.is_finite() {
        return Err(invalid(format!("target epsilon must be finite and > 0, got {eps_target}")));
    }
    if steps == 0 {
        return Err(invalid("calibration needs at least one step".into()));
    }
    check_q(q)?;
    let eps = |sigma: f64| epsilon_for(q, sigma, steps, delta, orders).map(|(e, _)| e);
    let floor = eps_target * (1.0 - CALIBRATION_TOLERANCE);
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let (eps_lo, eps_hi) = (eps(lo)?, eps(hi)?);
    let infeasible = || AccountantError::Infeasible {
        target: eps_target,
        sigma_lo: SIGMA_BRACKET.0,
        sigma_hi: SIGMA_BRACKET.1,
        eps_at_lo: eps_lo,
        eps_at_hi: eps_hi,
    };
    if eps_hi > eps_target {
        return Err(infeasible());
    }
    if eps_lo <= eps_target {
        return if eps_lo >= floor { Ok(lo) } else { Err(infeasible()) };
    }
    if eps_hi >= floor {
        return Ok(hi);
    }
    // Invariant: eps(lo) > target >= eps(hi).
    loop {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            return Ok(hi);
        }
        let e = eps(mid)?;
        if e > eps_target {
            lo = mid;
        } else {
            hi = mid;
            if e >= floor {
                return Ok(hi);
            }
        }
    }
}

/// Full accounting configuration of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
    pub steps: u64,
    pub dataset_size: usize,
}

impl PrivacySpec {
    /// Validate ranges. Returns advisory warnings (currently: `delta >= 1/N`).
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.epsilon > 0.0) {
            return Err(invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        check_q(self.sampling_rate)?;
        check_sigma_alpha(self.noise_multiplier, 2.0)?;
        if self.steps == 0 || self.dataset_size == 0 {
            return Err(invalid("steps and dataset size must be positive".into()));
        }
        let mut warnings = Vec::new();
        if self.delta >= 1.0 / self.dataset_size as f64 {
            warnings.push(format!(
                "delta={} is not below 1/N = {} (N={})",
                self.delta,
                1.0 / self.dataset_size as f64,
                self.dataset_size
            ));
        }
        Ok(warnings)
    }

    /// Per-step RDP curve on the default order grid.
    pub fn step_curve(&self) -> Result<RdpCurve> {
        RdpCurve::subsampled_gaussian(self.sampling_rate, self.noise_multiplier, &default_orders())
    }

    /// Epsilon spent after `steps_so_far` steps (0 before the first step).
    pub fn epsilon_after(&self, steps_so_far: u64) -> Result<f64> {
        Ok(BudgetTracker::new(self)?.epsilon_at(steps_so_far))
    }
}

/// Cached per-step curve for cheap repeated budget queries.
#[derive(Debug, Clone)]
pub struct BudgetTracker {
    step_curve: RdpCurve,
    delta: f64,
}

impl BudgetTracker {
    pub fn new(spec: &PrivacySpec) -> Result<Self> {
        if !(spec.delta > 0.0 && spec.delta < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {}", spec.delta)));
        }
        Ok(Self {
            step_curve: spec.step_curve()?,
            delta: spec.delta,
        })
    }

    pub fn epsilon_at(&self, steps: u64) -> f64 {
        if steps == 0 {
            return 0.0;
        }
        self.step_curve
            .compose(steps)
            .to_dp(self.delta)
            .expect("non-empty curve, validated delta")
            .0
    }
}
