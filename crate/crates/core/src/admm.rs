//! Parallel proximal consensus engine for the bilateral market.
//!
//! Each iteration runs three conceptually parallel updates from the previous
//! iterate: a per-prosumer projection of the consensus variable, a closed-form
//! trade/price update through one symmetric positive-definite linear solve on
//! the trading graph, and a relaxed scaled-dual step. Termination is by the
//! standard primal/dual residual test.

use crate::market::{Market, PairVector, Role, TRADE_SUCCESS_THRESHOLD_KW};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Engine parameters. The proximal weights must dominate the penalty as
/// required by [`AdmmConfig::validate`] for convergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    /// Consensus penalty ρ.
    pub rho: f64,
    /// Proximal weight φ on the trade update.
    pub phi: f64,
    /// Proximal weight ψ on the consensus update.
    pub psi: f64,
    /// Dual step size κ.
    pub kappa: f64,
    /// Convergence ratio μ₁ tied to φ.
    pub mu1: f64,
    /// Convergence ratio μ₂ tied to ψ.
    pub mu2: f64,
    /// Absolute residual tolerance.
    pub eps_abs: f64,
    /// Relative residual tolerance.
    pub eps_rel: f64,
    /// Iteration budget for one `run` call.
    pub max_iter: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 0.02,
            phi: 0.021,
            psi: 0.021,
            kappa: 0.99,
            mu1: 0.5,
            mu2: 0.5,
            eps_abs: 1e-4,
            eps_rel: 1e-3,
            max_iter: 20_000,
        }
    }
}

impl AdmmConfig {
    /// Checks the convergence conditions: ρ, μ₁, μ₂, κ all positive,
    /// μ₁ + μ₂ < 2 − κ, φ > ρ(1/μ₁ − 1), and ψ > ρ(1/μ₂ − 1).
    pub fn validate(&self) -> Result<(), AdmmError> {
        let fields = [
            ("rho", self.rho),
            ("phi", self.phi),
            ("psi", self.psi),
            ("kappa", self.kappa),
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("eps_abs", self.eps_abs),
            ("eps_rel", self.eps_rel),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(AdmmError::NonFiniteConfig { name, value });
            }
        }
        if self.rho <= 0.0 {
            return Err(AdmmError::NonPositivePenalty(self.rho));
        }
        if self.mu1 <= 0.0 || self.mu2 <= 0.0 {
            return Err(AdmmError::NonPositiveConvergenceRatio(self.mu1, self.mu2));
        }
        if self.kappa <= 0.0 {
            return Err(AdmmError::NonPositiveDualStep(self.kappa));
        }
        let ratio_limit = 2.0 - self.kappa;
        if self.mu1 + self.mu2 >= ratio_limit {
            return Err(AdmmError::ConvergenceRatiosTooLarge {
                sum: self.mu1 + self.mu2,
                limit: ratio_limit,
            });
        }
        let phi_min = self.rho * (1.0 / self.mu1 - 1.0);
        if self.phi <= phi_min {
            return Err(AdmmError::ProximalWeightTooSmall {
                name: "phi",
                value: self.phi,
                min: phi_min,
            });
        }
        let psi_min = self.rho * (1.0 / self.mu2 - 1.0);
        if self.psi <= psi_min {
            return Err(AdmmError::ProximalWeightTooSmall {
                name: "psi",
                value: self.psi,
                min: psi_min,
            });
        }
        if self.eps_abs <= 0.0 {
            return Err(AdmmError::NonPositiveTolerance {
                name: "eps_abs",
                value: self.eps_abs,
            });
        }
        if self.eps_rel < 0.0 {
            return Err(AdmmError::NonPositiveTolerance {
                name: "eps_rel",
                value: self.eps_rel,
            });
        }
        if self.max_iter == 0 {
            return Err(AdmmError::ZeroIterationBudget);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("config field {name} must be finite, got {value}")]
    NonFiniteConfig { name: &'static str, value: f64 },
    #[error("penalty rho must be positive, got {0}")]
    NonPositivePenalty(f64),
    #[error("convergence ratios mu1, mu2 must be positive, got ({0}, {1})")]
    NonPositiveConvergenceRatio(f64, f64),
    #[error("dual step kappa must be positive, got {0}")]
    NonPositiveDualStep(f64),
    #[error("mu1 + mu2 = {sum} must stay strictly below 2 - kappa = {limit}")]
    ConvergenceRatiosTooLarge { sum: f64, limit: f64 },
    #[error("proximal weight {name} = {value} must strictly exceed rho·(1/mu - 1) = {min}")]
    ProximalWeightTooSmall { name: &'static str, value: f64, min: f64 },
    #[error("tolerance {name} must be positive, got {value}")]
    NonPositiveTolerance { name: &'static str, value: f64 },
    #[error("max_iter must be at least 1")]
    ZeroIterationBudget,
    #[error("iterate index set does not match the market's directed pairs")]
    StateMismatch,
    #[error("non-finite value encountered in the iterates")]
    NonFiniteInput,
    #[error("no convergence within {iterations} iterations")]
    MaxIterExceeded {
        iterations: usize,
        solution: Box<MarketSolution>,
    },
}

/// Iterate triple plus bookkeeping; pass a previous run's state back in to
/// warm-start the next solve.
#[derive(Debug, Clone)]
pub struct AdmmState {
    /// Trade iterate P.
    pub p: PairVector,
    /// Consensus iterate X.
    pub x: PairVector,
    /// Scaled dual iterate u.
    pub u: PairVector,
    /// Completed iterations.
    pub iter: usize,
    /// Residual history, one record per completed iteration.
    pub trace: Vec<TraceRecord>,
}

impl AdmmState {
    pub fn zeros(market: &Market) -> Self {
        Self {
            p: PairVector::zeros(market.pair_index().clone()),
            x: PairVector::zeros(market.pair_index().clone()),
            u: PairVector::zeros(market.pair_index().clone()),
            iter: 0,
            trace: Vec::new(),
        }
    }

    fn matches(&self, market: &Market) -> bool {
        let want = market.pair_index().ids();
        self.p.index().ids() == want && self.x.index().ids() == want && self.u.index().ids() == want
    }

    fn is_finite(&self) -> bool {
        [&self.p, &self.x, &self.u]
            .iter()
            .all(|v| v.values().iter().all(|x| x.is_finite()))
    }
}

/// One residual measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub eps_pri: f64,
    pub eps_dual: f64,
}

/// Verdict of the residual test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    Converged,
    Continue,
}

/// Cleared market: per-pair powers and prices, per-prosumer totals and
/// success flags (|total| at or above the trade threshold), and the
/// residual trace of the solve.
#[derive(Debug, Clone)]
pub struct MarketSolution {
    pub pair_powers: PairVector,
    pub pair_prices: PairVector,
    /// Net traded power per prosumer, in dense prosumer order.
    pub totals: Vec<f64>,
    pub success: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
}

/// Projects `y` in place onto the set {x : every component in the role's
/// orthant, lo ≤ Σx ≤ hi}. The solution is the orthant clipping of a
/// uniformly shifted y; the shift ν is zero when the plain clipping already
/// lands inside the sum interval, and is otherwise found by bisection on the
/// monotone shifted-sum function.
pub fn project_signed_sum_box(y: &mut [f64], role: Role, lo: f64, hi: f64) {
    debug_assert!(lo <= hi, "empty projection interval [{lo}, {hi}]");
    let clip = |v: f64| match role {
        Role::Buyer => v.max(0.0),
        Role::Seller => v.min(0.0),
    };
    if y.is_empty() {
        return;
    }
    let sum_at = |shift: f64, y: &[f64]| -> f64 { y.iter().map(|&v| clip(v - shift)).sum() };
    let plain = sum_at(0.0, y);
    if plain >= lo && plain <= hi {
        for v in y.iter_mut() {
            *v = clip(*v);
        }
        return;
    }
    let target = plain.clamp(lo, hi);
    let bound_mag = lo.abs().max(hi.abs());
    let y_min = y.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut nu_lo = y_min - bound_mag - 1.0;
    let mut nu_hi = y_max + bound_mag + 1.0;
    for _ in 0..200 {
        if nu_hi - nu_lo < 1e-12 {
            break;
        }
        let mid = 0.5 * (nu_lo + nu_hi);
        if mid <= nu_lo || mid >= nu_hi {
            break;
        }
        if sum_at(mid, y) > target {
            nu_lo = mid;
        } else {
            nu_hi = mid;
        }
    }
    let nu = 0.5 * (nu_lo + nu_hi);
    for v in y.iter_mut() {
        *v = clip(*v - nu);
    }
}

/// Half-open range of directed-pair positions owned by each dense prosumer
/// index. Pairs are sorted by owner, so each prosumer's outgoing pairs are
/// contiguous.
fn owner_offsets(market: &Market) -> Vec<usize> {
    let mut offsets = vec![0usize; market.n() + 1];
    for &(i, _) in market.pair_index().dense() {
        offsets[i + 1] += 1;
    }
    for i in 0..market.n() {
        offsets[i + 1] += offsets[i];
    }
    offsets
}

/// Consensus update: per prosumer, the proximal blend
/// y = (ρ(P + u) + ψX)/(ρ + ψ) projected onto the prosumer's sign and
/// total-power constraints.
pub fn x_update(state: &AdmmState, config: &AdmmConfig, market: &Market) -> PairVector {
    let scale = config.rho + config.psi;
    let mut values: Vec<f64> = (0..state.p.len())
        .map(|k| {
            (config.rho * (state.p.values()[k] + state.u.values()[k])
                + config.psi * state.x.values()[k])
                / scale
        })
        .collect();
    let offsets = owner_offsets(market);
    for (i, p) in market.prosumers().iter().enumerate() {
        project_signed_sum_box(
            &mut values[offsets[i]..offsets[i + 1]],
            p.role(),
            p.p_tr_min(),
            p.p_tr_max(),
        );
    }
    PairVector::from_values(market.pair_index().clone(), values)
}

/// Per-pair price-formation term v_ij = b_i + d_ij + ρ(−X_ij + u_ij) − φP_ij,
/// computed entirely from the previous iterate.
pub fn compute_v(state: &AdmmState, config: &AdmmConfig, market: &Market) -> PairVector {
    let pros = market.prosumers();
    let values: Vec<f64> = market
        .pair_index()
        .dense()
        .iter()
        .enumerate()
        .map(|(k, &(i, _))| {
            pros[i].b() + market.weight_at(k)
                + config.rho * (-state.x.values()[k] + state.u.values()[k])
                - config.phi * state.p.values()[k]
        })
        .collect();
    PairVector::from_values(market.pair_index().clone(), values)
}

/// Assembles the graph-coupled totals system L + Γ with
/// Γ = (ρ+φ)·diag(1/aᵢ). Symmetric positive definite and strictly
/// diagonally dominant for any valid config.
fn totals_matrix(market: &Market, config: &AdmmConfig) -> DMatrix<f64> {
    let mut m = market.algebra().laplacian_f64();
    for (i, p) in market.prosumers().iter().enumerate() {
        m[(i, i)] += (config.rho + config.phi) / p.a();
        debug_assert!(
            m[(i, i)] > market.degree(i) as f64,
            "totals system lost strict diagonal dominance at row {i}"
        );
    }
    m
}

/// Right-hand side of the totals system: incoming minus outgoing v sums per
/// prosumer, in fixed pair-index order.
fn totals_rhs(v: &PairVector, market: &Market) -> DVector<f64> {
    let mut rhs = DVector::zeros(market.n());
    for (k, &(i, _)) in market.pair_index().dense().iter().enumerate() {
        let incoming = v.values()[market.pair_index().reverse_of(k)];
        let outgoing = v.values()[k];
        rhs[i] += incoming - outgoing;
    }
    rhs
}

/// Solves (L + Γ)q = v̂ − ṽ for the scaled totals q_i = 2aᵢ·P_{i,tr}, where
/// v̂ᵢ sums the incoming and ṽᵢ the outgoing v values of prosumer i.
pub fn solve_totals(v: &PairVector, market: &Market, config: &AdmmConfig) -> Vec<f64> {
    let chol = Cholesky::new(totals_matrix(market, config))
        .expect("totals system is positive definite by construction");
    chol.solve(&totals_rhs(v, market)).data.into()
}

/// Closed-form trade and price update from the price-formation terms and the
/// scaled totals: P_ij = (v_ji + q_j − v_ij − q_i)/(2(ρ+φ)) and
/// λ_ij = (v_ji + q_j + v_ij + q_i)/2. Both sides of a pair are computed
/// from the same two sums, making P exactly antisymmetric and λ exactly
/// symmetric in floating point.
pub fn p_update(
    v: &PairVector,
    q: &[f64],
    config: &AdmmConfig,
    market: &Market,
) -> (PairVector, PairVector) {
    let idx = market.pair_index();
    let mut powers = vec![0.0; idx.len()];
    let mut prices = vec![0.0; idx.len()];
    let denom = 2.0 * (config.rho + config.phi);
    for (k, &(i, j)) in idx.dense().iter().enumerate() {
        let s_own = v.values()[k] + q[i];
        let s_other = v.values()[idx.reverse_of(k)] + q[j];
        powers[k] = (s_other - s_own) / denom;
        prices[k] = 0.5 * (s_other + s_own);
    }
    (
        PairVector::from_values(idx.clone(), powers),
        PairVector::from_values(idx.clone(), prices),
    )
}

/// Relaxed scaled-dual step u + κρ(P − X).
pub fn u_update(
    state: &AdmmState,
    config: &AdmmConfig,
    p_next: &PairVector,
    x_next: &PairVector,
) -> PairVector {
    let values: Vec<f64> = (0..state.u.len())
        .map(|k| {
            state.u.values()[k]
                + config.kappa * config.rho * (p_next.values()[k] - x_next.values()[k])
        })
        .collect();
    PairVector::from_values(state.u.index().clone(), values)
}

/// Residual test on the current state: primal residual ‖P − X‖₂ against
/// √(n+m)·ε_abs + ε_rel·max(‖P‖, ‖X‖), and dual residual ‖−ρ(X − X_prev)‖₂
/// against √(n+m)·ε_abs + ε_rel·‖ρu‖₂.
pub fn check_convergence(
    state: &AdmmState,
    config: &AdmmConfig,
    market: &Market,
    x_prev: &PairVector,
) -> (Convergence, TraceRecord) {
    let m = state.p.len();
    let mut r2 = 0.0;
    let mut s2 = 0.0;
    let mut p2 = 0.0;
    let mut x2 = 0.0;
    let mut ru2 = 0.0;
    for k in 0..m {
        let (p, x, u) = (state.p.values()[k], state.x.values()[k], state.u.values()[k]);
        r2 += (p - x) * (p - x);
        let dx = config.rho * (x - x_prev.values()[k]);
        s2 += dx * dx;
        p2 += p * p;
        x2 += x * x;
        let ru = config.rho * u;
        ru2 += ru * ru;
    }
    let dim = ((market.n() + m) as f64).sqrt();
    let record = TraceRecord {
        iter: state.iter,
        primal_residual: r2.sqrt(),
        dual_residual: s2.sqrt(),
        eps_pri: dim * config.eps_abs + config.eps_rel * p2.sqrt().max(x2.sqrt()),
        eps_dual: dim * config.eps_abs + config.eps_rel * ru2.sqrt(),
    };
    let verdict = if record.primal_residual <= record.eps_pri
        && record.dual_residual <= record.eps_dual
    {
        Convergence::Converged
    } else {
        Convergence::Continue
    };
    (verdict, record)
}

/// Runs the engine to convergence or the iteration budget. All iterates
/// start at zero unless `initial` supplies a warm start; `initial`'s
/// iteration counter and trace are extended and returned as the final state
/// (reusable as the next warm start), while the returned solution reports
/// only this call's iterations and trace. The budget also applies to this
/// call's own iterations.
pub fn run(
    market: &Market,
    config: &AdmmConfig,
    initial: Option<AdmmState>,
) -> Result<(MarketSolution, AdmmState), AdmmError> {
    config.validate()?;
    let mut state = initial.unwrap_or_else(|| AdmmState::zeros(market));
    if !state.matches(market) {
        return Err(AdmmError::StateMismatch);
    }
    if !state.is_finite() {
        return Err(AdmmError::NonFiniteInput);
    }
    let start_iter = state.iter;
    let start_trace = state.trace.len();

    let chol = Cholesky::new(totals_matrix(market, config))
        .expect("totals system is positive definite by construction");
    let mut prices = PairVector::zeros(market.pair_index().clone());

    for _ in 0..config.max_iter {
        let x_next = x_update(&state, config, market);
        let v = compute_v(&state, config, market);
        let q: Vec<f64> = chol.solve(&totals_rhs(&v, market)).data.into();
        let (p_next, lam) = p_update(&v, &q, config, market);
        let u_next = u_update(&state, config, &p_next, &x_next);

        let x_prev = std::mem::replace(&mut state.x, x_next);
        state.p = p_next;
        state.u = u_next;
        state.iter += 1;
        prices = lam;

        let (verdict, record) = check_convergence(&state, config, market, &x_prev);
        if !record.primal_residual.is_finite() || !record.dual_residual.is_finite() {
            return Err(AdmmError::NonFiniteInput);
        }
        state.trace.push(record);
        if verdict == Convergence::Converged {
            let solution = solution_from(market, &state, prices, true, start_iter, start_trace);
            return Ok((solution, state));
        }
    }
    Err(AdmmError::MaxIterExceeded {
        iterations: state.iter - start_iter,
        solution: Box::new(solution_from(
            market,
            &state,
            prices,
            false,
            start_iter,
            start_trace,
        )),
    })
}

fn solution_from(
    market: &Market,
    state: &AdmmState,
    prices: PairVector,
    converged: bool,
    start_iter: usize,
    start_trace: usize,
) -> MarketSolution {
    let totals = market.totals(&state.p);
    let success = totals
        .iter()
        .map(|t| t.abs() >= TRADE_SUCCESS_THRESHOLD_KW)
        .collect();
    MarketSolution {
        pair_powers: state.p.clone(),
        pair_prices: prices,
        totals,
        success,
        iterations: state.iter - start_iter,
        converged,
        trace: state.trace[start_trace..].to_vec(),
    }
}

/// Cached factorization of the totals system for repeated solves against
/// the same market and config (used by the decentralized harness to check
/// its iterative inner solver against the direct one).
pub struct TotalsSolver {
    chol: Cholesky<f64, Dyn>,
}

impl TotalsSolver {
    pub fn new(market: &Market, config: &AdmmConfig) -> Self {
        Self {
            chol: Cholesky::new(totals_matrix(market, config))
                .expect("totals system is positive definite by construction"),
        }
    }

    pub fn solve(&self, v: &PairVector, market: &Market) -> Vec<f64> {
        self.chol.solve(&totals_rhs(v, market)).data.into()
    }
}
