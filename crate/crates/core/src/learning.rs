//! Decentralized parameter-tuning loops wrapped around repeated clearings:
//! shift the linear coefficients b of prosumers whose trades fail until every
//! trade succeeds, and scale the quadratic coefficients a to boost traded
//! volumes.

use crate::admm::{run, AdmmConfig, AdmmError, MarketSolution};
use crate::market::{Market, MarketError, ProsumerId, Role, TRADE_SUCCESS_THRESHOLD_KW};
use crate::oracle::{exact_clearing, OracleError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("per-round b step must be > 0 and finite, got {0}")]
    NonPositiveStep(f64),
    #[error("a-scaling factor must be > 1 and finite, got {0}")]
    ScalingNotAboveOne(f64),
    #[error("round budget must be at least 1")]
    ZeroRoundBudget,
    #[error("success threshold must be > 0 and finite, got {0}")]
    NonPositiveThreshold(f64),
    #[error(
        "not all trades succeed after {rounds} adjustment rounds; \
         best round had {successes} of {prosumers} prosumers trading"
    )]
    NotConvergedInRounds {
        rounds: usize,
        successes: usize,
        prosumers: usize,
        best: Box<RoundRecord>,
    },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Market(#[from] MarketError),
}

/// Tuning-loop parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningPolicy {
    /// Per-round shift applied to a failed prosumer's b (currency/kW).
    pub delta_b: f64,
    /// Factor by which opted-in prosumers' a coefficients shrink (a ← a/γ).
    pub gamma: f64,
    /// Adjustment rounds allowed before giving up.
    pub max_rounds: usize,
    /// Smallest |total| that counts as a successful trade (kW).
    pub success_threshold: f64,
}

impl Default for LearningPolicy {
    fn default() -> Self {
        Self {
            delta_b: 0.5,
            gamma: 2.0,
            max_rounds: 8,
            success_threshold: TRADE_SUCCESS_THRESHOLD_KW,
        }
    }
}

impl LearningPolicy {
    pub fn validate(&self) -> Result<(), LearningError> {
        if !(self.delta_b > 0.0 && self.delta_b.is_finite()) {
            return Err(LearningError::NonPositiveStep(self.delta_b));
        }
        if !(self.gamma > 1.0 && self.gamma.is_finite()) {
            return Err(LearningError::ScalingNotAboveOne(self.gamma));
        }
        if self.max_rounds == 0 {
            return Err(LearningError::ZeroRoundBudget);
        }
        if !(self.success_threshold > 0.0 && self.success_threshold.is_finite()) {
            return Err(LearningError::NonPositiveThreshold(self.success_threshold));
        }
        Ok(())
    }
}

/// How the loops clear the market on each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clearing {
    /// Analytic clearing per round (closed-form uniform price for unweighted
    /// markets, active-set search for weighted ones), plus one confirmation
    /// solve with the iterative engine at the end.
    #[default]
    Oracle,
    /// The iterative engine for every clearing.
    Admm,
}

/// Which adjustment loop to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningGoal {
    /// Nudge b until every prosumer trades ([`learn_successful_trading`]).
    SuccessfulTrading,
    /// Scale a down to deepen traded volumes ([`learn_boost_volume`]).
    BoostVolume,
}

/// One clearing in an adjustment loop: the parameters in force and the
/// resulting totals and success flags, all in dense prosumer order.
/// Round 0 is the clearing of the unmodified market.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub totals: Vec<f64>,
    pub success: Vec<bool>,
}

impl RoundRecord {
    pub fn successes(&self) -> usize {
        self.success.iter().filter(|&&s| s).count()
    }
}

/// Result of the successful-trading loop.
#[derive(Debug)]
pub struct SuccessfulTradingOutcome {
    /// Market with the adjusted b coefficients.
    pub market: Market,
    /// Adjustment rounds applied (0 when the initial clearing already
    /// succeeds everywhere).
    pub rounds: usize,
    /// One record per clearing: rounds + 1 entries.
    pub history: Vec<RoundRecord>,
    /// Confirmation solve with the iterative engine (oracle clearing only).
    pub confirmation: Option<MarketSolution>,
}

/// Result of the volume-boost pass.
#[derive(Debug)]
pub struct VolumeBoostOutcome {
    /// Market with the scaled a coefficients.
    pub market: Market,
    pub totals_before: Vec<f64>,
    pub totals_after: Vec<f64>,
    /// Uniform market price before/after, when the clearing produces a
    /// single price cluster (analytic clearing of a connected unweighted
    /// market); absent otherwise.
    pub price_before: Option<f64>,
    pub price_after: Option<f64>,
    /// Confirmation solve with the iterative engine (oracle clearing only).
    pub confirmation: Option<MarketSolution>,
}

/// Totals (and the uniform price, when one exists) from a single clearing.
fn clear_totals(
    market: &Market,
    config: &AdmmConfig,
    clearing: Clearing,
) -> Result<(Vec<f64>, Option<f64>), LearningError> {
    match clearing {
        Clearing::Oracle => {
            let solution = exact_clearing(market)?;
            let price = match solution.clusters.as_slice() {
                [only] => only.price,
                _ => None,
            };
            Ok((solution.totals, price))
        }
        Clearing::Admm => {
            let (solution, _) = run(market, config, None)?;
            Ok((solution.totals, None))
        }
    }
}

fn record(round: usize, market: &Market, totals: Vec<f64>, threshold: f64) -> RoundRecord {
    let success = totals.iter().map(|t| t.abs() >= threshold).collect();
    RoundRecord {
        round,
        b: market.prosumers().iter().map(|p| p.b()).collect(),
        a: market.prosumers().iter().map(|p| p.a()).collect(),
        totals,
        success,
    }
}

/// Repeatedly clears the market and shifts b for every prosumer whose total
/// stays below the success threshold — buyers down, sellers up — until all
/// prosumers trade or the round budget runs out. Parameters of succeeding
/// prosumers are never touched, so per-prosumer b trajectories are monotone.
pub fn learn_successful_trading(
    market: &Market,
    config: &AdmmConfig,
    policy: &LearningPolicy,
    clearing: Clearing,
) -> Result<SuccessfulTradingOutcome, LearningError> {
    policy.validate()?;
    let mut current: Market = market.clone();
    let mut history: Vec<RoundRecord> = Vec::with_capacity(policy.max_rounds + 1);

    for round in 0..=policy.max_rounds {
        let (totals, _) = clear_totals(&current, config, clearing)?;
        history.push(record(round, &current, totals, policy.success_threshold));
        let last = history.last().expect("just pushed");

        if last.success.iter().all(|&s| s) {
            let confirmation = match clearing {
                Clearing::Oracle => Some(run(&current, config, None)?.0),
                Clearing::Admm => None,
            };
            return Ok(SuccessfulTradingOutcome {
                market: current,
                rounds: round,
                history,
                confirmation,
            });
        }
        if round == policy.max_rounds {
            break;
        }

        let failed = last.success.clone();
        let delta = policy.delta_b;
        let mut idx = 0;
        current = current.with_updated_prosumers(|p| {
            let succeeded = failed[idx];
            idx += 1;
            if succeeded {
                p.clone()
            } else {
                match p.role() {
                    Role::Buyer => p.with_b(p.b() - delta),
                    Role::Seller => p.with_b(p.b() + delta),
                }
            }
        })?;
    }

    let best = history
        .iter()
        .rev()
        .max_by_key(|r| r.successes())
        .expect("history has at least the initial clearing")
        .clone();
    Err(LearningError::NotConvergedInRounds {
        rounds: policy.max_rounds,
        successes: best.successes(),
        prosumers: market.n(),
        best: Box::new(best),
    })
}

/// Scales a ← a/γ for every opted-in prosumer (all prosumers when
/// `participants` is None) and re-clears, reporting totals and prices before
/// and after. When every prosumer clears strictly inside its bounds in both
/// clearings and everyone opted in, the scaled responses can only grow; that
/// regime is checked in debug builds.
pub fn learn_boost_volume(
    market: &Market,
    config: &AdmmConfig,
    policy: &LearningPolicy,
    clearing: Clearing,
    participants: Option<&[ProsumerId]>,
) -> Result<VolumeBoostOutcome, LearningError> {
    policy.validate()?;
    if let Some(ids) = participants {
        for &pid in ids {
            if market.dense_index(pid).is_none() {
                return Err(LearningError::Market(MarketError::UnknownProsumer(pid)));
            }
        }
    }
    let opted_in = |pid: ProsumerId| participants.is_none_or(|ids| ids.contains(&pid));

    let (totals_before, price_before) = clear_totals(market, config, clearing)?;
    let scaled = market.with_updated_prosumers(|p| {
        if opted_in(p.id()) {
            p.with_a(p.a() / policy.gamma).expect("scaling preserves positivity")
        } else {
            p.clone()
        }
    })?;
    let (totals_after, price_after) = clear_totals(&scaled, config, clearing)?;

    if cfg!(debug_assertions) && participants.is_none() {
        let all_interior = market.prosumers().iter().enumerate().all(|(i, p)| {
            let margin = 1e-9 * (1.0 + p.p_tr_min().abs() + p.p_tr_max().abs());
            let interior = |t: f64| t > p.p_tr_min() + margin && t < p.p_tr_max() - margin;
            interior(totals_before[i]) && interior(totals_after[i])
        });
        if all_interior {
            for (i, (before, after)) in totals_before.iter().zip(&totals_after).enumerate() {
                debug_assert!(
                    after.abs() >= before.abs() - 1e-9 * (1.0 + before.abs()),
                    "prosumer index {i}: |total| fell from {before} to {after} \
                     with every prosumer interior"
                );
            }
        }
    }

    let confirmation = match clearing {
        Clearing::Oracle => Some(run(&scaled, config, None)?.0),
        Clearing::Admm => None,
    };
    Ok(VolumeBoostOutcome {
        market: scaled,
        totals_before,
        totals_after,
        price_before,
        price_after,
        confirmation,
    })
}
