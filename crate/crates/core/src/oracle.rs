//! Exact clearing oracles.
//!
//! Four independent solvers for the bilateral-trade market, used as ground
//! truth for the iterative engine and by the learning loops:
//!
//! * [`theorem1_interior`] — closed-form uniform price ignoring all bounds.
//! * [`uniform_price_clearing`] — pool clearing with bounds, by bisection on
//!   the monotone aggregate response.
//! * [`clustered_clearing`] — exact bilateral clearing plus per-component
//!   uniform-price extraction (zero trade weights only).
//! * [`weighted_totals_system`] — totals under trade weights from the
//!   interior optimality system, solved per component by least squares.
//! * [`kkt_active_set_qp`] — exhaustive active-set solver for the bilateral
//!   problem with bounds and weights; exact reference for small instances.

use crate::market::{
    Market, MarketError, PairVector, Prosumer, ProsumerId, Role, TRADE_SUCCESS_THRESHOLD_KW,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Power-balance tolerance for clearing solutions (kW).
pub const EPS_BALANCE_KW: f64 = 1e-6;
/// Largest edge count accepted by the active-set enumeration oracle.
pub const MAX_KKT_EDGES: usize = 16;
/// Primal feasibility slack for the active-set oracle.
const PRIMAL_TOL: f64 = 1e-9;
/// Most-negative multiplier accepted as dual feasible.
const DUAL_TOL: f64 = -1e-9;
/// Least-squares residual factor above which the interior assumption of
/// [`weighted_totals_system`] is declared violated.
const LSQ_RESIDUAL_FACTOR: f64 = 1e-8;
/// Relative margin separating "strictly interior" from "at a bound".
const INTERIOR_MARGIN: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("clearing requires at least one prosumer")]
    EmptySet,
    #[error("pool clearing requires at least one buyer and one seller")]
    MissingRole,
    #[error("aggregate response never brackets zero (no market-clearing price exists)")]
    NoRoot,
    #[error("active-set oracle limited to {max} edges, got {edges}")]
    TooLarge { edges: usize, max: usize },
    #[error("no KKT point found by exhaustive enumeration (internal invariant violation)")]
    NoKktPoint,
    #[error(
        "interior assumption violated: optimality system is inconsistent \
         (least-squares residual {residual:.6})"
    )]
    InteriorAssumptionViolated {
        residual: f64,
        least_squares_totals: Vec<f64>,
    },
    #[error("clustered clearing requires all trade weights to be zero")]
    NonzeroWeights,
    #[error("realized prices are not uniform within component starting at prosumer {0}")]
    NonUniformClusterPrice(ProsumerId),
    #[error(transparent)]
    Market(#[from] MarketError),
}

/// How a prosumer's cleared total relates to its feasible interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Strictly inside the interval; marginal cost equals the price.
    Interior,
    /// Clamped at a nonzero lower bound.
    AtMin,
    /// Clamped at a nonzero upper bound.
    AtMax,
    /// Clamped at a zero bound — the prosumer left the market.
    Exited,
}

/// Uniform-price pool solution: one price, per-prosumer totals (in the order
/// of the input prosumer slice), and how each total sits in its interval.
#[derive(Debug, Clone)]
pub struct PoolSolution {
    pub price: f64,
    pub totals: Vec<f64>,
    pub binding: Vec<Binding>,
    /// True when no prosumer was strictly interior at the solution: the
    /// clearing price is then non-unique and the midpoint of the flat
    /// price interval is reported.
    pub degenerate: bool,
}

/// A connected component of the realized-trade graph with its uniform price
/// (`None` when the realized prices in the component are not uniform, which
/// happens only under nonzero trade weights).
#[derive(Debug, Clone)]
pub struct Cluster {
    pub members: Vec<ProsumerId>,
    pub price: Option<f64>,
}

/// Exact bilateral solution: powers and prices per directed pair, totals in
/// dense prosumer order, and the realized-trade clusters.
#[derive(Debug, Clone)]
pub struct P2PSolution {
    pub pair_powers: PairVector,
    pub pair_prices: PairVector,
    pub totals: Vec<f64>,
    pub clusters: Vec<Cluster>,
}

impl P2PSolution {
    /// Per-prosumer success flags (|total| at or above the trade threshold),
    /// in dense prosumer order.
    pub fn success_flags(&self) -> Vec<bool> {
        self.totals
            .iter()
            .map(|t| t.abs() >= TRADE_SUCCESS_THRESHOLD_KW)
            .collect()
    }
}

/// Closed-form uniform price and totals assuming every prosumer is interior
/// (bounds ignored entirely): the price is the 1/(2a)-weighted mean of the
/// marginal-cost intercepts b, and each total is (price − b_i)/(2a_i).
pub fn theorem1_interior(prosumers: &[Prosumer]) -> Result<PoolSolution, OracleError> {
    if prosumers.is_empty() {
        return Err(OracleError::EmptySet);
    }
    let weight_sum: f64 = prosumers.iter().map(|p| 1.0 / (2.0 * p.a())).sum();
    let weighted_b: f64 = prosumers.iter().map(|p| p.b() / (2.0 * p.a())).sum();
    let price = weighted_b / weight_sum;
    let totals: Vec<f64> = prosumers
        .iter()
        .map(|p| (price - p.b()) / (2.0 * p.a()))
        .collect();
    Ok(PoolSolution {
        price,
        totals,
        binding: vec![Binding::Interior; prosumers.len()],
        degenerate: false,
    })
}

/// Bounded per-prosumer response to a price: the interior response clamped
/// to the feasible interval.
fn response(p: &Prosumer, price: f64) -> f64 {
    ((price - p.b()) / (2.0 * p.a())).clamp(p.p_tr_min(), p.p_tr_max())
}

fn aggregate_response(prosumers: &[Prosumer], price: f64) -> f64 {
    prosumers.iter().map(|p| response(p, price)).sum()
}

fn classify(p: &Prosumer, total: f64) -> Binding {
    let margin = INTERIOR_MARGIN * (1.0 + p.p_tr_min().abs() + p.p_tr_max().abs());
    if total <= p.p_tr_min() + margin {
        if p.p_tr_min() == 0.0 {
            Binding::Exited
        } else {
            Binding::AtMin
        }
    } else if total >= p.p_tr_max() - margin {
        if p.p_tr_max() == 0.0 {
            Binding::Exited
        } else {
            Binding::AtMax
        }
    } else {
        Binding::Interior
    }
}

/// Uniform-price pool clearing with bounds: finds the price at which the
/// summed clamped responses balance to zero, by bracketing and bisection on
/// the monotone aggregate response, then polishing the root analytically on
/// the final linear segment. When no prosumer is strictly interior at the
/// root the balancing price is a whole interval; its midpoint is returned
/// and the solution is flagged degenerate.
pub fn uniform_price_clearing(prosumers: &[Prosumer]) -> Result<PoolSolution, OracleError> {
    if prosumers.is_empty() {
        return Err(OracleError::EmptySet);
    }
    let has_buyer = prosumers.iter().any(|p| p.role() == Role::Buyer);
    let has_seller = prosumers.iter().any(|p| p.role() == Role::Seller);
    if !has_buyer || !has_seller {
        return Err(OracleError::MissingRole);
    }

    // Bracket the root, doubling the interval width around its center until
    // the aggregate response changes sign.
    let b_min = prosumers.iter().map(|p| p.b()).fold(f64::INFINITY, f64::min);
    let b_max = prosumers.iter().map(|p| p.b()).fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (b_min - 1.0, b_max + 1.0);
    let mut doublings = 0;
    while !(aggregate_response(prosumers, lo) <= 0.0 && aggregate_response(prosumers, hi) >= 0.0) {
        if doublings >= 60 {
            return Err(OracleError::NoRoot);
        }
        let center = 0.5 * (lo + hi);
        let width = hi - lo;
        lo = center - width;
        hi = center + width;
        doublings += 1;
    }

    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if aggregate_response(prosumers, mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut price = 0.5 * (lo + hi);

    // The aggregate response is piecewise linear; on the segment containing
    // the bisection iterate the root has a closed form. Polish with it when
    // the interior set is nonempty and unchanged at the polished price.
    let interior_at = |lam: f64| -> Vec<usize> {
        prosumers
            .iter()
            .enumerate()
            .filter(|(_, p)| classify(p, response(p, lam)) == Binding::Interior)
            .map(|(i, _)| i)
            .collect()
    };
    let interior = interior_at(price);
    let mut degenerate = false;
    if interior.is_empty() {
        degenerate = true;
        price = degenerate_midpoint(prosumers, price);
    } else {
        let slope: f64 = interior.iter().map(|&i| 1.0 / (2.0 * prosumers[i].a())).sum();
        let interior_b: f64 = interior
            .iter()
            .map(|&i| prosumers[i].b() / (2.0 * prosumers[i].a()))
            .sum();
        let clamped: f64 = prosumers
            .iter()
            .enumerate()
            .filter(|(i, _)| !interior.contains(i))
            .map(|(_, p)| response(p, price))
            .sum();
        let polished = (interior_b - clamped) / slope;
        if aggregate_response(prosumers, polished).abs() <= EPS_BALANCE_KW
            && interior_at(polished) == interior
        {
            price = polished;
        }
    }

    let imbalance = aggregate_response(prosumers, price);
    if imbalance.abs() > EPS_BALANCE_KW {
        return Err(OracleError::NoRoot);
    }

    let totals: Vec<f64> = prosumers.iter().map(|p| response(p, price)).collect();
    let binding = prosumers
        .iter()
        .zip(&totals)
        .map(|(p, &t)| classify(p, t))
        .collect();
    Ok(PoolSolution { price, totals, binding, degenerate })
}

/// Midpoint of the flat zero interval of the aggregate response around a
/// root `near` at which no prosumer is interior. The interval's endpoints
/// are breakpoints of the piecewise-linear response.
fn degenerate_midpoint(prosumers: &[Prosumer], near: f64) -> f64 {
    let mut breakpoints: Vec<f64> = prosumers
        .iter()
        .flat_map(|p| {
            [
                p.b() + 2.0 * p.a() * p.p_tr_min(),
                p.b() + 2.0 * p.a() * p.p_tr_max(),
            ]
        })
        .collect();
    breakpoints.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let split = breakpoints.partition_point(|&bp| bp <= near);
    let mut left = near;
    for &bp in breakpoints[..split].iter().rev() {
        if aggregate_response(prosumers, bp).abs() <= EPS_BALANCE_KW {
            left = bp;
        } else {
            break;
        }
    }
    let mut right = near;
    for &bp in &breakpoints[split..] {
        if aggregate_response(prosumers, bp).abs() <= EPS_BALANCE_KW {
            right = bp;
        } else {
            break;
        }
    }
    0.5 * (left + right)
}

/// Exact bilateral clearing for zero-weight markets, reported per cluster:
/// solves the market with the active-set oracle, groups realized trades into
/// connected components, and extracts the one uniform price of each
/// component.
pub fn clustered_clearing(market: &Market) -> Result<P2PSolution, OracleError> {
    if market.has_weights() {
        return Err(OracleError::NonzeroWeights);
    }
    let solution = kkt_active_set_qp(market)?;
    if let Some(bad) = solution.clusters.iter().find(|c| c.price.is_none()) {
        return Err(OracleError::NonUniformClusterPrice(bad.members[0]));
    }
    Ok(solution)
}

/// Exact clearing with the solver that fits the market's structure: the
/// weighted active-set oracle when trade weights are present, per-cluster
/// uniform pricing otherwise. Both paths are desk-scale references (the
/// active-set search is exponential in the edge count); large instances
/// belong to the iterative engine.
pub fn exact_clearing(market: &Market) -> Result<P2PSolution, OracleError> {
    if market.has_weights() {
        kkt_active_set_qp(market)
    } else {
        clustered_clearing(market)
    }
}

/// Optimal totals under trade weights, assuming every prosumer is strictly
/// interior: along each edge the weighted marginal costs must match, giving
/// one linear equation per edge in w_i = 2a_i·P_{i,tr}, plus one power
/// balance row per connected component. The (generally overdetermined)
/// system is solved by least squares per component; an irreducibly large
/// residual means no interior optimum exists and the caller must fall back
/// to [`kkt_active_set_qp`].
pub fn weighted_totals_system(market: &Market) -> Result<Vec<f64>, OracleError> {
    let all_edges: Vec<(ProsumerId, ProsumerId)> = market
        .edges()
        .iter()
        .map(|&(i, j)| (market.prosumers()[i].id(), market.prosumers()[j].id()))
        .collect();
    let split = market.connected_components(&all_edges)?;

    let mut totals = vec![0.0; market.n()];
    let mut worst_residual = 0.0_f64;
    let mut violated = false;

    for component in &split.trading {
        let local: Vec<usize> = component
            .iter()
            .map(|&id| market.dense_index(id).expect("component member exists"))
            .collect();
        let col_of = |dense: usize| local.iter().position(|&k| k == dense).unwrap();
        let edges: Vec<(usize, usize)> = market
            .edges()
            .iter()
            .copied()
            .filter(|&(i, _)| local.contains(&i))
            .collect();

        let rows = edges.len() + 1;
        let mut a = DMatrix::<f64>::zeros(rows, local.len());
        let mut rhs = DVector::<f64>::zeros(rows);
        for (r, &(i, j)) in edges.iter().enumerate() {
            let (pi, pj) = (&market.prosumers()[i], &market.prosumers()[j]);
            let d_ij = market.weight(pi.id(), pj.id()).unwrap_or(0.0);
            let d_ji = market.weight(pj.id(), pi.id()).unwrap_or(0.0);
            a[(r, col_of(i))] = 1.0;
            a[(r, col_of(j))] = -1.0;
            rhs[r] = pj.b() + d_ji - pi.b() - d_ij;
        }
        for (c, &dense) in local.iter().enumerate() {
            a[(edges.len(), c)] = 1.0 / (2.0 * market.prosumers()[dense].a());
        }

        let svd = a.clone().svd(true, true);
        let w = svd.solve(&rhs, 1e-12).expect("SVD solve with computed factors");
        let residual = (&a * &w - &rhs).norm();
        worst_residual = worst_residual.max(residual);
        if residual > LSQ_RESIDUAL_FACTOR * (1.0 + rhs.norm()) {
            violated = true;
        }
        for (c, &dense) in local.iter().enumerate() {
            totals[dense] = w[c] / (2.0 * market.prosumers()[dense].a());
        }
    }

    if violated {
        return Err(OracleError::InteriorAssumptionViolated {
            residual: worst_residual,
            least_squares_totals: totals,
        });
    }
    Ok(totals)
}

/// One nonnegative flow variable per edge, oriented seller → buyer.
struct FlowProblem {
    /// (seller dense index, buyer dense index) per edge.
    ends: Vec<(usize, usize)>,
    q: DMatrix<f64>,
    c: DVector<f64>,
}

impl FlowProblem {
    fn build(market: &Market) -> Self {
        let pros = market.prosumers();
        let ends: Vec<(usize, usize)> = market
            .edges()
            .iter()
            .map(|&(i, j)| {
                if pros[i].role() == Role::Seller {
                    (i, j)
                } else {
                    (j, i)
                }
            })
            .collect();
        let ne = ends.len();
        let mut q = DMatrix::<f64>::zeros(ne, ne);
        for e in 0..ne {
            for f in 0..ne {
                let mut v = 0.0;
                if ends[e].0 == ends[f].0 {
                    v += 2.0 * pros[ends[e].0].a();
                }
                if ends[e].1 == ends[f].1 {
                    v += 2.0 * pros[ends[e].1].a();
                }
                q[(e, f)] = v;
            }
        }
        let c = DVector::from_fn(ne, |e, _| {
            let (s, b) = ends[e];
            let (sid, bid) = (pros[s].id(), pros[b].id());
            let d_bs = market.weight(bid, sid).unwrap_or(0.0);
            let d_sb = market.weight(sid, bid).unwrap_or(0.0);
            pros[b].b() - pros[s].b() + d_bs - d_sb
        });
        Self { ends, q, c }
    }

    /// Node coefficient of edge `e` in prosumer `i`'s total: +1 if buyer of
    /// the edge, −1 if seller, 0 otherwise.
    fn node_coeff(&self, i: usize, e: usize) -> f64 {
        if self.ends[e].1 == i {
            1.0
        } else if self.ends[e].0 == i {
            -1.0
        } else {
            0.0
        }
    }

    fn totals(&self, n: usize, f: &DVector<f64>) -> Vec<f64> {
        let mut t = vec![0.0; n];
        for (e, &(s, b)) in self.ends.iter().enumerate() {
            t[b] += f[e];
            t[s] -= f[e];
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActiveConstraint {
    FlowZero(usize),
    /// Prosumer total pinned at its lower bound.
    NodeMin(usize),
    /// Prosumer total pinned at its upper bound.
    NodeMax(usize),
}

/// Exhaustive active-set solver for the bilateral clearing problem with
/// bounds and trade weights. Test-scale only (at most [`MAX_KKT_EDGES`]
/// edges): enumerates candidate active sets in ascending cardinality,
/// solves each equality-constrained quadratic subproblem, and returns the
/// first primal- and dual-feasible KKT point, which convexity makes a
/// global optimum. Pair prices are reconstructed from marginal costs plus
/// the bound multipliers.
pub fn kkt_active_set_qp(market: &Market) -> Result<P2PSolution, OracleError> {
    let ne = market.edges().len();
    if ne > MAX_KKT_EDGES {
        return Err(OracleError::TooLarge { edges: ne, max: MAX_KKT_EDGES });
    }
    let pros = market.prosumers();
    let problem = FlowProblem::build(market);

    // Candidate constraints. Bounds whose side is already implied by flow
    // nonnegativity (a buyer's zero lower bound, a seller's zero upper
    // bound) never need a multiplier and are skipped.
    let mut constraints: Vec<ActiveConstraint> = (0..ne).map(ActiveConstraint::FlowZero).collect();
    for (i, p) in pros.iter().enumerate() {
        if market.degree(i) == 0 {
            continue;
        }
        match p.role() {
            Role::Seller => {
                constraints.push(ActiveConstraint::NodeMin(i));
                if p.p_tr_max() < 0.0 {
                    constraints.push(ActiveConstraint::NodeMax(i));
                }
            }
            Role::Buyer => {
                if p.p_tr_min() > 0.0 {
                    constraints.push(ActiveConstraint::NodeMin(i));
                }
                constraints.push(ActiveConstraint::NodeMax(i));
            }
        }
    }

    let mut found: Option<(DVector<f64>, Vec<f64>)> = None;
    'search: for k in 0..=constraints.len() {
        let mut done = false;
        for_each_combination(constraints.len(), k, |subset| {
            if let Some(candidate) = try_active_set(market, &problem, &constraints, subset) {
                found = Some(candidate);
                done = true;
            }
            done
        });
        if done {
            break 'search;
        }
    }
    let (flow, nu) = found.ok_or(OracleError::NoKktPoint)?;

    let totals = problem.totals(market.n(), &flow);
    let mut pair_powers = PairVector::zeros(market.pair_index().clone());
    for (e, &(s, b)) in problem.ends.iter().enumerate() {
        let (sid, bid) = (pros[s].id(), pros[b].id());
        pair_powers.set(bid, sid, flow[e]).expect("edge pair");
        pair_powers.set(sid, bid, -flow[e]).expect("edge pair");
    }

    // One-sided shadow price of prosumer i toward j: marginal cost at the
    // cleared total, plus the trade weight, plus the bound multiplier. The
    // two sides agree on every trading pair; the pair price is their mean.
    let side_price = |i: usize, j: usize| -> f64 {
        let (pi, pj) = (&pros[i], &pros[j]);
        let d = market.weight(pi.id(), pj.id()).unwrap_or(0.0);
        2.0 * pi.a() * totals[i] + pi.b() + d + nu[i]
    };
    let mut pair_prices = PairVector::zeros(market.pair_index().clone());
    for &(i, j) in market.edges() {
        let price = 0.5 * (side_price(i, j) + side_price(j, i));
        let (ii, jj) = (pros[i].id(), pros[j].id());
        pair_prices.set(ii, jj, price).expect("edge pair");
        pair_prices.set(jj, ii, price).expect("edge pair");
    }

    let clusters = realized_clusters(market, &pair_powers, &pair_prices);
    Ok(P2PSolution { pair_powers, pair_prices, totals, clusters })
}

/// Groups realized trades into connected components and extracts each
/// component's price (None when not uniform within 1e-6 relative).
fn realized_clusters(
    market: &Market,
    pair_powers: &PairVector,
    pair_prices: &PairVector,
) -> Vec<Cluster> {
    realized_clusters_with_tolerance(market, pair_powers, pair_prices, 1e-6)
}

/// [`realized_clusters`] with a caller-chosen relative price-uniformity
/// tolerance, for grouping the output of iterative solvers whose per-pair
/// prices carry solver noise.
pub fn realized_clusters_with_tolerance(
    market: &Market,
    pair_powers: &PairVector,
    pair_prices: &PairVector,
    rel_tol: f64,
) -> Vec<Cluster> {
    let pros = market.prosumers();
    let realized: Vec<(ProsumerId, ProsumerId)> = market
        .edges()
        .iter()
        .filter(|&&(i, j)| {
            pair_powers
                .get(pros[i].id(), pros[j].id())
                .map(|p| p.abs() >= TRADE_SUCCESS_THRESHOLD_KW)
                .unwrap_or(false)
        })
        .map(|&(i, j)| (pros[i].id(), pros[j].id()))
        .collect();
    let split = market
        .connected_components(&realized)
        .expect("realized edges are graph edges");

    split
        .trading
        .iter()
        .map(|members| {
            let prices: Vec<f64> = realized
                .iter()
                .filter(|(i, j)| members.contains(i) && members.contains(j))
                .map(|&(i, j)| pair_prices.get(i, j).expect("edge pair"))
                .collect();
            let price = uniform_value(&prices, rel_tol);
            Cluster { members: members.clone(), price }
        })
        .collect()
}

fn uniform_value(values: &[f64], rel_tol: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let spread_ok = values
        .iter()
        .all(|v| (v - mean).abs() <= rel_tol * (1.0 + mean.abs()));
    spread_ok.then_some(mean)
}

/// Solves one candidate active set; returns the flow vector and per-node
/// bound multipliers when the candidate is a primal- and dual-feasible KKT
/// point.
fn try_active_set(
    market: &Market,
    problem: &FlowProblem,
    constraints: &[ActiveConstraint],
    subset: &[usize],
) -> Option<(DVector<f64>, Vec<f64>)> {
    let pros = market.prosumers();
    let active: Vec<ActiveConstraint> = subset.iter().map(|&s| constraints[s]).collect();

    // A node cannot be pinned at both of its bounds at once.
    for (ai, a) in active.iter().enumerate() {
        if let ActiveConstraint::NodeMin(i) = a {
            if active[ai + 1..].contains(&ActiveConstraint::NodeMax(*i)) {
                return None;
            }
        }
    }

    let zero_flows: Vec<usize> = active
        .iter()
        .filter_map(|a| match a {
            ActiveConstraint::FlowZero(e) => Some(*e),
            _ => None,
        })
        .collect();
    let node_rows: Vec<(usize, f64)> = active
        .iter()
        .filter_map(|a| match a {
            ActiveConstraint::NodeMin(i) => Some((*i, pros[*i].p_tr_min())),
            ActiveConstraint::NodeMax(i) => Some((*i, pros[*i].p_tr_max())),
            _ => None,
        })
        .collect();
    let free: Vec<usize> = (0..problem.ends.len())
        .filter(|e| !zero_flows.contains(e))
        .collect();

    // Reduced KKT system over free flows and node-row multipliers.
    let dim = free.len() + node_rows.len();
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for (r, &e) in free.iter().enumerate() {
        for (cc, &f) in free.iter().enumerate() {
            m[(r, cc)] = problem.q[(e, f)];
        }
        rhs[r] = -problem.c[e];
    }
    for (nr, &(i, bound)) in node_rows.iter().enumerate() {
        for (cc, &e) in free.iter().enumerate() {
            let coeff = problem.node_coeff(i, e);
            m[(free.len() + nr, cc)] = coeff;
            m[(cc, free.len() + nr)] = coeff;
        }
        rhs[free.len() + nr] = bound;
    }

    let solution = if dim == 0 {
        DVector::zeros(0)
    } else {
        match m.clone().full_piv_lu().solve(&rhs) {
            Some(x) if ((&m * &x) - &rhs).norm() <= 1e-9 * (1.0 + rhs.norm()) => x,
            _ => {
                let svd = m.clone().svd(true, true);
                let x = svd.solve(&rhs, 1e-12).ok()?;
                if ((&m * &x) - &rhs).norm() > 1e-9 * (1.0 + rhs.norm()) {
                    return None;
                }
                x
            }
        }
    };

    let mut flow = DVector::<f64>::zeros(problem.ends.len());
    for (cc, &e) in free.iter().enumerate() {
        flow[e] = solution[cc];
    }
    let mut nu = vec![0.0; market.n()];
    for (nr, &(i, _)) in node_rows.iter().enumerate() {
        nu[i] = solution[free.len() + nr];
    }

    // Primal feasibility: nonnegative flows, totals within bounds.
    if flow.iter().any(|&f| f < -PRIMAL_TOL) {
        return None;
    }
    let totals = problem.totals(market.n(), &flow);
    for (i, p) in pros.iter().enumerate() {
        let slack = PRIMAL_TOL * (1.0 + p.p_tr_min().abs() + p.p_tr_max().abs());
        if totals[i] < p.p_tr_min() - slack || totals[i] > p.p_tr_max() + slack {
            return None;
        }
    }

    // Dual feasibility: bound multipliers signed toward their constraint,
    // and a nonnegative multiplier for every pinned-at-zero flow.
    for a in &active {
        match a {
            ActiveConstraint::NodeMax(i) if nu[*i] < DUAL_TOL => return None,
            ActiveConstraint::NodeMin(i) if nu[*i] > -DUAL_TOL => return None,
            _ => {}
        }
    }
    let grad = &problem.q * &flow + &problem.c;
    for &e in &zero_flows {
        let (s, b) = problem.ends[e];
        let sigma = grad[e] + nu[b] - nu[s];
        if sigma < DUAL_TOL {
            return None;
        }
    }

    Some((flow, nu))
}

/// Visits all k-element index combinations of 0..n in lexicographic order;
/// stops early when the visitor returns true.
fn for_each_combination(n: usize, k: usize, mut visit: impl FnMut(&[usize]) -> bool) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        if visit(&idx) {
            return;
        }
        // Advance to the next combination.
        let mut pos = k;
        while pos > 0 {
            pos -= 1;
            if idx[pos] != pos + n - k {
                idx[pos] += 1;
                for later in pos + 1..k {
                    idx[later] = idx[later - 1] + 1;
                }
                break;
            }
            if pos == 0 {
                return;
            }
        }
        if k == 0 {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::tests::{complete_bipartite_edges, six_prosumers};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn id(v: u32) -> ProsumerId {
        ProsumerId(v)
    }

    fn table_market() -> Market {
        Market::build(six_prosumers(), &complete_bipartite_edges(), &[]).unwrap()
    }

    fn without_edge_1_6() -> Market {
        let edges: Vec<_> = complete_bipartite_edges()
            .into_iter()
            .filter(|&e| e != (id(1), id(6)))
            .collect();
        Market::build(six_prosumers(), &edges, &[]).unwrap()
    }

    fn buyer_to_seller_weights() -> Vec<((ProsumerId, ProsumerId), f64)> {
        vec![
            ((id(4), id(1)), 0.51),
            ((id(5), id(1)), 0.51),
            ((id(6), id(1)), 0.72),
            ((id(4), id(2)), 0.10),
            ((id(4), id(3)), 0.10),
            ((id(5), id(2)), 0.12),
            ((id(5), id(3)), 0.12),
            ((id(6), id(2)), 0.04),
            ((id(6), id(3)), 0.04),
        ]
    }

    fn weighted_market() -> Market {
        Market::build(
            six_prosumers(),
            &complete_bipartite_edges(),
            &buyer_to_seller_weights(),
        )
        .unwrap()
    }

    #[test]
    fn interior_formula_two_prosumers() {
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.01, 10.0, -1000.0, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Buyer, 0.01, 2.0, 0.0, 1000.0).unwrap(),
        ];
        let sol = theorem1_interior(&pros).unwrap();
        assert_relative_eq!(sol.price, 6.0, max_relative = 1e-12);
        assert_relative_eq!(sol.totals[0], -200.0, max_relative = 1e-12);
        assert_relative_eq!(sol.totals[1], 200.0, max_relative = 1e-12);
        assert!(!sol.degenerate);
    }

    #[test]
    fn interior_formula_equal_b_means_no_trade() {
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.004, 5.0, -50.0, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Buyer, 0.02, 5.0, 0.0, 50.0).unwrap(),
            Prosumer::new(id(3), Role::Buyer, 0.009, 5.0, 0.0, 70.0).unwrap(),
        ];
        let sol = theorem1_interior(&pros).unwrap();
        assert_relative_eq!(sol.price, 5.0, max_relative = 1e-12);
        for t in sol.totals {
            assert!(t.abs() < 1e-9);
        }
    }

    #[test]
    fn interior_formula_empty_set() {
        assert!(matches!(theorem1_interior(&[]), Err(OracleError::EmptySet)));
    }

    #[test]
    fn interior_formula_balances_analytically() {
        let pros = six_prosumers();
        let sol = theorem1_interior(&pros).unwrap();
        let sum: f64 = sol.totals.iter().sum();
        assert!(sum.abs() < 1e-9, "imbalance {sum}");
    }

    #[test]
    fn pool_clearing_reference_market() {
        let sol = uniform_price_clearing(&six_prosumers()).unwrap();
        assert_relative_eq!(sol.price, 6.392, epsilon = 1e-9);
        let expected = [-105.0, 0.0, -90.0, 100.0, 0.0, 95.0];
        for (t, e) in sol.totals.iter().zip(expected) {
            assert_relative_eq!(*t, e, epsilon = 1e-9);
        }
        assert_eq!(
            sol.binding,
            vec![
                Binding::AtMin,
                Binding::Exited,
                Binding::Interior,
                Binding::AtMax,
                Binding::Exited,
                Binding::AtMax,
            ]
        );
        assert!(!sol.degenerate);
    }

    #[test]
    fn pool_clearing_after_role_flip() {
        // prosumer 2 switched to buying with its interval reversed
        let mut pros = six_prosumers();
        pros[1] = Prosumer::new(id(2), Role::Buyer, 0.0074, 3.53, 0.01, 115.0).unwrap();
        let sol = uniform_price_clearing(&pros).unwrap();
        assert_relative_eq!(sol.price, 4.580887573964497, epsilon = 1e-9);
        assert_relative_eq!(sol.totals[0], -105.0, epsilon = 1e-9);
        assert_relative_eq!(sol.totals[1], 71.00591715976324, epsilon = 1e-6);
        assert_relative_eq!(sol.totals[2], -125.0, epsilon = 1e-9);
        assert_relative_eq!(sol.totals[3], 100.0, epsilon = 1e-9);
        assert_relative_eq!(sol.totals[4], 0.0, epsilon = 1e-9);
        assert_relative_eq!(sol.totals[5], 58.99408284023669, epsilon = 1e-6);
        let sum: f64 = sol.totals.iter().sum();
        assert!(sum.abs() < 1e-9);
    }

    #[test]
    fn pool_clearing_degenerate_flat_segment() {
        // Both participants saturate over the whole price interval [3, 7];
        // the midpoint 5 is reported and the solution flagged.
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.005, 8.0, -100.0, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Buyer, 0.005, 2.0, 0.0, 100.0).unwrap(),
        ];
        let sol = uniform_price_clearing(&pros).unwrap();
        assert!(sol.degenerate);
        assert_relative_eq!(sol.price, 5.0, epsilon = 1e-9);
        assert_relative_eq!(sol.totals[0], -100.0, epsilon = 1e-9);
        assert_relative_eq!(sol.totals[1], 100.0, epsilon = 1e-9);
    }

    #[test]
    fn pool_clearing_no_rational_trade() {
        // Seller willing only below 2, buyer only above 10: both exit and
        // the zero segment [2, 10] is degenerate.
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.01, 2.0, -100.0, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Buyer, 0.01, 10.0, 0.0, 100.0).unwrap(),
        ];
        let sol = uniform_price_clearing(&pros).unwrap();
        assert!(sol.degenerate);
        assert_eq!(sol.binding, vec![Binding::Exited, Binding::Exited]);
        assert_eq!(sol.totals, vec![0.0, 0.0]);
        assert_relative_eq!(sol.price, 6.0, epsilon = 1e-9);
    }

    #[test]
    fn pool_clearing_requires_both_roles() {
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.01, 5.0, -10.0, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Seller, 0.01, 6.0, -10.0, 0.0).unwrap(),
        ];
        assert!(matches!(
            uniform_price_clearing(&pros),
            Err(OracleError::MissingRole)
        ));
    }

    #[test]
    fn pool_clearing_no_root_for_forced_imbalance() {
        // Intervals that exclude zero on both sides with mismatched volume:
        // the buyer must take at least 40 but the seller can give at most 10.
        let pros = vec![
            Prosumer::with_trade_interval(id(1), Role::Seller, 0.01, 8.0, -10.0, -5.0).unwrap(),
            Prosumer::with_trade_interval(id(2), Role::Buyer, 0.01, 2.0, 40.0, 60.0).unwrap(),
        ];
        assert!(matches!(
            uniform_price_clearing(&pros),
            Err(OracleError::NoRoot)
        ));
    }

    #[test]
    fn aggregate_response_is_monotone() {
        let pros = six_prosumers();
        let mut last = f64::NEG_INFINITY;
        for step in 0..400 {
            let lam = -2.0 + step as f64 * 0.05;
            let g = aggregate_response(&pros, lam);
            assert!(g >= last - 1e-12, "response decreased at λ = {lam}");
            last = g;
        }
    }

    #[test]
    fn kkt_single_edge_scalar_solution() {
        // Rational trade: flow = (b_s − b_b)/(2a_s + 2a_b).
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.01, 10.0, -1e6, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Buyer, 0.01, 2.0, 0.0, 1e6).unwrap(),
        ];
        let m = Market::build(pros, &[(id(1), id(2))], &[]).unwrap();
        let sol = kkt_active_set_qp(&m).unwrap();
        assert_relative_eq!(sol.pair_powers.get(id(2), id(1)).unwrap(), 200.0, epsilon = 1e-9);
        assert_relative_eq!(sol.pair_prices.get(id(2), id(1)).unwrap(), 6.0, epsilon = 1e-9);

        // No rational trade: flow pinned at zero.
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.01, 2.0, -1e6, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Buyer, 0.01, 10.0, 0.0, 1e6).unwrap(),
        ];
        let m = Market::build(pros, &[(id(1), id(2))], &[]).unwrap();
        let sol = kkt_active_set_qp(&m).unwrap();
        assert_eq!(sol.pair_powers.get(id(2), id(1)).unwrap(), 0.0);
        assert!(sol.clusters.is_empty());
    }

    #[test]
    fn kkt_matches_pool_on_reference_market() {
        let sol = kkt_active_set_qp(&table_market()).unwrap();
        let pool = uniform_price_clearing(&six_prosumers()).unwrap();
        for (t, e) in sol.totals.iter().zip(&pool.totals) {
            assert_relative_eq!(*t, *e, epsilon = 1e-6);
        }
        // All realized trades clear at one price equal to the pool price.
        assert_eq!(sol.clusters.len(), 1);
        let price = sol.clusters[0].price.expect("uniform cluster price");
        assert_relative_eq!(price, pool.price, epsilon = 1e-6);
    }

    #[test]
    fn kkt_interior_matches_closed_form() {
        // Reference prosumers 1, 3, 4, 6 with bounds wide enough that the
        // pure interior formula applies.
        let all = six_prosumers();
        let pros: Vec<Prosumer> = [0usize, 2, 3, 4]
            .iter()
            .zip([&all[0], &all[2], &all[3], &all[5]])
            .map(|(_, p)| match p.role() {
                Role::Seller => {
                    Prosumer::new(p.id(), p.role(), p.a(), p.b(), -1e6, 0.0).unwrap()
                }
                Role::Buyer => Prosumer::new(p.id(), p.role(), p.a(), p.b(), 0.0, 1e6).unwrap(),
            })
            .collect();
        let interior = theorem1_interior(&pros).unwrap();
        let edges = vec![
            (id(1), id(4)),
            (id(1), id(6)),
            (id(3), id(4)),
            (id(3), id(6)),
        ];
        let m = Market::build(pros, &edges, &[]).unwrap();
        let sol = kkt_active_set_qp(&m).unwrap();
        for (t, e) in sol.totals.iter().zip(&interior.totals) {
            assert_relative_eq!(*t, *e, epsilon = 1e-6);
        }
        assert_eq!(sol.clusters.len(), 1);
        assert_relative_eq!(
            sol.clusters[0].price.unwrap(),
            interior.price,
            epsilon = 1e-6
        );
    }

    #[test]
    fn clustered_clearing_splits_after_edge_removal() {
        let sol = clustered_clearing(&without_edge_1_6()).unwrap();
        assert_eq!(sol.clusters.len(), 2);
        assert_eq!(sol.clusters[0].members, vec![id(1), id(4)]);
        assert_eq!(sol.clusters[1].members, vec![id(3), id(6)]);
        assert_relative_eq!(sol.clusters[0].price.unwrap(), 8.09, epsilon = 1e-9);
        assert_relative_eq!(sol.clusters[1].price.unwrap(), 6.326, epsilon = 1e-9);
        let expected = [-100.0, 0.0, -95.0, 100.0, 0.0, 95.0];
        for (t, e) in sol.totals.iter().zip(expected) {
            assert_relative_eq!(*t, e, epsilon = 1e-9);
        }
    }

    #[test]
    fn clustered_clearing_rejects_weights() {
        assert!(matches!(
            clustered_clearing(&weighted_market()),
            Err(OracleError::NonzeroWeights)
        ));
    }

    #[test]
    fn clustered_clearing_empty_when_no_trades() {
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.01, 2.0, -100.0, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Buyer, 0.01, 10.0, 0.0, 100.0).unwrap(),
        ];
        let m = Market::build(pros, &[(id(1), id(2))], &[]).unwrap();
        let sol = clustered_clearing(&m).unwrap();
        assert!(sol.clusters.is_empty());
    }

    #[test]
    fn kkt_weighted_reference_market() {
        // With buyer-imposed trade weights the reference market reroutes:
        // buyer 6 takes only 5 kW from the heavily weighted seller 1 and
        // 90 kW from seller 3; prices split into two distinct levels, with
        // all trades touching seller 1 sharing one of them.
        let sol = kkt_active_set_qp(&weighted_market()).unwrap();
        assert_relative_eq!(sol.pair_powers.get(id(4), id(1)).unwrap(), 100.0, epsilon = 1e-6);
        assert_relative_eq!(sol.pair_powers.get(id(6), id(1)).unwrap(), 5.0, epsilon = 1e-6);
        assert_relative_eq!(sol.pair_powers.get(id(6), id(3)).unwrap(), 90.0, epsilon = 1e-6);
        let l41 = sol.pair_prices.get(id(4), id(1)).unwrap();
        let l61 = sol.pair_prices.get(id(6), id(1)).unwrap();
        let l63 = sol.pair_prices.get(id(6), id(3)).unwrap();
        assert_relative_eq!(l41, 7.072, epsilon = 1e-9);
        assert_relative_eq!(l63, 6.392, epsilon = 1e-9);
        // Structural price equality: both realized trades of seller 1 carry
        // the same price because the seller imposes no weights of its own.
        assert_relative_eq!(l41, l61, epsilon = 1e-9);
        assert!((l63 - l61).abs() > 0.01);
        let totals_sum: f64 = sol.totals.iter().sum();
        assert!(totals_sum.abs() < 1e-6);
    }

    #[test]
    fn kkt_rejects_oversized_graphs() {
        // 5 sellers x 4 buyers = 20 edges exceeds the enumeration budget.
        let mut pros = Vec::new();
        for s in 1..=5 {
            pros.push(Prosumer::new(id(s), Role::Seller, 0.01, 8.0, -10.0, 0.0).unwrap());
        }
        for b in 6..=9 {
            pros.push(Prosumer::new(id(b), Role::Buyer, 0.01, 2.0, 0.0, 10.0).unwrap());
        }
        let mut edges = Vec::new();
        for s in 1..=5 {
            for b in 6..=9 {
                edges.push((id(s), id(b)));
            }
        }
        let m = Market::build(pros, &edges, &[]).unwrap();
        assert!(matches!(
            kkt_active_set_qp(&m),
            Err(OracleError::TooLarge { edges: 20, max: 16 })
        ));
    }

    #[test]
    fn weighted_system_reduces_to_interior_formula_without_weights() {
        let m = table_market();
        let totals = weighted_totals_system(&m).unwrap();
        let interior = theorem1_interior(&six_prosumers()).unwrap();
        for (t, e) in totals.iter().zip(&interior.totals) {
            assert_relative_eq!(*t, *e, epsilon = 1e-9);
        }
    }

    #[test]
    fn weighted_system_symmetric_weights_cancel() {
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.01, 10.0, -1e6, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Buyer, 0.01, 2.0, 0.0, 1e6).unwrap(),
        ];
        let edges = [(id(1), id(2))];
        let plain = Market::build(pros.clone(), &edges, &[]).unwrap();
        let weighted = Market::build(
            pros,
            &edges,
            &[((id(1), id(2)), 0.3), ((id(2), id(1)), 0.3)],
        )
        .unwrap();
        let t0 = weighted_totals_system(&plain).unwrap();
        let t1 = weighted_totals_system(&weighted).unwrap();
        for (a, b) in t0.iter().zip(&t1) {
            assert_relative_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn weighted_system_on_tree_matches_kkt() {
        // A tree graph has no cycles, so the edge equations are always
        // consistent; large bounds keep the optimum interior and the
        // active-set oracle must agree.
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.008, 11.0, -1e6, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Seller, 0.012, 10.0, -1e6, 0.0).unwrap(),
            Prosumer::new(id(4), Role::Buyer, 0.009, 3.0, 0.0, 1e6).unwrap(),
            Prosumer::new(id(5), Role::Buyer, 0.011, 4.0, 0.0, 1e6).unwrap(),
        ];
        let edges = [(id(1), id(4)), (id(1), id(5)), (id(2), id(5))];
        let weights = [
            ((id(4), id(1)), 0.2),
            ((id(5), id(1)), 0.05),
            ((id(5), id(2)), 0.15),
        ];
        let m = Market::build(pros, &edges, &weights).unwrap();
        let totals = weighted_totals_system(&m).unwrap();
        let sol = kkt_active_set_qp(&m).unwrap();
        for (t, e) in totals.iter().zip(&sol.totals) {
            assert_relative_eq!(*t, *e, epsilon = 1e-6);
        }
    }

    #[test]
    fn weighted_system_detects_inconsistent_cycles() {
        // The reference weight set is cyclically inconsistent on the
        // complete graph, so no interior optimum exists and the system must
        // refuse rather than return the least-squares artifact.
        match weighted_totals_system(&weighted_market()) {
            Err(OracleError::InteriorAssumptionViolated { residual, least_squares_totals }) => {
                assert!(
                    residual > 0.1 && residual < 0.3,
                    "unexpected residual {residual}"
                );
                assert_eq!(least_squares_totals.len(), 6);
            }
            other => panic!("expected interior-assumption failure, got {other:?}"),
        }
    }

    #[test]
    fn weighted_system_solves_per_component() {
        // Two disconnected buyer–seller pairs: each component needs its own
        // balance row; totals must match the per-pair scalar solutions.
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.01, 10.0, -1e6, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Buyer, 0.01, 2.0, 0.0, 1e6).unwrap(),
            Prosumer::new(id(3), Role::Seller, 0.02, 9.0, -1e6, 0.0).unwrap(),
            Prosumer::new(id(4), Role::Buyer, 0.02, 3.0, 0.0, 1e6).unwrap(),
        ];
        let m = Market::build(pros, &[(id(1), id(2)), (id(3), id(4))], &[]).unwrap();
        let totals = weighted_totals_system(&m).unwrap();
        assert_relative_eq!(totals[0], -200.0, epsilon = 1e-9);
        assert_relative_eq!(totals[1], 200.0, epsilon = 1e-9);
        assert_relative_eq!(totals[2], -75.0, epsilon = 1e-9);
        assert_relative_eq!(totals[3], 75.0, epsilon = 1e-9);
    }

    proptest! {
        /// The closed-form interior solution and the active-set oracle agree
        /// whenever bounds are wide enough that nothing clamps.
        #[test]
        fn interior_instances_agree_with_active_set(
            a_vals in proptest::collection::vec(0.002f64..0.02, 4),
            bs1 in 8.0f64..12.0,
            bs2 in 8.0f64..12.0,
            bb1 in 1.0f64..5.0,
            bb2 in 1.0f64..5.0,
        ) {
            let pros = vec![
                Prosumer::new(ProsumerId(1), Role::Seller, a_vals[0], bs1, -1e7, 0.0).unwrap(),
                Prosumer::new(ProsumerId(2), Role::Seller, a_vals[1], bs2, -1e7, 0.0).unwrap(),
                Prosumer::new(ProsumerId(3), Role::Buyer, a_vals[2], bb1, 0.0, 1e7).unwrap(),
                Prosumer::new(ProsumerId(4), Role::Buyer, a_vals[3], bb2, 0.0, 1e7).unwrap(),
            ];
            let interior = theorem1_interior(&pros).unwrap();
            // The bound-free formula is only comparable when its optimum
            // respects every sign constraint, i.e. the price separates the
            // buyer and seller willingness levels strictly.
            prop_assume!(interior.price > bb1.max(bb2) + 0.1);
            prop_assume!(interior.price < bs1.min(bs2) - 0.1);
            let edges = vec![
                (ProsumerId(1), ProsumerId(3)),
                (ProsumerId(1), ProsumerId(4)),
                (ProsumerId(2), ProsumerId(3)),
                (ProsumerId(2), ProsumerId(4)),
            ];
            let m = Market::build(pros, &edges, &[]).unwrap();
            let sol = kkt_active_set_qp(&m).unwrap();
            for (t, e) in sol.totals.iter().zip(&interior.totals) {
                prop_assert!((t - e).abs() <= 1e-6 * (1.0 + e.abs()));
            }
        }

        /// Pool clearing balances and respects every interval on random
        /// bounded instances.
        #[test]
        fn pool_clearing_is_feasible_and_balanced(
            a_vals in proptest::collection::vec(0.002f64..0.02, 6),
            b_vals in proptest::collection::vec(1.0f64..12.0, 6),
            caps in proptest::collection::vec(5.0f64..150.0, 6),
        ) {
            let pros: Vec<Prosumer> = (0..6)
                .map(|i| {
                    if i < 3 {
                        Prosumer::new(ProsumerId(i as u32 + 1), Role::Seller, a_vals[i], b_vals[i], -caps[i], 0.0).unwrap()
                    } else {
                        Prosumer::new(ProsumerId(i as u32 + 1), Role::Buyer, a_vals[i], b_vals[i], 0.0, caps[i]).unwrap()
                    }
                })
                .collect();
            let sol = uniform_price_clearing(&pros).unwrap();
            let sum: f64 = sol.totals.iter().sum();
            prop_assert!(sum.abs() <= EPS_BALANCE_KW);
            for (p, t) in pros.iter().zip(&sol.totals) {
                prop_assert!(*t >= p.p_tr_min() - 1e-9 && *t <= p.p_tr_max() + 1e-9);
            }
        }
    }
}
