//! Decentralized multi-agent execution of the market engine.
//!
//! Runs the same iteration as [`crate::admm::run`], but every prosumer is an
//! agent holding only its local parameters and per-neighbor iterates, and all
//! cross-agent data flows through a synchronous message bus that refuses
//! delivery between non-neighbors. The graph-coupled totals system is solved
//! by an inner Jacobi iteration (one scalar broadcast per agent per round)
//! instead of the centralized factorization; convergence bookkeeping is
//! computed globally by the harness.

use crate::admm::{
    check_convergence, project_signed_sum_box, AdmmConfig, AdmmError, AdmmState, Convergence,
    MarketSolution, TraceRecord,
};
use crate::market::{Market, PairVector, ProsumerId, Role, TRADE_SUCCESS_THRESHOLD_KW};
use serde::Serialize;
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error("message from {from} to {to} crosses a non-edge")]
    ProtocolViolation { from: ProsumerId, to: ProsumerId },
    #[error(
        "inner totals solve diverged at round {round}: step {delta:.3e} \
         grew past 10x its running minimum {floor:.3e}"
    )]
    InnerDivergence { round: usize, delta: f64, floor: f64 },
    #[error("no convergence within {iterations} iterations")]
    MaxIterExceeded {
        iterations: usize,
        solution: Box<MarketSolution>,
        stats: MessageStats,
        messages: Option<Vec<Message>>,
    },
}

/// Inner Jacobi solver settings: stop when the largest per-agent update falls
/// to `tolerance`, or after `max_rounds`.
#[derive(Debug, Clone, Copy)]
pub struct InnerSettings {
    pub tolerance: f64,
    pub max_rounds: usize,
}

impl Default for InnerSettings {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_rounds: 5000 }
    }
}

/// What a message carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    /// Price-formation term v_ij from i to j.
    VExchange,
    /// Scaled-total q_i broadcast to a neighbor during the inner solve.
    QExchange,
    /// Bus-inserted diagnostic row (from = to): the agent's local sum of
    /// squared consensus gaps after the iteration.
    Trace,
}

/// One scalar exchanged between graph neighbors in a given outer iteration.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Message {
    pub from: ProsumerId,
    pub to: ProsumerId,
    /// Outer iteration in which the message was sent and consumed.
    pub round: usize,
    pub kind: MessageKind,
    pub payload: f64,
}

/// Message accounting for one outer iteration.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IterationMessages {
    pub iteration: usize,
    pub v_messages: usize,
    pub q_messages: usize,
    pub inner_rounds: usize,
}

/// Per-iteration and total message counts for a decentralized run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MessageStats {
    pub per_iteration: Vec<IterationMessages>,
}

impl MessageStats {
    pub fn total_messages(&self) -> usize {
        self.per_iteration
            .iter()
            .map(|r| r.v_messages + r.q_messages)
            .sum()
    }

    pub fn total_inner_rounds(&self) -> usize {
        self.per_iteration.iter().map(|r| r.inner_rounds).sum()
    }
}

/// A prosumer agent: its own cost parameters plus per-neighbor iterate slots,
/// all keyed by the sorted neighbor list. Agents never see each other; the
/// bus delivers neighbor scalars into `v_in` / `q_in` at round barriers.
#[derive(Debug, Clone)]
pub struct AgentState {
    id: ProsumerId,
    role: Role,
    a: f64,
    b: f64,
    lo: f64,
    hi: f64,
    /// Sorted neighbor ids; all per-neighbor vectors below align with it.
    neighbors: Vec<ProsumerId>,
    /// Trade weight this agent imposes on each neighbor.
    weights: Vec<f64>,
    p: Vec<f64>,
    x: Vec<f64>,
    u: Vec<f64>,
    /// Own price-formation terms v_ij, recomputed each iteration.
    v_out: Vec<f64>,
    /// Received neighbor terms v_ji.
    v_in: Vec<f64>,
    /// Received neighbor totals q_j.
    q_in: Vec<f64>,
    /// Own scaled total q_i.
    q: f64,
    /// Projected consensus values staged until the iteration commits.
    x_pending: Vec<f64>,
}

impl AgentState {
    pub fn id(&self) -> ProsumerId {
        self.id
    }

    pub fn neighbors(&self) -> &[ProsumerId] {
        &self.neighbors
    }

    /// The agent's scaled total q_i = 2a_i·P_{i,tr} from the last inner solve.
    pub fn q(&self) -> f64 {
        self.q
    }

    fn neighbor_pos(&self, id: ProsumerId) -> Option<usize> {
        self.neighbors.binary_search(&id).ok()
    }

    fn receive(&mut self, msg: &Message) -> Result<(), SimError> {
        let pos = self
            .neighbor_pos(msg.from)
            .ok_or(SimError::ProtocolViolation { from: msg.from, to: msg.to })?;
        match msg.kind {
            MessageKind::VExchange => self.v_in[pos] = msg.payload,
            MessageKind::QExchange => self.q_in[pos] = msg.payload,
            MessageKind::Trace => {}
        }
        Ok(())
    }

    /// Local start of an outer iteration: stage the projected consensus
    /// values and recompute the outgoing price-formation terms, both from
    /// the previous iterate only.
    fn begin_iteration(&mut self, config: &AdmmConfig) {
        let blend = config.rho + config.psi;
        self.x_pending.clear();
        self.x_pending.extend(
            (0..self.neighbors.len()).map(|k| {
                (config.rho * (self.p[k] + self.u[k]) + config.psi * self.x[k]) / blend
            }),
        );
        project_signed_sum_box(&mut self.x_pending, self.role, self.lo, self.hi);
        for k in 0..self.neighbors.len() {
            self.v_out[k] = self.b + self.weights[k]
                + config.rho * (-self.x[k] + self.u[k])
                - config.phi * self.p[k];
        }
    }

    /// Net incoming-minus-outgoing price-formation sum, the agent's row of
    /// the totals right-hand side.
    fn totals_rhs(&self) -> f64 {
        (0..self.neighbors.len())
            .map(|k| self.v_in[k] - self.v_out[k])
            .sum()
    }

    /// One Jacobi update from the neighbors' previous-round totals.
    fn jacobi_step(&self, config: &AdmmConfig) -> f64 {
        let neighbor_sum: f64 = self.q_in.iter().sum();
        let diag = self.neighbors.len() as f64 + (config.rho + config.phi) / self.a;
        (self.totals_rhs() + neighbor_sum) / diag
    }

    /// Local end of an outer iteration: closed-form trade and price values,
    /// the dual step against the staged consensus, and the commit of the
    /// staged values. Returns the per-neighbor prices in neighbor order.
    fn finish_iteration(&mut self, config: &AdmmConfig) -> Vec<f64> {
        let denom = 2.0 * (config.rho + config.phi);
        let mut prices = Vec::with_capacity(self.neighbors.len());
        for k in 0..self.neighbors.len() {
            let s_own = self.v_out[k] + self.q;
            let s_other = self.v_in[k] + self.q_in[k];
            self.p[k] = (s_other - s_own) / denom;
            prices.push(0.5 * (s_other + s_own));
            self.u[k] += config.kappa * config.rho * (self.p[k] - self.x_pending[k]);
        }
        std::mem::swap(&mut self.x, &mut self.x_pending);
        prices
    }

    /// Sum of squared consensus gaps, the agent's local share of the primal
    /// residual (exported as a Trace diagnostic).
    fn local_consensus_gap_sq(&self) -> f64 {
        (0..self.neighbors.len())
            .map(|k| (self.p[k] - self.x[k]) * (self.p[k] - self.x[k]))
            .sum()
    }
}

/// Builds one agent per prosumer with all per-neighbor slots zeroed.
pub fn build_agents(market: &Market) -> Vec<AgentState> {
    market
        .prosumers()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let neighbors: Vec<ProsumerId> = market
                .neighbors(i)
                .iter()
                .map(|&j| market.prosumers()[j].id())
                .collect();
            let weights = neighbors
                .iter()
                .map(|&j| market.weight(p.id(), j).unwrap_or(0.0))
                .collect();
            let deg = neighbors.len();
            AgentState {
                id: p.id(),
                role: p.role(),
                a: p.a(),
                b: p.b(),
                lo: p.p_tr_min(),
                hi: p.p_tr_max(),
                neighbors,
                weights,
                p: vec![0.0; deg],
                x: vec![0.0; deg],
                u: vec![0.0; deg],
                v_out: vec![0.0; deg],
                v_in: vec![0.0; deg],
                q_in: vec![0.0; deg],
                q: 0.0,
                x_pending: Vec::with_capacity(deg),
            }
        })
        .collect()
}

/// Synchronous delivery fabric: validates that every message travels along a
/// graph edge, counts traffic, and optionally records the full log.
pub struct MessageBus {
    edges: HashSet<(ProsumerId, ProsumerId)>,
    log: Option<Vec<Message>>,
    sent: usize,
}

impl MessageBus {
    pub fn new(market: &Market, record_log: bool) -> Self {
        let pros = market.prosumers();
        let edges = market
            .pair_index()
            .dense()
            .iter()
            .map(|&(i, j)| (pros[i].id(), pros[j].id()))
            .collect();
        Self {
            edges,
            log: record_log.then(Vec::new),
            sent: 0,
        }
    }

    /// Messages delivered so far.
    pub fn delivered(&self) -> usize {
        self.sent
    }

    /// Consumes the recorded log, if recording was enabled.
    pub fn into_log(self) -> Option<Vec<Message>> {
        self.log
    }

    /// Validates, counts, optionally records, then delivers every message at
    /// the round barrier.
    fn dispatch(
        &mut self,
        messages: Vec<Message>,
        agents: &mut [AgentState],
        index_of: &dyn Fn(ProsumerId) -> Option<usize>,
    ) -> Result<(), SimError> {
        for msg in &messages {
            if !self.edges.contains(&(msg.from, msg.to)) {
                return Err(SimError::ProtocolViolation { from: msg.from, to: msg.to });
            }
        }
        self.sent += messages.len();
        for msg in &messages {
            let target = index_of(msg.to)
                .ok_or(SimError::ProtocolViolation { from: msg.from, to: msg.to })?;
            agents[target].receive(msg)?;
        }
        if let Some(log) = &mut self.log {
            log.extend(messages);
        }
        Ok(())
    }

    /// Appends a bus-generated diagnostic row (never delivered to an agent).
    fn insert_trace(&mut self, iteration: usize, agent: ProsumerId, payload: f64) {
        if let Some(log) = &mut self.log {
            log.push(Message {
                from: agent,
                to: agent,
                round: iteration,
                kind: MessageKind::Trace,
                payload,
            });
        }
    }
}

/// Solves the graph-coupled totals system by synchronous Jacobi rounds:
/// every agent updates its total from the neighbors' previous-round values,
/// then broadcasts the new value (one message per directed pair per round).
/// Stops when the largest update falls to `inner_tol` or after `inner_max`
/// rounds; returns the number of rounds used. Agents end up holding their
/// own final totals and their neighbors' latest broadcasts.
///
/// The iteration matrix has infinity-norm below 1 by strict diagonal
/// dominance, so the updates contract monotonically; a growing update is
/// reported as divergence.
pub fn jacobi_totals(
    agents: &mut [AgentState],
    config: &AdmmConfig,
    inner_tol: f64,
    inner_max: usize,
    bus: &mut MessageBus,
    outer_iteration: usize,
) -> Result<usize, SimError> {
    for agent in agents.iter_mut() {
        agent.q = 0.0;
        agent.q_in.iter_mut().for_each(|q| *q = 0.0);
    }
    let positions: std::collections::HashMap<ProsumerId, usize> = agents
        .iter()
        .enumerate()
        .map(|(i, a)| (a.id, i))
        .collect();
    let index_of = |id: ProsumerId| positions.get(&id).copied();

    let mut min_delta = f64::INFINITY;
    for round in 1..=inner_max {
        let mut delta = 0.0_f64;
        for agent in agents.iter_mut() {
            let next = agent.jacobi_step(config);
            delta = delta.max((next - agent.q).abs());
            agent.q = next;
        }
        let broadcasts: Vec<Message> = agents
            .iter()
            .flat_map(|agent| {
                agent.neighbors.iter().map(|&to| Message {
                    from: agent.id,
                    to,
                    round: outer_iteration,
                    kind: MessageKind::QExchange,
                    payload: agent.q,
                })
            })
            .collect();
        bus.dispatch(broadcasts, agents, &index_of)?;

        if delta > 10.0 * min_delta {
            return Err(SimError::InnerDivergence { round, delta, floor: min_delta });
        }
        min_delta = min_delta.min(delta);
        if delta <= inner_tol {
            return Ok(round);
        }
    }
    Ok(inner_max)
}

/// Runs the decentralized protocol to convergence or the iteration budget.
/// Returns the market solution (identical to the centralized engine's up to
/// the inner-solver tolerance), the message statistics, and — when
/// `trace_messages` is set — the full message log.
pub fn run_decentralized(
    market: &Market,
    config: &AdmmConfig,
    inner: &InnerSettings,
    trace_messages: bool,
) -> Result<(MarketSolution, MessageStats, Option<Vec<Message>>), SimError> {
    config.validate()?;
    let mut agents = build_agents(market);
    let mut bus = MessageBus::new(market, trace_messages);
    let mut stats = MessageStats::default();
    let positions: std::collections::HashMap<ProsumerId, usize> = agents
        .iter()
        .enumerate()
        .map(|(i, a)| (a.id, i))
        .collect();
    let index_of = |id: ProsumerId| positions.get(&id).copied();

    let m = market.pair_index().len();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut prices = PairVector::zeros(market.pair_index().clone());
    let mut x_prev = PairVector::zeros(market.pair_index().clone());

    for iteration in 1..=config.max_iter {
        for agent in agents.iter_mut() {
            agent.begin_iteration(config);
        }
        let v_messages: Vec<Message> = agents
            .iter()
            .flat_map(|agent| {
                agent
                    .neighbors
                    .iter()
                    .zip(&agent.v_out)
                    .map(|(&to, &payload)| Message {
                        from: agent.id,
                        to,
                        round: iteration,
                        kind: MessageKind::VExchange,
                        payload,
                    })
            })
            .collect();
        bus.dispatch(v_messages, &mut agents, &index_of)?;

        let rounds = jacobi_totals(
            &mut agents,
            config,
            inner.tolerance,
            inner.max_rounds,
            &mut bus,
            iteration,
        )?;

        let mut price_rows: Vec<Vec<f64>> = Vec::with_capacity(agents.len());
        for agent in agents.iter_mut() {
            price_rows.push(agent.finish_iteration(config));
        }
        for agent in agents.iter() {
            bus.insert_trace(iteration, agent.id, agent.local_consensus_gap_sq());
        }
        stats.per_iteration.push(IterationMessages {
            iteration,
            v_messages: m,
            q_messages: m * rounds,
            inner_rounds: rounds,
        });

        // Global bookkeeping (the harness's job, not the agents'): assemble
        // the iterate vectors in pair-index order and run the shared
        // residual test.
        let state = assemble_state(market, &agents, iteration, &trace);
        prices = assemble_pairs(market, &agents, &price_rows);
        let (verdict, record) = check_convergence(&state, config, market, &x_prev);
        trace.push(record);
        x_prev = state.x.clone();

        if verdict == Convergence::Converged {
            let solution = solution_from(market, &state, prices, &trace, true);
            return Ok((solution, stats, bus.into_log()));
        }
    }

    let state = assemble_state(market, &agents, config.max_iter, &trace);
    let solution = solution_from(market, &state, prices, &trace, false);
    Err(SimError::MaxIterExceeded {
        iterations: config.max_iter,
        solution: Box::new(solution),
        stats,
        messages: bus.into_log(),
    })
}

fn assemble_state(
    market: &Market,
    agents: &[AgentState],
    iteration: usize,
    trace: &[TraceRecord],
) -> AdmmState {
    let idx = market.pair_index();
    let pros = market.prosumers();
    let mut p = vec![0.0; idx.len()];
    let mut x = vec![0.0; idx.len()];
    let mut u = vec![0.0; idx.len()];
    for (k, &(i, j)) in idx.dense().iter().enumerate() {
        let agent = &agents[i];
        let pos = agent
            .neighbor_pos(pros[j].id())
            .expect("pair endpoints are neighbors");
        p[k] = agent.p[pos];
        x[k] = agent.x[pos];
        u[k] = agent.u[pos];
    }
    AdmmState {
        p: PairVector::from_values(idx.clone(), p),
        x: PairVector::from_values(idx.clone(), x),
        u: PairVector::from_values(idx.clone(), u),
        iter: iteration,
        trace: trace.to_vec(),
    }
}

fn assemble_pairs(market: &Market, agents: &[AgentState], rows: &[Vec<f64>]) -> PairVector {
    let idx = market.pair_index();
    let pros = market.prosumers();
    let mut values = vec![0.0; idx.len()];
    for (k, &(i, j)) in idx.dense().iter().enumerate() {
        let pos = agents[i]
            .neighbor_pos(pros[j].id())
            .expect("pair endpoints are neighbors");
        values[k] = rows[i][pos];
    }
    PairVector::from_values(idx.clone(), values)
}

fn solution_from(
    market: &Market,
    state: &AdmmState,
    prices: PairVector,
    trace: &[TraceRecord],
    converged: bool,
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
        iterations: state.iter,
        converged,
        trace: trace.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admm::{run, solve_totals};
    use crate::market::tests::{complete_bipartite_edges, six_prosumers};
    use crate::market::Prosumer;
    use approx::assert_relative_eq;

    fn id(v: u32) -> ProsumerId {
        ProsumerId(v)
    }

    fn table_market() -> Market {
        Market::build(six_prosumers(), &complete_bipartite_edges(), &[]).unwrap()
    }

    /// Stages v values on the agents as if a V exchange had happened, going
    /// through the bus so adjacency is enforced.
    fn stage_v(
        market: &Market,
        agents: &mut [AgentState],
        bus: &mut MessageBus,
        v: &PairVector,
    ) {
        let positions: std::collections::HashMap<ProsumerId, usize> = agents
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id, i))
            .collect();
        let index_of = |pid: ProsumerId| positions.get(&pid).copied();
        for agent in agents.iter_mut() {
            for (k, &to) in agent.neighbors.clone().iter().enumerate() {
                agent.v_out[k] = v.get(agent.id, to).unwrap();
            }
        }
        let messages: Vec<Message> = agents
            .iter()
            .flat_map(|agent| {
                agent
                    .neighbors
                    .iter()
                    .zip(&agent.v_out)
                    .map(|(&to, &payload)| Message {
                        from: agent.id,
                        to,
                        round: 0,
                        kind: MessageKind::VExchange,
                        payload,
                    })
            })
            .collect();
        bus.dispatch(messages, agents, &index_of).unwrap();
        let _ = market;
    }

    #[test]
    fn jacobi_two_agent_example() {
        // a = (0.5, 0.5), rho+phi = 1: system [[3, -1], [-1, 3]] with
        // rhs (4, -4) has solution (1, -1); ratio 1/3 per round needs
        // well under 60 rounds for 1e-10.
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.5, 5.0, -100.0, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Buyer, 0.5, 3.0, 0.0, 100.0).unwrap(),
        ];
        let market = Market::build(pros, &[(id(1), id(2))], &[]).unwrap();
        let config = AdmmConfig { rho: 0.5, phi: 0.5, psi: 0.5, ..AdmmConfig::default() };
        let mut agents = build_agents(&market);
        let mut bus = MessageBus::new(&market, false);
        let mut v = PairVector::zeros(market.pair_index().clone());
        v.set(id(1), id(2), -2.0).unwrap();
        v.set(id(2), id(1), 2.0).unwrap();
        stage_v(&market, &mut agents, &mut bus, &v);

        let rounds = jacobi_totals(&mut agents, &config, 1e-10, 5000, &mut bus, 1).unwrap();
        assert!(rounds <= 60, "took {rounds} rounds");
        assert_relative_eq!(agents[0].q(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(agents[1].q(), -1.0, epsilon = 1e-9);
        // One broadcast per directed pair per round.
        assert_eq!(bus.delivered(), 2 + 2 * rounds);
    }

    #[test]
    fn jacobi_matches_direct_solve() {
        let market = table_market();
        let config = AdmmConfig::default();
        // Nontrivial v: the zero-state price-formation terms (b values).
        let state = AdmmState::zeros(&market);
        let v = crate::admm::compute_v(&state, &config, &market);
        let direct = solve_totals(&v, &market, &config);

        let mut agents = build_agents(&market);
        let mut bus = MessageBus::new(&market, false);
        stage_v(&market, &mut agents, &mut bus, &v);
        jacobi_totals(&mut agents, &config, 1e-10, 5000, &mut bus, 1).unwrap();
        for (agent, expected) in agents.iter().zip(&direct) {
            assert!(
                (agent.q() - expected).abs() < 1e-8,
                "agent {} q {} vs direct {}",
                agent.id(),
                agent.q(),
                expected
            );
        }
    }

    #[test]
    fn jacobi_isolated_agent_is_zero() {
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.01, 8.0, -10.0, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Buyer, 0.02, 4.0, 0.0, 10.0).unwrap(),
            Prosumer::new(id(3), Role::Buyer, 0.02, 5.0, 0.0, 10.0).unwrap(),
        ];
        let market = Market::build(pros, &[(id(1), id(2))], &[]).unwrap();
        let config = AdmmConfig::default();
        let mut agents = build_agents(&market);
        let mut bus = MessageBus::new(&market, false);
        let mut v = PairVector::zeros(market.pair_index().clone());
        v.set(id(1), id(2), -1.0).unwrap();
        v.set(id(2), id(1), 1.0).unwrap();
        stage_v(&market, &mut agents, &mut bus, &v);
        jacobi_totals(&mut agents, &config, 1e-10, 5000, &mut bus, 1).unwrap();
        assert_eq!(agents[2].q(), 0.0);
    }

    #[test]
    fn jacobi_updates_contract() {
        // ‖q_r − q*‖∞ shrinks at least by the worst diagonal-dominance
        // ratio max_i n_i/(n_i + (ρ+φ)/a_i) each round.
        let market = table_market();
        let config = AdmmConfig::default();
        let state = AdmmState::zeros(&market);
        let v = crate::admm::compute_v(&state, &config, &market);
        let exact = solve_totals(&v, &market, &config);
        let ratio = market
            .prosumers()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let n = market.degree(i) as f64;
                n / (n + (config.rho + config.phi) / p.a())
            })
            .fold(0.0, f64::max);

        let mut previous_err = f64::INFINITY;
        for budget in 1..=8 {
            let mut agents = build_agents(&market);
            let mut bus = MessageBus::new(&market, false);
            stage_v(&market, &mut agents, &mut bus, &v);
            jacobi_totals(&mut agents, &config, 0.0, budget, &mut bus, 1).unwrap();
            let err = agents
                .iter()
                .zip(&exact)
                .map(|(a, e)| (a.q() - e).abs())
                .fold(0.0, f64::max);
            if previous_err.is_finite() {
                assert!(
                    err <= ratio * previous_err + 1e-15,
                    "round {budget}: {err} > {ratio} * {previous_err}"
                );
            }
            previous_err = err;
        }
    }

    #[test]
    fn bus_rejects_non_edge_messages() {
        let market = table_market();
        let mut agents = build_agents(&market);
        let mut bus = MessageBus::new(&market, false);
        let positions: std::collections::HashMap<ProsumerId, usize> = agents
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id, i))
            .collect();
        let index_of = |pid: ProsumerId| positions.get(&pid).copied();
        // Sellers 1 and 2 share no edge in the bipartite graph.
        let msg = Message {
            from: id(1),
            to: id(2),
            round: 1,
            kind: MessageKind::VExchange,
            payload: 1.0,
        };
        let err = bus.dispatch(vec![msg], &mut agents, &index_of).unwrap_err();
        assert!(matches!(
            err,
            SimError::ProtocolViolation { from: ProsumerId(1), to: ProsumerId(2) }
        ));
    }

    #[test]
    fn decentralized_matches_centralized_engine() {
        let market = table_market();
        let config = AdmmConfig::default();
        let (central, _) = run(&market, &config, None).unwrap();
        let (distributed, stats, log) =
            run_decentralized(&market, &config, &InnerSettings::default(), false).unwrap();
        assert!(log.is_none());
        assert!(distributed.converged);
        assert_eq!(distributed.iterations, central.iterations);
        for (k, (central_p, dist_p)) in central
            .pair_powers
            .values()
            .iter()
            .zip(distributed.pair_powers.values())
            .enumerate()
        {
            assert!(
                (central_p - dist_p).abs() < 1e-6,
                "pair {k}: centralized {central_p} vs decentralized {dist_p}"
            );
        }
        for (central_l, dist_l) in central
            .pair_prices
            .values()
            .iter()
            .zip(distributed.pair_prices.values())
        {
            assert!((central_l - dist_l).abs() < 1e-6);
        }
        assert_eq!(stats.per_iteration.len(), distributed.iterations);
    }

    #[test]
    fn message_counts_follow_protocol() {
        let market = table_market();
        let config = AdmmConfig { max_iter: 1, ..AdmmConfig::default() };
        let err =
            run_decentralized(&market, &config, &InnerSettings::default(), true).unwrap_err();
        let SimError::MaxIterExceeded { stats, messages, solution, .. } = err else {
            panic!("expected iteration-budget stop");
        };
        assert!(!solution.converged);
        let record = stats.per_iteration[0];
        // m = 18 directed pairs: one V message each, one Q message each per
        // inner round.
        assert_eq!(record.v_messages, 18);
        assert_eq!(record.q_messages, 18 * record.inner_rounds);
        assert!(record.inner_rounds > 1);

        let log = messages.expect("tracing was enabled");
        let v_count = log.iter().filter(|m| m.kind == MessageKind::VExchange).count();
        let q_count = log.iter().filter(|m| m.kind == MessageKind::QExchange).count();
        let t_count = log.iter().filter(|m| m.kind == MessageKind::Trace).count();
        assert_eq!(v_count, 18);
        assert_eq!(q_count, 18 * record.inner_rounds);
        // One bus diagnostic per agent per outer iteration, self-addressed.
        assert_eq!(t_count, 6);
        assert!(log
            .iter()
            .filter(|m| m.kind == MessageKind::Trace)
            .all(|m| m.from == m.to));
    }

    #[test]
    fn no_edges_means_no_messages() {
        let pros = vec![
            Prosumer::new(id(1), Role::Seller, 0.01, 8.0, -10.0, 0.0).unwrap(),
            Prosumer::new(id(2), Role::Buyer, 0.02, 4.0, 0.0, 10.0).unwrap(),
        ];
        let market = Market::build(pros, &[], &[]).unwrap();
        let (solution, stats, _) = run_decentralized(
            &market,
            &AdmmConfig::default(),
            &InnerSettings::default(),
            false,
        )
        .unwrap();
        assert!(solution.converged);
        assert_eq!(stats.total_messages(), 0);
        assert_eq!(solution.totals, vec![0.0, 0.0]);
    }

    #[test]
    fn decentralized_weighted_market_matches_engine() {
        let weights = [
            ((id(4), id(1)), 0.51),
            ((id(5), id(1)), 0.51),
            ((id(6), id(1)), 0.72),
            ((id(4), id(2)), 0.10),
            ((id(4), id(3)), 0.10),
            ((id(5), id(2)), 0.12),
            ((id(5), id(3)), 0.12),
            ((id(6), id(2)), 0.04),
            ((id(6), id(3)), 0.04),
        ];
        let market =
            Market::build(six_prosumers(), &complete_bipartite_edges(), &weights).unwrap();
        let config = AdmmConfig {
            rho: 0.009,
            phi: 0.0091,
            psi: 0.0091,
            eps_abs: 1e-4,
            eps_rel: 1e-3,
            ..AdmmConfig::default()
        };
        let (central, _) = run(&market, &config, None).unwrap();
        let (distributed, _, _) =
            run_decentralized(&market, &config, &InnerSettings::default(), false).unwrap();
        assert_eq!(distributed.iterations, central.iterations);
        for (central_p, dist_p) in central
            .pair_powers
            .values()
            .iter()
            .zip(distributed.pair_powers.values())
        {
            assert!((central_p - dist_p).abs() < 1e-6);
        }
    }
}
