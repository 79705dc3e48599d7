//! Market model: prosumers, the bipartite trading graph, and pair-indexed data.
//!
//! A [`Market`] couples prosumers with an undirected trading graph. Every
//! undirected edge {i, j} yields two directed pairs (i, j) and (j, i); a
//! directed pair carries the bilateral power P_ij seen from prosumer i's side
//! (positive when i receives energy) and an optional trade weight d_ij that
//! prices i's preference for trading with j. Any clearing keeps the two sides
//! of an edge consistent: P_ij = -P_ji.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// A prosumer's trade counts as successful when its cleared total reaches
/// this magnitude (kW); smaller totals are treated as "did not trade".
/// Shared by solution reporting, cluster detection, and the learning loops.
pub const TRADE_SUCCESS_THRESHOLD_KW: f64 = 0.05;

/// Identifier of a prosumer. Ids are arbitrary unique integers; all public
/// APIs speak ids while internal math uses dense indices in id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProsumerId(pub u32);

impl fmt::Display for ProsumerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Market side of a prosumer. Sellers hold nonpositive trade totals, buyers
/// nonnegative ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seller,
    Buyer,
}

#[derive(Debug, Error, PartialEq)]
pub enum MarketError {
    #[error("market must contain at least one prosumer")]
    EmptyMarket,
    #[error("duplicate prosumer id {0}")]
    DuplicateId(ProsumerId),
    #[error("edge references unknown prosumer id {0}")]
    UnknownProsumer(ProsumerId),
    #[error("edge {{{0}, {1}}} is a self-loop")]
    SelfLoop(ProsumerId, ProsumerId),
    #[error("edge {{{0}, {1}}} joins two prosumers with the same role")]
    NonBipartiteEdge(ProsumerId, ProsumerId),
    #[error("edge {{{0}, {1}}} listed twice")]
    DuplicateEdge(ProsumerId, ProsumerId),
    #[error("trade weight given for ({0}, {1}) which is not a directed pair of the graph")]
    WeightOnNonEdge(ProsumerId, ProsumerId),
    #[error("prosumer {id}: quadratic cost coefficient must be > 0, got {a}")]
    NonPositiveCurvature { id: ProsumerId, a: f64 },
    #[error("prosumer {id}: parameter {name} is not finite")]
    NonFiniteParameter { id: ProsumerId, name: &'static str },
    #[error("prosumer {id}: power interval [{lo}, {hi}] is empty")]
    EmptyInterval { id: ProsumerId, lo: f64, hi: f64 },
    #[error("prosumer {id} ({role:?}): power interval [{lo}, {hi}] has the wrong sign for its role")]
    RoleSignMismatch { id: ProsumerId, role: Role, lo: f64, hi: f64 },
    #[error("trades map is missing neighbor pair ({0}, {1})")]
    MissingPair(ProsumerId, ProsumerId),
    #[error("trades map contains ({0}, {1}) but {1} is not a neighbor of {0}")]
    NotANeighbor(ProsumerId, ProsumerId),
}

/// One market participant. `a` and `b` parameterize the quadratic trading
/// cost `a * P_tr^2 + b * P_tr`; the stored `[p_tr_min, p_tr_max]` interval is
/// the feasible range of the prosumer's trade total P_tr.
#[derive(Debug, Clone, PartialEq)]
pub struct Prosumer {
    id: ProsumerId,
    role: Role,
    a: f64,
    b: f64,
    p_tr_min: f64,
    p_tr_max: f64,
}

impl Prosumer {
    /// Builds a prosumer from raw nameplate bounds, extending the feasible
    /// interval to include zero so that "does not trade" is always feasible:
    /// a seller's interval becomes `[p_tr_min, 0]` and a buyer's
    /// `[0, p_tr_max]`. Use [`Prosumer::with_trade_interval`] to keep an
    /// interval that intentionally excludes zero.
    pub fn new(
        id: ProsumerId,
        role: Role,
        a: f64,
        b: f64,
        p_tr_min: f64,
        p_tr_max: f64,
    ) -> Result<Self, MarketError> {
        let (lo, hi) = match role {
            Role::Seller => (p_tr_min, 0.0),
            Role::Buyer => (0.0, p_tr_max),
        };
        Self::with_trade_interval(id, role, a, b, lo, hi)
    }

    /// Builds a prosumer whose feasible interval is exactly `[lo, hi]`, with
    /// no zero-extension. Sellers need `lo <= hi <= 0`, buyers `0 <= lo <= hi`.
    pub fn with_trade_interval(
        id: ProsumerId,
        role: Role,
        a: f64,
        b: f64,
        lo: f64,
        hi: f64,
    ) -> Result<Self, MarketError> {
        for (name, v) in [("a", a), ("b", b), ("p_tr_min", lo), ("p_tr_max", hi)] {
            if !v.is_finite() {
                return Err(MarketError::NonFiniteParameter { id, name });
            }
        }
        if a <= 0.0 {
            return Err(MarketError::NonPositiveCurvature { id, a });
        }
        if lo > hi {
            return Err(MarketError::EmptyInterval { id, lo, hi });
        }
        let sign_ok = match role {
            Role::Seller => hi <= 0.0,
            Role::Buyer => lo >= 0.0,
        };
        if !sign_ok {
            return Err(MarketError::RoleSignMismatch { id, role, lo, hi });
        }
        Ok(Self { id, role, a, b, p_tr_min: lo, p_tr_max: hi })
    }

    pub fn id(&self) -> ProsumerId {
        self.id
    }
    pub fn role(&self) -> Role {
        self.role
    }
    pub fn a(&self) -> f64 {
        self.a
    }
    pub fn b(&self) -> f64 {
        self.b
    }
    /// Lower end of the feasible trade-total interval (kW).
    pub fn p_tr_min(&self) -> f64 {
        self.p_tr_min
    }
    /// Upper end of the feasible trade-total interval (kW).
    pub fn p_tr_max(&self) -> f64 {
        self.p_tr_max
    }

    /// Copy with a different linear cost coefficient.
    pub fn with_b(&self, b: f64) -> Self {
        Self { b, ..self.clone() }
    }

    /// Copy with a different quadratic cost coefficient (must stay > 0).
    pub fn with_a(&self, a: f64) -> Result<Self, MarketError> {
        if a <= 0.0 || !a.is_finite() {
            return Err(MarketError::NonPositiveCurvature { id: self.id, a });
        }
        Ok(Self { a, ..self.clone() })
    }
}

/// Index of the directed pairs of a graph, shared by every [`PairVector`]
/// built against the same market. Pairs are sorted lexicographically by the
/// dense indices of their endpoints, which fixes iteration and summation
/// order everywhere.
#[derive(Debug, PartialEq)]
pub struct PairIndex {
    ids: Vec<(ProsumerId, ProsumerId)>,
    dense: Vec<(usize, usize)>,
    pos: HashMap<(ProsumerId, ProsumerId), usize>,
}

impl PairIndex {
    pub fn len(&self) -> usize {
        self.dense.len()
    }
    pub fn is_empty(&self) -> bool {
        self.dense.is_empty()
    }
    /// Position of directed pair (i, j) in the index, if it exists.
    pub fn position(&self, i: ProsumerId, j: ProsumerId) -> Option<usize> {
        self.pos.get(&(i, j)).copied()
    }
    /// Directed pairs as prosumer ids, in index order.
    pub fn ids(&self) -> &[(ProsumerId, ProsumerId)] {
        &self.ids
    }
    /// Directed pairs as dense prosumer indices, in index order.
    pub fn dense(&self) -> &[(usize, usize)] {
        &self.dense
    }
    /// Position of the reversed pair (j, i) for the pair at `k`.
    pub fn reverse_of(&self, k: usize) -> usize {
        let (i, j) = self.ids[k];
        self.pos[&(j, i)]
    }
}

/// Dense vector of per-directed-pair values (powers, prices, weights, duals).
#[derive(Debug, Clone, PartialEq)]
pub struct PairVector {
    index: Arc<PairIndex>,
    values: Vec<f64>,
}

impl PairVector {
    pub fn zeros(index: Arc<PairIndex>) -> Self {
        let values = vec![0.0; index.len()];
        Self { index, values }
    }

    pub fn from_values(index: Arc<PairIndex>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), index.len(), "pair value count mismatch");
        Self { index, values }
    }

    pub fn index(&self) -> &Arc<PairIndex> {
        &self.index
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: ProsumerId, j: ProsumerId) -> Option<f64> {
        self.index.position(i, j).map(|k| self.values[k])
    }

    pub fn set(&mut self, i: ProsumerId, j: ProsumerId, v: f64) -> Result<(), MarketError> {
        match self.index.position(i, j) {
            Some(k) => {
                self.values[k] = v;
                Ok(())
            }
            None => Err(MarketError::NotANeighbor(i, j)),
        }
    }

    /// Iterate `((i, j), value)` in fixed index order.
    pub fn iter(&self) -> impl Iterator<Item = ((ProsumerId, ProsumerId), f64)> + '_ {
        self.index.ids.iter().copied().zip(self.values.iter().copied())
    }

    /// Euclidean norm, summed in fixed index order for determinism.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry (0 for an empty vector).
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

/// Integer adjacency/degree/Laplacian/incidence view of the trading graph.
/// Built with exact integer arithmetic; `laplacian` always equals
/// `incidence * incidence^T`.
#[derive(Debug, Clone)]
pub struct GraphAlgebra {
    pub adjacency: nalgebra::DMatrix<i64>,
    pub degree: nalgebra::DMatrix<i64>,
    pub laplacian: nalgebra::DMatrix<i64>,
    /// n x |edges| incidence matrix; column for edge {i, j} with i < j (dense
    /// order) holds +1 at i and -1 at j.
    pub incidence: nalgebra::DMatrix<i64>,
}

impl GraphAlgebra {
    fn build(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adjacency = nalgebra::DMatrix::<i64>::zeros(n, n);
        let mut degree = nalgebra::DMatrix::<i64>::zeros(n, n);
        let mut incidence = nalgebra::DMatrix::<i64>::zeros(n, edges.len());
        for (e, &(i, j)) in edges.iter().enumerate() {
            adjacency[(i, j)] = 1;
            adjacency[(j, i)] = 1;
            degree[(i, i)] += 1;
            degree[(j, j)] += 1;
            incidence[(i, e)] = 1;
            incidence[(j, e)] = -1;
        }
        let laplacian = &degree - &adjacency;
        debug_assert_eq!(laplacian, &incidence * incidence.transpose());
        Self { adjacency, degree, laplacian, incidence }
    }

    /// Laplacian converted to floating point (for numeric solvers).
    pub fn laplacian_f64(&self) -> nalgebra::DMatrix<f64> {
        self.laplacian.map(|v| v as f64)
    }
}

/// Trading graph over the market's prosumers (dense indexing).
#[derive(Debug, Clone)]
pub struct TradingGraph {
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    pair_index: Arc<PairIndex>,
    weights: Vec<f64>,
    algebra: GraphAlgebra,
}

/// A prosumer set plus its trading graph. Immutable once built; time-varying
/// markets are modeled as one instance per time step.
#[derive(Debug, Clone)]
pub struct Market {
    prosumers: Vec<Prosumer>,
    index_of: HashMap<ProsumerId, usize>,
    graph: TradingGraph,
}

impl Market {
    /// Builds and validates a market.
    ///
    /// `edges` are undirected buyer/seller pairs given by id; `weights` are
    /// directed trade weights `((i, j), d_ij)` and may cover any subset of
    /// the directed pairs (missing weights are zero).
    pub fn build(
        prosumers: Vec<Prosumer>,
        edges: &[(ProsumerId, ProsumerId)],
        weights: &[((ProsumerId, ProsumerId), f64)],
    ) -> Result<Self, MarketError> {
        if prosumers.is_empty() {
            return Err(MarketError::EmptyMarket);
        }
        let mut prosumers = prosumers;
        prosumers.sort_by_key(|p| p.id());
        let mut index_of = HashMap::with_capacity(prosumers.len());
        for (k, p) in prosumers.iter().enumerate() {
            if index_of.insert(p.id(), k).is_some() {
                return Err(MarketError::DuplicateId(p.id()));
            }
        }

        let mut dense_edges = Vec::with_capacity(edges.len());
        for &(ia, ib) in edges {
            let (ka, kb) = (
                *index_of.get(&ia).ok_or(MarketError::UnknownProsumer(ia))?,
                *index_of.get(&ib).ok_or(MarketError::UnknownProsumer(ib))?,
            );
            if ka == kb {
                return Err(MarketError::SelfLoop(ia, ib));
            }
            if prosumers[ka].role() == prosumers[kb].role() {
                return Err(MarketError::NonBipartiteEdge(ia, ib));
            }
            dense_edges.push((ka.min(kb), ka.max(kb)));
        }
        dense_edges.sort_unstable();
        if dense_edges.windows(2).any(|w| w[0] == w[1]) {
            let dup = dense_edges.windows(2).find(|w| w[0] == w[1]).unwrap()[0];
            return Err(MarketError::DuplicateEdge(prosumers[dup.0].id(), prosumers[dup.1].id()));
        }

        let n = prosumers.len();
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in &dense_edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }

        let mut dense_pairs: Vec<(usize, usize)> = dense_edges
            .iter()
            .flat_map(|&(i, j)| [(i, j), (j, i)])
            .collect();
        dense_pairs.sort_unstable();
        let ids: Vec<_> = dense_pairs
            .iter()
            .map(|&(i, j)| (prosumers[i].id(), prosumers[j].id()))
            .collect();
        let pos: HashMap<_, _> = ids.iter().enumerate().map(|(k, &p)| (p, k)).collect();
        let pair_index = Arc::new(PairIndex { ids, dense: dense_pairs, pos });

        let mut weight_values = vec![0.0; pair_index.len()];
        for &((i, j), d) in weights {
            let k = pair_index
                .position(i, j)
                .ok_or(MarketError::WeightOnNonEdge(i, j))?;
            if !d.is_finite() {
                return Err(MarketError::NonFiniteParameter { id: i, name: "d_ij" });
            }
            weight_values[k] = d;
        }

        let algebra = GraphAlgebra::build(n, &dense_edges);
        Ok(Self {
            prosumers,
            index_of,
            graph: TradingGraph {
                edges: dense_edges,
                neighbors,
                pair_index,
                weights: weight_values,
                algebra,
            },
        })
    }

    /// Number of prosumers.
    pub fn n(&self) -> usize {
        self.prosumers.len()
    }

    /// Number of directed pairs (twice the edge count); the `m` in the
    /// convergence tolerances.
    pub fn m(&self) -> usize {
        self.graph.pair_index.len()
    }

    pub fn prosumers(&self) -> &[Prosumer] {
        &self.prosumers
    }

    pub fn prosumer(&self, id: ProsumerId) -> Option<&Prosumer> {
        self.index_of.get(&id).map(|&k| &self.prosumers[k])
    }

    /// Dense index of a prosumer id (prosumers are stored in id order).
    pub fn dense_index(&self, id: ProsumerId) -> Option<usize> {
        self.index_of.get(&id).copied()
    }

    /// Undirected edges as dense index pairs (i < j), sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.graph.edges
    }

    /// Sorted dense neighbor list of dense index `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.graph.neighbors[i]
    }

    /// Degree (neighbor count) of dense index `i`.
    pub fn degree(&self, i: usize) -> usize {
        self.graph.neighbors[i].len()
    }

    pub fn pair_index(&self) -> &Arc<PairIndex> {
        &self.graph.pair_index
    }

    /// Trade weight d_ij for the directed pair at position `k`.
    pub fn weight_at(&self, k: usize) -> f64 {
        self.graph.weights[k]
    }

    /// Trade weight d_ij by ids (zero when the pair has no stored weight).
    pub fn weight(&self, i: ProsumerId, j: ProsumerId) -> Option<f64> {
        self.graph.pair_index.position(i, j).map(|k| self.graph.weights[k])
    }

    /// True when any directed pair carries a nonzero trade weight.
    pub fn has_weights(&self) -> bool {
        self.graph.weights.iter().any(|&d| d != 0.0)
    }

    pub fn algebra(&self) -> &GraphAlgebra {
        &self.graph.algebra
    }

    /// Trading cost of prosumer `id` for the given bilateral trades, which
    /// must map exactly its neighbor set to powers P_ij:
    /// `a * P_tr^2 + b * P_tr + sum_j d_ij * P_ij` with `P_tr = sum_j P_ij`.
    pub fn cost(
        &self,
        id: ProsumerId,
        trades: &BTreeMap<ProsumerId, f64>,
    ) -> Result<f64, MarketError> {
        let i = *self.index_of.get(&id).ok_or(MarketError::UnknownProsumer(id))?;
        for &j_id in trades.keys() {
            let j = self.index_of.get(&j_id).copied();
            if j.is_none() || !self.graph.neighbors[i].contains(&j.unwrap()) {
                return Err(MarketError::NotANeighbor(id, j_id));
            }
        }
        let mut total = 0.0;
        let mut weighted = 0.0;
        for &j in &self.graph.neighbors[i] {
            let j_id = self.prosumers[j].id();
            let p = *trades.get(&j_id).ok_or(MarketError::MissingPair(id, j_id))?;
            total += p;
            let k = self.graph.pair_index.position(id, j_id).expect("pair exists");
            weighted += self.graph.weights[k] * p;
        }
        let p = &self.prosumers[i];
        Ok(p.a() * total * total + p.b() * total + weighted)
    }

    /// Per-prosumer totals of a pair vector of powers, summed in neighbor
    /// order; entry `i` is `P_i,tr = sum_j P_ij`.
    pub fn totals(&self, powers: &PairVector) -> Vec<f64> {
        let mut t = vec![0.0; self.n()];
        for (k, &(i, _)) in self.graph.pair_index.dense.iter().enumerate() {
            t[i] += powers.values()[k];
        }
        t
    }

    /// Splits the prosumers into connected components of the subgraph formed
    /// by `active_edges` (undirected id pairs, which must be graph edges).
    /// Components with at least two members come back sorted by id (and the
    /// component list by its smallest member); prosumers touching no active
    /// edge are reported separately as non-traders.
    pub fn connected_components(
        &self,
        active_edges: &[(ProsumerId, ProsumerId)],
    ) -> Result<ComponentSplit, MarketError> {
        let mut dsu = DisjointSet::new(self.n());
        let mut touched = vec![false; self.n()];
        for &(ia, ib) in active_edges {
            let i = *self.index_of.get(&ia).ok_or(MarketError::UnknownProsumer(ia))?;
            let j = *self.index_of.get(&ib).ok_or(MarketError::UnknownProsumer(ib))?;
            let is_edge = self.graph.pair_index.position(ia, ib).is_some();
            if !is_edge {
                return Err(MarketError::NotANeighbor(ia, ib));
            }
            touched[i] = true;
            touched[j] = true;
            dsu.union(i, j);
        }
        let mut groups: BTreeMap<usize, Vec<ProsumerId>> = BTreeMap::new();
        let mut non_traders = Vec::new();
        for (k, p) in self.prosumers.iter().enumerate() {
            if touched[k] {
                groups.entry(dsu.find(k)).or_default().push(p.id());
            } else {
                non_traders.push(p.id());
            }
        }
        let mut trading: Vec<Vec<ProsumerId>> = groups.into_values().collect();
        for g in &mut trading {
            g.sort();
        }
        trading.sort_by_key(|g| g[0]);
        Ok(ComponentSplit { trading, non_traders })
    }

    /// New market with the same graph and per-prosumer parameters produced by
    /// `f` (used by the learning loops, which never mutate in place).
    pub fn with_updated_prosumers(
        &self,
        mut f: impl FnMut(&Prosumer) -> Prosumer,
    ) -> Result<Market, MarketError> {
        let prosumers: Vec<Prosumer> = self.prosumers.iter().map(&mut f).collect();
        let edges: Vec<(ProsumerId, ProsumerId)> = self
            .graph
            .edges
            .iter()
            .map(|&(i, j)| (self.prosumers[i].id(), self.prosumers[j].id()))
            .collect();
        let weights: Vec<((ProsumerId, ProsumerId), f64)> = self
            .graph
            .pair_index
            .ids()
            .iter()
            .zip(&self.graph.weights)
            .filter(|(_, &d)| d != 0.0)
            .map(|(&p, &d)| (p, d))
            .collect();
        Market::build(prosumers, &edges, &weights)
    }
}

/// Result of [`Market::connected_components`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentSplit {
    /// Connected components of prosumers joined by active edges.
    pub trading: Vec<Vec<ProsumerId>>,
    /// Prosumers without any active edge.
    pub non_traders: Vec<ProsumerId>,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}
