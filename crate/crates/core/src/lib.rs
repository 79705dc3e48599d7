//! Peer-to-peer electricity market clearing.
//!
//! This crate models a community of prosumers trading energy bilaterally over
//! a bipartite buyer/seller graph and clears the resulting market three ways:
//!
//! - [`oracle`] — exact analytic solutions: a uniform-price pool clearing, a
//!   clustered per-component clearing, an interior closed form, and an
//!   active-set KKT reference solver for weighted bilateral trades.
//! - [`admm`] — an iterative proximal consensus engine that solves the same
//!   problem with per-prosumer updates, suitable for large markets.
//! - [`sim`] — the same iteration run as a network of message-passing agents
//!   that only ever see their own parameters and their neighbors' messages.
//!
//! [`learning`] adds parameter-adjustment loops that run repeated clearings
//! until unsuccessful prosumers trade, and [`scenario`] provides a serializable
//! scenario format, bundled reference scenarios, and a synthetic feeder
//! generator used for scale testing.

pub mod admm;
pub mod learning;
pub mod market;
pub mod oracle;
pub mod scenario;
pub mod sim;
