//! The simulated opaque classifier: request handling, TCP and in-process
//! transports, the query ledger, and an analysis-only white-box handle.
//!
//! Only probabilities cross the boundary. Every float is rounded to
//! [`WIRE_DIGITS`] significant digits on both transports, so a loopback TCP
//! run and an in-process run see bit-identical numbers.

mod client;
mod handler;
mod ledger;
mod server;
mod whitebox;
pub mod wire;

pub use client::{
    query_all, BlackBoxApi, CappedClient, InProcessClient, QueryResult, RetryPolicy, TcpClient,
};
pub use handler::{LatencyModel, ServiceConfig, ServiceCore};
pub use ledger::{cost_of, LedgerSnapshot, QueryLedger, PRICE_PER_REQUEST};
pub use server::{fetch_ledger, RunningService};
pub use whitebox::WhiteBoxHandle;
pub use wire::WIRE_DIGITS;
