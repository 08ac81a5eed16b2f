//! Iteration-level discrete-event simulator for energy-efficient LLM
//! inference serving under latency SLOs.
//!
//! The crate models a GPU inference engine decoding with inflight batching
//! and layers four controllers on top of it:
//!
//! ```text
//!   arrivals ──▶ length predictor ──▶ scheduler ──▶ engine (iterations)
//!                                        │  ▲              │
//!                         projection ◀───┘  │              ▼
//!                       (B, KV vectors)     │        energy / records
//!                              │            │
//!                              ▼            │
//!                      throttle (min MHz) ──┘
//!                                                  autoscaler (TP level)
//! ```
//!
//! * [`projection`] keeps the scoreboard of scheduled queries and projects
//!   batch size and KV-cache blocks for every future iteration.
//! * [`scheduler`] admits a query only if KV capacity, the average TBT and
//!   every scheduled query's E2E deadline hold at maximum frequency.
//! * [`throttle`] binary-searches the lowest frequency that still meets
//!   both SLOs.
//! * [`autoscaler`] resizes the tensor-parallel engine with shadow
//!   instancing and a grace period.
//! * [`sim`] runs everything against a trace, and [`report`] turns the
//!   result into latency/energy metrics.

pub mod autoscaler;
pub mod error;
pub mod par;
pub mod perfmodel;
pub mod projection;
pub mod report;
pub mod scheduler;
pub mod sim;
pub mod sweep;
pub mod throttle;
pub mod trace;

pub use error::{Error, Result};
