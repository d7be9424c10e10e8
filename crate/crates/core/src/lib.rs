//! Carbon-aware KV-cache sizing for LLM serving.
//!
//! The crate models the full control loop of an LLM service that keeps
//! reusable context (KV cache) on elastically provisioned SSD storage:
//!
//! - [`carbon`]: operational and amortized embodied carbon, unit-typed.
//! - [`workload`]: seeded multi-turn and document-QA request generators, trace files.
//! - [`kvcache`]: byte-accounted prefix cache with FIFO, LRU and carbon-savings eviction.
//! - [`perfmodel`]: the (cache size, request rate) profile grid and a synthetic profiler.
//! - [`predictors`]: day-ahead load and carbon-intensity forecasts.
//! - [`planner`]: exact SLO-constrained cache-size planning, a brute-force
//!   oracle, and the knapsack reduction used to cross-check it.
//! - [`sim`]: end-to-end day replay, reports and run comparison.

pub mod carbon;
pub mod kvcache;
pub mod par;
pub mod perfmodel;
pub mod planner;
pub mod predictors;
pub mod sim;
pub mod workload;
