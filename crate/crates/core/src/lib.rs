//! Training library for sequential multilevel optimization with
//! complexity-bucketed sample reweighting, exercised on a built-in synthetic
//! compositional question-answering task.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`]: dense 2-D values with reverse-mode differentiation and the
//!   second-order vector products (HVP, mixed-partial VJP) the hypergradient
//!   needs.
//! - [`models`]: the small query/scene classifier that stands in for a full
//!   task model, and the per-bucket meta-weight-nets that map a query feature
//!   to a sample weight in (0, 1).
//! - [`partition`]: compositional-complexity profiling of a training set and
//!   its split into ordered validation buckets of near-equal size.
//! - [`synth`]: a generator for a grounded composition QA world whose held-out
//!   pairs form phrase-phrase / phrase-word / word-word test triplets, plus a
//!   brute-force answer oracle and JSON-lines (de)serialization.
//! - [`mlo`]: the optimization engine — weighted training loss, inner
//!   gradient-descent phase, implicit-differentiation hypergradients with a
//!   truncated Neumann inverse, and the alternating outer loop.
//! - [`metrics`]: per-level accuracy and the all-three-levels consistency
//!   score, for internal runs and external prediction files.

pub mod metrics;
pub mod mlo;
pub mod models;
pub mod partition;
pub mod synth;
pub mod tensor;
