//! Pipeline library for rating the plausibility (1-5) of a candidate word
//! sense inside a five-sentence narrative.
//!
//! Three prediction routes share one data model and one evaluation suite:
//! embedding-feature regression ([`features`] + [`regress::ridge`]), a
//! composite-loss gradient trainer ([`regress`]), and structured LLM
//! prompting ([`prompting`] + [`client`]). Metrics and error analysis live
//! in [`metrics`] and [`analysis`].

pub mod analysis;
pub mod cli;
pub mod client;
pub mod config;
pub mod features;
pub mod metrics;
pub mod model;
pub mod prompting;
pub mod regress;

pub use model::{Prediction, Sample, SchemaMap};
