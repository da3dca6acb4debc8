//! Desk-scale simulator of backdoor attacks and defenses in federated
//! learning for next-token prediction.
//!
//! The crate is organized around one data type, [`params::ParamVector`]: a
//! flat `f64` vector partitioned into named layer segments. Models
//! ([`nn`]) produce gradients over it, attackers ([`attacks`]) mask and
//! project it, defenses ([`defenses`]) filter/clip/noise collections of it,
//! and the round engine ([`federation`]) averages it into the global model.
//! [`corpus`] generates the synthetic non-iid client data and the poisoned /
//! benign test sets, and [`metrics`] measures backdoor and main accuracy plus
//! the lifespan durability statistic.

pub mod attacks;
pub mod corpus;
pub mod defenses;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod rng;

pub use error::{Error, Result};
pub use params::{LayerSchema, ModelKind, ModelMeta, ParamVector};
