//! Reinforced compressive search for adversarially robust residual networks.
//!
//! The crate is organized around the search loop: [`arch`] describes and
//! costs candidate networks, [`nn`] trains them, [`attack`] and [`train`]
//! provide adversarial evaluation, [`task`] builds the task embeddings,
//! [`encoder`] and [`policy`] form the agent, [`rl`] runs meta-training and
//! fine-tuning, and [`theory`] hosts the sparse-coding sandbox.

pub mod arch;
pub mod attack;
pub mod cli;
pub mod config;
pub mod data;
pub mod dense;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod policy;
pub mod report;
pub mod rl;
pub mod task;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
