//! Contextual hierarchical tree bandits for recommending items from large,
//! growing collections.
//!
//! Contexts are bucketed by a uniform grid ([`partition`]); each cell owns a
//! tree over the item space ([`tree`]), optionally split across storage
//! units ([`forest`]). [`engine::Engine`] is the online entry point:
//! `recommend` then `feedback`. [`harness`] drives seeded experiments against
//! the synthetic environment in [`env`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod engine;
pub mod env;
pub mod error;
pub mod forest;
pub mod harness;
pub mod ingest;
pub mod items;
pub mod partition;
pub mod tree;

pub use engine::{Engine, EngineConfig, EngineMode, Recommendation, Ticket};
pub use error::{Error, Result};
pub use items::{CourseItem, ItemId, ItemStore};
pub use partition::{CellId, ContextPoint, PartitionConfig};
