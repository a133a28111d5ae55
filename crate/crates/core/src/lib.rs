//! Build, refine, expand, persist and serve a three-level skill library
//! (planning, functional, atomic) for tool-using agents.

pub mod ann;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod env;
pub mod expansion;
pub mod extraction;
pub mod gateway;
pub mod pipeline;
pub mod refinement;
pub mod retrieval;
pub mod schema;
pub mod skill;
pub mod store;
pub mod task;
pub mod templates;
pub mod toy_env;
pub mod vector;
