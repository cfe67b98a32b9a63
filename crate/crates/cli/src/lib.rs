//! Service and command line front-end for the moderation agent.

pub mod commands;
pub mod config;
pub mod runtime;
pub mod service;

pub use config::ServiceConfig;
pub use service::{router, AppState};
