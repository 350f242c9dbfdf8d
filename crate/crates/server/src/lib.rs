//! HTTP service and admin tooling for the adventure engine.

pub mod accounts;
pub mod api;
pub mod cli;
pub mod config;
pub mod server;
pub mod store;
