//! Command-line verbs and the triage HTTP service.

pub mod commands;
pub mod service;
