//! Engine that turns natural-language prompt cells in a notebook into
//! short-lived widget panels, keeps panel widgets bound to kernel globals,
//! and injects generated code back into the notebook.
//!
//! Modules, bottom up: [`notebook`] (document model and context),
//! [`llm`] (model backends with record and replay), [`pipeline`] (agent
//! chain), [`kernel`] (Python interpreter process), [`widgets`] (manifest
//! and live sync), [`session`] (engine, events, HTTP) and [`scenario`]
//! (scripted headless runs).

pub mod config;
pub mod kernel;
pub mod llm;
pub mod notebook;
pub mod pipeline;
pub mod scenario;
pub mod session;
pub mod widgets;
