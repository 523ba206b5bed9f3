pub mod bootstrap;
pub mod collab;
pub mod config;
pub mod corpus;
pub mod domain;
pub mod gating;
pub mod ldp;
pub mod pipeline;
pub mod profiler;
