//! Hexagonal coverage path planning for maritime surveillance areas.

pub mod aoi_graph;
pub mod cli;
pub mod dataset;
pub mod environment;
pub mod evaluation;
pub mod geometry;
pub mod heuristics;
pub mod inference;
pub mod instance;
pub mod policy;
pub mod training;
