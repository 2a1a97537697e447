//! Issue-resolution pipeline: BM25 retrieval over file skeletons, JSON task
//! construction for a retrieval and an editing model, structured-edit
//! application with validation and resampling, unified-diff synthesis, and
//! training-data curation.

pub mod repo;
pub mod skeleton;
pub mod bm25;
pub mod task;
pub mod edit;
pub mod inference;
pub mod dataset;
pub mod config;
pub mod cli;
