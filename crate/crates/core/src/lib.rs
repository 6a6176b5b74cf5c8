pub mod datasets;
pub mod gradcore;
pub mod models;
pub mod simenv;
pub mod training;
pub mod evals;
pub mod interpret;
pub mod cli;
