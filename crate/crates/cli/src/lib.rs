//! File formats, configuration, training runs, evaluation and benchmarking
//! on top of `bgmatte-core`.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod infer;
pub mod io;
pub mod run;
