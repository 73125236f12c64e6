//! Experiment orchestration shared by the `kdseg` binary and the acceptance
//! suite: resolved run configuration, run records, and the ablation ladder.

pub mod ablation;
pub mod runcfg;
