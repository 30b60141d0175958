#![allow(dead_code, clippy::too_many_arguments, clippy::type_complexity)]

pub mod e2e;
pub mod freeze;
pub mod gradcheck;
pub mod metric_oracle;
pub mod synth_checks;
