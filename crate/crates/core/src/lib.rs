#![allow(clippy::too_many_arguments, clippy::type_complexity, clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod coco;
pub mod config;
pub mod experiment;
pub mod geometry;
pub mod groups;
pub mod metrics;
pub mod model;
pub mod report;
pub mod sample;
pub mod surgery;
pub mod synth;
pub mod train;
