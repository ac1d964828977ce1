//! Fair neural-network training by gradient reversal on protected-attribute
//! branches, with the group and individual fairness metrics used to evaluate
//! it and an experiment harness around both.

pub mod autodiff;
pub mod data;
pub mod grad_model;
pub mod harness;
pub mod metrics;
pub mod nn;
