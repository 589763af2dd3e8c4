//! World-model-based locomotion learning with task-invariant property
//! prediction and regularized target-domain adaptation.

pub mod adaptation;
pub mod agent;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod evalkit;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod replay;
pub mod rssm;
pub mod tensor;
pub mod tip;
