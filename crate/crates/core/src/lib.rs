//! Stylized online handwriting generation at desk scale.
//!
//! The pipeline: a synthetic two-level-style corpus ([`corpus`]) feeds a
//! trajectory data model ([`trajectory`]); a dual-head style encoder and a
//! content encoder ([`encoders`]) are trained with two contrastive
//! objectives ([`contrastive`]) alongside an autoregressive decoder that
//! emits Gaussian-mixture pen parameters ([`decoder`]); [`sampler`] turns a
//! trained model into characters and [`eval`] scores them.

pub mod autodiff;
pub mod checkpoint;
pub mod contrastive;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod sampler;
pub mod trajectory;
