//! Leaf detection, disease classification, evaluation metrics and the
//! disease knowledge base behind the leafscan advisory service.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod detector;
pub mod gradcheck_suite;
pub mod image;
pub mod kb;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;
