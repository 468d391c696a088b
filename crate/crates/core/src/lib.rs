//! Exemplar-conditioned data augmentation for few-shot slices of labeled
//! datasets.

pub mod augment;
pub mod backend;
pub mod bench;
pub mod codec;
pub mod dataset;
pub mod metrics;
pub mod protocol;
pub mod review;
pub mod seed;
pub mod teacher;
