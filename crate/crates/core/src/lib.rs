//! Multi-reference super-resolution: model, dataset construction, and
//! evaluation, on a small self-contained tensor core with verifiable
//! gradients.

pub mod alloc_track;
pub mod error;
pub mod image;
pub mod lmr;
pub mod model;
pub mod tensor;

#[cfg(test)]
#[global_allocator]
static TEST_ALLOC: alloc_track::TrackingAlloc = alloc_track::TrackingAlloc::new();


pub use error::{Error, Result};
pub use tensor::Tensor;
