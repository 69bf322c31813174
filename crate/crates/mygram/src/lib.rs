//! MyGram: multi-modal knowledge-graph entity alignment.
//!
//! The pipeline encodes each entity's structure, relation, attribute,
//! and visual modalities, diffuses modality features over the shared
//! graph, fuses them with a transformer block, and trains with an
//! InfoNCE alignment loss plus a Gram-determinant volume loss that
//! pulls the four modality vectors of a matched pair into a common
//! subspace.

pub mod diffusion;
pub mod encoders;
pub mod fusion;
pub mod gradcheck;
pub mod kgdata;
pub mod matrix;
pub mod objective;
pub mod pipeline;
pub mod tensor;
