//! Hierarchical prototype verbalizers.
//!
//! Instances are embedded into a prototype space, one learned prototype per
//! sense per hierarchy level. Training combines three contrastive terms
//! (instance–instance, instance–prototype, prototype–prototype); prediction
//! is a softmax over cosine similarity to the prototypes of one level.
//! Prototype sets for two languages can be aligned class by class.

// Norm guards are written `!(n > floor)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod hierarchy;
pub mod kv;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod prototypes;
pub mod trainer;
pub mod xlingual;
