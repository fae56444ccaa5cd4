//! Multimodal sequence classification with temporally hybrid recurrent
//! networks.
//!
//! Per-modality LSTMs feed a learned linear+sigmoid fusion layer, whose
//! output drives a combined LSTM. Frame-level (order-free) classifiers per
//! modality complement it, and a validation-learned convex combination
//! merges all component scores. The usual early-fusion, late-fusion and
//! single-modality baselines are included for comparison, along with
//! accuracy, mean average precision and normalized edit distance.

pub mod data;
pub mod fusionnet;
pub mod metrics;
pub mod numerics;
pub mod recurrent;
pub mod trainer;
