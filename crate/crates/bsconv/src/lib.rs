pub mod binarize;
pub mod layers;
pub mod error;
pub mod mat;
pub mod points;
pub mod cost;
pub mod metrics;
pub mod search;
pub mod synth;
pub mod sparse;
pub mod tape;
