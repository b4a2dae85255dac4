pub mod corpus;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pairs;
pub mod text;
pub mod training;
pub mod uniqueness;
