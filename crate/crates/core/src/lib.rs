pub mod experiments;
pub mod geometry;
pub mod metrics;
pub mod nnet;
pub mod scene;
pub mod tracker;
pub mod train;
pub mod volume;
