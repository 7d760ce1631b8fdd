pub mod anchors;
pub mod data;
pub mod embed;
pub mod http;
pub mod kmeans;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
