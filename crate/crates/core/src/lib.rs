pub mod classifier;
pub mod dataset;
pub mod evaluation;
pub mod filters;
pub mod indices;
pub mod mosaic;
pub mod pipeline;
pub mod preprocess;
pub mod raster;
pub mod registration;
