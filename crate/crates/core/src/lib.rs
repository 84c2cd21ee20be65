pub mod autodiff;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod raster;
pub mod synth;
pub mod train;
