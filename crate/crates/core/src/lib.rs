pub mod data_io;
pub mod cli;
pub mod count_model;
pub mod distributions;
pub mod evaluation;
pub mod geometry;
pub mod kernels;
pub mod samplers;
pub mod simulate;
pub mod threshold;
pub mod value_model;
