pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod image_io;
pub mod optim;
pub mod resample;
pub mod synthetic;
pub mod train;
pub mod fuse;
pub mod ablate;
