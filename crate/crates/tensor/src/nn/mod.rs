pub mod batchnorm;
pub mod conv;
pub mod pool;
