pub mod elementwise;
pub mod linalg;
pub mod reduce;
pub mod shape;
