pub mod conv;
pub mod dropout;
pub mod elementwise;
pub mod linalg;
pub mod pool;
pub mod reduce;
pub mod shape;
