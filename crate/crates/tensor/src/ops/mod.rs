pub mod attention;
pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod nn;
pub mod sampling;
pub mod shape;
