mod conv;
mod elementwise;
mod linalg;
mod reduce;
mod shape;

pub use elementwise::{gelu, sigmoid};
pub use shape::concat;
