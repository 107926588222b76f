pub mod basic;
pub mod spatial;
pub mod spectral;

pub use basic::{sigmoid, softmax_row, softmax_rows, softplus};
pub use spatial::{conv2d_forward, BatchStats};
pub use spectral::power_iteration;
