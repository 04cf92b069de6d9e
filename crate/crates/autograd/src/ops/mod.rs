mod conv;
pub(crate) mod elementwise;
mod linalg;
mod loss;
mod lstm;
mod shape;

pub use conv::{Conv1dCfg, Conv2dCfg};
pub use elementwise::sigmoid;
pub use loss::log_softmax_rows;
