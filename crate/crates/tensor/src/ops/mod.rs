mod conv;
mod elementwise;
mod linalg;
mod nn;
mod norm;
pub(crate) mod shape;

pub use conv::ConvGeometry;
pub use norm::{Mode, RunningStats, BN_EPSILON, BN_MOMENTUM};
