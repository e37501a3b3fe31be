//! Minimal layer library: convolutions, dense layers, composable blocks and
//! Adam, each with a hand-written backward pass.

pub mod adam;
pub mod block;
pub mod conv;
pub mod float;
pub mod linear;
pub mod param;

pub use adam::Adam;
pub use block::{Block, BlockCache};
pub use conv::Conv2d;
pub use float::Float;
pub use linear::{Activation, Linear};
pub use param::{Param, Parameterized};
