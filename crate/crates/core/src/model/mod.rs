pub mod checkpoint;
pub mod gradcheck;
pub mod tensor;
pub mod unet;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use tensor::{sigmoid, Element, Tape, Var};
pub use unet::{Param, UNet, UNetConfig};
