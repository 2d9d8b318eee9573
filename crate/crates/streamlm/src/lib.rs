pub mod numkit;
pub mod rope3d;
pub mod mask;
pub mod model;
pub mod densedata;
pub mod stream;
pub mod bench;
pub mod checkpoint;
pub mod train;
pub mod verify;

pub use model::{Model, ModelConfig, TimedToken};
