pub mod autodiff;
pub mod compositor;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod networks;
pub mod trainer;
pub mod video_io;

pub use error::{Error, Result};
