//! Event-guided low-light image enhancement built around a bidirectional
//! linear-attention (Bi-WKV) kernel.

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod cross_rwkv;
pub mod eisfe;
pub mod error;
pub mod events;
pub mod feature_init;
pub mod fft;
pub mod gradcheck;
pub mod image_io;
pub mod layers;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod wkv;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::EvRwkv;
pub use tensor::Tensor;
