//! Small neural-network toolkit with hand-written backward passes.
//!
//! All layers work on batches of row vectors (`rows x features`). Each forward
//! call returns a cache that the matching backward call consumes; gradients
//! accumulate into the [`ParamStore`] that owns the weights.

mod checkpoint;
mod gru;
mod layers;
mod mixer;
mod params;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use gru::{GruCache, GruCell, GruState};
pub use layers::{elu, elu_grad, relu, sigmoid, Dense, Mlp, MlpCache};
pub use mixer::{Mixer, MixerCache};
pub use params::{AdamConfig, Matrix, ParamId, ParamStore};
