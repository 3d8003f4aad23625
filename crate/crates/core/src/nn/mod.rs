//! Building blocks shared by the generator and discriminator.

pub mod clstm;
pub mod layers;
pub mod params;
pub mod roi;

pub use clstm::ConvLstm;
pub use layers::{lrelu, Conv2d, Embedding, Linear, ResBlock, LEAKY_SLOPE};
pub use params::{check_store_gradients, Bound, GradCheckReport, Init, ParameterStore};
