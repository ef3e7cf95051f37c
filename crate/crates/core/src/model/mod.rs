pub mod data;
pub mod mlp;
pub mod transformer;

pub use data::{Dataset, Task};
pub use mlp::Mlp;
pub use transformer::{AttentionScale, Batch, ModelConfig, Transformer};
