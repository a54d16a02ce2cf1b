//! Neural-network building blocks on top of the tape.

pub mod attention;
pub mod autoencoder;
pub mod layers;
pub mod params;
pub mod stepper;
pub mod vit;
pub mod wae;

pub use attention::{AttentionConfig, EncoderBlock, MultiHeadAttention};
pub use layers::{dense, layer_norm, FeedForward, Init, LayerNorm, Linear};
pub use params::{Ctx, ParamId, ParamStore};
pub use vit::{patchify, unpatchify, PatchSpec, VitLayer};
pub use autoencoder::{AeConfig, Autoencoder, Decoder, Encoder, LayerPlan};
pub use wae::{train_autoencoder, NormStats, TrainHistory, WaeLossWeights, WaeTrainConfig};
pub use stepper::{train_stepper, LatentStepper, StepperConfig, StepperTrainConfig};
