//! The toy MM-DiT: configuration, parameters, forward pass and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod state;
pub mod trace;

pub use checkpoint::{load_checkpoint, load_lora, save_checkpoint, save_lora, sidecar_path};
pub use config::{ModelConfig, EOS, PAD, SOS};
pub use forward::{
    attention_heads, build_forward, embed_image, embed_text, joint_attention, model_forward, patchify, unpatchify,
    ForwardGraph, ForwardOutput, GradMode, Latent,
};
pub use state::{LoraAdapter, LoraSpec, ModelState, ParamId, ParamStore};
pub use trace::{AttentionTrace, Intervention, LayerRecord};
