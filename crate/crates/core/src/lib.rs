//! Reference-guided latent editing with masked self-attention.
//!
//! The crate covers DDIM inversion and sampling over a discrete noise
//! schedule, masked and mixed attention, cross-attention mask tracking,
//! a deterministic toy noise predictor and binary file formats for the
//! intermediate artefacts.

pub mod attention;
pub mod backend;
pub mod config;
pub mod controller;
pub mod error;
pub mod hooks;
pub mod image;
pub mod io;
pub mod masks;
pub mod predictor;
pub mod schedule;
pub mod selftest;

pub use attention::{
    mask_attn, plain_attention, sr_attn, AttentionSite, AttentionTensors, ReferenceFeatureCache,
    MASK_SENTINEL,
};
pub use backend::{BackendConfig, ToyBackend, ZeroNoise};
pub use config::{BackendKind, RunConfig};
pub use controller::{
    blend, edit, edit_latents, extract_reference, gate_active, invert_source, reconstruction_step, BlendMode,
    Diagnostics, EditOptions, EditOutcome, EditOutput, EditPlan, EditRequest, GatingPolicy, StepDiagnostics,
};
pub use error::{Result, SpecRefError};
pub use hooks::{AttentionHooks, PlainHooks, Recorder};
pub use image::{GrayImage, RgbImage};
pub use masks::{
    compute_blend_mask, load_source_mask, update_target_mask, CrossAttnRecord, SourceMask, TargetMask,
};
pub use predictor::{NoisePredictor, TextEmbedding};
pub use schedule::{
    build_schedule, invert_step, invert_trajectory, prev_step, LatentState, LatentTrajectory, NoiseSchedule,
};
pub use selftest::{run_selftest, PropertyResult, SelfTestOptions};
