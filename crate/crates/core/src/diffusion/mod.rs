//! Latent denoising diffusion: schedule, forward noising, the conditional
//! noise predictor, ancestral sampling, training and checkpoints.

pub mod autoencoder;
pub mod checkpoint;
pub mod denoiser;
pub mod process;
pub mod prompt;
pub mod schedule;
pub mod train;

pub use autoencoder::{psnr, Autoencoder, AutoencoderTraining, PatchAutoencoder, PatchAutoencoderConfig};
pub use denoiser::{timestep_embedding, Denoiser, DenoiserConfig};
pub use process::{cfg_combine, forward_diffuse, posterior_step, predict_x0, reverse_step, sample, sample_noise, Clip};
pub use prompt::{token_id, PromptEncoding, NULL_TOKEN, PAD_TOKEN, PLACEHOLDER_TOKEN, VOCABULARY};
pub use checkpoint::Checkpoint;
pub use train::{train_denoiser, TrainConfig, TrainingExample};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleConfig, ScheduleShape};

use crate::error::Result;
use crate::grid::Grid;

/// A conditional noise estimator `eps_theta(z_t, t, c)`. `None` selects the
/// unconditional (null) prompt.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Grid, t: usize, cond: Option<&PromptEncoding>) -> Result<Grid>;
    fn context_len(&self) -> usize;
}
