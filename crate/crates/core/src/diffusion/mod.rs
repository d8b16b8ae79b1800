//! Latent DDPM: noise schedule, U-Net noise predictor and training loop.

mod precision;
mod schedule;
mod train;
mod unet;

pub use precision::{Compute, LossScaler, LossScaling, PrecisionPolicy};
pub use schedule::{make_schedule, timestep_embedding, NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use train::{
    load_model, noise_loss, noise_loss_in, Devices, LdmData, LdmTrainConfig, LdmTrainer, NoisePredictor, StepReport,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use unet::{UNet, UNetConfig};
