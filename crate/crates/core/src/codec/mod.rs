//! Quantized joint source-channel codec: ViT (or CNN-only) encoder, latent
//! masking, channel-coding CNNs, 16QAM-level quantizer and mirrored decoder,
//! with the three-stage training procedure.

mod config;
mod gradcheck;
mod model;
mod train;

use std::path::PathBuf;

pub use config::{cnn_only_variant, CodecConfig, Variant};
pub use gradcheck::{end_to_end_gradcheck, GradcheckReport};
pub use model::{decode_graph, dequantize, encode_graph, groups, Codec, ForwardMode, GROUP_CC_DEC, GROUP_CC_ENC, SQUASH};
pub use train::{
    eval_loss, finetune, train_stage, train_stage1, train_stage2, ChannelDraw, EpochRecord, Sample, SnrSpec, Stage,
    TrainConfig, TRAIN_LOG_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("codec config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("stage {stage} diverged at epoch {epoch}; last good parameters restored{}", checkpoint.as_ref().map(|p| format!(" and saved to {}", p.display())).unwrap_or_default())]
    Diverged { stage: u8, epoch: usize, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Nn(#[from] crate::nncore::NnError),
    #[error(transparent)]
    Vision(#[from] crate::vision::VisionError),
    #[error(transparent)]
    Masking(#[from] crate::masking::MaskingError),
    #[error(transparent)]
    Phy(#[from] crate::phy::PhyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
