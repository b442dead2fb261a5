//! Images, patch grids, DoG keypoints and PSNR/SSIM.

mod image;
mod keypoints;
mod metrics;
mod ppm;

pub use image::{ImageTensor, PatchGrid, Side};
pub use keypoints::{dog_keypoints, keypoints_per_patch, write_keypoints_csv, DogParams, Keypoint, KeypointList};
pub use metrics::{luma, psnr, ssim, PSNR_CAP_DB};
pub use ppm::{decode_ppm, encode_ppm, load_image, save_image};

#[derive(Debug, thiserror::Error)]
pub enum VisionError {
    #[error("ppm: {msg} (byte offset {offset})")]
    Ppm { offset: usize, msg: String },
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
