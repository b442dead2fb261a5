//! UDP channel emulator: a service that applies a configured baseband channel
//! to I/Q frames, and a blocking client for it.

mod client;
mod config;
mod server;
pub mod wire;

pub use client::{
    calibrate, reference_samples, ClientError, EmuChannel, EmuClient, CALIBRATION_FRAME, DEFAULT_RETRIES, DEFAULT_TIMEOUT,
};
pub use config::{ConfigError, EmuConfig, FramePreset};
pub use server::{apply_channel, serve, EmuServer, Stats, StatsSnapshot, FRAME_TIMEOUT};
