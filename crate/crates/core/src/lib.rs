pub mod codec;
pub mod dataset;
pub mod detector;
pub mod masking;
pub mod nncore;
pub mod phy;
pub mod pipeline;
pub mod vision;
