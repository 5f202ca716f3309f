//! Reading and writing point clouds, cameras, images and checkpoints.

pub mod cameras;
pub mod checkpoint;
pub mod images;
pub mod ply;

pub use cameras::{load_cameras, save_cameras, CameraRecord};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
pub use images::{load_image, load_raw, save_image, save_planes, save_raw, ChannelRange};
pub use ply::{load_point_cloud, write_point_cloud, PlyFormat};
