//! Differentiable multi-channel 3D Gaussian splatting on the CPU.
//!
//! A colored point cloud becomes a table of anisotropic Gaussians that are
//! projected, depth sorted and alpha blended into color images and
//! per-pixel feature maps. The renderer has an analytic backward pass, and
//! the fitting loops optimize the Gaussian table against target images.

pub mod buffer;
pub mod cli;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod grad;
pub mod io;
pub mod losses;
pub mod primitives;
pub mod raster;
pub mod synthetic;

pub use buffer::Image;
pub use error::{Error, Result};
pub use fit::{fit_features, fit_gaussians, fit_scene, FitConfig, FitReport, View};
pub use geometry::{CameraModel, Covariance2, Covariance3, Quat};
pub use grad::{finite_diff_check, render_backward, GradCheckReport, LossReduction, ParamGradients};
pub use primitives::{ActivatedGaussian, GaussianPrimitive, ParamGroup, ParamTable, PointCloud, Scene};
pub use raster::{render, render_reference, PayloadSelect, RasterConfig, RenderBuffers};
