//! Multi-frame EEG images: per-electrode band power, projected onto the
//! plane and interpolated onto a square grid, one frame per time window.

mod domain;
mod frames;
mod interpolate;
mod montage;
mod projection;
mod spectral;

pub use domain::{normalize_images, ChannelStats, SubjectDomain, MIN_STD, N_CLASSES};
pub use frames::{build_multiframe, ImageBuilder, ImagingConfig, MultiFrameEEGImage};
pub use interpolate::{interpolate_to_grid, GridSpec, InterpolationPlan, NEIGHBOURS};
pub use montage::{Electrode, ElectrodeMontage};
pub use projection::{project_azimuthal_equidistant, UNIT_TOLERANCE};
pub use spectral::{band_power, Band, Periodogram};
