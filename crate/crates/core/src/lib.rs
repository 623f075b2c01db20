//! Data model, vascular phantoms and Stage-1 pseudo-label generation for
//! sparse-annotation carotid segmentation.
//!
//! * [`volume`]: 3D images, label maps and the `.vvolh`/`.vvol` format
//! * [`nifti`]: one-way NIfTI-1 import
//! * [`phantom`]: synthetic vessels with exact ground truth
//! * [`labelprop`]: A-IPL and centroid-guided C-IPL interpolation
//! * [`srpl`]: promptable-segmenter refinement with box-perturbation voting
//! * [`metrics`]: Dice, IoU, precision, recall and average surface distance

pub mod components;
pub mod labelprop;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod srpl;
pub mod volume;

pub use volume::{AnyVolume, Dims, LabelVolume, Plane, Spacing, Volume3D, VolumeError};
