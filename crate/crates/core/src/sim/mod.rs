//! Underwater degradation, synthetic scenes, and spectrum analysis.

mod optics;
mod ppm;
mod scene;
mod spectrum;

pub use optics::{degrade, gaussian_blur, gaussian_kernel, OpticalParams};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use scene::{
    degrade_scenes, generate_scenes, load_dataset, split_seed, synth_scene, write_dataset,
    BoxRecord, DatasetManifest, GtBox, ManifestEntry, SceneItem, SceneSpec,
};
pub use spectrum::{
    parseval_residual, power_spectrum, SpectrumProfile, MAX_SPECTRUM_SIDE,
};
