//! Sample container, bone derivation, temporal transforms, the synthetic
//! dataset generator, and manifests.

pub mod baseline;
pub mod bones;
pub mod manifest;
pub mod sample;
pub mod synth;
pub mod transform;

pub use baseline::{nearest_centroid_accuracy, velocity_features};
pub use bones::joints_to_bones;
pub use manifest::{DatasetManifest, ManifestRecord};
pub use sample::{read_sample, write_sample, SkeletonSequence};
pub use synth::{synth_generate, SynthConfig, CLASS_NAMES};
pub use transform::{apply_augment, augment, pad_repeat, AugmentParams};

use crate::error::{Error, Result};

/// Input modality of one network stream: first-order joint coordinates or
/// second-order bone vectors derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Joints,
    Bones,
}

impl Stream {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joints" => Ok(Stream::Joints),
            "bones" => Ok(Stream::Bones),
            other => Err(Error::invalid(format!(
                "stream must be 'joints' or 'bones', got '{other}'"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stream::Joints => "joints",
            Stream::Bones => "bones",
        }
    }
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
