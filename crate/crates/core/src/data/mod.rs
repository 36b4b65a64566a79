//! Dataset plumbing: manifests, image decoding, synthetic generation, and
//! protocol splits.

mod image;
mod manifest;
mod split;
mod synth;

pub use image::{decode_image, decode_pgm, encode_pgm, resize_bilinear};
pub use manifest::{Environment, Manifest, Sample};
pub use split::{assert_disjoint, split, Protocol, SplitOut};
pub use synth::{generate, Profile, SynthConfig, GENERATOR_VERSION};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Two-way PAD ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Bonafide,
    Attack,
}

impl Label {
    /// Class index used by the loss and the logits layout.
    pub fn index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Attack => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "bonafide" => Some(Label::Bonafide),
            "attack" => Some(Label::Attack),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Bonafide => "bonafide",
            Label::Attack => "attack",
        })
    }
}

/// A manifest's images decoded into memory, in manifest order.
pub struct LoadedDataset<T: Scalar> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<Label>,
    /// Manifest path strings, echoed into decision files.
    pub sources: Vec<String>,
}

impl<T: Scalar> LoadedDataset<T> {
    /// Decodes every sample at `target_size` (the model input size).
    pub fn load(manifest: &Manifest, target_size: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.samples.len());
        let mut labels = Vec::with_capacity(manifest.samples.len());
        let mut sources = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            images.push(decode_image(&s.path, target_size)?);
            labels.push(s.label);
            sources.push(s.path.display().to_string());
        }
        Ok(LoadedDataset { images, labels, sources })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Training requires both classes to be present.
    pub fn require_both_classes(&self) -> Result<()> {
        let attacks = self.labels.iter().filter(|l| **l == Label::Attack).count();
        if attacks == 0 || attacks == self.labels.len() {
            return Err(Error::contract(
                "dataset",
                "training set must contain both bonafide and attack samples",
            ));
        }
        Ok(())
    }
}
