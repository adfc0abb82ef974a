//! Synthetic multimodal emotion samples with controlled modality conflicts.
//!
//! Every clean sample is emitted from one latent emotion: each modality's
//! sequence is that class's prototype direction, modulated by a temporal
//! envelope shared across modalities, plus Gaussian noise. Conflicts are then
//! injected into one modality:
//!
//! * **benign**: the modality is blended toward the neutral prototype, so its
//!   evidence becomes weak or ambiguous without contradicting the others;
//! * **severe**: the modality is re-emitted from a class of the opposite
//!   polarity, so it actively contradicts the multimodal label.

mod conflict;
mod generate;
mod io;
mod manifest;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

pub use conflict::{classify_conflict, inject_conflict};
pub use generate::{generate_dataset, Dataset, Split, SplitName};
pub use io::{load_dataset, save_dataset};
pub use manifest::{ConflictMix, DatasetManifest, ModalitySpec};

/// The three input streams, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    T,
    A,
    V,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::T, Modality::A, Modality::V];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T => "T",
            Modality::A => "A",
            Modality::V => "V",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative,
    Neutral,
    Positive,
}

impl Polarity {
    pub fn opposite(self) -> Option<Polarity> {
        match self {
            Polarity::Negative => Some(Polarity::Positive),
            Polarity::Positive => Some(Polarity::Negative),
            Polarity::Neutral => None,
        }
    }

    /// Scalar score used for regression-style metrics.
    pub fn score(self) -> f64 {
        match self {
            Polarity::Negative => -1.0,
            Polarity::Neutral => 0.0,
            Polarity::Positive => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictClass {
    None,
    Benign,
    Severe,
}

impl ConflictClass {
    pub const ALL: [ConflictClass; 3] = [
        ConflictClass::None,
        ConflictClass::Benign,
        ConflictClass::Severe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConflictClass::None => "none",
            ConflictClass::Benign => "benign",
            ConflictClass::Severe => "severe",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmotionLabel {
    pub class_index: usize,
    pub polarity: Polarity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySignal {
    pub modality: Modality,
    /// `(L_raw, d_raw)` raw observations.
    pub sequence: Tensor,
    pub snr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Indexed by [`Modality::index`].
    pub signals: [ModalitySignal; 3],
    /// Indexed by [`Modality::index`].
    pub unimodal_labels: [EmotionLabel; 3],
    pub multimodal_label: EmotionLabel,
    pub conflict_class: ConflictClass,
    pub conflict_modality: Option<Modality>,
}

impl Sample {
    pub fn signal(&self, m: Modality) -> &ModalitySignal {
        &self.signals[m.index()]
    }

    pub fn unimodal_label(&self, m: Modality) -> EmotionLabel {
        self.unimodal_labels[m.index()]
    }

    pub fn label(&self) -> usize {
        self.multimodal_label.class_index
    }
}
