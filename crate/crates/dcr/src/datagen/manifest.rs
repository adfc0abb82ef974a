use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EmotionLabel, Modality, Polarity};
use crate::error::{arg, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub seq_len: usize,
    pub raw_dim: usize,
    /// Noise standard deviation is `1 / snr`.
    pub snr: f64,
}

/// Proportions of clean, benign-conflict and severe-conflict samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictMix {
    pub clean: f64,
    pub benign: f64,
    pub severe: f64,
}

impl ConflictMix {
    pub fn new(clean: f64, benign: f64, severe: f64) -> Self {
        ConflictMix {
            clean,
            benign,
            severe,
        }
    }
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub polarity_table: Vec<Polarity>,
    /// Indexed by [`Modality::index`].
    pub modalities: [ModalitySpec; 3],
    pub mix: ConflictMix,
    /// Peak amplitude of a clean prototype trajectory.
    pub signal_gain: f64,
    /// Amplitude multiplier for a severe-conflict modality.
    pub severe_gain: f64,
    /// Envelope floor; the shared temporal bump rises from here to 1.
    pub envelope_floor: f64,
    /// Width of the shared temporal bump as a fraction of the sequence length.
    pub envelope_width: f64,
    /// Range of the benign blend factor toward the neutral prototype.
    pub benign_blend: (f64, f64),
    /// `prototypes[modality][class]`, unit vectors of length `raw_dim`.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl DatasetManifest {
    /// Three-class (negative, neutral, positive) manifest with default shapes.
    pub fn standard(seed: u64) -> Self {
        Self::build(
            vec![Polarity::Negative, Polarity::Neutral, Polarity::Positive],
            ConflictMix::new(0.5, 0.3, 0.2),
            seed,
        )
    }

    /// Seven emotion classes: anger, disgust, fear, sadness, neutral, joy, surprise.
    pub fn seven_class(seed: u64) -> Self {
        use Polarity::*;
        Self::build(
            vec![
                Negative, Negative, Negative, Negative, Neutral, Positive, Positive,
            ],
            ConflictMix::new(0.5, 0.3, 0.2),
            seed,
        )
    }

    pub fn build(polarity_table: Vec<Polarity>, mix: ConflictMix, seed: u64) -> Self {
        let modalities = [
            ModalitySpec {
                seq_len: 16,
                raw_dim: 24,
                snr: 1.0,
            },
            ModalitySpec {
                seq_len: 32,
                raw_dim: 12,
                snr: 1.0,
            },
            ModalitySpec {
                seq_len: 16,
                raw_dim: 16,
                snr: 1.0,
            },
        ];
        let mut m = DatasetManifest {
            num_classes: polarity_table.len(),
            polarity_table,
            modalities,
            mix,
            signal_gain: 1.0,
            severe_gain: 2.5,
            envelope_floor: 0.25,
            envelope_width: 0.2,
            benign_blend: (0.5, 0.9),
            prototypes: Vec::new(),
            seed,
        };
        m.regenerate_prototypes();
        m
    }

    /// Redraws the prototype directions from `self.seed`.
    pub fn regenerate_prototypes(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x70_72_6f_74_6f);
        self.prototypes = self
            .modalities
            .iter()
            .map(|spec| {
                (0..self.num_classes)
                    .map(|_| {
                        let v = Tensor::randn(&[spec.raw_dim], 1.0, &mut rng).into_data();
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        v.into_iter().map(|x| x / norm).collect()
                    })
                    .collect()
            })
            .collect();
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return arg(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.polarity_table.len() != self.num_classes {
            return arg("polarity table length differs from num_classes");
        }
        for (m, spec) in Modality::ALL.iter().zip(&self.modalities) {
            if spec.seq_len == 0 || spec.raw_dim == 0 {
                return arg(format!(
                    "modality {} has a zero length or dimension",
                    m.name()
                ));
            }
            if !(spec.snr > 0.0 && spec.snr.is_finite()) {
                return arg(format!("modality {} needs a positive snr", m.name()));
            }
        }
        let ConflictMix {
            clean,
            benign,
            severe,
        } = self.mix;
        if [clean, benign, severe]
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
            || (clean + benign + severe - 1.0).abs() > 1e-9
        {
            return arg(format!(
                "conflict mix {:?} must be a distribution",
                self.mix
            ));
        }
        let (lo, hi) = self.benign_blend;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return arg("benign blend range must lie within [0, 1]");
        }
        if self.neutral_class().is_none() && benign > 0.0 {
            return arg("benign conflicts need a neutral class");
        }
        if severe > 0.0 && self.classes_with(Polarity::Negative).is_empty() {
            return arg("severe conflicts need negative and positive classes");
        }
        if self.prototypes.len() != 3
            || self
                .prototypes
                .iter()
                .zip(&self.modalities)
                .any(|(p, s)| p.len() != self.num_classes || p.iter().any(|v| v.len() != s.raw_dim))
        {
            return arg("prototype table does not match the modality specs");
        }
        Ok(())
    }

    pub fn label(&self, class_index: usize) -> EmotionLabel {
        EmotionLabel {
            class_index,
            polarity: self.polarity_table[class_index],
        }
    }

    pub fn classes_with(&self, polarity: Polarity) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|&c| self.polarity_table[c] == polarity)
            .collect()
    }

    pub fn neutral_class(&self) -> Option<usize> {
        self.classes_with(Polarity::Neutral).first().copied()
    }

    pub fn spec(&self, m: Modality) -> ModalitySpec {
        self.modalities[m.index()]
    }

    pub fn prototype(&self, m: Modality, class_index: usize) -> &[f64] {
        &self.prototypes[m.index()][class_index]
    }

    /// Canonical key-sorted JSON text.
    pub fn canonical_text(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serialises");
        serde_json::to_string(&value).expect("value serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_is_key_sorted_and_round_trips() {
        let m = DatasetManifest::standard(7);
        let text = m.canonical_text();
        assert!(text.find("\"benign_blend\"").unwrap() < text.find("\"mix\"").unwrap());
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn degenerate_manifests_are_rejected() {
        let mut m = DatasetManifest::standard(1);
        m.num_classes = 1;
        assert!(m.validate().is_err());
        let mut m = DatasetManifest::standard(1);
        m.modalities[1].seq_len = 0;
        assert!(m.validate().is_err());
        let mut m = DatasetManifest::standard(1);
        m.mix = ConflictMix::new(0.5, 0.5, 0.5);
        assert!(m.validate().is_err());
        assert!(DatasetManifest::seven_class(1).validate().is_ok());
    }
}
