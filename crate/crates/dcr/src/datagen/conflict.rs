use rand::seq::IndexedRandom;
use rand::Rng;

use super::generate::emit;
use super::{ConflictClass, DatasetManifest, EmotionLabel, Modality, Polarity, Sample};
use crate::error::{arg, Result};

fn contradicts(a: Polarity, b: Polarity) -> bool {
    a != Polarity::Neutral && b != Polarity::Neutral && a != b
}

/// Severity from annotated polarities: severe when some modality's polarity
/// strictly contradicts the multimodal one, benign when some modality merely
/// differs, none when all agree.
pub fn classify_conflict(unimodal: &[EmotionLabel; 3], multimodal: EmotionLabel) -> ConflictClass {
    let target = multimodal.polarity;
    if unimodal.iter().any(|l| contradicts(l.polarity, target)) {
        ConflictClass::Severe
    } else if unimodal.iter().any(|l| l.polarity != target) {
        ConflictClass::Benign
    } else {
        ConflictClass::None
    }
}

/// Perturbs one modality of a clean sample.
///
/// Benign blends the target sequence toward a neutral trajectory (toward a
/// random non-neutral class when the sample itself is neutral) and relabels
/// that modality accordingly. Severe re-emits the target from a class of the
/// opposite polarity at `severe_gain` amplitude. The multimodal label never
/// changes.
pub fn inject_conflict<R: Rng + ?Sized>(
    sample: &Sample,
    kind: ConflictClass,
    target: Modality,
    manifest: &DatasetManifest,
    rng: &mut R,
) -> Result<Sample> {
    if sample.conflict_class != ConflictClass::None {
        return arg(format!("sample {} already carries a conflict", sample.id));
    }
    let mut out = sample.clone();
    let spec = manifest.spec(target);
    let m_label = sample.multimodal_label;
    match kind {
        ConflictClass::None => return arg("conflict kind must be benign or severe"),
        ConflictClass::Benign => {
            let toward = if m_label.polarity == Polarity::Neutral {
                let choices: Vec<usize> = (0..manifest.num_classes)
                    .filter(|&c| manifest.polarity_table[c] != Polarity::Neutral)
                    .collect();
                *choices
                    .choose(rng)
                    .expect("manifest validated with a polar class")
            } else {
                manifest
                    .neutral_class()
                    .ok_or_else(|| crate::Error::Argument("manifest has no neutral class".into()))?
            };
            let (lo, hi) = manifest.benign_blend;
            let beta = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
            let center = rng.random_range(0.0..spec.seq_len as f64);
            let fresh = emit(manifest, target, toward, center, manifest.signal_gain, rng);
            let seq = &mut out.signals[target.index()].sequence;
            for (x, f) in seq.data_mut().iter_mut().zip(fresh.data()) {
                *x = (1.0 - beta) * *x + beta * f;
            }
            out.unimodal_labels[target.index()] = manifest.label(toward);
        }
        ConflictClass::Severe => {
            let Some(opposite) = m_label.polarity.opposite() else {
                return arg(format!(
                    "sample {} is neutral; a severe conflict needs an opposite polarity",
                    sample.id
                ));
            };
            let choices = manifest.classes_with(opposite);
            let Some(&class) = choices.choose(rng) else {
                return arg(format!("manifest has no {opposite:?} class"));
            };
            let center = rng.random_range(0.0..spec.seq_len as f64);
            let gain = manifest.signal_gain * manifest.severe_gain;
            out.signals[target.index()].sequence = emit(manifest, target, class, center, gain, rng);
            out.unimodal_labels[target.index()] = manifest.label(class);
        }
    }
    out.conflict_class = kind;
    out.conflict_modality = Some(target);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate::clean_sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn label(p: Polarity) -> EmotionLabel {
        let class_index = match p {
            Polarity::Negative => 0,
            Polarity::Neutral => 1,
            Polarity::Positive => 2,
        };
        EmotionLabel {
            class_index,
            polarity: p,
        }
    }

    #[test]
    fn figure_style_example_is_severe() {
        use Polarity::*;
        // T, A, V order: A negative against a positive multimodal label
        let uni = [label(Positive), label(Negative), label(Positive)];
        assert_eq!(
            classify_conflict(&uni, label(Positive)),
            ConflictClass::Severe
        );
        let uni = [label(Positive); 3];
        assert_eq!(
            classify_conflict(&uni, label(Positive)),
            ConflictClass::None
        );
    }

    #[test]
    fn exhaustive_polarity_enumeration() {
        use Polarity::*;
        let all = [Negative, Neutral, Positive];
        let mut seen = [0usize; 3];
        for &t in &all {
            for &a in &all {
                for &v in &all {
                    for &m in &all {
                        let got = classify_conflict(&[label(t), label(a), label(v)], label(m));
                        // brute-force rule: opposite signs on the {-1, 0, 1} scale
                        let scores = [t.score(), a.score(), v.score()];
                        let ms = m.score();
                        let expected = if scores.iter().any(|s| s * ms < 0.0) {
                            ConflictClass::Severe
                        } else if scores.iter().any(|&s| s != ms) {
                            ConflictClass::Benign
                        } else {
                            ConflictClass::None
                        };
                        assert_eq!(got, expected, "{t:?} {a:?} {v:?} / {m:?}");
                        seen[got as usize] += 1;
                    }
                }
            }
        }
        assert_eq!(seen.iter().sum::<usize>(), 81);
        assert_eq!(seen[0], 3);
    }

    #[test]
    fn severe_on_audio_inverts_polarity() {
        let manifest = DatasetManifest::standard(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = clean_sample(&manifest, "x".into(), 2, &mut rng);
        let c =
            inject_conflict(&s, ConflictClass::Severe, Modality::A, &manifest, &mut rng).unwrap();
        assert_eq!(c.unimodal_label(Modality::A).polarity, Polarity::Negative);
        assert_eq!(c.multimodal_label.polarity, Polarity::Positive);
        assert_eq!(
            classify_conflict(&c.unimodal_labels, c.multimodal_label),
            ConflictClass::Severe
        );
        assert_eq!(c.conflict_modality, Some(Modality::A));
        assert_ne!(c.signal(Modality::A), s.signal(Modality::A));
        assert_eq!(c.signal(Modality::T), s.signal(Modality::T));
    }

    #[test]
    fn benign_on_visual_is_neutral() {
        let manifest = DatasetManifest::standard(3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = clean_sample(&manifest, "x".into(), 2, &mut rng);
        let c =
            inject_conflict(&s, ConflictClass::Benign, Modality::V, &manifest, &mut rng).unwrap();
        assert_eq!(c.unimodal_label(Modality::V).polarity, Polarity::Neutral);
        assert_eq!(
            classify_conflict(&c.unimodal_labels, c.multimodal_label),
            ConflictClass::Benign
        );
        assert_eq!(c.multimodal_label, s.multimodal_label);
    }

    #[test]
    fn neutral_sample_cannot_be_severe() {
        let manifest = DatasetManifest::standard(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = clean_sample(&manifest, "x".into(), 1, &mut rng);
        assert!(
            inject_conflict(&s, ConflictClass::Severe, Modality::T, &manifest, &mut rng).is_err()
        );
        let b =
            inject_conflict(&s, ConflictClass::Benign, Modality::T, &manifest, &mut rng).unwrap();
        assert_eq!(
            classify_conflict(&b.unimodal_labels, b.multimodal_label),
            ConflictClass::Benign
        );
        assert!(
            inject_conflict(&b, ConflictClass::Benign, Modality::A, &manifest, &mut rng).is_err()
        );
    }
}
