use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::conflict::inject_conflict;
use super::{ConflictClass, DatasetManifest, Modality, ModalitySignal, Polarity, Sample};
use crate::error::{arg, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

/// Sample indices per partition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
    pub split: Split,
}

impl Dataset {
    pub fn subset(&self, name: SplitName) -> Vec<&Sample> {
        self.split
            .get(name)
            .iter()
            .map(|&i| &self.samples[i])
            .collect()
    }
}

/// SplitMix64 finaliser; derives independent per-sample seeds.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Prototype trajectory of `class` for `m` under a temporal bump centred at
/// `center`, plus `N(0, 1/snr)` noise.
pub(crate) fn emit<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    m: Modality,
    class: usize,
    center: f64,
    gain: f64,
    rng: &mut R,
) -> Tensor {
    let spec = manifest.spec(m);
    let proto = manifest.prototype(m, class);
    let width = (manifest.envelope_width * spec.seq_len as f64).max(1e-6);
    let floor = manifest.envelope_floor;
    let noise = 1.0 / spec.snr;
    let mut data = Vec::with_capacity(spec.seq_len * spec.raw_dim);
    for t in 0..spec.seq_len {
        let z = (t as f64 - center) / width;
        let env = floor + (1.0 - floor) * (-0.5 * z * z).exp();
        for &p in proto {
            let n: f64 = StandardNormal.sample(rng);
            data.push(gain * env * p + noise * n);
        }
    }
    Tensor::from_parts(vec![spec.seq_len, spec.raw_dim], data)
}

/// A conflict-free sample of the given class.
pub(crate) fn clean_sample<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    id: String,
    class: usize,
    rng: &mut R,
) -> Sample {
    // the bump position is a fraction of the sequence, so modalities with
    // different lengths stay aligned in time
    let phase: f64 = rng.random_range(0.15..0.85);
    let signals = Modality::ALL.map(|m| {
        let spec = manifest.spec(m);
        ModalitySignal {
            modality: m,
            sequence: emit(
                manifest,
                m,
                class,
                phase * spec.seq_len as f64,
                manifest.signal_gain,
                rng,
            ),
            snr: spec.snr,
        }
    });
    let label = manifest.label(class);
    Sample {
        id,
        signals,
        unimodal_labels: [label; 3],
        multimodal_label: label,
        conflict_class: ConflictClass::None,
        conflict_modality: None,
    }
}

/// Largest-remainder rounding of `total * weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Generates `n` samples and a class-stratified 60/20/20 split.
///
/// Conflict kinds and classes are allocated by exact counts (largest
/// remainder), so the mix and class balance hold up to rounding. Severe
/// samples draw only non-neutral classes; the remaining classes are topped up
/// from the clean and benign pool so the overall balance stays uniform.
pub fn generate_dataset(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<Dataset> {
    manifest.validate()?;
    if n < 10 {
        return arg(format!("need at least 10 samples, got {n}"));
    }
    let c = manifest.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5eed));

    let kinds = apportion(
        n,
        &[manifest.mix.clean, manifest.mix.benign, manifest.mix.severe],
    );
    let (n_clean, n_benign, n_severe) = (kinds[0], kinds[1], kinds[2]);
    let per_class = apportion(n, &vec![1.0; c]);
    let polar: Vec<usize> = (0..c)
        .filter(|&k| manifest.polarity_table[k] != Polarity::Neutral)
        .collect();
    let mut severe_per_class = vec![0usize; c];
    for (k, cnt) in polar
        .iter()
        .zip(apportion(n_severe, &vec![1.0; polar.len()]))
    {
        severe_per_class[*k] = cnt;
    }
    if (0..c).any(|k| severe_per_class[k] > per_class[k]) {
        return arg(format!(
            "severe share {} cannot be met by the non-neutral classes",
            manifest.mix.severe
        ));
    }

    let mut severe_labels: Vec<usize> = (0..c)
        .flat_map(|k| std::iter::repeat_n(k, severe_per_class[k]))
        .collect();
    let mut rest_labels: Vec<usize> = (0..c)
        .flat_map(|k| std::iter::repeat_n(k, per_class[k] - severe_per_class[k]))
        .collect();
    severe_labels.shuffle(&mut rng);
    rest_labels.shuffle(&mut rng);
    let mut rest_kinds: Vec<ConflictClass> = std::iter::repeat_n(ConflictClass::None, n_clean)
        .chain(std::iter::repeat_n(ConflictClass::Benign, n_benign))
        .collect();
    rest_kinds.shuffle(&mut rng);

    let mut plan: Vec<(usize, ConflictClass)> = severe_labels
        .into_iter()
        .map(|k| (k, ConflictClass::Severe))
        .chain(rest_labels.into_iter().zip(rest_kinds))
        .collect();
    plan.shuffle(&mut rng);

    let mut samples = Vec::with_capacity(n);
    for (i, &(class, kind)) in plan.iter().enumerate() {
        let mut srng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64 + 1));
        let id = format!("s{i:06}");
        let clean = clean_sample(manifest, id, class, &mut srng);
        let sample = match kind {
            ConflictClass::None => clean,
            _ => {
                let target = Modality::ALL[srng.random_range(0..3)];
                inject_conflict(&clean, kind, target, manifest, &mut srng)?
            }
        };
        samples.push(sample);
    }

    let mut split = Split::default();
    for k in 0..c {
        let mut members: Vec<usize> = (0..n).filter(|&i| samples[i].label() == k).collect();
        members.shuffle(&mut rng);
        let parts = apportion(members.len(), &[0.6, 0.2, 0.2]);
        split.train.extend_from_slice(&members[..parts[0]]);
        split
            .valid
            .extend_from_slice(&members[parts[0]..parts[0] + parts[1]]);
        split
            .test
            .extend_from_slice(&members[parts[0] + parts[1]..]);
    }
    split.train.sort_unstable();
    split.valid.sort_unstable();
    split.test.sort_unstable();

    Ok(Dataset {
        manifest: manifest.clone(),
        samples,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{classify_conflict, ConflictMix};

    #[test]
    fn clean_only_mix_agrees_everywhere() {
        let mut m = DatasetManifest::standard(1);
        m.mix = ConflictMix::new(1.0, 0.0, 0.0);
        let d = generate_dataset(&m, 10, 5).unwrap();
        assert_eq!(d.samples.len(), 10);
        for s in &d.samples {
            assert_eq!(s.conflict_class, ConflictClass::None);
            assert!(s.unimodal_labels.iter().all(|l| *l == s.multimodal_label));
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let m = DatasetManifest::standard(1);
        assert_eq!(
            generate_dataset(&m, 40, 9).unwrap(),
            generate_dataset(&m, 40, 9).unwrap()
        );
        assert_ne!(
            generate_dataset(&m, 40, 9).unwrap().samples,
            generate_dataset(&m, 40, 10).unwrap().samples
        );
    }

    #[test]
    fn class_balance_and_mix_proportions() {
        let m = DatasetManifest::standard(2);
        let n = 1000;
        let d = generate_dataset(&m, n, 3).unwrap();
        for name in SplitName::ALL {
            let idx = d.split.get(name);
            for k in 0..3 {
                let frac = idx.iter().filter(|&&i| d.samples[i].label() == k).count() as f64
                    / idx.len() as f64;
                assert!(
                    (frac - 1.0 / 3.0).abs() <= 0.05,
                    "{name:?} class {k}: {frac}"
                );
            }
        }
        let total = d.split.train.len() + d.split.valid.len() + d.split.test.len();
        assert_eq!(total, n);
        assert_eq!(d.split.train.len(), 600);
        let expect = [0.5, 0.3, 0.2];
        for (kind, want) in ConflictClass::ALL.iter().zip(expect) {
            let got = d
                .samples
                .iter()
                .filter(|s| s.conflict_class == *kind)
                .count() as f64
                / n as f64;
            assert!((got - want).abs() <= 0.03, "{kind:?}: {got}");
        }
        for s in &d.samples {
            assert_eq!(
                classify_conflict(&s.unimodal_labels, s.multimodal_label),
                s.conflict_class
            );
        }
    }

    #[test]
    fn too_few_samples() {
        assert!(generate_dataset(&DatasetManifest::standard(1), 9, 1).is_err());
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(10, &[0.5, 0.3, 0.2]), vec![5, 3, 2]);
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(7, &[0.6, 0.2, 0.2]).iter().sum::<usize>(), 7);
    }
}
