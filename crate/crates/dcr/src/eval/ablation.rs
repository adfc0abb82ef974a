//! Variant comparisons under shared seeds.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::csv::{num, Table};
use super::{action_distribution, Subset};
use crate::ada::{train_ada, Action, ActionSpace, AdaConfig, Augmentation, RewardKind};
use crate::afd::{train_afd, AfdConfig, FusionKind, Pathway, TrainedAfd};
use crate::datagen::{Dataset, SplitName};
use crate::encoders::GeneralEncoder;
use crate::error::{arg, Error, Result};
use crate::pipeline::{
    general_encoder, mean_std, pathway_predictions, score, stage_inputs, stage_splits, MeanStd,
    RunConfig, StageInputs,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    AfdOnly,
    AdaOnly,
    /// Cross-attention fusion trained on the fused loss alone.
    Neither,
    /// Pooled-feature concatenation with an affine head.
    Concat,
    NoGeneral,
    NoAffective,
    NoCalibrationReward,
    NoValueHead,
    NoAugmentation,
    Expanded,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Full,
        Variant::AfdOnly,
        Variant::AdaOnly,
        Variant::Neither,
        Variant::Concat,
        Variant::NoGeneral,
        Variant::NoAffective,
        Variant::NoCalibrationReward,
        Variant::NoValueHead,
        Variant::NoAugmentation,
        Variant::Expanded,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::AfdOnly => "afd_only",
            Variant::AdaOnly => "ada_only",
            Variant::Neither => "neither",
            Variant::Concat => "concat",
            Variant::NoGeneral => "no_general",
            Variant::NoAffective => "no_affective",
            Variant::NoCalibrationReward => "no_calibration_reward",
            Variant::NoValueHead => "no_value_head",
            Variant::NoAugmentation => "no_augmentation",
            Variant::Expanded => "expanded",
        }
    }

    /// Expert configuration, and the agent configuration when one is trained.
    pub fn configs(self, afd: AfdConfig, ada: AdaConfig) -> (AfdConfig, Option<AdaConfig>) {
        let plain = AfdConfig {
            gamma: 0.0,
            lambda: 0.0,
            freeze_teachers: false,
            ..afd
        };
        match self {
            Variant::Full => (afd, Some(ada)),
            Variant::AfdOnly => (afd, None),
            Variant::AdaOnly => (AfdConfig { lambda: 0.0, ..afd }, Some(ada)),
            Variant::Neither => (plain, None),
            Variant::Concat => (
                AfdConfig {
                    fusion: FusionKind::Concat,
                    ..plain
                },
                None,
            ),
            Variant::NoGeneral => (
                afd,
                Some(AdaConfig {
                    use_general: false,
                    ..ada
                }),
            ),
            Variant::NoAffective => (
                afd,
                Some(AdaConfig {
                    use_affective: false,
                    ..ada
                }),
            ),
            Variant::NoCalibrationReward => (
                afd,
                Some(AdaConfig {
                    reward: RewardKind::Binary,
                    ..ada
                }),
            ),
            Variant::NoValueHead => (
                afd,
                Some(AdaConfig {
                    value_head: false,
                    ..ada
                }),
            ),
            Variant::NoAugmentation => (
                afd,
                Some(AdaConfig {
                    augmentation: Augmentation::OFF,
                    ..ada
                }),
            ),
            Variant::Expanded => (
                afd,
                Some(AdaConfig {
                    action_space: ActionSpace::Expanded,
                    ..ada
                }),
            ),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown variant `{s}`")))
    }
}

/// Parses a comma-separated variant list.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let v: Vec<Variant> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Variant::from_str)
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return arg("no variants given");
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSeed {
    pub seed: u64,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub benign_accuracy: Option<f64>,
    pub severe_accuracy: Option<f64>,
    /// Rate of the fused action per subset; absent without an agent.
    pub fusion_rate_benign: Option<f64>,
    pub fusion_rate_severe: Option<f64>,
    pub experts_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub per_seed: Vec<VariantSeed>,
    pub accuracy: MeanStd,
    pub weighted_f1: MeanStd,
    pub benign_accuracy: Option<MeanStd>,
    pub severe_accuracy: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new([
            "variant",
            "accuracy_mean",
            "accuracy_std",
            "wf1_mean",
            "wf1_std",
            "benign_mean",
            "benign_std",
            "severe_mean",
            "severe_std",
        ]);
        for r in &self.rows {
            let split = |m: Option<MeanStd>| (num(m.map(|m| m.mean)), num(m.map(|m| m.std)));
            let (bm, bs) = split(r.benign_accuracy);
            let (sm, ss) = split(r.severe_accuracy);
            t.push([
                r.variant.name().to_string(),
                num(Some(r.accuracy.mean)),
                num(Some(r.accuracy.std)),
                num(Some(r.weighted_f1.mean)),
                num(Some(r.weighted_f1.std)),
                bm,
                bs,
                sm,
                ss,
            ]);
        }
        t
    }
}

struct Experts {
    afd: TrainedAfd,
    inputs: StageInputs,
}

/// Runs each variant over the configured seeds. Expert training is shared
/// between variants whose expert configuration coincides.
pub fn ablation_runner(
    dataset: &Dataset,
    config: &RunConfig,
    variants: &[Variant],
) -> Result<AblationTable> {
    config.validate()?;
    if variants.is_empty() {
        return arg("no variants given");
    }
    let mut per_variant: Vec<Vec<VariantSeed>> = vec![Vec::new(); variants.len()];
    for &seed in &config.seeds {
        let (base_afd, base_ada) = config.for_seed(seed);
        let (fit, stage2) = stage_splits(dataset, seed, config.stage2_fraction);
        let valid = dataset.subset(SplitName::Valid);
        let mut general: Option<GeneralEncoder> = None;
        let mut cache: HashMap<String, Experts> = HashMap::new();
        for (vi, &variant) in variants.iter().enumerate() {
            let (afd_cfg, ada_cfg) = variant.configs(base_afd, base_ada);
            let key = serde_json::to_string(&afd_cfg).expect("config serializes");
            if !cache.contains_key(&key) {
                let afd = train_afd(&fit, &valid, &dataset.manifest, &afd_cfg)?;
                if general.is_none() {
                    general = Some(general_encoder(dataset, &fit, config, &afd_cfg, seed)?);
                }
                let inputs =
                    stage_inputs(&afd.bundle, general.as_ref().unwrap(), dataset, &stage2)?;
                cache.insert(key.clone(), Experts { afd, inputs });
            }
            let experts = &cache[&key];
            let test = &experts.inputs.test;
            let hash = experts.afd.bundle.content_hash();
            let (preds, rates) = match ada_cfg {
                None => (pathway_predictions(test, Pathway::Fusion), (None, None)),
                Some(cfg) => {
                    let ada = train_ada(
                        &experts.afd.bundle,
                        &experts.inputs.train,
                        &experts.inputs.valid,
                        &cfg,
                    )?;
                    if experts.afd.bundle.content_hash() != hash {
                        return Err(Error::Integrity(
                            "expert parameters changed during agent training".into(),
                        ));
                    }
                    let (actions, preds) = ada.predict(test)?;
                    let d = action_distribution(&actions, &test.conflict, cfg.action_space)?;
                    (
                        preds,
                        (
                            d.rate(Subset::Benign, Action::Fusion),
                            d.rate(Subset::Severe, Action::Fusion),
                        ),
                    )
                }
            };
            let s = score(variant.name(), &preds, test, dataset)?;
            per_variant[vi].push(VariantSeed {
                seed,
                accuracy: s.report.accuracy,
                weighted_f1: s.report.weighted_f1,
                benign_accuracy: s.benign_accuracy,
                severe_accuracy: s.severe_accuracy,
                fusion_rate_benign: rates.0,
                fusion_rate_severe: rates.1,
                experts_hash: hash,
            });
        }
    }
    let rows = variants
        .iter()
        .zip(per_variant)
        .map(|(&variant, per_seed)| {
            let collect = |f: fn(&VariantSeed) -> Option<f64>| {
                per_seed
                    .iter()
                    .map(f)
                    .collect::<Option<Vec<f64>>>()
                    .map(|v| mean_std(&v))
            };
            AblationRow {
                variant,
                accuracy: mean_std(&per_seed.iter().map(|s| s.accuracy).collect::<Vec<_>>()),
                weighted_f1: mean_std(&per_seed.iter().map(|s| s.weighted_f1).collect::<Vec<_>>()),
                benign_accuracy: collect(|s| s.benign_accuracy),
                severe_accuracy: collect(|s| s.severe_accuracy),
                per_seed,
            }
        })
        .collect();
    Ok(AblationTable { rows })
}
