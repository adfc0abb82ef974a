use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, AdaSnapshot, AfdSnapshot, Checkpoint};
use super::config::RunConfig;
use crate::ada::{prepare_inputs, train_ada, Action, AdaConfig, AdaInputs, TrainedAda};
use crate::afd::{train_afd, AfdConfig, ExpertBundle, Pathway, TrainedAfd};
use crate::datagen::{generate_dataset, load_dataset, ConflictClass, Dataset, Sample, SplitName};
use crate::encoders::{GeneralEncoder, Provenance};
use crate::error::{Error, Result};
use crate::eval::csv::{num, Table};
use crate::eval::{
    action_distribution, compute_metrics, conflict_subset_eval, ActionDistribution, MetricsReport,
    Subset,
};

/// The dataset named by the config, or a fresh one from its data settings.
pub fn load_or_generate(config: &RunConfig) -> Result<Dataset> {
    match &config.dataset {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Environment(format!(
                    "dataset {} does not exist",
                    path.display()
                )));
            }
            load_dataset(path)
        }
        None => generate_dataset(
            &config.data.manifest()?,
            config.data.samples,
            config.data.seed,
        ),
    }
}

/// Splits the training partition into the expert-fitting part and the part
/// held out for the agent. With `fraction == 0` both are the full split.
pub fn stage_splits(dataset: &Dataset, seed: u64, fraction: f64) -> (Vec<&Sample>, Vec<&Sample>) {
    let mut train = dataset.subset(SplitName::Train);
    if fraction <= 0.0 {
        return (train.clone(), train);
    }
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((train.len() as f64 * fraction) as usize).clamp(1, train.len() - 1);
    let stage2 = train.split_off(train.len() - held);
    (train, stage2)
}

/// Reconstruction pre-training on the clean samples of `fit`.
pub fn general_encoder(
    dataset: &Dataset,
    fit: &[&Sample],
    config: &RunConfig,
    afd: &AfdConfig,
    seed: u64,
) -> Result<GeneralEncoder> {
    match config.general.provenance {
        Provenance::SeededRandom => {
            GeneralEncoder::seeded_random(&dataset.manifest, afd.aligned_len, afd.d_model, seed)
        }
        Provenance::Reconstruction => {
            let clean: Vec<&Sample> = fit
                .iter()
                .copied()
                .filter(|s| s.conflict_class == ConflictClass::None)
                .collect();
            let pool = if clean.is_empty() { fit } else { &clean[..] };
            GeneralEncoder::pretrain(
                &dataset.manifest,
                pool,
                afd.aligned_len,
                afd.d_model,
                config.general.pretrain,
                seed,
            )
        }
    }
}

/// Agent inputs for the stage-2 split, the validation split and the test split.
pub struct StageInputs {
    pub train: AdaInputs,
    pub valid: AdaInputs,
    pub test: AdaInputs,
}

pub fn stage_inputs(
    bundle: &ExpertBundle,
    general: &GeneralEncoder,
    dataset: &Dataset,
    stage2: &[&Sample],
) -> Result<StageInputs> {
    Ok(StageInputs {
        train: prepare_inputs(bundle, general, stage2)?,
        valid: prepare_inputs(bundle, general, &dataset.subset(SplitName::Valid))?,
        test: prepare_inputs(bundle, general, &dataset.subset(SplitName::Test))?,
    })
}

/// Test scores of one prediction rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub report: MetricsReport,
    pub benign_accuracy: Option<f64>,
    pub severe_accuracy: Option<f64>,
}

pub fn score(
    method: &str,
    predictions: &[usize],
    inputs: &AdaInputs,
    dataset: &Dataset,
) -> Result<MethodScore> {
    let m = &dataset.manifest;
    let report = compute_metrics(
        predictions,
        &inputs.labels,
        m.num_classes,
        Some(&m.polarity_table),
    )?;
    let subsets = conflict_subset_eval(predictions, &inputs.labels, &inputs.conflict)?;
    let pick = |s: Subset| {
        subsets
            .iter()
            .find(|r| r.subset == s)
            .and_then(|r| r.accuracy)
    };
    Ok(MethodScore {
        method: method.into(),
        report,
        benign_accuracy: pick(Subset::Benign),
        severe_accuracy: pick(Subset::Severe),
    })
}

pub fn pathway_predictions(inputs: &AdaInputs, p: Pathway) -> Vec<usize> {
    inputs.experts.iter().map(|e| e.prediction(p)).collect()
}

/// Outcome of both stages for one seed.
pub struct SeedResult {
    pub seed: u64,
    pub afd: TrainedAfd,
    pub general: GeneralEncoder,
    pub ada: TrainedAda,
    pub baseline: Option<TrainedAfd>,
    pub experts_hash: String,
    pub test: AdaInputs,
    pub actions: Vec<Action>,
    pub predictions: Vec<usize>,
    pub methods: Vec<MethodScore>,
    pub actions_dist: ActionDistribution,
}

impl SeedResult {
    pub fn method(&self, name: &str) -> Option<&MethodScore> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Trains and evaluates one seed: experts, frozen bundle, agent, test scores.
pub fn run_seed(dataset: &Dataset, config: &RunConfig, seed: u64) -> Result<SeedResult> {
    let (afd_cfg, ada_cfg) = config.for_seed(seed);
    let (fit, stage2) = stage_splits(dataset, seed, config.stage2_fraction);
    let valid = dataset.subset(SplitName::Valid);

    let afd = train_afd(&fit, &valid, &dataset.manifest, &afd_cfg)?;
    let experts_hash = afd.bundle.content_hash();
    let general = general_encoder(dataset, &fit, config, &afd_cfg, seed)?;
    let inputs = stage_inputs(&afd.bundle, &general, dataset, &stage2)?;
    let ada = train_ada(&afd.bundle, &inputs.train, &inputs.valid, &ada_cfg)?;
    let after = afd.bundle.content_hash();
    if after != experts_hash {
        return Err(Error::Integrity(format!(
            "expert parameters changed during agent training ({experts_hash} -> {after})"
        )));
    }

    let test = inputs.test;
    let (actions, predictions) = ada.predict(&test)?;
    let mut methods = vec![score("dcr", &predictions, &test, dataset)?];
    for p in Pathway::ALL {
        methods.push(score(
            &format!("always_{}", p.name()),
            &pathway_predictions(&test, p),
            &test,
            dataset,
        )?);
    }
    let baseline = if config.fusion_baseline {
        let cfg = AfdConfig {
            gamma: 0.0,
            lambda: 0.0,
            freeze_teachers: false,
            ..afd_cfg
        };
        let b = train_afd(&fit, &valid, &dataset.manifest, &cfg)?;
        let preds: Vec<usize> = b
            .bundle
            .predict(&dataset.subset(SplitName::Test))?
            .iter()
            .map(|o| o.prediction(Pathway::Fusion))
            .collect();
        methods.push(score("fusion_only", &preds, &test, dataset)?);
        Some(b)
    } else {
        None
    };
    let actions_dist = action_distribution(&actions, &test.conflict, ada_cfg.action_space)?;
    Ok(SeedResult {
        seed,
        afd,
        general,
        ada,
        baseline,
        experts_hash,
        test,
        actions,
        predictions,
        methods,
        actions_dist,
    })
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub accuracy: MeanStd,
    pub weighted_f1: MeanStd,
    pub benign_accuracy: Option<MeanStd>,
    pub severe_accuracy: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub experts_hash: String,
    pub afd_best_epoch: usize,
    pub ada_best_epoch: usize,
    pub fusion_rate_benign: Option<f64>,
    pub fusion_rate_severe: Option<f64>,
}

/// The machine-readable record written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub seeds: Vec<SeedSummary>,
    pub methods: Vec<MethodSummary>,
}

pub struct RunOutcome {
    pub dataset: Dataset,
    pub seeds: Vec<SeedResult>,
    pub summary: RunSummary,
}

fn summarize(config: &RunConfig, seeds: &[SeedResult]) -> RunSummary {
    let names: Vec<String> = seeds[0].methods.iter().map(|m| m.method.clone()).collect();
    let methods = names
        .iter()
        .map(|name| {
            let rows: Vec<&MethodScore> = seeds.iter().filter_map(|s| s.method(name)).collect();
            let opt = |f: &dyn Fn(&MethodScore) -> Option<f64>| {
                let v: Option<Vec<f64>> = rows.iter().map(|r| f(r)).collect();
                v.map(|v| mean_std(&v))
            };
            MethodSummary {
                method: name.clone(),
                accuracy: mean_std(&rows.iter().map(|r| r.report.accuracy).collect::<Vec<_>>()),
                weighted_f1: mean_std(
                    &rows
                        .iter()
                        .map(|r| r.report.weighted_f1)
                        .collect::<Vec<_>>(),
                ),
                benign_accuracy: opt(&|r| r.benign_accuracy),
                severe_accuracy: opt(&|r| r.severe_accuracy),
            }
        })
        .collect();
    RunSummary {
        config: RunConfig {
            out: None,
            ..config.clone()
        },
        seeds: seeds
            .iter()
            .map(|s| SeedSummary {
                seed: s.seed,
                experts_hash: s.experts_hash.clone(),
                afd_best_epoch: s.afd.best_epoch,
                ada_best_epoch: s.ada.best_epoch,
                fusion_rate_benign: s.actions_dist.rate(Subset::Benign, Action::Fusion),
                fusion_rate_severe: s.actions_dist.rate(Subset::Severe, Action::Fusion),
            })
            .collect(),
        methods,
    }
}

/// Runs both stages for every configured seed and writes the result files
/// when an output directory is set.
pub fn run_sequential(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    if let Some(out) = &config.out {
        prepare_out(out)?;
    }
    let dataset = load_or_generate(config)?;
    let mut seeds = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let result = run_seed(&dataset, config, seed)?;
        if let Some(out) = &config.out {
            write_seed(out, &dataset, config, &result)?;
        }
        seeds.push(result);
    }
    let summary = summarize(config, &seeds);
    if let Some(out) = &config.out {
        aggregate_table(&seeds).write(&out.join("aggregate.csv"))?;
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(out.join("summary.json"), json + "\n")
            .map_err(|e| Error::Environment(format!("cannot write summary: {e}")))?;
    }
    Ok(RunOutcome {
        dataset,
        seeds,
        summary,
    })
}

pub fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| {
        Error::Environment(format!(
            "cannot create output directory {}: {e}",
            out.display()
        ))
    })?;
    let probe = out.join(".write_probe");
    std::fs::write(&probe, b"")
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| {
            Error::Environment(format!(
                "output directory {} is not writable: {e}",
                out.display()
            ))
        })
}

const AGGREGATE_METHODS: [&str; 6] = [
    "dcr",
    "always_M",
    "always_T",
    "always_A",
    "always_V",
    "fusion_only",
];

/// One row per seed and a final `mean` row.
pub fn aggregate_table(seeds: &[SeedResult]) -> Table {
    let methods: Vec<&str> = AGGREGATE_METHODS
        .iter()
        .copied()
        .filter(|m| seeds.iter().all(|s| s.method(m).is_some()))
        .collect();
    let mut header = vec!["seed".to_string()];
    for m in &methods {
        for col in ["acc", "wf1", "benign_acc", "severe_acc"] {
            header.push(format!("{m}_{col}"));
        }
    }
    let mut table = Table::new(header);
    let mut columns: Vec<Vec<Option<f64>>> = Vec::new();
    for s in seeds {
        let mut values = Vec::new();
        for m in &methods {
            let r = s.method(m).unwrap();
            values.extend([
                Some(r.report.accuracy),
                Some(r.report.weighted_f1),
                r.benign_accuracy,
                r.severe_accuracy,
            ]);
        }
        table.push(std::iter::once(s.seed.to_string()).chain(values.iter().map(|v| num(*v))));
        columns.push(values);
    }
    let width = columns.first().map_or(0, Vec::len);
    let means = (0..width).map(|j| {
        let col: Option<Vec<f64>> = columns.iter().map(|row| row[j]).collect();
        num(col.map(|c| mean_std(&c).mean))
    });
    table.push(std::iter::once("mean".to_string()).chain(means));
    table
}

pub fn metrics_table(result: &SeedResult) -> Table {
    let mut t = Table::new([
        "method",
        "accuracy",
        "weighted_f1",
        "mae",
        "corr",
        "f1_neg_vs_nonneg",
        "f1_neg_vs_pos",
    ]);
    for m in &result.methods {
        let r = &m.report;
        let (b1, b2) = r.binary_f1.map_or((None, None), |(a, b)| (Some(a), b));
        t.push([
            m.method.clone(),
            num(Some(r.accuracy)),
            num(Some(r.weighted_f1)),
            num(r.mae),
            num(r.corr),
            num(b1),
            num(b2),
        ]);
    }
    t
}

pub fn conflict_table(result: &SeedResult) -> Result<Table> {
    let mut t = Table::new(["method", "subset", "size", "accuracy"]);
    let mut rows: Vec<(&str, Vec<usize>)> = vec![("dcr", result.predictions.clone())];
    for p in Pathway::ALL {
        rows.push((
            ["always_M", "always_T", "always_A", "always_V"][p.index()],
            pathway_predictions(&result.test, p),
        ));
    }
    for (name, preds) in rows {
        for r in conflict_subset_eval(&preds, &result.test.labels, &result.test.conflict)? {
            t.push([
                name.to_string(),
                r.subset.name().into(),
                r.size.to_string(),
                num(r.accuracy),
            ]);
        }
    }
    Ok(t)
}

pub fn action_table(dist: &ActionDistribution) -> Table {
    let actions = dist.action_space.actions();
    let mut t = Table::new(
        ["subset".to_string(), "size".to_string()]
            .into_iter()
            .chain(actions.iter().map(|a| a.name().to_string())),
    );
    for row in &dist.rows {
        let freqs: Vec<String> = match &row.frequencies {
            Some(f) => f.iter().map(|v| num(Some(*v))).collect(),
            None => vec![String::new(); actions.len()],
        };
        t.push(
            [row.subset.name().to_string(), row.size.to_string()]
                .into_iter()
                .chain(freqs),
        );
    }
    t
}

pub fn afd_history_table(afd: &TrainedAfd) -> Table {
    let mut t = Table::new(["epoch", "l_m", "l_u", "l_kl", "total", "valid_wf1"]);
    for r in &afd.history {
        t.push([
            r.epoch.to_string(),
            num(Some(r.l_m)),
            num(Some(r.l_u)),
            num(Some(r.l_kl)),
            num(Some(r.total)),
            num(Some(r.valid_wf1)),
        ]);
    }
    t
}

pub fn ada_history_table(ada: &TrainedAda) -> Table {
    let actions = ada.config.action_space.actions();
    let mut t = Table::new(
        [
            "epoch",
            "mean_reward",
            "entropy",
            "value_loss",
            "valid_accuracy",
        ]
        .into_iter()
        .map(String::from)
        .chain(actions.iter().map(|a| format!("freq_{}", a.name()))),
    );
    for r in &ada.history {
        t.push(
            [
                r.epoch.to_string(),
                num(Some(r.mean_reward)),
                num(Some(r.entropy)),
                num(Some(r.value_loss)),
                num(Some(r.valid_accuracy)),
            ]
            .into_iter()
            .chain(r.action_freq.iter().map(|f| num(Some(*f)))),
        );
    }
    t
}

pub fn afd_checkpoint(afd: &TrainedAfd, dataset: &Dataset, config: &AfdConfig) -> Checkpoint {
    let snap = AfdSnapshot {
        manifest: dataset.manifest.clone(),
        afd: *config,
    };
    Checkpoint::from_afd(&afd.bundle, &snap, &afd.history)
}

pub fn ada_checkpoint(
    ada: &TrainedAda,
    general: &GeneralEncoder,
    dataset: &Dataset,
    config: &AdaConfig,
    experts_hash: &str,
) -> Checkpoint {
    let snap = AdaSnapshot {
        manifest: dataset.manifest.clone(),
        ada: *config,
        d_in: general.d_model,
        provenance: general.provenance,
        aligned_len: general.aligned_len,
        d_model: general.d_model,
        experts_hash: experts_hash.to_string(),
    };
    Checkpoint::from_ada(&ada.agent, general, &snap, &ada.history)
}

fn write_seed(out: &Path, dataset: &Dataset, config: &RunConfig, r: &SeedResult) -> Result<()> {
    let s = r.seed;
    let (afd_cfg, ada_cfg) = config.for_seed(s);
    metrics_table(r).write(&out.join(format!("metrics_seed{s}.csv")))?;
    conflict_table(r)?.write(&out.join(format!("conflict_subsets_seed{s}.csv")))?;
    action_table(&r.actions_dist).write(&out.join(format!("actions_seed{s}.csv")))?;
    afd_history_table(&r.afd).write(&out.join(format!("afd_history_seed{s}.csv")))?;
    ada_history_table(&r.ada).write(&out.join(format!("ada_history_seed{s}.csv")))?;
    save_checkpoint(
        &afd_checkpoint(&r.afd, dataset, &afd_cfg),
        &out.join(format!("afd_seed{s}.ckpt")),
    )?;
    save_checkpoint(
        &ada_checkpoint(&r.ada, &r.general, dataset, &ada_cfg, &r.experts_hash),
        &out.join(format!("ada_seed{s}.ckpt")),
    )
}
