use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{AfdModel, FusionKind};
use crate::datagen::{DatasetManifest, Modality, Sample};
use crate::error::{arg, Error, Result};
use crate::eval::weighted_f1;
use crate::numerics::{argmax, Adam, Graph, ParamSet};

/// The four expert prediction heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pathway {
    Fusion,
    Text,
    Audio,
    Visual,
}

impl Pathway {
    pub const ALL: [Pathway; 4] = [
        Pathway::Fusion,
        Pathway::Text,
        Pathway::Audio,
        Pathway::Visual,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["M", "T", "A", "V"][self.index()]
    }

    pub fn modality(self) -> Option<Modality> {
        match self {
            Pathway::Fusion => None,
            Pathway::Text => Some(Modality::T),
            Pathway::Audio => Some(Modality::A),
            Pathway::Visual => Some(Modality::V),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AfdConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub d_model: usize,
    pub aligned_len: usize,
    pub fusion: FusionKind,
    /// Pre-train the audio and visual teachers on their own labels, freeze
    /// them, then train the rest with distillation.
    #[serde(default)]
    pub freeze_teachers: bool,
}

impl Default for AfdConfig {
    fn default() -> Self {
        AfdConfig {
            gamma: 1.0,
            lambda: 0.5,
            epochs: 30,
            lr: 1e-4,
            batch_size: 32,
            seed: 41,
            patience: 10,
            d_model: 32,
            aligned_len: 16,
            fusion: FusionKind::CrossAttention,
            freeze_teachers: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_m: f64,
    pub l_u: f64,
    pub l_kl: f64,
    pub total: f64,
    pub valid_wf1: f64,
}

/// Per-sample expert outputs consumed by the second stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertOutputs {
    /// Distributions indexed by [`Pathway::index`].
    pub probs: [Vec<f64>; 4],
    /// Time-pooled aligned features per modality.
    pub affective: [Vec<f64>; 3],
}

impl ExpertOutputs {
    pub fn prediction(&self, p: Pathway) -> usize {
        argmax(&self.probs[p.index()])
    }
}

/// Trained experts with every parameter frozen.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpertBundle {
    pub model: AfdModel,
}

impl ExpertBundle {
    pub fn freeze(mut model: AfdModel) -> Self {
        model.params.freeze_prefix("", true);
        ExpertBundle { model }
    }

    pub fn is_frozen(&self) -> bool {
        self.model.params.all_frozen()
    }

    pub fn params(&self) -> &ParamSet {
        &self.model.params
    }

    pub fn content_hash(&self) -> String {
        self.model.params.content_hash()
    }

    pub fn predict(&self, samples: &[&Sample]) -> Result<Vec<ExpertOutputs>> {
        predict(&self.model, samples)
    }
}

pub(crate) fn predict(model: &AfdModel, samples: &[&Sample]) -> Result<Vec<ExpertOutputs>> {
    const CHUNK: usize = 256;
    let c = model.num_classes;
    let d = model.d_model;
    let mut outputs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let mut g = Graph::new();
        let p = model.params.bind_constant(&mut g);
        let out = model.forward(&mut g, &p, chunk)?;
        let mut heads = vec![out.fused];
        heads.extend(out.pooled);
        let mut probs = Vec::with_capacity(4);
        for h in heads {
            let s = g.softmax(h, 1)?;
            probs.push(g.value(s).clone());
        }
        let mut pooled = Vec::with_capacity(3);
        for f in out.features {
            let m = g.mean_axis(f, 1)?;
            pooled.push(g.value(m).clone());
        }
        for i in 0..chunk.len() {
            outputs.push(ExpertOutputs {
                probs: std::array::from_fn(|k| probs[k].data()[i * c..(i + 1) * c].to_vec()),
                affective: std::array::from_fn(|k| pooled[k].data()[i * d..(i + 1) * d].to_vec()),
            });
        }
    }
    Ok(outputs)
}

pub struct TrainedAfd {
    pub bundle: ExpertBundle,
    pub history: Vec<EpochRow>,
    /// 0 when the initial parameters were kept.
    pub best_epoch: usize,
    pub best_valid_wf1: f64,
}

fn validation_wf1(model: &AfdModel, valid: &[&Sample]) -> Result<f64> {
    let outs = predict(model, valid)?;
    let preds: Vec<usize> = outs.iter().map(|o| o.prediction(Pathway::Fusion)).collect();
    let labels: Vec<usize> = valid.iter().map(|s| s.label()).collect();
    Ok(weighted_f1(&preds, &labels, model.num_classes))
}

struct Fit {
    best: ParamSet,
    best_wf1: f64,
    best_epoch: usize,
    history: Vec<EpochRow>,
}

impl Fit {
    fn run(
        &mut self,
        model: &mut AfdModel,
        train: &[&Sample],
        valid: &[&Sample],
        config: &AfdConfig,
        lambda: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let mut adam = Adam::new(config.lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut stale = 0;
        let offset = self.history.len();
        for epoch in offset + 1..=offset + config.epochs {
            order.shuffle(rng);
            let mut sums = [0.0; 4];
            let mut seen = 0usize;
            for idx in order.chunks(config.batch_size) {
                let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
                let labels: Vec<usize> = batch.iter().map(|s| s.label()).collect();
                let mut g = Graph::new();
                let p = model.params.bind(&mut g);
                let out = model.forward(&mut g, &p, &batch)?;
                let loss = model.loss(&mut g, &out, &labels, config.gamma, lambda)?;
                let b = loss.breakdown(&g, config.gamma, lambda);
                if !b.total.is_finite() {
                    return Err(Error::Evaluation(format!(
                        "non-finite loss at epoch {epoch}"
                    )));
                }
                let n = batch.len() as f64;
                for (acc, v) in sums.iter_mut().zip([b.l_m, b.l_u, b.l_kl, b.total]) {
                    *acc += v * n;
                }
                seen += batch.len();
                g.backward(loss.total);
                let grads = model.params.grads(&g, &p);
                adam.step(&mut model.params, &grads);
            }
            let wf1 = validation_wf1(model, valid)?;
            let n = seen as f64;
            self.history.push(EpochRow {
                epoch,
                l_m: sums[0] / n,
                l_u: sums[1] / n,
                l_kl: sums[2] / n,
                total: sums[3] / n,
                valid_wf1: wf1,
            });
            if wf1 > self.best_wf1 {
                self.best_wf1 = wf1;
                self.best_epoch = epoch;
                self.best = model.params.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Trains the encoders, heads and fusion on the first-stage objective and
/// returns the frozen bundle from the epoch with the best validation
/// weighted-F1 of the fused head.
pub fn train_afd(
    train: &[&Sample],
    valid: &[&Sample],
    manifest: &DatasetManifest,
    config: &AfdConfig,
) -> Result<TrainedAfd> {
    if train.is_empty() || valid.is_empty() {
        return arg("training and validation splits must be non-empty");
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = AfdModel::new(
        manifest,
        config.aligned_len,
        config.d_model,
        config.fusion,
        &mut rng,
    )?;
    let mut fit = Fit {
        best: model.params.clone(),
        best_wf1: validation_wf1(&model, valid)?,
        best_epoch: 0,
        history: Vec::new(),
    };
    if config.freeze_teachers {
        fit.run(&mut model, train, valid, config, 0.0, &mut rng)?;
        model.params = fit.best.clone();
        for m in [Modality::A, Modality::V] {
            model
                .params
                .freeze_prefix(&format!("enc.{}.", m.name()), true);
        }
        fit.best = model.params.clone();
    }
    fit.run(&mut model, train, valid, config, config.lambda, &mut rng)?;
    let Fit {
        best,
        best_wf1,
        best_epoch,
        history,
    } = fit;
    model.params = best;
    Ok(TrainedAfd {
        bundle: ExpertBundle::freeze(model),
        history,
        best_epoch,
        best_valid_wf1: best_wf1,
    })
}
