use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::{Agent, AgentForward, StateBatch};
use super::{
    augment_state, binary_reward, calibration_reward, policy_entropy, sample_index,
    select_pathway_prediction, Action, ActionSpace, Augmentation, DualViewState, RewardRecord,
};
use crate::afd::{ExpertBundle, ExpertOutputs};
use crate::datagen::{ConflictClass, Modality, Sample};
use crate::encoders::{batch_signals, GeneralEncoder};
use crate::error::{arg, Error, Result};
use crate::numerics::{argmax, Adam, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Confidence-scaled reward.
    Calibrated,
    /// `+1` / `-1`.
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub augmentation: Augmentation,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional early stop after this many epochs without improvement.
    pub patience: Option<usize>,
    pub action_space: ActionSpace,
    pub dk: usize,
    pub hidden: usize,
    pub use_general: bool,
    pub use_affective: bool,
    pub reward: RewardKind,
    pub value_head: bool,
}

impl Default for AdaConfig {
    fn default() -> Self {
        AdaConfig {
            alpha: 0.5,
            beta: 0.01,
            augmentation: Augmentation::default(),
            epochs: 30,
            lr: 1e-4,
            batch_size: 32,
            seed: 41,
            patience: None,
            action_space: ActionSpace::Atomic,
            dk: 32,
            hidden: 32,
            use_general: true,
            use_affective: true,
            reward: RewardKind::Calibrated,
            value_head: true,
        }
    }
}

impl AdaConfig {
    pub fn validate(&self) -> Result<()> {
        self.augmentation.validate()?;
        let finite = [self.alpha, self.beta, self.lr]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite || self.lr == 0.0 || self.batch_size == 0 || self.dk == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "invalid agent configuration {self:?}"
            )));
        }
        Ok(())
    }

    /// The state as this configuration lets the agent see it.
    pub fn view(&self, s: &DualViewState) -> DualViewState {
        let mut out = s.clone();
        for m in 0..3 {
            if !self.use_general {
                let d = s.affective[m].len();
                out.general[m] = s.affective[m]
                    .reshape(&[1, d])
                    .expect("affective is a vector");
            }
            if !self.use_affective {
                out.affective[m]
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        out
    }

    fn reward(&self, pred: &[f64], y: usize) -> Result<RewardRecord> {
        match self.reward {
            RewardKind::Calibrated => calibration_reward(pred, y),
            RewardKind::Binary => binary_reward(pred, y),
        }
    }
}

/// Precomputed states, expert outputs and labels for a split.
#[derive(Clone, Debug)]
pub struct AdaInputs {
    pub states: Vec<DualViewState>,
    pub experts: Vec<ExpertOutputs>,
    pub labels: Vec<usize>,
    pub conflict: Vec<ConflictClass>,
}

impl AdaInputs {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn prepare_inputs(
    bundle: &ExpertBundle,
    general: &GeneralEncoder,
    samples: &[&Sample],
) -> Result<AdaInputs> {
    const CHUNK: usize = 256;
    let experts = bundle.predict(samples)?;
    let mut general_views: Vec<Vec<Tensor>> = vec![Vec::new(); samples.len()];
    let mut offset = 0;
    for chunk in samples.chunks(CHUNK) {
        for m in Modality::ALL {
            let mut g = Graph::new();
            let x = g.constant(batch_signals(chunk, m)?);
            let y = general.forward(&mut g, m, x)?;
            let v = g.value(y);
            let (l, d) = (v.shape()[1], v.shape()[2]);
            for i in 0..chunk.len() {
                general_views[offset + i].push(Tensor::new(
                    &[l, d],
                    v.data()[i * l * d..(i + 1) * l * d].to_vec(),
                )?);
            }
        }
        offset += chunk.len();
    }
    let mut states = Vec::with_capacity(samples.len());
    for (e, gv) in experts.iter().zip(general_views) {
        let affective = e.affective.clone().map(|a| Tensor::vector(&a));
        states.push(DualViewState::new(affective, gv.try_into().unwrap())?);
    }
    Ok(AdaInputs {
        states,
        experts,
        labels: samples.iter().map(|s| s.label()).collect(),
        conflict: samples.iter().map(|s| s.conflict_class).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaEpochRow {
    pub epoch: usize,
    pub mean_reward: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub valid_accuracy: f64,
    /// Greedy selection frequencies on the validation split.
    pub action_freq: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedAda {
    pub agent: Agent,
    pub config: AdaConfig,
    pub history: Vec<AdaEpochRow>,
    /// 0 when the initial agent was kept.
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
}

impl TrainedAda {
    /// Greedy actions for every sample.
    pub fn decide(&self, inputs: &AdaInputs) -> Result<Vec<Action>> {
        decide(&self.agent, &self.config, inputs)
    }

    /// Class predictions after routing each sample through its action.
    pub fn predict(&self, inputs: &AdaInputs) -> Result<(Vec<Action>, Vec<usize>)> {
        let actions = self.decide(inputs)?;
        let preds = route(&actions, inputs, self.config.action_space)?;
        Ok((actions, preds))
    }
}

fn route(actions: &[Action], inputs: &AdaInputs, space: ActionSpace) -> Result<Vec<usize>> {
    actions
        .iter()
        .zip(&inputs.experts)
        .map(|(&a, e)| Ok(argmax(&select_pathway_prediction(a, e, space)?)))
        .collect()
}

pub(crate) fn decide(agent: &Agent, config: &AdaConfig, inputs: &AdaInputs) -> Result<Vec<Action>> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.states.chunks(CHUNK) {
        let views: Vec<DualViewState> = chunk.iter().map(|s| config.view(s)).collect();
        let refs: Vec<&DualViewState> = views.iter().collect();
        let batch = StateBatch::new(&refs)?;
        let mut g = Graph::new();
        let p = agent.params.bind_constant(&mut g);
        let f = agent.forward(&mut g, &p, &batch)?;
        let logits = g.value(f.logits);
        for row in 0..chunk.len() {
            out.push(Action::from_index(
                argmax(logits.row(row)),
                agent.action_space,
            )?);
        }
    }
    Ok(out)
}

fn accuracy_and_freq(
    agent: &Agent,
    config: &AdaConfig,
    inputs: &AdaInputs,
) -> Result<(f64, Vec<f64>)> {
    let actions = decide(agent, config, inputs)?;
    let preds = route(&actions, inputs, config.action_space)?;
    let correct = preds
        .iter()
        .zip(&inputs.labels)
        .filter(|(p, y)| p == y)
        .count();
    let mut freq = vec![0.0; config.action_space.len()];
    for a in &actions {
        freq[a.index()] += 1.0 / actions.len() as f64;
    }
    Ok((correct as f64 / inputs.len() as f64, freq))
}

/// Graph handles of the agent objective.
pub struct AdaLossVars {
    pub l_pg: Var,
    pub l_val: Option<Var>,
    pub entropy: Var,
    pub total: Var,
}

/// `L_pg + α·L_val - β·H` for sampled actions.
///
/// `deltas` enter the policy term as constants; the value term regresses the
/// value head onto `rewards`.
pub fn ada_objective(
    g: &mut Graph,
    f: &AgentForward,
    chosen: &[usize],
    rewards: &[f64],
    deltas: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<AdaLossVars> {
    let b = chosen.len();
    if b == 0 || rewards.len() != b || deltas.len() != b {
        return arg("objective needs equal, non-empty batches");
    }
    let logp = g.log_softmax(f.logits, 1)?;
    let picked = g.pick_rows(logp, chosen)?;
    let coef = g.constant(Tensor::vector(deltas));
    let weighted = g.mul(picked, coef)?;
    let l_pg = g.mean(weighted);
    let l_pg = g.scale(l_pg, -1.0);
    let probs = g.softmax(f.logits, 1)?;
    let lq = g.log_clamped(probs);
    let plq = g.mul(probs, lq)?;
    let s = g.sum(plq);
    let entropy = g.scale(s, -1.0 / b as f64);
    let neg_h = g.scale(entropy, -beta);
    let mut total = g.add(l_pg, neg_h)?;
    let l_val = match f.value {
        Some(v) => {
            let v = g.reshape(v, &[b])?;
            let r = g.constant(Tensor::vector(rewards));
            let diff = g.sub(r, v)?;
            let sq = g.square(diff);
            let l_val = g.mean(sq);
            let weighted = g.scale(l_val, alpha);
            total = g.add(total, weighted)?;
            Some(l_val)
        }
        None => None,
    };
    Ok(AdaLossVars {
        l_pg,
        l_val,
        entropy,
        total,
    })
}

/// Trains the agent over frozen experts and returns it at its best
/// validation accuracy.
pub fn train_ada(
    experts: &ExpertBundle,
    train: &AdaInputs,
    valid: &AdaInputs,
    config: &AdaConfig,
) -> Result<TrainedAda> {
    if !experts.is_frozen() {
        return Err(Error::Config(
            "expert parameters must be frozen before training the agent".into(),
        ));
    }
    config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return arg("training and validation splits must be non-empty");
    }
    let d_in = train.states[0].affective[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut agent = Agent::new(
        d_in,
        config.dk,
        config.hidden,
        config.action_space,
        config.value_head,
        &mut rng,
    );
    let (mut best_acc, _) = accuracy_and_freq(&agent, config, valid)?;
    let mut best = agent.params.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut reward_sum, mut entropy_sum, mut value_sum) = (0.0, 0.0, 0.0);
        for idx in order.chunks(config.batch_size) {
            let mut views = Vec::with_capacity(idx.len());
            for &i in idx {
                views.push(augment_state(
                    &config.view(&train.states[i]),
                    &config.augmentation,
                    &mut rng,
                )?);
            }
            let refs: Vec<&DualViewState> = views.iter().collect();
            let batch = StateBatch::new(&refs)?;
            let mut g = Graph::new();
            let p = agent.params.bind(&mut g);
            let f = agent.forward(&mut g, &p, &batch)?;
            let probs = g.softmax(f.logits, 1)?;
            let pv = g.value(probs).clone();
            let values: Vec<f64> = match f.value {
                Some(v) => g.value(v).data().to_vec(),
                None => vec![0.0; idx.len()],
            };
            let mut chosen = Vec::with_capacity(idx.len());
            let mut rewards = Vec::with_capacity(idx.len());
            let mut deltas = Vec::with_capacity(idx.len());
            for (row, &i) in idx.iter().enumerate() {
                let a = sample_index(pv.row(row), &mut rng);
                let action = Action::from_index(a, config.action_space)?;
                let pred =
                    select_pathway_prediction(action, &train.experts[i], config.action_space)?;
                let rec = config
                    .reward(&pred, train.labels[i])?
                    .with_baseline(values[row]);
                chosen.push(a);
                rewards.push(rec.r);
                deltas.push(rec.delta);
                entropy_sum += policy_entropy(pv.row(row));
            }
            reward_sum += rewards.iter().sum::<f64>();
            value_sum += deltas.iter().map(|d| d * d).sum::<f64>();

            let obj = ada_objective(
                &mut g,
                &f,
                &chosen,
                &rewards,
                &deltas,
                config.alpha,
                config.beta,
            )?;
            g.backward(obj.total);
            let grads = agent.params.grads(&g, &p);
            adam.step(&mut agent.params, &grads);
        }
        let n = train.len() as f64;
        let (acc, freq) = accuracy_and_freq(&agent, config, valid)?;
        history.push(AdaEpochRow {
            epoch,
            mean_reward: reward_sum / n,
            entropy: entropy_sum / n,
            value_loss: value_sum / n,
            valid_accuracy: acc,
            action_freq: freq,
        });
        if acc > best_acc {
            best_acc = acc;
            best = agent.params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    agent.params = best;
    Ok(TrainedAda {
        agent,
        config: *config,
        history,
        best_epoch,
        best_valid_accuracy: best_acc,
    })
}
