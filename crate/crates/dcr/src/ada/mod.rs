//! Path II: a contextual-bandit agent that picks, per sample, which frozen
//! expert to trust.
//!
//! The state pairs each modality's affective summary `H^a (d)` with the
//! general-view sequence `H^g (L, d)`. Calibration lets `H^a` query `H^g`;
//! the three calibrated vectors, tagged with modality identity embeddings,
//! pass through one transformer block and are mean-pooled into `H_M`.
//! Policy and value heads read `H_M`. Rewards are confidence-scaled:
//!
//! ```text
//! r = p[y]     if the chosen expert is right
//! r = -p[ŷ]    otherwise
//! ```
//!
//! and the objective is `L_pg + α·L_val - β·H(π)` with advantage `δ = r - v`.

mod agent;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::afd::{ExpertOutputs, Pathway};
use crate::datagen::Modality;
use crate::error::{arg, Result};
use crate::numerics::{argmax, ops, Graph, ParamSet, Tensor, LOG_EPS};

pub use agent::{Agent, AgentForward, Calibration, StateBatch};
pub use train::{
    ada_objective, prepare_inputs, train_ada, AdaConfig, AdaEpochRow, AdaInputs, AdaLossVars,
    RewardKind, TrainedAda,
};

/// Both views of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DualViewState {
    /// `H^a`, `(d)` per modality.
    pub affective: [Tensor; 3],
    /// `H^g`, `(L, d)` per modality.
    pub general: [Tensor; 3],
}

impl DualViewState {
    pub fn new(affective: [Tensor; 3], general: [Tensor; 3]) -> Result<Self> {
        for m in 0..3 {
            let (a, g) = (affective[m].shape(), general[m].shape());
            if a.len() != 1 || g.len() != 2 {
                return arg(format!("state shapes {a:?} / {g:?} are not (d) / (L, d)"));
            }
            if !affective[m].is_finite() || !general[m].is_finite() {
                return arg("state contains non-finite values");
            }
        }
        Ok(DualViewState { affective, general })
    }

    fn zero(&mut self, m: Modality) {
        for t in [&mut self.affective[m.index()], &mut self.general[m.index()]] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Atomic,
    Expanded,
}

impl ActionSpace {
    pub fn actions(self) -> &'static [Action] {
        match self {
            ActionSpace::Atomic => &Action::ALL[..4],
            ActionSpace::Expanded => &Action::ALL,
        }
    }

    pub fn len(self) -> usize {
        self.actions().len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Fusion,
    Text,
    Audio,
    Visual,
    AudioText,
    VisualText,
    AudioVisual,
}

impl Action {
    pub const ALL: [Action; 7] = [
        Action::Fusion,
        Action::Text,
        Action::Audio,
        Action::Visual,
        Action::AudioText,
        Action::VisualText,
        Action::AudioVisual,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["a_M", "a_T", "a_A", "a_V", "a_AT", "a_VT", "a_AV"][self.index()]
    }

    pub fn from_index(i: usize, space: ActionSpace) -> Result<Action> {
        match space.actions().get(i) {
            Some(&a) => Ok(a),
            None => arg(format!("action {i} outside a space of {}", space.len())),
        }
    }

    fn pathways(self) -> &'static [Pathway] {
        use Pathway::*;
        match self {
            Action::Fusion => &[Fusion],
            Action::Text => &[Text],
            Action::Audio => &[Audio],
            Action::Visual => &[Visual],
            Action::AudioText => &[Audio, Text],
            Action::VisualText => &[Visual, Text],
            Action::AudioVisual => &[Audio, Visual],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub probs: Vec<f64>,
    pub value: f64,
    pub chosen: Action,
    pub log_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardRecord {
    pub r: f64,
    pub correct: bool,
    pub confidence_used: f64,
    pub delta: f64,
}

impl RewardRecord {
    pub fn with_baseline(mut self, v: f64) -> Self {
        self.delta = self.r - v;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaLossBreakdown {
    pub l_pg: f64,
    pub l_val: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Augmentation settings: mask one modality with probability `p1`, else two
/// with probability `p2`, then add noise of std `sigma` to what survives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub p1: f64,
    pub p2: f64,
    pub sigma: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            p1: 0.2,
            p2: 0.05,
            sigma: 0.01,
        }
    }
}

impl Augmentation {
    pub const OFF: Augmentation = Augmentation {
        p1: 0.0,
        p2: 0.0,
        sigma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.p1)
            && (0.0..=self.p1).contains(&self.p2)
            && self.p1 + self.p2 <= 1.0
            && self.sigma >= 0.0
            && self.sigma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(format!(
                "invalid augmentation {self:?}"
            )))
        }
    }
}

/// Modalities to mask for one draw.
///
/// The branches are exclusive: the one-mask event has probability `p1` and
/// the two-mask event `p2`, matching the configured rates directly.
pub fn draw_mask(aug: &Augmentation, rng: &mut impl Rng) -> Vec<Modality> {
    let u: f64 = rng.random();
    let count = if u < aug.p1 {
        1
    } else if u < aug.p1 + aug.p2 {
        2
    } else {
        return Vec::new();
    };
    let mut all = Modality::ALL.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(all.swap_remove(rng.random_range(0..all.len())));
    }
    out.sort();
    out
}

pub fn augment_state(
    state: &DualViewState,
    aug: &Augmentation,
    rng: &mut impl Rng,
) -> Result<DualViewState> {
    aug.validate()?;
    let mut out = state.clone();
    let masked = draw_mask(aug, rng);
    for &m in &masked {
        out.zero(m);
    }
    if aug.sigma > 0.0 {
        let noise = Normal::new(0.0, aug.sigma).expect("validated sigma");
        for m in Modality::ALL {
            if masked.contains(&m) {
                continue;
            }
            for t in [&mut out.affective[m.index()], &mut out.general[m.index()]] {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += noise.sample(rng));
            }
        }
    }
    Ok(out)
}

/// Bias-rectified state `(d_k)` of one modality.
pub fn cognitive_calibration(
    h_a: &Tensor,
    h_g: &Tensor,
    cal: &Calibration,
    params: &ParamSet,
) -> Result<Tensor> {
    let (sa, sg) = (h_a.shape(), h_g.shape());
    if sa.len() != 1 || sg.len() != 2 {
        return arg(format!(
            "calibration needs (d) and (L, d), got {sa:?} / {sg:?}"
        ));
    }
    let mut g = Graph::new();
    let p = params.bind_constant(&mut g);
    let a = g.constant(h_a.reshape(&[1, 1, sa[0]])?);
    let gv = g.constant(h_g.reshape(&[1, sg[0], sg[1]])?);
    let y = cal.apply(&mut g, &p, a, gv)?;
    let n = g.value(y).len();
    g.value(y).reshape(&[n])
}

/// Global context `H_M (d_k)` from three calibrated vectors.
pub fn encode_state(calibrated: [&Tensor; 3], agent: &Agent) -> Result<Tensor> {
    let dk = agent.dk;
    let mut data = Vec::with_capacity(3 * dk);
    for s in calibrated {
        if s.shape() != [dk] {
            return arg(format!(
                "calibrated state must be ({dk}), got {:?}",
                s.shape()
            ));
        }
        data.extend_from_slice(s.data());
    }
    let mut g = Graph::new();
    let p = agent.params.bind_constant(&mut g);
    let tokens = g.constant(Tensor::new(&[1, 3, dk], data)?);
    let h = agent.encode_tokens(&mut g, &p, tokens)?;
    g.value(h).reshape(&[dk])
}

/// How an action is chosen from the policy distribution.
pub enum Selection<'a, R: Rng> {
    Greedy,
    Sample(&'a mut R),
}

/// Samples an index from a distribution.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn policy_forward<R: Rng>(
    h_m: &Tensor,
    agent: &Agent,
    selection: Selection<'_, R>,
) -> Result<PolicyOutput> {
    if h_m.shape() != [agent.dk] {
        return arg(format!("H_M must be ({}), got {:?}", agent.dk, h_m.shape()));
    }
    let mut g = Graph::new();
    let p = agent.params.bind_constant(&mut g);
    let x = g.constant(h_m.reshape(&[1, agent.dk])?);
    let (logits, value) = agent.heads(&mut g, &p, x)?;
    let probs =
        ops::softmax(&g.value(logits).reshape(&[agent.action_space.len()])?, 0)?.into_data();
    let idx = match selection {
        Selection::Greedy => argmax(&probs),
        Selection::Sample(rng) => sample_index(&probs, rng),
    };
    Ok(PolicyOutput {
        value: value.map_or(0.0, |v| g.value(v).data()[0]),
        chosen: Action::from_index(idx, agent.action_space)?,
        log_prob: probs[idx].max(LOG_EPS).ln(),
        probs,
    })
}

/// Confidence-scaled reward of a chosen pathway's distribution.
pub fn calibration_reward(pred: &[f64], y: usize) -> Result<RewardRecord> {
    if y >= pred.len() {
        return arg(format!("label {y} out of range for {} classes", pred.len()));
    }
    let y_hat = argmax(pred);
    let correct = y_hat == y;
    let confidence_used = if correct { pred[y] } else { pred[y_hat] };
    let r = if correct {
        confidence_used
    } else {
        -confidence_used
    };
    Ok(RewardRecord {
        r,
        correct,
        confidence_used,
        delta: r,
    })
}

/// `±1` reward that ignores confidence.
pub fn binary_reward(pred: &[f64], y: usize) -> Result<RewardRecord> {
    let rec = calibration_reward(pred, y)?;
    let r = if rec.correct { 1.0 } else { -1.0 };
    Ok(RewardRecord { r, delta: r, ..rec })
}

pub fn policy_entropy(probs: &[f64]) -> f64 {
    -probs.iter().map(|&p| p * p.max(LOG_EPS).ln()).sum::<f64>()
}

/// Batch objective from per-sample log-probabilities, advantages and policy
/// distributions.
pub fn ada_loss(
    log_probs: &[f64],
    deltas: &[f64],
    probs: &[Vec<f64>],
    alpha: f64,
    beta: f64,
) -> Result<AdaLossBreakdown> {
    let n = log_probs.len();
    if n == 0 || deltas.len() != n || probs.len() != n {
        return arg("ada_loss needs equal, non-empty batches");
    }
    let nf = n as f64;
    let l_pg = -log_probs
        .iter()
        .zip(deltas)
        .map(|(l, d)| l * d)
        .sum::<f64>()
        / nf;
    let l_val = deltas.iter().map(|d| d * d).sum::<f64>() / nf;
    let entropy = probs.iter().map(|p| policy_entropy(p)).sum::<f64>() / nf;
    Ok(AdaLossBreakdown {
        l_pg,
        l_val,
        entropy,
        total: l_pg + alpha * l_val - beta * entropy,
    })
}

/// Distribution produced by taking `action` over the frozen experts.
pub fn select_pathway_prediction(
    action: Action,
    experts: &ExpertOutputs,
    space: ActionSpace,
) -> Result<Vec<f64>> {
    if !space.actions().contains(&action) {
        return arg(format!(
            "{} is not in the {space:?} action space",
            action.name()
        ));
    }
    match action.pathways() {
        [p] => Ok(experts.probs[p.index()].clone()),
        [a, b] => {
            let (pa, pb) = (&experts.probs[a.index()], &experts.probs[b.index()]);
            let gm: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| (x * y).sqrt()).collect();
            let z: f64 = gm.iter().sum();
            if !(z > 0.0) {
                return arg("pairwise combination has no shared support");
            }
            Ok(gm.into_iter().map(|v| v / z).collect())
        }
        _ => unreachable!("actions combine one or two pathways"),
    }
}
