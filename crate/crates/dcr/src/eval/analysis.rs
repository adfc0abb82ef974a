use serde::{Deserialize, Serialize};

use crate::ada::{Action, ActionSpace};
use crate::datagen::ConflictClass;
use crate::error::{arg, Result};

/// A slice of the evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    None,
    Benign,
    Severe,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::All, Subset::None, Subset::Benign, Subset::Severe];

    pub fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::None => "none",
            Subset::Benign => "benign",
            Subset::Severe => "severe",
        }
    }

    pub fn contains(self, c: ConflictClass) -> bool {
        match self {
            Subset::All => true,
            Subset::None => c == ConflictClass::None,
            Subset::Benign => c == ConflictClass::Benign,
            Subset::Severe => c == ConflictClass::Severe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub subset: Subset,
    pub size: usize,
    /// Absent for an empty subset.
    pub accuracy: Option<f64>,
}

/// Accuracy overall and per conflict class.
pub fn conflict_subset_eval(
    predictions: &[usize],
    labels: &[usize],
    conflict: &[ConflictClass],
) -> Result<Vec<SubsetAccuracy>> {
    if predictions.len() != labels.len() || labels.len() != conflict.len() {
        return arg(format!(
            "{} predictions, {} labels and {} conflict tags",
            predictions.len(),
            labels.len(),
            conflict.len()
        ));
    }
    Ok(Subset::ALL
        .iter()
        .map(|&subset| {
            let (mut size, mut correct) = (0usize, 0usize);
            for i in 0..labels.len() {
                if subset.contains(conflict[i]) {
                    size += 1;
                    correct += usize::from(predictions[i] == labels[i]);
                }
            }
            SubsetAccuracy {
                subset,
                size,
                accuracy: (size > 0).then(|| correct as f64 / size as f64),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionFrequencies {
    pub subset: Subset,
    pub size: usize,
    /// Indexed by [`Action::index`] within the space; absent for an empty subset.
    pub frequencies: Option<Vec<f64>>,
}

/// How often each action was chosen, overall and per conflict class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub action_space: ActionSpace,
    pub rows: Vec<ActionFrequencies>,
}

impl ActionDistribution {
    pub fn get(&self, subset: Subset) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|r| r.subset == subset)
            .and_then(|r| r.frequencies.as_deref())
    }

    /// Selection rate of one action on one subset.
    pub fn rate(&self, subset: Subset, action: Action) -> Option<f64> {
        self.get(subset)
            .and_then(|f| f.get(action.index()).copied())
    }
}

pub fn action_distribution(
    actions: &[Action],
    conflict: &[ConflictClass],
    space: ActionSpace,
) -> Result<ActionDistribution> {
    if actions.len() != conflict.len() {
        return arg(format!(
            "{} decisions for {} samples",
            actions.len(),
            conflict.len()
        ));
    }
    if let Some(a) = actions.iter().find(|a| a.index() >= space.len()) {
        return arg(format!(
            "{} lies outside the {:?} action space",
            a.name(),
            space
        ));
    }
    let rows = Subset::ALL
        .iter()
        .map(|&subset| {
            let mut counts = vec![0usize; space.len()];
            for (a, &c) in actions.iter().zip(conflict) {
                if subset.contains(c) {
                    counts[a.index()] += 1;
                }
            }
            let size: usize = counts.iter().sum();
            ActionFrequencies {
                subset,
                size,
                frequencies: (size > 0)
                    .then(|| counts.iter().map(|&k| k as f64 / size as f64).collect()),
            }
        })
        .collect();
    Ok(ActionDistribution {
        action_space: space,
        rows,
    })
}

/// Share of samples whose `k` largest probabilities sum to at least each
/// threshold.
pub fn topk_confidence_curve(
    distributions: &[Vec<f64>],
    k: usize,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if distributions.is_empty() {
        return arg("no prediction distributions");
    }
    let c = distributions[0].len();
    if k == 0 || k >= c {
        return arg(format!("k must lie in [1, {c}), got {k}"));
    }
    if distributions.iter().any(|d| d.len() != c) {
        return arg("prediction distributions differ in length");
    }
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t))
        || thresholds.windows(2).any(|w| w[0] > w[1])
    {
        return arg("thresholds must be ascending within [0, 1]");
    }
    let mut mass: Vec<f64> = distributions
        .iter()
        .map(|d| {
            let mut s = d.clone();
            s.sort_by(|a, b| b.total_cmp(a));
            s[..k].iter().sum()
        })
        .collect();
    mass.sort_by(f64::total_cmp);
    let n = mass.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let below = mass.partition_point(|&m| m < t);
            (mass.len() - below) as f64 / n
        })
        .collect())
}
