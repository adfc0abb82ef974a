//! Path I: confidence-weighted reverse distillation and cross-attention fusion.
//!
//! The audio and visual branches act as teachers. Their per-timestep head
//! logits form class activation maps `I (L, C)`; a row-wise softmax gives the
//! teacher distribution at each timestep, and a softmax of the true-class
//! column over time gives a confidence weight per timestep. The text branch's
//! per-timestep distribution is pulled toward each teacher by a weighted KL
//! term:
//!
//! ```text
//! L_KL = Σ_{n ∈ {A, V}} Σ_t w_t^n · KL(P_n^t ‖ P_S^t)
//! ```
//!
//! and the full objective is `L_M + γ·L_U + λ·L_KL`, where `L_M` scores the
//! fused prediction and `L_U` sums the three unimodal cross-entropies.

mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::datagen::{Modality, Sample};
use crate::encoders::Affine;
use crate::error::{arg, Result};
use crate::numerics::{ops, Graph, ParamSet, Tensor};

pub use model::{AfdModel, AfdOutputs, Fusion, FusionKind, LossVars};
pub use train::{train_afd, AfdConfig, EpochRow, ExpertBundle, ExpertOutputs, Pathway, TrainedAfd};

/// Per-timestep, per-class teacher evidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassActivationMap {
    pub modality: Modality,
    /// `(L, C)`.
    pub map: Tensor,
}

/// Row-stochastic `(L, C)` teacher distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherDistribution {
    pub probs: Tensor,
}

/// Softmax over time of the true-class activation trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalWeights {
    pub weights: Vec<f64>,
}

/// Loss terms of one first-stage objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AfdLossBreakdown {
    pub l_m: f64,
    pub l_u: f64,
    pub l_kl: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Applies a teacher head at every timestep of `(L, d)` features.
///
/// With a per-timestep linear head the gradient-weighted and direct-readout
/// activation maps coincide, so the map is the head's logits.
pub fn class_activation_map(
    modality: Modality,
    features: &Tensor,
    head: &Affine,
    params: &ParamSet,
) -> Result<ClassActivationMap> {
    if modality == Modality::T {
        return arg("the text branch is the student, not a teacher");
    }
    Ok(ClassActivationMap {
        modality,
        map: crate::encoders::temporal_logits(features, head, params)?,
    })
}

pub fn teacher_distribution(cam: &ClassActivationMap) -> Result<TeacherDistribution> {
    Ok(TeacherDistribution {
        probs: ops::softmax(&cam.map, 1)?,
    })
}

pub fn temporal_confidence(cam: &ClassActivationMap, y: usize) -> Result<TemporalWeights> {
    let s = cam.map.shape();
    if y >= s[1] {
        return arg(format!("label {y} out of range for {} classes", s[1]));
    }
    let column: Vec<f64> = (0..s[0]).map(|t| cam.map.at(&[t, y])).collect();
    Ok(TemporalWeights {
        weights: ops::softmax(&Tensor::vector(&column), 0)?.into_data(),
    })
}

/// Weighted KL from each teacher row to the student row, summed over
/// teachers and timesteps.
pub fn distillation_loss(
    teachers: &[(TeacherDistribution, TemporalWeights)],
    student: &Tensor,
) -> Result<f64> {
    let s = student.shape();
    if s.len() != 2 {
        return arg(format!("student distribution must be (L, C), got {s:?}"));
    }
    let mut total = 0.0;
    for (p, w) in teachers {
        if p.probs.shape() != s || w.weights.len() != s[0] {
            return arg(format!(
                "teacher {:?} / weights {} do not match student {s:?}",
                p.probs.shape(),
                w.weights.len()
            ));
        }
        for t in 0..s[0] {
            let kl = ops::kl_divergence(
                &Tensor::vector(p.probs.row(t)),
                &Tensor::vector(student.row(t)),
            )?;
            total += w.weights[t] * kl;
        }
    }
    Ok(total)
}

/// Fused logits `(C)` of one sample's aligned `(L, d)` features.
pub fn fuse(features: [&Tensor; 3], model: &AfdModel) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = model.params.bind_constant(&mut g);
    let mut vars = Vec::with_capacity(3);
    for f in features {
        let s = f.shape();
        if s.len() != 2 {
            return arg(format!("aligned features must be (L, d), got {s:?}"));
        }
        vars.push(g.constant(f.reshape(&[1, s[0], s[1]])?));
    }
    let y = model.fuse(&mut g, &p, &[vars[0], vars[1], vars[2]])?;
    g.value(y).reshape(&[model.num_classes])
}

/// Evaluates the first-stage objective on a batch.
pub fn afd_loss(
    batch: &[&Sample],
    model: &AfdModel,
    gamma: f64,
    lambda: f64,
) -> Result<AfdLossBreakdown> {
    let mut g = Graph::new();
    let p = model.params.bind_constant(&mut g);
    let out = model.forward(&mut g, &p, batch)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label()).collect();
    let vars = model.loss(&mut g, &out, &labels, gamma, lambda)?;
    Ok(vars.breakdown(&g, gamma, lambda))
}

#[cfg(test)]
mod tests;
