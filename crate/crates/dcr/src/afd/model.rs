use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AfdLossBreakdown;
use crate::datagen::{DatasetManifest, Modality, Sample};
use crate::encoders::{batch_signals, AffectiveEncoder, Affine};
use crate::error::{arg, Result};
use crate::numerics::{Bound, Graph, ParamSet, Tensor, Var, LOG_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Text queries attend over the concatenated audio and visual timeline.
    CrossAttention,
    /// Pooled features of all three branches concatenated into one affine head.
    Concat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Fusion {
    CrossAttention {
        query: Affine,
        key: Affine,
        out: Affine,
    },
    Concat {
        out: Affine,
    },
}

/// Encoders, per-timestep heads and the fusion head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AfdModel {
    pub params: ParamSet,
    pub encoders: [AffectiveEncoder; 3],
    pub fusion: Fusion,
    pub num_classes: usize,
    pub d_model: usize,
    pub aligned_len: usize,
}

pub struct AfdOutputs {
    /// `(B, L, d)` per modality.
    pub features: [Var; 3],
    /// `(B, L, C)` per modality.
    pub step_logits: [Var; 3],
    /// `(B, C)` per modality, mean over time.
    pub pooled: [Var; 3],
    /// `(B, C)`.
    pub fused: Var,
}

pub struct LossVars {
    pub l_m: Var,
    pub l_u: Var,
    pub l_kl: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, gamma: f64, lambda: f64) -> AfdLossBreakdown {
        AfdLossBreakdown {
            l_m: g.scalar(self.l_m),
            l_u: g.scalar(self.l_u),
            l_kl: g.scalar(self.l_kl),
            gamma,
            lambda,
            total: g.scalar(self.total),
        }
    }
}

impl AfdModel {
    pub fn new(
        manifest: &DatasetManifest,
        aligned_len: usize,
        d_model: usize,
        fusion: FusionKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = manifest.num_classes;
        let d = d_model;
        let mut params = ParamSet::new();
        let mut encoders = Vec::with_capacity(3);
        for m in Modality::ALL {
            let spec = manifest.spec(m);
            encoders.push(AffectiveEncoder::register(
                &mut params,
                &format!("enc.{}", m.name()),
                m,
                spec.seq_len,
                spec.raw_dim,
                aligned_len,
                d,
                c,
                rng,
            )?);
        }
        let fusion = match fusion {
            FusionKind::CrossAttention => Fusion::CrossAttention {
                query: Affine::register(&mut params, "fusion.q", d, d, rng),
                key: Affine::register(&mut params, "fusion.k", d, d, rng),
                out: Affine::register(&mut params, "fusion.out", 2 * d, c, rng),
            },
            FusionKind::Concat => Fusion::Concat {
                out: Affine::register(&mut params, "fusion.out", 3 * d, c, rng),
            },
        };
        Ok(AfdModel {
            params,
            encoders: encoders.try_into().unwrap(),
            fusion,
            num_classes: c,
            d_model,
            aligned_len,
        })
    }

    pub fn encoder(&self, m: Modality) -> &AffectiveEncoder {
        &self.encoders[m.index()]
    }

    /// Fused `(B, C)` logits from aligned `(B, L, d)` features.
    pub fn fuse(&self, g: &mut Graph, p: &Bound, features: &[Var; 3]) -> Result<Var> {
        let [t, a, v] = *features;
        let st = g.shape(t).to_vec();
        for &x in &[a, v] {
            if g.shape(x) != st.as_slice() {
                return arg(format!(
                    "fusion inputs misaligned: {:?} vs {st:?}",
                    g.shape(x)
                ));
            }
        }
        let pooled_t = g.mean_axis(t, 1)?;
        match &self.fusion {
            Fusion::CrossAttention { query, key, out } => {
                let av = g.concat(&[a, v], 1)?;
                let q = query.apply(g, p, t)?;
                let k = key.apply(g, p, av)?;
                let attended = g.attention(q, k, av)?;
                let pooled_att = g.mean_axis(attended, 1)?;
                let joint = g.concat(&[pooled_att, pooled_t], 1)?;
                out.apply(g, p, joint)
            }
            Fusion::Concat { out } => {
                let pa = g.mean_axis(a, 1)?;
                let pv = g.mean_axis(v, 1)?;
                let joint = g.concat(&[pooled_t, pa, pv], 1)?;
                out.apply(g, p, joint)
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &[&Sample]) -> Result<AfdOutputs> {
        if batch.is_empty() {
            return arg("empty batch");
        }
        let mut features = Vec::with_capacity(3);
        let mut step_logits = Vec::with_capacity(3);
        let mut pooled = Vec::with_capacity(3);
        for enc in &self.encoders {
            let x = g.constant(batch_signals(batch, enc.modality)?);
            let f = enc.forward(g, p, x)?;
            let s = enc.temporal_logits(g, p, f)?;
            pooled.push(g.mean_axis(s, 1)?);
            features.push(f);
            step_logits.push(s);
        }
        let features: [Var; 3] = features.try_into().unwrap();
        let fused = self.fuse(g, p, &features)?;
        Ok(AfdOutputs {
            features,
            step_logits: step_logits.try_into().unwrap(),
            pooled: pooled.try_into().unwrap(),
            fused,
        })
    }

    /// Detached audio and visual activation maps `(B, L, C)`.
    pub fn teacher_maps(&self, g: &Graph, out: &AfdOutputs) -> [Tensor; 2] {
        [Modality::A, Modality::V].map(|m| g.value(out.step_logits[m.index()]).clone())
    }

    /// Batch-mean weighted KL from the detached audio and visual maps to the
    /// text branch's per-timestep distribution.
    pub fn distillation_term(
        &self,
        g: &mut Graph,
        out: &AfdOutputs,
        labels: &[usize],
    ) -> Result<Var> {
        let maps = self.teacher_maps(g, out);
        distill_against(g, out.step_logits[Modality::T.index()], &maps, labels)
    }

    pub fn loss(
        &self,
        g: &mut Graph,
        out: &AfdOutputs,
        labels: &[usize],
        gamma: f64,
        lambda: f64,
    ) -> Result<LossVars> {
        let maps = self.teacher_maps(g, out);
        self.loss_against(g, out, labels, gamma, lambda, &maps)
    }

    /// The objective with the teacher maps supplied explicitly, which makes
    /// the stop-gradient on the teachers an ordinary constant.
    pub fn loss_against(
        &self,
        g: &mut Graph,
        out: &AfdOutputs,
        labels: &[usize],
        gamma: f64,
        lambda: f64,
        teacher_maps: &[Tensor; 2],
    ) -> Result<LossVars> {
        let l_m = g.cross_entropy(out.fused, labels)?;
        let mut l_u = g.cross_entropy(out.pooled[0], labels)?;
        for m in 1..3 {
            let ce = g.cross_entropy(out.pooled[m], labels)?;
            l_u = g.add(l_u, ce)?;
        }
        let l_kl = distill_against(
            g,
            out.step_logits[Modality::T.index()],
            teacher_maps,
            labels,
        )?;
        let su = g.scale(l_u, gamma);
        let sk = g.scale(l_kl, lambda);
        let total = g.add(l_m, su)?;
        let total = g.add(total, sk)?;
        Ok(LossVars {
            l_m,
            l_u,
            l_kl,
            total,
        })
    }
}

fn distill_against(
    g: &mut Graph,
    student: Var,
    teacher_maps: &[Tensor; 2],
    labels: &[usize],
) -> Result<Var> {
    let s = g.shape(student).to_vec();
    let (b, l, c) = (s[0], s[1], s[2]);
    let probs = g.softmax(student, 2)?;
    let log_q = g.log_clamped(probs);
    let mut total: Option<Var> = None;
    for cam in teacher_maps {
        if cam.shape() != s.as_slice() {
            return arg(format!(
                "teacher map {:?} does not match student {s:?}",
                cam.shape()
            ));
        }
        let (teacher, weights, neg_entropy) = teacher_targets(cam, labels)?;
        // Σ_t w_t Σ_c P (ln P - ln Q) = Σ_t w_t Σ_c P ln P - Σ_{t,c} (w_t P) ln Q
        let mut weighted = teacher;
        for (row, w) in weighted.data_mut().chunks_mut(c).zip(&weights) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        debug_assert_eq!(weights.len(), b * l);
        let constant: f64 = neg_entropy.iter().zip(&weights).map(|(h, w)| h * w).sum();
        let wv = g.constant(weighted);
        let cross = g.mul(wv, log_q)?;
        let cross = g.sum(cross);
        let neg = g.scale(cross, -1.0);
        let term = g.add_scalar(neg, constant);
        let term = g.scale(term, 1.0 / b as f64);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("two teachers"))
}

/// Teacher distributions `(B, L, C)`, true-class temporal weights `(B·L)` and
/// per-row `Σ_c P ln P` for a detached activation map.
fn teacher_targets(cam: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let s = cam.shape();
    let (b, l, c) = (s[0], s[1], s[2]);
    if labels.len() != b {
        return arg("label count does not match the batch");
    }
    let mut g = Graph::new();
    let x = g.constant(cam.clone());
    let p = g.softmax(x, 2)?;
    let probs = g.value(p).clone();
    let mut weights = vec![0.0; b * l];
    for (bi, &y) in labels.iter().enumerate() {
        if y >= c {
            return arg(format!("label {y} out of range"));
        }
        let col: Vec<f64> = (0..l).map(|t| cam.data()[(bi * l + t) * c + y]).collect();
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = col.iter().map(|v| (v - max).exp()).sum();
        for t in 0..l {
            weights[bi * l + t] = (col[t] - max).exp() / total;
        }
    }
    let neg_entropy = probs
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .filter(|&&q| q > 0.0)
                .map(|&q| q * q.max(LOG_EPS).ln())
                .sum()
        })
        .collect();
    Ok((probs, weights, neg_entropy))
}
