use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionSpace, DualViewState};
use crate::encoders::Affine;
use crate::error::{arg, Result};
use crate::numerics::{Bound, Graph, ParamId, ParamSet, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Affective query over general keys and values for one modality.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Calibration {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
}

impl Calibration {
    fn register(ps: &mut ParamSet, name: &str, d_in: usize, dk: usize, rng: &mut impl Rng) -> Self {
        Calibration {
            query: Affine::register(ps, &format!("{name}.q"), d_in, dk, rng),
            key: Affine::register(ps, &format!("{name}.k"), d_in, dk, rng),
            value: Affine::register(ps, &format!("{name}.v"), d_in, dk, rng),
        }
    }

    /// `h_a (B, 1, d)` and `h_g (B, L, d)` to `(B, 1, d_k)`.
    pub fn apply(&self, g: &mut Graph, p: &Bound, h_a: Var, h_g: Var) -> Result<Var> {
        let q = self.query.apply(g, p, h_a)?;
        let k = self.key.apply(g, p, h_g)?;
        let v = self.value.apply(g, p, h_g)?;
        g.attention(q, k, v)
    }
}

/// Stacked states ready for a batched forward pass.
pub struct StateBatch {
    /// `(B, 1, d)` per modality.
    pub affective: [Tensor; 3],
    /// `(B, L, d)` per modality.
    pub general: [Tensor; 3],
}

impl StateBatch {
    pub fn new(states: &[&DualViewState]) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| crate::Error::Argument("empty state batch".into()))?;
        let b = states.len();
        let stack =
            |get: &dyn Fn(&DualViewState) -> &Tensor, shape: Vec<usize>| -> Result<Tensor> {
                let mut data = Vec::with_capacity(b * shape.iter().product::<usize>());
                for s in states {
                    let t = get(s);
                    if t.len() * b != b * shape.iter().product::<usize>() {
                        return arg("states in a batch must share shapes");
                    }
                    data.extend_from_slice(t.data());
                }
                let mut full = vec![b];
                full.extend(shape);
                Tensor::new(&full, data)
            };
        let mut affective = Vec::with_capacity(3);
        let mut general = Vec::with_capacity(3);
        for m in 0..3 {
            let d = first.affective[m].len();
            let gs = first.general[m].shape().to_vec();
            affective.push(stack(&|s| &s.affective[m], vec![1, d])?);
            general.push(stack(&|s| &s.general[m], gs)?);
        }
        Ok(StateBatch {
            affective: affective.try_into().unwrap(),
            general: general.try_into().unwrap(),
        })
    }
}

pub struct AgentForward {
    /// `(B, |A|)`.
    pub logits: Var,
    /// `(B, 1)`, absent without a value head.
    pub value: Option<Var>,
}

/// Calibration, state encoder, policy head and optional value head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agent {
    pub params: ParamSet,
    pub calibration: [Calibration; 3],
    /// `(3, d_k)` modality identity embeddings.
    pub identity: ParamId,
    pub attn: [Affine; 4],
    pub ff: [Affine; 2],
    pub policy: [Affine; 2],
    pub value: Option<[Affine; 2]>,
    pub d_in: usize,
    pub dk: usize,
    pub action_space: ActionSpace,
}

impl Agent {
    pub fn new(
        d_in: usize,
        dk: usize,
        hidden: usize,
        action_space: ActionSpace,
        value_head: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut ps = ParamSet::new();
        let calibration = ["T", "A", "V"]
            .map(|m| Calibration::register(&mut ps, &format!("cal.{m}"), d_in, dk, rng));
        let identity = ps.add("identity", Tensor::randn(&[3, dk], 0.1, rng));
        let attn = ["q", "k", "v", "o"]
            .map(|n| Affine::register(&mut ps, &format!("block.attn.{n}"), dk, dk, rng));
        let ff = [
            Affine::register(&mut ps, "block.ff1", dk, 2 * dk, rng),
            Affine::register(&mut ps, "block.ff2", 2 * dk, dk, rng),
        ];
        let policy = [
            Affine::register(&mut ps, "policy.1", dk, hidden, rng),
            Affine::register(&mut ps, "policy.2", hidden, action_space.len(), rng),
        ];
        let value = value_head.then(|| {
            [
                Affine::register(&mut ps, "value.1", dk, hidden, rng),
                Affine::register(&mut ps, "value.2", hidden, 1, rng),
            ]
        });
        Agent {
            params: ps,
            calibration,
            identity,
            attn,
            ff,
            policy,
            value,
            d_in,
            dk,
            action_space,
        }
    }

    /// `(B, 3, d_k)` calibrated tokens to `H_M (B, d_k)`.
    pub fn encode_tokens(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        let x = g.add_trailing(tokens, p[self.identity])?;
        let [q, k, v, o] = self.attn;
        let (qv, kv, vv) = (q.apply(g, p, x)?, k.apply(g, p, x)?, v.apply(g, p, x)?);
        let a = g.attention(qv, kv, vv)?;
        let a = o.apply(g, p, a)?;
        let x = g.add(x, a)?;
        let x = g.layer_norm(x, LN_EPS);
        let f = self.ff[0].apply(g, p, x)?;
        let f = g.relu(f);
        let f = self.ff[1].apply(g, p, f)?;
        let x = g.add(x, f)?;
        let x = g.layer_norm(x, LN_EPS);
        g.mean_axis(x, 1)
    }

    fn mlp(g: &mut Graph, p: &Bound, layers: &[Affine; 2], x: Var) -> Result<Var> {
        let h = layers[0].apply(g, p, x)?;
        let h = g.relu(h);
        layers[1].apply(g, p, h)
    }

    /// Policy logits `(B, |A|)` and values `(B, 1)` from `H_M (B, d_k)`.
    pub fn heads(&self, g: &mut Graph, p: &Bound, h_m: Var) -> Result<(Var, Option<Var>)> {
        let logits = Self::mlp(g, p, &self.policy, h_m)?;
        let value = match &self.value {
            Some(v) => Some(Self::mlp(g, p, v, h_m)?),
            None => None,
        };
        Ok((logits, value))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &StateBatch) -> Result<AgentForward> {
        let mut tokens = Vec::with_capacity(3);
        for m in 0..3 {
            let a = &batch.affective[m];
            if a.shape().last() != Some(&self.d_in)
                || batch.general[m].shape().last() != Some(&self.d_in)
            {
                return arg(format!("agent expects feature width {}", self.d_in));
            }
            let ha = g.constant(a.clone());
            let hg = g.constant(batch.general[m].clone());
            tokens.push(self.calibration[m].apply(g, p, ha, hg)?);
        }
        let tokens = g.concat(&tokens, 1)?;
        let h = self.encode_tokens(g, p, tokens)?;
        let (logits, value) = self.heads(g, p, h)?;
        Ok(AgentForward { logits, value })
    }
}
