//! Binary checkpoints.
//!
//! Layout: the magic `DCRCKPT1`, a little-endian `u64` header length, a JSON
//! header, the parameter values as little-endian `f64` in header order, and a
//! SHA-256 digest of everything before it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ada::{AdaConfig, Agent, TrainedAda};
use crate::afd::{AfdConfig, AfdModel, ExpertBundle};
use crate::datagen::DatasetManifest;
use crate::encoders::{GeneralEncoder, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"DCRCKPT1";
const DIGEST: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Afd,
    Ada,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Afd => "afd",
            Stage::Ada => "ada",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    config: serde_json::Value,
    history: serde_json::Value,
    tensors: Vec<TensorEntry>,
    content_hash: String,
}

/// Named parameters of one stage with the configuration that built them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: serde_json::Value,
    pub history: serde_json::Value,
    pub params: ParamSet,
}

/// Everything needed to rebuild the experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AfdSnapshot {
    pub manifest: DatasetManifest,
    pub afd: AfdConfig,
}

/// Everything needed to rebuild the agent and its general encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaSnapshot {
    pub manifest: DatasetManifest,
    pub ada: AdaConfig,
    pub d_in: usize,
    pub provenance: Provenance,
    pub aligned_len: usize,
    pub d_model: usize,
    /// Content hash of the experts the agent was trained over.
    pub experts_hash: String,
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn parse_err(offset: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        field: field.into(),
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn new(
        stage: Stage,
        config: serde_json::Value,
        history: serde_json::Value,
        params: ParamSet,
    ) -> Self {
        Checkpoint {
            stage,
            config,
            history,
            params,
        }
    }

    pub fn from_afd<H: Serialize>(
        bundle: &ExpertBundle,
        snapshot: &AfdSnapshot,
        history: &H,
    ) -> Self {
        Self::new(
            Stage::Afd,
            to_value(snapshot),
            to_value(history),
            bundle.params().clone(),
        )
    }

    pub fn from_ada<H: Serialize>(
        agent: &Agent,
        general: &GeneralEncoder,
        snapshot: &AdaSnapshot,
        history: &H,
    ) -> Self {
        let mut params = agent.params.clone();
        for (id, (name, t)) in general.params.iter().enumerate() {
            let new = params.add(name, t.clone());
            params.set_frozen(new, general.params.is_frozen(crate::numerics::ParamId(id)));
        }
        Self::new(Stage::Ada, to_value(snapshot), to_value(history), params)
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    pub fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::Stage {
                expected: expected.name().into(),
                found: self.stage.name().into(),
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let tensors = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (name, t))| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                frozen: self.params.is_frozen(crate::numerics::ParamId(i)),
            })
            .collect();
        let header = Header {
            stage: self.stage,
            config: self.config.clone(),
            history: self.history.clone(),
            tensors,
            content_hash: self.content_hash(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.num_scalars() + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + DIGEST || &bytes[..MAGIC.len()] != MAGIC {
            return Err(parse_err(0, "magic", "not a checkpoint file"));
        }
        let (body, stored) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Integrity("checkpoint hash mismatch".into()));
        }
        let len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let json = body
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| parse_err(8, "header_len", "header runs past the end of the file"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| parse_err(16, "header", e.to_string()))?;
        let mut payload = &body[16 + len..];
        let mut params = ParamSet::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if payload.len() < 8 * n {
                return Err(parse_err(
                    bytes.len() - DIGEST - payload.len(),
                    &entry.name,
                    "payload truncated",
                ));
            }
            let (raw, rest) = payload.split_at(8 * n);
            payload = rest;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.id(&entry.name).is_some() {
                return Err(Error::Schema(format!(
                    "duplicate parameter `{}`",
                    entry.name
                )));
            }
            let id = params.add(
                entry.name.clone(),
                Tensor::from_parts(entry.shape.clone(), data),
            );
            params.set_frozen(id, entry.frozen);
        }
        if !payload.is_empty() {
            return Err(parse_err(
                bytes.len() - DIGEST - payload.len(),
                "payload",
                "trailing bytes",
            ));
        }
        if params.content_hash() != header.content_hash {
            return Err(Error::Integrity(
                "parameter hash differs from the recorded content hash".into(),
            ));
        }
        Ok(Checkpoint {
            stage: header.stage,
            config: header.config,
            history: header.history,
            params,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.encode())
        .map_err(|e| Error::Environment(format!("cannot write checkpoint {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Environment(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    Checkpoint::decode(&bytes)
}

/// Copies every stored tensor into `target`; both sides must name the same set.
fn fill(target: &mut ParamSet, source: &ParamSet) -> Result<()> {
    let values = source.to_named();
    target.load_named(&values)?;
    if let Some((missing, _)) = target.iter().find(|(n, _)| !values.contains_key(*n)) {
        return Err(Error::Schema(format!(
            "checkpoint lacks parameter `{missing}`"
        )));
    }
    Ok(())
}

fn snapshot<T: for<'de> Deserialize<'de>>(ckpt: &Checkpoint) -> Result<T> {
    serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::Schema(format!("config snapshot: {e}")))
}

/// Rebuilds the frozen experts.
pub fn restore_afd(ckpt: &Checkpoint) -> Result<(ExpertBundle, AfdSnapshot)> {
    ckpt.expect_stage(Stage::Afd)?;
    let snap: AfdSnapshot = snapshot(ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = AfdModel::new(
        &snap.manifest,
        snap.afd.aligned_len,
        snap.afd.d_model,
        snap.afd.fusion,
        &mut rng,
    )?;
    fill(&mut model.params, &ckpt.params)?;
    Ok((ExpertBundle::freeze(model), snap))
}

/// Rebuilds the agent and the general encoder it was trained with.
pub fn restore_ada(ckpt: &Checkpoint) -> Result<(TrainedAda, GeneralEncoder, AdaSnapshot)> {
    ckpt.expect_stage(Stage::Ada)?;
    let snap: AdaSnapshot = snapshot(ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = &snap.ada;
    let mut agent = Agent::new(
        snap.d_in,
        a.dk,
        a.hidden,
        a.action_space,
        a.value_head,
        &mut rng,
    );
    let mut general =
        GeneralEncoder::seeded_random(&snap.manifest, snap.aligned_len, snap.d_model, 0)?;
    general.provenance = snap.provenance;

    let (mut agent_part, mut general_part) = (ParamSet::new(), ParamSet::new());
    for (name, t) in ckpt.params.iter() {
        let part = if name.starts_with("gen.") {
            &mut general_part
        } else {
            &mut agent_part
        };
        part.add(name, t.clone());
    }
    fill(&mut agent.params, &agent_part)?;
    fill(&mut general.params, &general_part)?;
    let trained = TrainedAda {
        agent,
        config: snap.ada,
        history: Vec::new(),
        best_epoch: 0,
        best_valid_accuracy: f64::NAN,
    };
    Ok((trained, general, snap))
}
