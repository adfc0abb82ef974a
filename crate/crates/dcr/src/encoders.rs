//! Per-modality feature encoders.
//!
//! The affective encoder (two temporal convolutions and one self-attention
//! block, plus a per-timestep classification head) is trained with the
//! first-stage objective. The general encoder is a single frozen convolution
//! whose weights come either from a reconstruction pre-training pass or from
//! a seeded random draw.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetManifest, Modality, ModalitySignal, Sample};
use crate::error::{arg, Error, Result};
use crate::numerics::{conv_out_len, Adam, Bound, Graph, ParamId, ParamSet, Tensor, Var};

pub const KERNEL: usize = 3;
const PADDING: usize = 1;

/// Stacks one modality of several samples into `(B, L_raw, d_raw)`.
pub fn batch_signals(samples: &[&Sample], m: Modality) -> Result<Tensor> {
    let seqs: Vec<Tensor> = samples
        .iter()
        .map(|s| s.signal(m).sequence.clone())
        .collect();
    Tensor::stack(&seqs)
}

/// Stride that maps `raw_len` onto `aligned_len` timesteps, if one exists.
pub fn alignment_stride(raw_len: usize, aligned_len: usize) -> Result<usize> {
    for stride in 1..=raw_len {
        if conv_out_len(raw_len, KERNEL, stride, PADDING) == Some(aligned_len) {
            return Ok(stride);
        }
    }
    arg(format!(
        "no stride maps {raw_len} raw steps onto {aligned_len} aligned steps"
    ))
}

fn he(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn xavier(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

/// Dense layer `x · w + b` over the last axis.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn register(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Affine {
            w: ps.add(format!("{name}.w"), xavier(&[d_in, d_out], d_in, rng)),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn register_scaled(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = xavier(&[d_in, d_out], d_in, rng).map(|v| v * scale);
        Affine {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_trailing(y, p[self.b])
    }
}

/// Trainable encoder for one modality plus its per-timestep head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AffectiveEncoder {
    pub modality: Modality,
    pub raw_len: usize,
    pub raw_dim: usize,
    pub stride: usize,
    pub d_model: usize,
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub head: Affine,
}

impl AffectiveEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        ps: &mut ParamSet,
        prefix: &str,
        modality: Modality,
        raw_len: usize,
        raw_dim: usize,
        aligned_len: usize,
        d_model: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stride = alignment_stride(raw_len, aligned_len)?;
        let d = d_model;
        Ok(AffectiveEncoder {
            modality,
            raw_len,
            raw_dim,
            stride,
            d_model,
            conv1_w: ps.add(
                format!("{prefix}.conv1.w"),
                he(&[KERNEL, raw_dim, d], KERNEL * raw_dim, rng),
            ),
            conv1_b: ps.add(format!("{prefix}.conv1.b"), Tensor::zeros(&[d])),
            conv2_w: ps.add(
                format!("{prefix}.conv2.w"),
                he(&[KERNEL, d, d], KERNEL * d, rng),
            ),
            conv2_b: ps.add(format!("{prefix}.conv2.b"), Tensor::zeros(&[d])),
            query: Affine::register(ps, &format!("{prefix}.attn.q"), d, d, rng),
            key: Affine::register(ps, &format!("{prefix}.attn.k"), d, d, rng),
            value: Affine::register(ps, &format!("{prefix}.attn.v"), d, d, rng),
            output: Affine::register_scaled(ps, &format!("{prefix}.attn.o"), d, d, 0.5, rng),
            head: Affine::register(ps, &format!("{prefix}.head"), d, num_classes, rng),
        })
    }

    /// `(B, L_raw, d_raw) -> (B, L, d)` aligned features.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.raw_len || s[2] != self.raw_dim {
            return arg(format!(
                "modality {} expects (B, {}, {}), got {s:?}",
                self.modality.name(),
                self.raw_len,
                self.raw_dim
            ));
        }
        let h = g.conv1d(x, p[self.conv1_w], self.stride, PADDING)?;
        let h = g.add_trailing(h, p[self.conv1_b])?;
        let h = g.relu(h);
        let h = g.conv1d(h, p[self.conv2_w], 1, PADDING)?;
        let h = g.add_trailing(h, p[self.conv2_b])?;
        let h = g.relu(h);
        let q = self.query.apply(g, p, h)?;
        let k = self.key.apply(g, p, h)?;
        let v = self.value.apply(g, p, h)?;
        let a = g.attention(q, k, v)?;
        let o = self.output.apply(g, p, a)?;
        g.add(h, o)
    }

    /// Per-timestep class scores `(B, L, C)`.
    pub fn temporal_logits(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<Var> {
        self.head.apply(g, p, features)
    }
}

/// Aligned `(L, d)` features of one signal.
pub fn encode_affective(
    signal: &ModalitySignal,
    enc: &AffectiveEncoder,
    params: &ParamSet,
) -> Result<Tensor> {
    if signal.modality != enc.modality {
        return arg(format!(
            "signal is modality {}, encoder is {}",
            signal.modality.name(),
            enc.modality.name()
        ));
    }
    let seq = &signal.sequence;
    let mut g = Graph::new();
    let p = params.bind_constant(&mut g);
    let x = g.constant(seq.reshape(&[1, seq.shape()[0], seq.shape()[1]])?);
    let y = enc.forward(&mut g, &p, x)?;
    let s = g.shape(y).to_vec();
    g.value(y).reshape(&[s[1], s[2]])
}

/// Per-timestep logits `(L, C)` of `(L, d)` features; pool with
/// [`pooled_logits`].
pub fn temporal_logits(features: &Tensor, head: &Affine, params: &ParamSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind_constant(&mut g);
    let x = g.constant(features.clone());
    let y = head.apply(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

/// Utterance-level logits: the mean of per-timestep logits over time.
pub fn pooled_logits(step_logits: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(step_logits.clone());
    let y = g.mean_axis(x, 0)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Reconstruction,
    SeededRandom,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneralBranch {
    pub modality: Modality,
    pub raw_len: usize,
    pub raw_dim: usize,
    pub stride: usize,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

impl GeneralBranch {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.raw_len || s[2] != self.raw_dim {
            return arg(format!(
                "general encoder {} expects (B, {}, {}), got {s:?}",
                self.modality.name(),
                self.raw_len,
                self.raw_dim
            ));
        }
        let h = g.conv1d(x, p[self.conv_w], self.stride, PADDING)?;
        let h = g.add_trailing(h, p[self.conv_b])?;
        Ok(g.tanh(h))
    }
}

/// Frozen general-view encoder for all three modalities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneralEncoder {
    pub params: ParamSet,
    pub branches: [GeneralBranch; 3],
    pub provenance: Provenance,
    pub d_model: usize,
    pub aligned_len: usize,
}

/// Settings for the reconstruction pre-training pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            lr: 3e-3,
            batch_size: 32,
        }
    }
}

struct Decoder {
    lin: [Affine; 3],
}

impl GeneralEncoder {
    fn init(
        manifest: &DatasetManifest,
        aligned_len: usize,
        d_model: usize,
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<[GeneralBranch; 3]> {
        let mut branches = Vec::new();
        for m in Modality::ALL {
            let spec = manifest.spec(m);
            let stride = alignment_stride(spec.seq_len, aligned_len)?;
            branches.push(GeneralBranch {
                modality: m,
                raw_len: spec.seq_len,
                raw_dim: spec.raw_dim,
                stride,
                conv_w: ps.add(
                    format!("gen.{}.conv.w", m.name()),
                    xavier(&[KERNEL, spec.raw_dim, d_model], KERNEL * spec.raw_dim, rng),
                ),
                conv_b: ps.add(
                    format!("gen.{}.conv.b", m.name()),
                    Tensor::zeros(&[d_model]),
                ),
            });
        }
        Ok(branches.try_into().unwrap())
    }

    /// Frozen random projection.
    pub fn seeded_random(
        manifest: &DatasetManifest,
        aligned_len: usize,
        d_model: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let branches = Self::init(manifest, aligned_len, d_model, &mut params, &mut rng)?;
        params.freeze_prefix("", true);
        Ok(GeneralEncoder {
            params,
            branches,
            provenance: Provenance::SeededRandom,
            d_model,
            aligned_len,
        })
    }

    /// Autoencoder pre-training on `samples`, then frozen.
    pub fn pretrain(
        manifest: &DatasetManifest,
        samples: &[&Sample],
        aligned_len: usize,
        d_model: usize,
        config: PretrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let branches = Self::init(manifest, aligned_len, d_model, &mut params, &mut rng)?;
        let mut enc = GeneralEncoder {
            params,
            branches,
            provenance: Provenance::Reconstruction,
            d_model,
            aligned_len,
        };
        enc.fit_reconstruction(samples, config, &mut rng, true)?;
        enc.params.freeze_prefix("", true);
        Ok(enc)
    }

    fn decoder(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Decoder {
        let lin = self.branches.clone().map(|b| {
            Affine::register(
                ps,
                &format!("dec.{}", b.modality.name()),
                self.d_model,
                b.stride * b.raw_dim,
                rng,
            )
        });
        Decoder { lin }
    }

    /// Trains a linear window decoder, and the encoder too when
    /// `train_encoder` is set.
    fn fit_reconstruction(
        &mut self,
        samples: &[&Sample],
        config: PretrainConfig,
        rng: &mut ChaCha8Rng,
        train_encoder: bool,
    ) -> Result<(Decoder, ParamSet)> {
        if samples.is_empty() {
            return arg("reconstruction pre-training needs samples");
        }
        let mut dec_params = ParamSet::new();
        let dec = self.decoder(&mut dec_params, rng);
        let mut enc_opt = Adam::new(config.lr);
        let mut dec_opt = Adam::new(config.lr);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(config.batch_size.max(1)) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
                let mut g = Graph::new();
                let pe = if train_encoder {
                    self.params.bind(&mut g)
                } else {
                    self.params.bind_constant(&mut g)
                };
                let pd = dec_params.bind(&mut g);
                let loss = self.reconstruction_loss(&mut g, &pe, &pd, &dec, &batch)?;
                g.backward(loss);
                if train_encoder {
                    let grads = self.params.grads(&g, &pe);
                    enc_opt.step(&mut self.params, &grads);
                }
                let grads = dec_params.grads(&g, &pd);
                dec_opt.step(&mut dec_params, &grads);
            }
        }
        Ok((dec, dec_params))
    }

    fn reconstruction_loss(
        &self,
        g: &mut Graph,
        pe: &Bound,
        pd: &Bound,
        dec: &Decoder,
        batch: &[&Sample],
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (branch, lin) in self.branches.iter().zip(&dec.lin) {
            let raw = batch_signals(batch, branch.modality)?;
            let b = batch.len();
            // targets: non-overlapping windows of `stride` raw steps per aligned step
            let need = self.aligned_len * branch.stride;
            let mut target = vec![0.0; b * need * branch.raw_dim];
            let width = branch.raw_len * branch.raw_dim;
            for i in 0..b {
                let src = &raw.data()[i * width..(i + 1) * width];
                let n = need.min(branch.raw_len) * branch.raw_dim;
                target[i * need * branch.raw_dim..i * need * branch.raw_dim + n]
                    .copy_from_slice(&src[..n]);
            }
            let target = Tensor::new(
                &[b, self.aligned_len, branch.stride * branch.raw_dim],
                target,
            )?;
            let x = g.constant(raw);
            let h = branch.forward(g, pe, x)?;
            let y = lin.apply(g, pd, h)?;
            let t = g.constant(target);
            let diff = g.sub(y, t)?;
            let sq = g.square(diff);
            let m = g.mean(sq);
            total = Some(match total {
                Some(acc) => g.add(acc, m)?,
                None => m,
            });
        }
        total.ok_or_else(|| Error::Argument("no modalities".into()))
    }

    /// Mean reconstruction error on `samples` after fitting only a decoder
    /// (the encoder stays fixed) with the given budget.
    pub fn probe_reconstruction(
        &self,
        fit_on: &[&Sample],
        eval_on: &[&Sample],
        config: PretrainConfig,
        seed: u64,
    ) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probe = self.clone();
        let (dec, dec_params) = probe.fit_reconstruction(fit_on, config, &mut rng, false)?;
        let mut g = Graph::new();
        let pe = probe.params.bind_constant(&mut g);
        let pd = dec_params.bind_constant(&mut g);
        let loss = probe.reconstruction_loss(&mut g, &pe, &pd, &dec, eval_on)?;
        Ok(g.scalar(loss))
    }

    /// General features `(B, L, d)`; always a constant on the tape.
    pub fn forward(&self, g: &mut Graph, m: Modality, x: Var) -> Result<Var> {
        let p = self.params.bind_constant(g);
        self.branches[m.index()].forward(g, &p, x)
    }
}

/// `(L, d)` general features of one signal.
pub fn encode_general(signal: &ModalitySignal, enc: &GeneralEncoder) -> Result<Tensor> {
    let seq = &signal.sequence;
    let mut g = Graph::new();
    let x = g.constant(seq.reshape(&[1, seq.shape()[0], seq.shape()[1]])?);
    let y = enc.forward(&mut g, signal.modality, x)?;
    let s = g.shape(y).to_vec();
    g.value(y).reshape(&[s[1], s[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, ConflictMix, SplitName};
    use crate::numerics::test_support::{naive_affine, naive_attention, naive_conv1d};

    fn setup() -> (ParamSet, AffectiveEncoder, DatasetManifest) {
        let manifest = DatasetManifest::standard(1);
        let spec = manifest.spec(Modality::A);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = AffectiveEncoder::register(
            &mut ps,
            "enc.A",
            Modality::A,
            spec.seq_len,
            spec.raw_dim,
            16,
            8,
            3,
            &mut rng,
        )
        .unwrap();
        (ps, enc, manifest)
    }

    fn signal(manifest: &DatasetManifest, m: Modality, seed: u64) -> ModalitySignal {
        let spec = manifest.spec(m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModalitySignal {
            modality: m,
            sequence: Tensor::randn(&[spec.seq_len, spec.raw_dim], 1.0, &mut rng),
            snr: 1.0,
        }
    }

    #[test]
    fn zero_signal_gives_zero_features() {
        let (ps, enc, manifest) = setup();
        let spec = manifest.spec(Modality::A);
        let sig = ModalitySignal {
            modality: Modality::A,
            sequence: Tensor::zeros(&[spec.seq_len, spec.raw_dim]),
            snr: 1.0,
        };
        let y = encode_affective(&sig, &enc, &ps).unwrap();
        assert_eq!(y.shape(), &[16, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_deterministic_and_matches_loops() {
        let (ps, enc, manifest) = setup();
        let sig = signal(&manifest, Modality::A, 4);
        let y = encode_affective(&sig, &enc, &ps).unwrap();
        assert_eq!(y, encode_affective(&sig, &enc, &ps).unwrap());

        let relu = |t: Tensor| t.map(|v| v.max(0.0));
        let add_bias = |t: Tensor, b: &Tensor| {
            let n = b.len();
            let data = t
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + b.data()[i % n])
                .collect();
            Tensor::new(t.shape(), data).unwrap()
        };
        let h = relu(add_bias(
            naive_conv1d(&sig.sequence, ps.get(enc.conv1_w), enc.stride, 1),
            ps.get(enc.conv1_b),
        ));
        let h = relu(add_bias(
            naive_conv1d(&h, ps.get(enc.conv2_w), 1, 1),
            ps.get(enc.conv2_b),
        ));
        let aff = |a: &Affine, x: &Tensor| naive_affine(x, ps.get(a.w), ps.get(a.b));
        let att = naive_attention(
            &aff(&enc.query, &h),
            &aff(&enc.key, &h),
            &aff(&enc.value, &h),
        );
        let o = aff(&enc.output, &att);
        let expected = Tensor::new(
            h.shape(),
            h.data().iter().zip(o.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        assert!(y.max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn modalities_align_to_the_same_length() {
        let manifest = DatasetManifest::standard(1);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in Modality::ALL {
            let spec = manifest.spec(m);
            let enc = AffectiveEncoder::register(
                &mut ps,
                &format!("e.{}", m.name()),
                m,
                spec.seq_len,
                spec.raw_dim,
                16,
                8,
                3,
                &mut rng,
            )
            .unwrap();
            let y = encode_affective(&signal(&manifest, m, 1), &enc, &ps).unwrap();
            assert_eq!(y.shape(), &[16, 8]);
        }
        assert_eq!(alignment_stride(32, 16).unwrap(), 2);
        assert!(alignment_stride(3, 16).is_err());
    }

    #[test]
    fn wrong_modality_is_rejected() {
        let (ps, enc, manifest) = setup();
        assert!(encode_affective(&signal(&manifest, Modality::T, 1), &enc, &ps).is_err());
    }

    #[test]
    fn temporal_logits_cases() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = Affine::register(&mut ps, "h", 4, 3, &mut rng);
        let zero_head = Affine {
            w: ps.add("z.w", Tensor::zeros(&[4, 3])),
            b: ps.add("z.b", Tensor::zeros(&[3])),
        };
        let logits = temporal_logits(&Tensor::zeros(&[5, 4]), &zero_head, &ps).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = crate::numerics::ops::softmax(&logits, 1).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));

        let one = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let l1 = temporal_logits(&one, &head, &ps).unwrap();
        assert_eq!(pooled_logits(&l1).unwrap().data(), l1.data());

        let feats = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let l = temporal_logits(&feats, &head, &ps).unwrap();
        let pooled = pooled_logits(&l).unwrap();
        for c in 0..3 {
            let mean = (0..6).map(|t| l.at(&[t, c])).sum::<f64>() / 6.0;
            assert!((pooled.data()[c] - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn general_encoder_is_frozen_and_pretraining_helps() {
        let mut manifest = DatasetManifest::standard(2);
        manifest.mix = ConflictMix::new(1.0, 0.0, 0.0);
        let d = generate_dataset(&manifest, 200, 1).unwrap();
        let train = d.subset(SplitName::Train);
        let test = d.subset(SplitName::Test);
        let cfg = PretrainConfig {
            epochs: 15,
            ..Default::default()
        };
        let pre = GeneralEncoder::pretrain(&manifest, &train, 16, 8, cfg, 3).unwrap();
        let rnd = GeneralEncoder::seeded_random(&manifest, 16, 8, 3).unwrap();
        assert!(pre.params.all_frozen() && rnd.params.all_frozen());

        let sig = test[0].signal(Modality::V);
        assert_eq!(
            encode_general(sig, &pre).unwrap(),
            encode_general(sig, &pre).unwrap()
        );
        assert_eq!(encode_general(sig, &pre).unwrap().shape(), &[16, 8]);

        let mut g = Graph::new();
        let x = g.constant(batch_signals(&test[..2], Modality::T).unwrap());
        let y = pre.forward(&mut g, Modality::T, x).unwrap();
        assert!(!g.requires_grad(y));

        let probe = PretrainConfig {
            epochs: 15,
            ..Default::default()
        };
        let e_pre = pre.probe_reconstruction(&train, &test, probe, 9).unwrap();
        let e_rnd = rnd.probe_reconstruction(&train, &test, probe, 9).unwrap();
        assert!(e_pre < e_rnd, "pretrained {e_pre} vs random {e_rnd}");
    }
}
