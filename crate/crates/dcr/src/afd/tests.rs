use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::{generate_dataset, ConflictMix, DatasetManifest, SplitName};
use crate::numerics::test_support::{naive_affine, naive_attention, naive_softmax_rows};
use crate::numerics::{gradient_check, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cam(map: Tensor) -> ClassActivationMap {
    ClassActivationMap {
        modality: Modality::A,
        map,
    }
}

fn small_model(fusion: FusionKind, seed: u64) -> (DatasetManifest, AfdModel) {
    let manifest = DatasetManifest::standard(seed);
    let model = AfdModel::new(&manifest, 8, 6, fusion, &mut rng(seed)).unwrap();
    (manifest, model)
}

fn mat(rows: &[&[f64]]) -> Tensor {
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::matrix(rows.len(), rows[0].len(), &flat).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn activation_map_cases() {
    let mut ps = ParamSet::new();
    let head = Affine::register(&mut ps, "h", 4, 3, &mut rng(1));
    let zero = class_activation_map(Modality::A, &Tensor::zeros(&[5, 4]), &head, &ps).unwrap();
    // registered bias is zero
    assert!(zero.map.data().iter().all(|&v| v == 0.0));

    let mut ps1 = ParamSet::new();
    let h1 = Affine::register(&mut ps1, "h", 1, 3, &mut rng(1));
    *ps1.get_mut(h1.w) = mat(&[&[0.0, 1.0, 0.0]]);
    let x = Tensor::randn(&[6, 1], 1.0, &mut rng(2));
    let m = class_activation_map(Modality::V, &x, &h1, &ps1).unwrap();
    for t in 0..6 {
        assert_eq!(m.map.at(&[t, 1]), x.at(&[t, 0]));
    }

    let x = Tensor::randn(&[5, 4], 1.0, &mut rng(3));
    let m = class_activation_map(Modality::A, &x, &head, &ps).unwrap();
    assert_eq!(
        m.map,
        crate::encoders::temporal_logits(&x, &head, &ps).unwrap()
    );
    let oracle = naive_affine(&x, ps.get(head.w), ps.get(head.b));
    assert!(m.map.max_abs_diff(&oracle) < 1e-12);
    assert!(class_activation_map(Modality::T, &x, &head, &ps).is_err());
}

#[test]
fn teacher_distribution_cases() {
    let p = teacher_distribution(&cam(Tensor::full(&[4, 3], 0.7))).unwrap();
    assert!(p.probs.data().iter().all(|&v| close(v, 1.0 / 3.0, 1e-12)));

    let p = teacher_distribution(&cam(mat(&[&[1f64.ln(), 9f64.ln()]]))).unwrap();
    assert!(close(p.probs.at(&[0, 0]), 0.1, 1e-12) && close(p.probs.at(&[0, 1]), 0.9, 1e-12));

    let map = Tensor::randn(&[5, 3], 2.0, &mut rng(4));
    let p = teacher_distribution(&cam(map.clone())).unwrap();
    for r in 0..p.probs.rows() {
        assert!(close(p.probs.row(r).iter().sum::<f64>(), 1.0, 1e-9));
    }
    assert!(p.probs.max_abs_diff(&naive_softmax_rows(&map)) < 1e-12);
}

#[test]
fn temporal_confidence_cases() {
    let w = temporal_confidence(&cam(Tensor::full(&[4, 3], -2.0)), 2).unwrap();
    assert!(w.weights.iter().all(|&v| close(v, 0.25, 1e-12)));

    let w = temporal_confidence(&cam(mat(&[&[3f64.ln(), 0.0], &[1f64.ln(), 5.0]])), 0).unwrap();
    assert!(close(w.weights[0], 0.75, 1e-12) && close(w.weights[1], 0.25, 1e-12));

    let map = Tensor::randn(&[7, 3], 1.5, &mut rng(5));
    let w = temporal_confidence(&cam(map.clone()), 1).unwrap();
    assert!(close(w.weights.iter().sum::<f64>(), 1.0, 1e-9));
    let z: f64 = (0..7).map(|t| map.at(&[t, 1]).exp()).sum();
    for t in 0..7 {
        assert!(w.weights[t] > 0.0);
        assert!(close(w.weights[t], map.at(&[t, 1]).exp() / z, 1e-12));
    }
    assert!(temporal_confidence(&cam(map), 3).is_err());
}

fn random_distribution(l: usize, c: usize, seed: u64) -> Tensor {
    naive_softmax_rows(&Tensor::randn(&[l, c], 1.5, &mut rng(seed)))
}

#[test]
fn distillation_loss_cases() {
    let s = random_distribution(4, 3, 6);
    let teacher = |p: &Tensor| {
        (
            TeacherDistribution { probs: p.clone() },
            TemporalWeights {
                weights: vec![0.25; 4],
            },
        )
    };
    let same = [teacher(&s), teacher(&s)];
    assert!(distillation_loss(&same, &s).unwrap().abs() < 1e-15);

    let single = [(
        TeacherDistribution {
            probs: mat(&[&[1.0, 0.0]]),
        },
        TemporalWeights { weights: vec![1.0] },
    )];
    let v = distillation_loss(&single, &mat(&[&[0.5, 0.5]])).unwrap();
    assert!(close(v, 2f64.ln(), 1e-12));

    let (l, c) = (5, 3);
    let student = random_distribution(l, c, 7);
    let teachers: Vec<_> = (0..2)
        .map(|n| {
            let w = naive_softmax_rows(&Tensor::randn(&[1, l], 1.0, &mut rng(20 + n)));
            (
                TeacherDistribution {
                    probs: random_distribution(l, c, 10 + n),
                },
                TemporalWeights {
                    weights: w.into_data(),
                },
            )
        })
        .collect();
    let mut oracle = 0.0;
    for (p, w) in &teachers {
        for t in 0..l {
            for k in 0..c {
                let a = p.probs.at(&[t, k]);
                oracle += w.weights[t] * a * (a / student.at(&[t, k])).ln();
            }
        }
    }
    let got = distillation_loss(&teachers, &student).unwrap();
    assert!(close(got, oracle, 1e-9));
    assert!(got > 0.0);
    assert!(distillation_loss(&teachers, &random_distribution(4, 3, 8)).is_err());
}

fn batch(seed: u64, n: usize) -> (DatasetManifest, Vec<crate::datagen::Sample>) {
    let manifest = DatasetManifest::standard(seed);
    let ds = generate_dataset(&manifest, 20.max(n), seed).unwrap();
    (manifest, ds.samples.into_iter().take(n).collect())
}

#[test]
fn graph_distillation_matches_value_level() {
    let (_, model) = small_model(FusionKind::CrossAttention, 3);
    let (_, samples) = batch(3, 3);
    let refs: Vec<&Sample> = samples.iter().collect();
    let labels: Vec<usize> = refs.iter().map(|s| s.label()).collect();
    let mut g = Graph::new();
    let p = model.params.bind_constant(&mut g);
    let out = model.forward(&mut g, &p, &refs).unwrap();
    let term = model.distillation_term(&mut g, &out, &labels).unwrap();

    let mut oracle = 0.0;
    for (i, s) in refs.iter().enumerate() {
        let step = |m: Modality| {
            let v = g.value(out.step_logits[m.index()]);
            let sh = v.shape();
            Tensor::new(
                &[sh[1], sh[2]],
                v.data()[i * sh[1] * sh[2]..(i + 1) * sh[1] * sh[2]].to_vec(),
            )
            .unwrap()
        };
        let student = ops::softmax(&step(Modality::T), 1).unwrap();
        let teachers: Vec<_> = [Modality::A, Modality::V]
            .into_iter()
            .map(|m| {
                let c = ClassActivationMap {
                    modality: m,
                    map: step(m),
                };
                (
                    teacher_distribution(&c).unwrap(),
                    temporal_confidence(&c, s.label()).unwrap(),
                )
            })
            .collect();
        oracle += distillation_loss(&teachers, &student).unwrap();
    }
    assert!(close(g.scalar(term), oracle / 3.0, 1e-10));
}

#[test]
fn distillation_leaves_teachers_untouched() {
    let (_, model) = small_model(FusionKind::CrossAttention, 4);
    let (_, samples) = batch(4, 2);
    let refs: Vec<&Sample> = samples.iter().collect();
    let labels: Vec<usize> = refs.iter().map(|s| s.label()).collect();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let out = model.forward(&mut g, &p, &refs).unwrap();
    let term = model.distillation_term(&mut g, &out, &labels).unwrap();
    g.backward(term);
    let grads = model.params.grads(&g, &p);
    let mut student_moved = false;
    for (i, (name, _)) in model.params.iter().enumerate() {
        let mag = grads[i].as_ref().map_or(0.0, |t| t.sq_norm());
        if name.starts_with("enc.A.") || name.starts_with("enc.V.") || name.starts_with("fusion.") {
            assert_eq!(mag, 0.0, "{name}");
        }
        if name.starts_with("enc.T.") && mag > 0.0 {
            student_moved = true;
        }
    }
    assert!(student_moved);

    // unimodal supervision still reaches the teachers
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let out = model.forward(&mut g, &p, &refs).unwrap();
    let loss = model.loss(&mut g, &out, &labels, 1.0, 0.0).unwrap();
    g.backward(loss.total);
    let grads = model.params.grads(&g, &p);
    let id = model.params.id("enc.A.head.w").unwrap();
    assert!(grads[id.0].as_ref().unwrap().sq_norm() > 0.0);
}

#[test]
fn fuse_cases() {
    let (_, mut model) = small_model(FusionKind::CrossAttention, 5);
    let (l, d) = (8, 6);
    let t = Tensor::randn(&[l, d], 1.0, &mut rng(30));
    let a = Tensor::randn(&[l, d], 1.0, &mut rng(31));
    let v = Tensor::randn(&[l, d], 1.0, &mut rng(32));
    let Fusion::CrossAttention { query, key, out } = model.fusion.clone() else {
        unreachable!()
    };

    let mut av = a.data().to_vec();
    av.extend_from_slice(v.data());
    let av = Tensor::new(&[2 * l, d], av).unwrap();
    let ps = &model.params;
    let q = naive_affine(&t, ps.get(query.w), ps.get(query.b));
    let k = naive_affine(&av, ps.get(key.w), ps.get(key.b));
    let att = naive_attention(&q, &k, &av);
    let mut joint = vec![0.0; 2 * d];
    for r in 0..l {
        for j in 0..d {
            joint[j] += att.at(&[r, j]) / l as f64;
            joint[d + j] += t.at(&[r, j]) / l as f64;
        }
    }
    let oracle = naive_affine(&mat(&[&joint]), ps.get(out.w), ps.get(out.b));
    let got = fuse([&t, &a, &v], &model).unwrap();
    assert!(got.max_abs_diff(&oracle.reshape(&[3]).unwrap()) < 1e-9);

    // identical constant audio and visual rows: attention returns that row
    let row: Vec<f64> = (0..d).map(|j| j as f64 * 0.3 - 0.5).collect();
    let c = Tensor::new(&[l, d], row.repeat(l)).unwrap();
    let tc = Tensor::zeros(&[l, d]);
    let got = fuse([&tc, &c, &c], &model).unwrap();
    let mut joint = row.clone();
    joint.extend(std::iter::repeat(0.0).take(d));
    let expect = naive_affine(&mat(&[&joint]), ps.get(out.w), ps.get(out.b));
    assert!(got.max_abs_diff(&expect.reshape(&[3]).unwrap()) < 1e-12);

    *model.params.get_mut(out.w) = Tensor::zeros(&[2 * d, 3]);
    let z = fuse([&t, &a, &v], &model).unwrap();
    assert!(z.data().iter().all(|&x| x == 0.0));
    let p = ops::softmax(&z, 0).unwrap();
    assert!(p.data().iter().all(|&x| close(x, 1.0 / 3.0, 1e-15)));

    assert!(fuse([&t, &Tensor::zeros(&[l - 1, d]), &v], &model).is_err());
}

#[test]
fn concat_fusion_pools_all_branches() {
    let (_, model) = small_model(FusionKind::Concat, 6);
    let (l, d) = (8, 6);
    let xs: Vec<Tensor> = (0..3)
        .map(|i| Tensor::randn(&[l, d], 1.0, &mut rng(40 + i)))
        .collect();
    let Fusion::Concat { out } = model.fusion.clone() else {
        unreachable!()
    };
    let mut joint = vec![0.0; 3 * d];
    for (m, x) in xs.iter().enumerate() {
        for r in 0..l {
            for j in 0..d {
                joint[m * d + j] += x.at(&[r, j]) / l as f64;
            }
        }
    }
    let ps = &model.params;
    let oracle = naive_affine(&mat(&[&joint]), ps.get(out.w), ps.get(out.b));
    let got = fuse([&xs[0], &xs[1], &xs[2]], &model).unwrap();
    assert!(got.max_abs_diff(&oracle.reshape(&[3]).unwrap()) < 1e-9);
}

#[test]
fn loss_coefficients_are_affine() {
    let (_, model) = small_model(FusionKind::CrossAttention, 7);
    let (_, samples) = batch(7, 4);
    let refs: Vec<&Sample> = samples.iter().collect();
    let zero = afd_loss(&refs, &model, 0.0, 0.0).unwrap();
    assert_eq!(zero.total, zero.l_m);
    for (gamma, lambda) in [(1.0, 0.5), (0.3, 2.0), (2.5, 0.0)] {
        let b = afd_loss(&refs, &model, gamma, lambda).unwrap();
        assert_eq!((b.l_m, b.l_u, b.l_kl), (zero.l_m, zero.l_u, zero.l_kl));
        assert!(close(
            b.total,
            b.l_m + gamma * b.l_u + lambda * b.l_kl,
            1e-10
        ));
    }
    assert!(zero.l_kl >= 0.0 && zero.l_u > 0.0);
    assert!(afd_loss(&[], &model, 1.0, 1.0).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (_, model) = small_model(FusionKind::CrossAttention, 8);
    let (_, samples) = batch(8, 2);
    let refs: Vec<&Sample> = samples.iter().collect();
    let labels: Vec<usize> = refs.iter().map(|s| s.label()).collect();
    // teacher maps enter the objective as constants
    let maps = {
        let mut g = Graph::new();
        let p = model.params.bind_constant(&mut g);
        let out = model.forward(&mut g, &p, &refs).unwrap();
        model.teacher_maps(&g, &out)
    };
    for name in [
        "enc.T.conv1.w",
        "enc.A.head.w",
        "fusion.q.w",
        "enc.V.attn.k.w",
    ] {
        let id = model.params.id(name).unwrap();
        let x = model.params.get(id).clone();
        let f = |g: &mut Graph, v: Var| -> Result<Var> {
            let mut p = model.params.bind_constant(g);
            p.replace(id, v);
            let out = model.forward(g, &p, &refs)?;
            Ok(model.loss_against(g, &out, &labels, 1.0, 0.5, &maps)?.total)
        };
        let err = gradient_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn training_is_deterministic_and_epoch_zero_is_identity() {
    let mut manifest = DatasetManifest::standard(9);
    manifest.mix = ConflictMix::new(1.0, 0.0, 0.0);
    let ds = generate_dataset(&manifest, 60, 9).unwrap();
    let (tr, va) = (ds.subset(SplitName::Train), ds.subset(SplitName::Valid));
    let cfg = AfdConfig {
        epochs: 0,
        d_model: 6,
        aligned_len: 8,
        ..AfdConfig::default()
    };
    let init = AfdModel::new(&manifest, 8, 6, cfg.fusion, &mut rng(cfg.seed)).unwrap();
    let r = train_afd(&tr, &va, &manifest, &cfg).unwrap();
    assert_eq!(r.bundle.params().to_named(), init.params.to_named());
    assert!(r.bundle.is_frozen() && r.history.is_empty());

    let cfg = AfdConfig {
        epochs: 2,
        lr: 1e-3,
        ..cfg
    };
    let a = train_afd(&tr, &va, &manifest, &cfg).unwrap();
    let b = train_afd(&tr, &va, &manifest, &cfg).unwrap();
    assert_eq!(a.bundle.content_hash(), b.bundle.content_hash());
    assert_eq!(a.history, b.history);
    assert!(train_afd(&[], &va, &manifest, &cfg).is_err());

    for o in a.bundle.predict(&va).unwrap() {
        for p in &o.probs {
            assert!(close(p.iter().sum::<f64>(), 1.0, 1e-9));
        }
    }
}

#[test]
fn frozen_teachers_keep_their_pretrained_weights() {
    let manifest = DatasetManifest::standard(9);
    let ds = generate_dataset(&manifest, 90, 9).unwrap();
    let (tr, va) = (ds.subset(SplitName::Train), ds.subset(SplitName::Valid));
    let base = AfdConfig {
        epochs: 2,
        lr: 1e-3,
        d_model: 6,
        aligned_len: 8,
        ..AfdConfig::default()
    };
    let teachers_only = train_afd(
        &tr,
        &va,
        &manifest,
        &AfdConfig {
            lambda: 0.0,
            ..base
        },
    )
    .unwrap();
    let frozen = train_afd(
        &tr,
        &va,
        &manifest,
        &AfdConfig {
            freeze_teachers: true,
            ..base
        },
    )
    .unwrap();

    assert_eq!(frozen.history.len(), 4);
    for (i, row) in frozen.history.iter().enumerate() {
        assert_eq!(row.epoch, i + 1);
        if i < 2 {
            assert!(close(row.total, row.l_m + base.gamma * row.l_u, 1e-12));
        }
    }
    let pick = |b: &ExpertBundle| -> Vec<(String, Tensor)> {
        b.params()
            .iter()
            .filter(|(n, _)| n.starts_with("enc.A.") || n.starts_with("enc.V."))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    };
    let teachers = pick(&teachers_only.bundle);
    assert!(!teachers.is_empty());
    assert_eq!(pick(&frozen.bundle), teachers);
}
