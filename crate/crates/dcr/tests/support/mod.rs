#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcr::ada::{ada_objective, ActionSpace, Agent, DualViewState, StateBatch};
use dcr::afd::{AfdModel, FusionKind};
use dcr::datagen::{generate_dataset, DatasetManifest, Sample};
use dcr::numerics::{gradient_check, Graph, ParamId, Tensor, Var};
use dcr::Result;

pub type OpFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

#[derive(Clone, Copy, PartialEq)]
pub enum Domain {
    Any,
    Positive,
    /// Keeps every entry at least 0.05 from zero (kinked ops).
    AwayFromZero,
}

pub struct OpCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub domain: Domain,
    pub f: OpFn,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fixed(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Contracts an op output with fixed random weights so every output entry
/// reaches the scalar.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let w = g.constant(fixed(&g.shape(y).to_vec(), 0xfeed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn case(
    name: &'static str,
    shape: &[usize],
    domain: Domain,
    op: impl Fn(&mut Graph, Var) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        shape: shape.to_vec(),
        domain,
        f: Box::new(move |g, x| {
            let y = op(g, x)?;
            project(g, y)
        }),
    }
}

pub fn sample_input(c: &OpCase, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = c.shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| match c.domain {
            Domain::Any => r.random_range(-2.0..2.0),
            Domain::Positive => r.random_range(0.2..2.0),
            Domain::AwayFromZero => {
                let m: f64 = r.random_range(0.05..2.0);
                if r.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
        })
        .collect();
    Tensor::new(&c.shape, data).unwrap()
}

/// Every differentiable op, with respect to each differentiable operand.
pub fn op_cases() -> Vec<OpCase> {
    use Domain::*;
    let k = |shape: &[usize], seed: u64| fixed(shape, seed);
    vec![
        case("matmul.a", &[3, 4], Any, move |g, x| {
            let b = g.constant(k(&[4, 2], 1));
            g.matmul(x, b)
        }),
        case("matmul.b", &[4, 2], Any, move |g, x| {
            let a = g.constant(k(&[3, 4], 2));
            g.matmul(a, x)
        }),
        case("batch_matmul.a", &[2, 3, 4], Any, move |g, x| {
            let b = g.constant(k(&[2, 4, 2], 3));
            g.batch_matmul(x, b, false)
        }),
        case("batch_matmul.b_t", &[2, 5, 4], Any, move |g, x| {
            let a = g.constant(k(&[2, 3, 4], 4));
            g.batch_matmul(a, x, true)
        }),
        case("add", &[3, 4], Any, move |g, x| {
            let b = g.constant(k(&[3, 4], 5));
            g.add(x, b)
        }),
        case("sub", &[3, 4], Any, move |g, x| {
            let b = g.constant(k(&[3, 4], 6));
            g.sub(b, x)
        }),
        case("mul", &[3, 4], Any, move |g, x| {
            let b = g.constant(k(&[3, 4], 7));
            g.mul(x, b)
        }),
        case("mul.self", &[3, 4], Any, |g, x| g.mul(x, x)),
        case("add_trailing.x", &[2, 3, 4], Any, move |g, x| {
            let b = g.constant(k(&[4], 8));
            g.add_trailing(x, b)
        }),
        case("add_trailing.b", &[4], Any, move |g, x| {
            let a = g.constant(k(&[2, 3, 4], 9));
            g.add_trailing(a, x)
        }),
        case("mul_trailing.x", &[3, 4], Any, move |g, x| {
            let s = g.constant(k(&[4], 10));
            g.mul_trailing(x, s)
        }),
        case("mul_trailing.g", &[4], Any, move |g, x| {
            let a = g.constant(k(&[3, 4], 11));
            g.mul_trailing(a, x)
        }),
        case("scale", &[5], Any, |g, x| Ok(g.scale(x, -1.7))),
        case("add_scalar", &[5], Any, |g, x| {
            let y = g.add_scalar(x, 0.3);
            Ok(g.square(y))
        }),
        case("relu", &[3, 4], AwayFromZero, |g, x| Ok(g.relu(x))),
        case("tanh", &[3, 4], Any, |g, x| Ok(g.tanh(x))),
        case("square", &[3, 4], Any, |g, x| Ok(g.square(x))),
        case(
            "log_clamped",
            &[3, 4],
            Positive,
            |g, x| Ok(g.log_clamped(x)),
        ),
        case("softmax.rows", &[3, 4], Any, |g, x| g.softmax(x, 1)),
        case("softmax.cols", &[3, 4], Any, |g, x| g.softmax(x, 0)),
        case("log_softmax", &[3, 4], Any, |g, x| g.log_softmax(x, 1)),
        case("layer_norm", &[3, 5], Any, |g, x| Ok(g.layer_norm(x, 1e-5))),
        case("sum", &[3, 4], Any, |g, x| {
            let s = g.sum(x);
            Ok(g.square(s))
        }),
        case("mean", &[3, 4], Any, |g, x| {
            let s = g.mean(x);
            Ok(g.square(s))
        }),
        case("sum_axis", &[2, 3, 4], Any, |g, x| g.sum_axis(x, 1)),
        case("mean_axis", &[2, 3, 4], Any, |g, x| g.mean_axis(x, 2)),
        case("reshape", &[3, 4], Any, |g, x| g.reshape(x, &[2, 6])),
        case("concat", &[2, 3], Any, move |g, x| {
            let b = g.constant(k(&[2, 2], 12));
            g.concat(&[x, b, x], 1)
        }),
        case("slice", &[4, 5], Any, |g, x| g.slice(x, 1, 1, 3)),
        case("pick_rows", &[4, 3], Any, |g, x| {
            g.pick_rows(x, &[2, 0, 2, 1])
        }),
        case("conv1d.x", &[2, 7, 3], Any, move |g, x| {
            let w = g.constant(k(&[3, 3, 4], 13));
            g.conv1d(x, w, 2, 1)
        }),
        case("conv1d.w", &[3, 3, 4], Any, move |g, x| {
            let a = g.constant(k(&[2, 7, 3], 14));
            g.conv1d(a, x, 2, 1)
        }),
        case("cross_entropy", &[4, 3], Any, |g, x| {
            g.cross_entropy(x, &[0, 2, 1, 2])
        }),
        case("attention.q", &[2, 3, 4], Any, move |g, x| {
            let (kk, v) = (g.constant(k(&[2, 5, 4], 15)), g.constant(k(&[2, 5, 3], 16)));
            g.attention(x, kk, v)
        }),
        case("attention.k", &[2, 5, 4], Any, move |g, x| {
            let (q, v) = (g.constant(k(&[2, 3, 4], 17)), g.constant(k(&[2, 5, 3], 18)));
            g.attention(q, x, v)
        }),
        case("attention.v", &[2, 5, 3], Any, move |g, x| {
            let (q, kk) = (g.constant(k(&[2, 3, 4], 19)), g.constant(k(&[2, 5, 4], 20)));
            g.attention(q, kk, x)
        }),
        case("attention.self", &[2, 4, 4], Any, |g, x| {
            g.attention(x, x, x)
        }),
    ]
}

/// Largest relative error of `case` over `trials` random inputs.
pub fn worst_op_error(c: &OpCase, trials: u64, h: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let x = sample_input(c, 1000 + t);
        worst = worst.max(gradient_check(&c.f, &x, h)?);
    }
    Ok(worst)
}

fn micro_batch(seed: u64) -> (DatasetManifest, Vec<Sample>) {
    let manifest = DatasetManifest::standard(seed);
    let ds = generate_dataset(&manifest, 20, seed).unwrap();
    let samples = ds.samples[..2].to_vec();
    (manifest, samples)
}

/// Per-parameter gradient errors of the expert objective on a 2-sample batch,
/// teacher maps held fixed.
pub fn afd_objective_errors(seed: u64, h: f64) -> Result<Vec<(String, f64)>> {
    let (manifest, samples) = micro_batch(seed);
    let mut model = AfdModel::new(&manifest, 8, 4, FusionKind::CrossAttention, &mut rng(seed))?;
    // zero-initialised biases leave ReLU inputs exactly on the kink
    let mut r = rng(seed + 100);
    for i in 0..model.params.len() {
        let t = model.params.get_mut(ParamId(i));
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.05 * r.random_range(-1.0..1.0));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let labels: Vec<usize> = refs.iter().map(|s| s.label()).collect();
    let maps = {
        let mut g = Graph::new();
        let p = model.params.bind_constant(&mut g);
        let out = model.forward(&mut g, &p, &refs)?;
        model.teacher_maps(&g, &out)
    };
    let mut errs = Vec::new();
    for (name, x) in model.params.iter() {
        let id = model.params.id(name).unwrap();
        let f = |g: &mut Graph, v: Var| -> Result<Var> {
            let mut p = model.params.bind_constant(g);
            p.replace(id, v);
            let out = model.forward(g, &p, &refs)?;
            Ok(model.loss_against(g, &out, &labels, 1.0, 0.5, &maps)?.total)
        };
        errs.push((name.to_string(), gradient_check(f, x, h)?));
    }
    Ok(errs)
}

pub fn random_state(l: usize, d: usize, seed: u64) -> DualViewState {
    let mut r = rng(seed);
    DualViewState::new(
        std::array::from_fn(|_| Tensor::randn(&[d], 1.0, &mut r)),
        std::array::from_fn(|_| Tensor::randn(&[l, d], 1.0, &mut r)),
    )
    .unwrap()
}

/// Per-parameter gradient errors of the agent objective on a 2-sample batch,
/// advantages held fixed.
pub fn ada_objective_errors(seed: u64, h: f64) -> Result<Vec<(String, f64)>> {
    let agent = Agent::new(4, 6, 5, ActionSpace::Atomic, true, &mut rng(seed));
    let states: Vec<DualViewState> = (0..2).map(|i| random_state(3, 4, seed + 1 + i)).collect();
    let refs: Vec<&DualViewState> = states.iter().collect();
    let batch = StateBatch::new(&refs)?;
    let mut r = rng(seed + 7);
    let chosen: Vec<usize> = (0..2).map(|_| r.random_range(0..4)).collect();
    let rewards: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
    let deltas = {
        let mut g = Graph::new();
        let p = agent.params.bind_constant(&mut g);
        let f = agent.forward(&mut g, &p, &batch)?;
        let v = g.value(f.value.expect("value head")).data().to_vec();
        rewards
            .iter()
            .zip(v)
            .map(|(r, v)| r - v)
            .collect::<Vec<f64>>()
    };
    let mut errs = Vec::new();
    for (name, x) in agent.params.iter() {
        let id = agent.params.id(name).unwrap();
        let f = |g: &mut Graph, v: Var| -> Result<Var> {
            let mut p = agent.params.bind_constant(g);
            p.replace(id, v);
            let out = agent.forward(g, &p, &batch)?;
            Ok(ada_objective(g, &out, &chosen, &rewards, &deltas, 0.5, 0.01)?.total)
        };
        errs.push((name.to_string(), gradient_check(f, x, h)?));
    }
    Ok(errs)
}
