//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use casdm::config::ExperimentConfig;
use casdm::metricfn::{load_extractor, Backbone, ExtractorSpec, MetricTransform};
use casdm::netcore::{finite_diff_grad, rel_err, Graph, ParamStore, Var};
use casdm::rng;
use casdm::{Result, Tensor};

/// Desk preset with a narrower network, sized so the 2000-step smoke run
/// fits its runtime budget on one core.
pub fn smoke_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.model.channels = 16;
    cfg.model.blocks = 1;
    cfg
}

/// A model and data set small enough for many short runs per test.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.model.channels = 8;
    cfg.model.blocks = 1;
    cfg.model.levels = 1;
    cfg.model.norm_groups = 4;
    cfg.schedule.steps = 100;
    cfg.sample.steps = 10;
    cfg.data.n = 64;
    cfg.train.batch = 4;
    cfg.train.steps = 20;
    cfg.train.checkpoint_every = 10;
    cfg.loss.resolution = 16;
    cfg.validate().expect("tiny config is valid");
    cfg
}

/// Bitwise equality of two parameter stores.
pub fn stores_bit_equal(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.same_layout(b)
        && a.iter().zip(b.iter()).all(|((pa, ta), (pb, tb))| {
            pa == pb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

/// Largest absolute elementwise difference between two stores of equal
/// layout.
pub fn max_abs_diff(a: &ParamStore<f32>, b: &ParamStore<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, ta), (_, tb))| ta.data().iter().zip(tb.data()).map(|(x, y)| f64::from((x - y).abs())))
        .fold(0.0, f64::max)
}

/// Step size and relative tolerance of the finite-difference oracle.
pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-5;

pub type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// One primitive under test: input shapes and how to apply it.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<usize>>,
    pub build: Build,
}

fn case(name: &'static str, inputs: &[&[usize]], build: Build) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|s| s.to_vec()).collect(),
        build,
    }
}

/// Every differentiable primitive of the graph engine.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1])),
        case("affine", &[&[4]], |g, v| Ok(g.affine(v[0], 0.7, -0.2))),
        case("scale", &[&[4]], |g, v| Ok(g.scale(v[0], -1.3))),
        case("axpby_per_item", &[&[2, 2, 2, 1], &[2, 2, 2, 1]], |g, v| {
            g.axpby_per_item(vec![0.3, -1.1], v[0], vec![0.9, 0.4], v[1])
        }),
        case("mix", &[&[1, 2, 2, 3], &[1, 2, 2, 3], &[1, 2, 2, 1]], |g, v| {
            let r = g.sigmoid(v[2]);
            g.mix(v[0], v[1], r)
        }),
        case("square", &[&[5]], |g, v| Ok(g.square(v[0]))),
        case("silu", &[&[5]], |g, v| Ok(g.silu(v[0]))),
        case("sigmoid", &[&[5]], |g, v| Ok(g.sigmoid(v[0]))),
        case("sum", &[&[2, 3]], |g, v| {
            let s = g.sum(v[0]);
            Ok(g.square(s))
        }),
        case("mean", &[&[2, 3]], |g, v| {
            let s = g.mean(v[0]);
            Ok(g.square(s))
        }),
        case("sum_last_axis", &[&[2, 3, 4]], |g, v| Ok(g.sum_last_axis(v[0]))),
        case("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case("linear", &[&[3, 4], &[4, 2], &[2]], |g, v| g.linear(v[0], v[1], v[2])),
        case("conv2d_3x3", &[&[2, 4, 4, 2], &[3, 3, 2, 3], &[3]], |g, v| g.conv2d(v[0], v[1], v[2])),
        case("conv2d_1x1", &[&[1, 3, 3, 2], &[1, 1, 2, 2], &[2]], |g, v| g.conv2d(v[0], v[1], v[2])),
        case("avg_pool2", &[&[1, 4, 4, 2]], |g, v| g.avg_pool2(v[0])),
        case("upsample2", &[&[1, 2, 2, 2]], |g, v| g.upsample2(v[0])),
        case("group_norm", &[&[2, 3, 3, 4], &[4], &[4]], |g, v| g.group_norm(v[0], v[1], v[2], 2)),
        case("add_item_channel", &[&[2, 2, 2, 3], &[2, 3]], |g, v| g.add_item_channel(v[0], v[1])),
        case("concat_last", &[&[1, 2, 2, 1], &[1, 2, 2, 2]], |g, v| g.concat_last(v[0], v[1])),
        case("slice_last", &[&[1, 2, 2, 4]], |g, v| g.slice_last(v[0], 1, 2)),
        case("resize_up", &[&[1, 3, 3, 2]], |g, v| g.resize_bilinear(v[0], 5, 7)),
        case("resize_down", &[&[1, 8, 8, 1]], |g, v| g.resize_bilinear(v[0], 3, 4)),
        case("unit_normalize_last", &[&[2, 2, 3]], |g, v| Ok(g.unit_normalize_last(v[0], 1e-10))),
        case("batch_matmul", &[&[2, 3, 4], &[2, 4, 2]], |g, v| g.batch_matmul(v[0], v[1], false)),
        case("batch_matmul_t", &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.batch_matmul(v[0], v[1], true)),
        case("softmax_last", &[&[2, 5]], |g, v| Ok(g.softmax_last(v[0]))),
        case("mse", &[&[2, 3], &[2, 3]], |g, v| g.mse(v[0], v[1])),
    ]
}

/// Worst relative disagreement between analytic and central-difference
/// gradients of `Σ c ⊙ op(inputs)` for a random fixed `c`.
pub fn check_op(case: &OpCase, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, case.name, 0);
    let mut params = ParamStore::<f64>::new();
    for (i, s) in case.inputs.iter().enumerate() {
        params.insert(format!("in{i}"), rng::normal_tensor(&mut r, s))?;
    }
    let build = case.build;
    let mut probe_g = Graph::<f64>::new();
    let vars = bind(&mut probe_g, &params);
    let out = build(&mut probe_g, &vars)?;
    let weights: Tensor<f64> = rng::normal_tensor(&mut r, probe_g.shape(out));
    let loss = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let y = build(g, vars)?;
        let c = g.input(weights.clone());
        let p = g.mul(y, c)?;
        Ok(g.sum(p))
    };
    let mut g = Graph::<f64>::new();
    let vars = bind(&mut g, &params);
    let l = loss(&mut g, &vars)?;
    let analytic = g.backward(l)?.params();
    let numeric = finite_diff_grad(
        |p| {
            let mut g = Graph::<f64>::new();
            let vars = bind(&mut g, p);
            let l = loss(&mut g, &vars).expect("shapes already validated");
            g.value(l).item()
        },
        &params,
        FD_STEP,
    );
    Ok(worst_rel(&analytic, &numeric))
}

fn bind(g: &mut Graph<f64>, params: &ParamStore<f64>) -> Vec<Var> {
    (0..params.len())
        .map(|i| {
            let name = format!("in{i}");
            g.param(name.clone(), params.get(&name).expect("bound input").clone())
        })
        .collect()
}

pub fn worst_rel(a: &ParamStore<f64>, b: &ParamStore<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, ta), (_, tb))| {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| rel_err(x, y, FD_FLOOR))
        })
        .fold(0.0, f64::max)
}

/// Gradient check of the full metric loss with respect to both images.
pub fn check_metric_loss(backbone: Backbone, seed: u64) -> Result<f64> {
    let ex = load_extractor(&ExtractorSpec {
        backbone,
        in_channels: 1,
        seed,
    })?;
    let tf = MetricTransform { resolution: 16 };
    let mut r = rng::stream(seed, "metric-gradcheck", 0);
    let mut params = ParamStore::<f64>::new();
    params.insert("in0", rng::normal_tensor::<f64>(&mut r, &[2, 8, 8, 1]).map(f64::tanh))?;
    params.insert("in1", rng::normal_tensor::<f64>(&mut r, &[2, 8, 8, 1]).map(f64::tanh))?;
    let loss = |g: &mut Graph<f64>, v: &[Var]| casdm::losses::metric_loss(g, &ex, tf, v[0], v[1]);
    let mut g = Graph::<f64>::new();
    let vars = bind(&mut g, &params);
    let l = loss(&mut g, &vars)?;
    let analytic = g.backward(l)?.params();
    let numeric = finite_diff_grad(
        |p| {
            let mut g = Graph::<f64>::new();
            let vars = bind(&mut g, p);
            let l = loss(&mut g, &vars).expect("shapes already validated");
            g.value(l).item()
        },
        &params,
        FD_STEP,
    );
    Ok(worst_rel(&analytic, &numeric))
}

/// Seeds used by every gradient check.
pub const GRAD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
