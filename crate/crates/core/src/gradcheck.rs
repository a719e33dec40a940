//! Central-difference gradient checks.
//!
//! The checker only ever runs forward passes to build its numeric estimate,
//! so it is independent of every backward closure it validates. Coordinates
//! whose ±step probes change any piecewise-linear branch decision (ReLU sign,
//! max-pool winner, elementwise-max winner) are reported as kink-adjacent and
//! skipped.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tape, Var};
use crate::blocks::{ChsBlock, ReCal, ResBlock, ScSeBlock, SeBlock};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::model::{Model, ModelConfig, Variant};
use crate::ops::{self, ConvSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor4;
use crate::train::loss::{segmentation_loss, LossConfig};

#[derive(Clone, Debug)]
pub struct Options {
    pub step: f64,
    /// Maximum elementwise relative error.
    pub tolerance: f64,
    /// Absolute lower bound of the error denominator.
    pub floor: f64,
    /// Denominators are also floored at this fraction of the largest analytic
    /// gradient magnitude in the same tensor, so near-zero components are
    /// judged on the tensor's scale rather than their own.
    pub scale_floor: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Options {
    pub fn new(tolerance: f64) -> Self {
        Options {
            step: 1e-3,
            tolerance,
            floor: 1e-8,
            scale_floor: 1e-2,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn sampled(mut self, per_tensor: usize) -> Self {
        self.max_coords = Some(per_tensor);
        self
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    /// Tensor label and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<24} checked {:>5}  kinks skipped {:>3}  max rel err {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.skipped_kinks,
            self.max_rel_err,
            self.tolerance
        )?;
        if let Some((t, i)) = &self.worst {
            write!(f, "  worst {t}[{i}]")?;
        }
        Ok(())
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks the scalar `f(tape, state, inputs)` against central differences
/// w.r.t. every input tensor and every parameter in `store_of(state)`.
pub fn check<S, F>(
    name: &str,
    state: &mut S,
    store_of: fn(&mut S) -> &mut ParamStore,
    inputs: &[Tensor4],
    f: F,
    opts: &Options,
) -> Result<Report>
where
    F: for<'t> Fn(&'t Tape, &S, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |state: &S, inputs: &[Tensor4]| -> Result<(f64, u64)> {
        let tape = Tape::with_kink_tracking();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, state, &vars)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(Error::Usage(format!("{name}: checked function must return a scalar")));
        }
        Ok((v.data()[0], tape.kink_signature().unwrap_or(0)))
    };

    // Analytic gradients.
    let (input_grads, param_grads, base_sig) = {
        let tape = Tape::with_kink_tracking();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, state, &vars)?;
        let sig = tape.kink_signature().unwrap_or(0);
        let grads = tape.backward(out)?;
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(*v).map_or(vec![0.0; t.len()], Tensor4::into_vec))
            .collect();
        let mut pg: Vec<Vec<f64>> = store_of(state)
            .params()
            .iter()
            .map(|p| vec![0.0; p.data.len()])
            .collect();
        for (id, g) in grads.params() {
            pg[id.index()].iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b);
        }
        (ig, pg, sig)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut pick = |len: usize| -> Vec<usize> {
        match opts.max_coords {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    };

    let mut report = Report {
        name: name.to_string(),
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance: opts.tolerance,
    };
    let h = opts.step;
    let scale = |g: &[f64]| opts.floor.max(opts.scale_floor * g.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let record = |report: &mut Report, label: String, i: usize, a: f64, floor: f64, plus: (f64, u64), minus: (f64, u64)| {
        if plus.1 != base_sig || minus.1 != base_sig {
            report.skipped_kinks += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * h);
        let err = relative_error(a, numeric, floor);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((label, i));
            }
        }
    };

    let mut probe = inputs.to_vec();
    for t in 0..inputs.len() {
        let floor = scale(&input_grads[t]);
        for i in pick(inputs[t].len()) {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + h;
            let plus = eval(state, &probe)?;
            probe[t].data_mut()[i] = orig - h;
            let minus = eval(state, &probe)?;
            probe[t].data_mut()[i] = orig;
            record(&mut report, format!("input{t}"), i, input_grads[t][i], floor, plus, minus);
        }
    }

    let n_params = store_of(state).params().len();
    for p in 0..n_params {
        let len = store_of(state).params()[p].data.len();
        let label = store_of(state).params()[p].name.clone();
        let floor = scale(&param_grads[p]);
        for i in pick(len) {
            let orig = store_of(state).params()[p].data[i];
            store_of(state).params_mut()[p].data[i] = orig + h;
            let plus = eval(state, inputs)?;
            store_of(state).params_mut()[p].data[i] = orig - h;
            let minus = eval(state, inputs)?;
            store_of(state).params_mut()[p].data[i] = orig;
            record(&mut report, label.clone(), i, param_grads[p][i], floor, plus, minus);
        }
    }
    Ok(report)
}

fn identity(s: &mut ParamStore) -> &mut ParamStore {
    s
}

fn model_store(m: &mut Model) -> &mut ParamStore {
    m.store_mut()
}

/// Standard-normal tensor.
pub fn randn(shape: [usize; 4], rng: &mut impl Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Scalarizes `y` with a fixed random projection so every output element
/// contributes a distinct weight.
fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = randn(y.shape(), &mut rng);
    ops::weighted_sum(y, &r)
}

/// Names accepted by [`run_scope`] for `op:<name>`.
pub const OP_NAMES: [&str; 14] = [
    "conv2d",
    "conv2d_grouped",
    "avg_pool",
    "global_avg_pool",
    "max_pool2",
    "bilinear_upsample2",
    "relu",
    "sigmoid",
    "mul",
    "concat",
    "interleave",
    "batch_norm",
    "layer_norm",
    "loss",
];

/// Names accepted by [`run_scope`] for `block:<name>`.
pub const BLOCK_NAMES: [&str; 5] = ["res", "chs", "recal", "se", "scse"];

pub const OP_TOLERANCE: f64 = 1e-4;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

type OpFn = for<'t> fn(&'t Tape, &ParamStore, &[Var<'t>]) -> Result<Var<'t>>;

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor4>, OpFn)> {
    let r = |shape, rng: &mut ChaCha8Rng| randn(shape, rng);
    Ok(match name {
        "conv2d" => (
            vec![r([2, 3, 6, 5], rng), r([4, 3, 3, 3], rng), r([1, 4, 1, 1], rng)],
            |_, _, v| project(ops::conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(3, 4, 3))?, 1),
        ),
        "conv2d_grouped" => (
            vec![r([2, 8, 5, 5], rng), r([4, 2, 3, 3], rng), r([1, 4, 1, 1], rng)],
            |_, _, v| project(ops::conv2d(v[0], v[1], Some(v[2]), ReCal::fuse_spec(4))?, 2),
        ),
        "avg_pool" => (vec![r([2, 3, 8, 8], rng)], |_, _, v| {
            let a = ops::avg_pool(v[0], (3, 3), 1)?;
            let b = ops::avg_pool(v[0], (5, 5), 1)?;
            let c = ops::avg_pool(v[0], (7, 7), 1)?;
            let d = ops::avg_pool(v[0], (3, 3), 2)?;
            let s = ops::add(ops::add(a, b)?, c)?;
            let s = project(s, 3)?;
            ops::add(s, project(d, 4)?)
        }),
        "global_avg_pool" => (vec![r([2, 4, 5, 6], rng)], |_, _, v| {
            project(ops::global_avg_pool(v[0])?, 5)
        }),
        "max_pool2" => (vec![r([2, 3, 8, 8], rng)], |_, _, v| project(ops::max_pool2(v[0])?, 6)),
        "bilinear_upsample2" => (vec![r([2, 3, 4, 5], rng)], |_, _, v| {
            project(ops::bilinear_upsample2(v[0])?, 7)
        }),
        "relu" => (vec![r([2, 3, 6, 6], rng)], |_, _, v| project(ops::relu(v[0]), 8)),
        "sigmoid" => (vec![r([2, 3, 6, 6], rng)], |_, _, v| project(ops::sigmoid(v[0]), 9)),
        "mul" => (
            vec![r([2, 4, 5, 5], rng), r([2, 1, 5, 5], rng), r([2, 4, 1, 1], rng), r([2, 4, 5, 5], rng)],
            |_, _, v| {
                let a = ops::mul(v[0], v[1])?;
                let b = ops::mul(a, v[2])?;
                project(ops::mul(b, v[3])?, 10)
            },
        ),
        "concat" => (vec![r([2, 3, 4, 4], rng), r([2, 5, 4, 4], rng)], |_, _, v| {
            project(ops::concat(v[0], v[1])?, 11)
        }),
        "interleave" => (vec![r([2, 3, 4, 4], rng), r([2, 3, 4, 4], rng)], |_, _, v| {
            project(ops::interleave_channels(v[0], v[1])?, 12)
        }),
        "batch_norm" => (
            vec![r([2, 4, 5, 5], rng), r([1, 4, 1, 1], rng), r([1, 4, 1, 1], rng)],
            |_, _, v| {
                let (y, _) = ops::batch_norm(v[0], v[1], v[2], None)?;
                let (z, _) = ops::batch_norm(
                    v[0],
                    v[1],
                    v[2],
                    Some((&[0.1, -0.2, 0.3, 0.0], &[1.5, 0.5, 2.0, 1.0])),
                )?;
                ops::add(project(y, 13)?, project(z, 14)?)
            },
        ),
        "layer_norm" => (
            vec![r([2, 4, 5, 5], rng), r([1, 4, 1, 1], rng), r([1, 4, 1, 1], rng)],
            |_, _, v| project(ops::layer_norm(v[0], v[1], v[2])?, 15),
        ),
        "loss" => (vec![r([2, 1, 4, 4], rng)], |tape, _, v| {
            let truth = Tensor4::from_fn([2, 1, 4, 4], |[n, _, y, x]| ((n + y * 3 + x) % 3 == 0) as u8 as f64);
            let p = ops::sigmoid(v[0]);
            let l = segmentation_loss(p, &truth, LossConfig::default())?;
            let _ = tape;
            Ok(l)
        }),
        _ => {
            return Err(Error::Usage(format!(
                "unknown op `{name}` (expected one of {})",
                OP_NAMES.join(", ")
            )))
        }
    })
}

pub fn check_op(name: &str, opts: &Options) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0b5e_55ed);
    let (inputs, f) = op_case(name, &mut rng)?;
    let mut store = ParamStore::new(0);
    check(&format!("op:{name}"), &mut store, identity, &inputs, f, opts)
}

enum AnyBlock {
    Res(ResBlock),
    Chs(ChsBlock),
    ReCal(ReCal),
    Se(SeBlock),
    ScSe(ScSeBlock),
}

struct BlockState {
    store: ParamStore,
    block: AnyBlock,
}

fn block_store(s: &mut BlockState) -> &mut ParamStore {
    &mut s.store
}

/// Randomizes biases and norm affines so no gradient path is trivially zero.
fn perturb_store(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        for v in &mut p.data {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

pub fn check_block(name: &str, opts: &Options) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xb10c);
    let c = 4;
    let mut store = ParamStore::new(opts.seed);
    let block = match name {
        "res" => AnyBlock::Res(ResBlock::new(&mut store, "b", c)?),
        "chs" => AnyBlock::Chs(ChsBlock::new(&mut store, "b", c, 2)?),
        "recal" => AnyBlock::ReCal(ReCal::new(&mut store, "b", c)?),
        "se" => AnyBlock::Se(SeBlock::new(&mut store, "b", c)?),
        "scse" => AnyBlock::ScSe(ScSeBlock::new(&mut store, "b", c)?),
        _ => {
            return Err(Error::Usage(format!(
                "unknown block `{name}` (expected one of {})",
                BLOCK_NAMES.join(", ")
            )))
        }
    };
    perturb_store(&mut store, &mut rng);
    // Lift the channel-squeeze gates above their ReLU kink. Near-zero gates
    // put layer norm in its ε-dominated range, where third derivatives are
    // large enough to swamp a 1e-3 central difference.
    let x = randn([2, c, 6, 6], &mut rng);
    if matches!(name, "chs" | "recal") {
        for p in store.params_mut().iter_mut().filter(|p| p.name.ends_with("excite.bias")) {
            p.data.iter_mut().for_each(|v| *v += 1.0);
        }
    }
    let mut state = BlockState { store, block };
    check(
        &format!("block:{name}"),
        &mut state,
        block_store,
        &[x],
        |tape, s, v| {
            let ctx = Ctx::new(tape, &s.store, true);
            let y = match &s.block {
                AnyBlock::Res(b) => b.forward(&ctx, v[0])?,
                AnyBlock::Chs(b) => b.forward(&ctx, v[0])?,
                AnyBlock::ReCal(b) => b.forward(&ctx, v[0])?,
                AnyBlock::Se(b) => b.forward(&ctx, v[0])?,
                AnyBlock::ScSe(b) => b.forward(&ctx, v[0])?,
            };
            project(y, 21)
        },
        opts,
    )
}

/// End-to-end check of a width-reduced network through the segmentation loss.
pub fn check_model(variant: Variant, width_scale: usize, size: usize, opts: &Options) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x30de1);
    let mut model = Model::build(ModelConfig::new(variant, width_scale, (size, size)), opts.seed)?;
    let image = uniform([1, 3, size, size], 0.0, 1.0, &mut rng);
    let truth = Tensor4::from_fn([1, 1, size, size], |[_, _, y, x]| {
        let (dy, dx) = (y as f64 - size as f64 / 2.0, x as f64 - size as f64 / 2.0);
        (dy * dy + dx * dx < (size as f64 / 4.0).powi(2)) as u8 as f64
    });
    check(
        &format!("model:{variant}/w{width_scale}"),
        &mut model,
        model_store,
        &[],
        move |tape, m, _| {
            let pass = m.forward(tape, &image, true, &[])?;
            segmentation_loss(pass.probs, &truth, LossConfig::default())
        },
        opts,
    )
}

/// Runs `op:<name>`, `block:<name>`, `ops`, `blocks`, `model`, or `all`.
pub fn run_scope(scope: &str, seed: u64) -> Result<Vec<Report>> {
    let op_opts = Options { seed, ..Options::new(OP_TOLERANCE) };
    let block_opts = Options { seed, ..Options::new(BLOCK_TOLERANCE) };
    let model_opts = Options { seed, ..Options::new(MODEL_TOLERANCE).sampled(4) };
    let all_ops = || OP_NAMES.iter().map(|n| check_op(n, &op_opts)).collect::<Result<Vec<_>>>();
    let all_blocks = || {
        BLOCK_NAMES
            .iter()
            .map(|n| check_block(n, &block_opts))
            .collect::<Result<Vec<_>>>()
    };
    match scope.split_once(':') {
        Some(("op", name)) => Ok(vec![check_op(name, &op_opts)?]),
        Some(("block", name)) => Ok(vec![check_block(name, &block_opts)?]),
        None if scope == "ops" => all_ops(),
        None if scope == "blocks" => all_blocks(),
        None if scope == "model" => Ok(vec![check_model(Variant::ReCal, 8, 32, &model_opts)?]),
        None if scope == "all" => {
            let mut v = all_ops()?;
            v.extend(all_blocks()?);
            v.push(check_model(Variant::ReCal, 8, 32, &model_opts)?);
            Ok(v)
        }
        _ => Err(Error::Usage(format!(
            "unknown gradcheck scope `{scope}` (expected op:<name>, block:<name>, ops, blocks, model, or all)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for name in OP_NAMES {
            let r = check_op(name, &Options::new(OP_TOLERANCE)).unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn every_block_passes_on_several_instances() {
        for seed in 0..6 {
            for name in BLOCK_NAMES {
                let r = check_block(name, &Options { seed, ..Options::new(BLOCK_TOLERANCE) }).unwrap();
                assert!(r.passed(), "seed {seed}: {r}");
            }
        }
    }

    #[test]
    fn model_passes() {
        let opts = Options::new(MODEL_TOLERANCE).sampled(4);
        let r = check_model(Variant::ReCal, 8, 32, &opts).unwrap();
        println!("{r}");
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Claims d(x²)/dx = x by routing through a constant copy.
        let mut store = ParamStore::new(0);
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check(
            "bad",
            &mut store,
            identity,
            &[x],
            |tape, _, v| {
                let c = tape.constant((*v[0].value()).clone());
                ops::sum(ops::mul(v[0], c)?).pipe(Ok)
            },
            &Options::new(1e-4),
        )
        .unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn unknown_scope_is_usage_error() {
        assert!(matches!(run_scope("op:nope", 0), Err(Error::Usage(_))));
        assert!(matches!(run_scope("layer", 0), Err(Error::Usage(_))));
    }

    trait Pipe: Sized {
        fn pipe<R>(self, f: impl FnOnce(Self) -> R) -> R {
            f(self)
        }
    }
    impl<T> Pipe for T {}
}
