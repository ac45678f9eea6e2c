//! Finite-difference gradient suites behind `grad-check`.
//!
//! Every suite draws its cases from a seeded generator, so a report is a pure
//! function of `(suite, seed)`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{
    check_param_gradients, finite_difference_check, relative_error, ElementCheck, FdOptions, GradCheckReport,
};
use crate::autodiff::{Graph, MaskType, Var};
use crate::config::Config;
use crate::context_model::{pmf_var, ContextModelConfig};
use crate::error::{Error, Result};
use crate::gmm::{gmm_nll_var, quantize_soft_var, GmmParams, GmmVars, QuantizerMode};
use crate::metrics::ms_ssim_var;
use crate::model::{ctx_prefix, Model};
use crate::network::rcab_forward;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{batch_loss_var, synthetic_image};

/// Tolerance for single operations.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for end-to-end composites.
pub const COMPOSITE_TOL: f64 = 1e-3;
/// Absolute fallback for end-to-end composites, whose loss is O(10..100):
/// smaller gradient components sit at the roundoff floor of the differences.
pub const COMPOSITE_ABS_FLOOR: f64 = 1e-3;
pub const MIN_CASES: usize = 100;

/// Suites run by default, in order.
pub const SUITES: [&str; 7] = ["primitives", "rcab", "soft_quantizer", "gmm_nll", "context_model", "ms_ssim", "total_loss"];
/// Negative control with a deliberately wrong backward rule.
pub const CORRUPTED: &str = "corrupted_backward";

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub checks: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
    /// Samples dropped because the two step sizes disagreed (a ReLU kink within reach).
    pub skipped: usize,
    /// Descriptions of the cases that exceeded the tolerance.
    pub failures: Vec<String>,
}

struct Acc {
    name: &'static str,
    tol: f64,
    cases: usize,
    checks: usize,
    max_rel_error: f64,
    skipped: usize,
    failures: Vec<String>,
}

impl Acc {
    fn new(name: &'static str, tol: f64) -> Self {
        Self {
            name,
            tol,
            cases: 0,
            checks: 0,
            max_rel_error: 0.0,
            skipped: 0,
            failures: Vec::new(),
        }
    }

    fn add(&mut self, label: &str, rep: &GradCheckReport) {
        self.checks += rep.elements.len();
        self.max_rel_error = self.max_rel_error.max(rep.max_rel_error);
        if rep.max_rel_error > self.tol {
            let worst = rep.elements.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
            self.failures.push(format!(
                "{label}: rel error {:.3e} (analytic {:.6e}, numeric {:.6e})",
                worst.rel_error, worst.analytic, worst.numeric
            ));
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name.to_string(),
            passed: self.failures.is_empty() && self.cases >= MIN_CASES,
            cases: self.cases,
            checks: self.checks,
            max_rel_error: self.max_rel_error,
            tol: self.tol,
            skipped: self.skipped,
            failures: self.failures,
        }
    }
}

fn opts(tol: f64, max_elements: Option<usize>, seed: u64) -> FdOptions {
    FdOptions {
        tol,
        max_elements,
        seed,
        ..FdOptions::default()
    }
}

/// Uniform values in `[lo, hi]` kept at least `gap` away from `kink`.
fn away_from(shape: &[usize], lo: f64, hi: f64, kink: f64, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, rng).map(|v| if (v - kink).abs() < gap { kink + gap.copysign(v - kink) } else { v })
}

/// `sum(out ⊙ W)` with a fixed pseudo-random weighting of the output.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = Tensor::rand_uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

type PrimBuild = fn(&mut Graph, &[Var]) -> Result<Var>;

struct PrimCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: PrimBuild,
}

fn primitive_case(kind: usize, rng: &mut ChaCha8Rng) -> PrimCase {
    let mut u = |shape: &[usize]| Tensor::rand_uniform(shape, -1.0, 1.0, rng);
    let (c, h, w) = (2, 4, 5);
    macro_rules! case {
        ($name:expr, [$($inp:expr),*], $body:expr) => {
            PrimCase { name: $name, inputs: vec![$($inp),*], build: $body }
        };
    }
    match kind % 27 {
        0 => case!("add", [u(&[3, 4]), u(&[3, 4])], |g, v| g.add(v[0], v[1])),
        1 => case!("sub", [u(&[3, 4]), u(&[3, 4])], |g, v| g.sub(v[0], v[1])),
        2 => case!("mul", [u(&[3, 4]), u(&[3, 4])], |g, v| g.mul(v[0], v[1])),
        3 => {
            let d = u(&[3, 4]).map(|x| x.signum() * (0.5 + x.abs()));
            case!("div", [u(&[3, 4]), d], |g, v| g.div(v[0], v[1]))
        }
        4 => case!("add_scalar", [u(&[5])], |g, v| g.add_scalar(v[0], 0.7)),
        5 => case!("mul_scalar", [u(&[5])], |g, v| g.mul_scalar(v[0], -1.3)),
        6 => case!("exp", [u(&[6])], |g, v| g.exp(v[0])),
        7 => case!("log", [u(&[6]).map(|x| 0.2 + x.abs())], |g, v| g.log(v[0])),
        8 => case!("sigmoid", [u(&[6]).map(|x| 4.0 * x)], |g, v| g.sigmoid(v[0])),
        9 => {
            let x = away_from(&[8], -1.0, 1.0, 0.0, 1e-2, rng);
            case!("relu", [x], |g, v| g.relu(v[0]))
        }
        10 => case!("softplus", [u(&[6]).map(|x| 5.0 * x)], |g, v| g.softplus(v[0])),
        11 => {
            let x = away_from(&[8], -1.0, 1.0, 0.1, 1e-2, rng);
            case!("clamp_min", [x], |g, v| g.clamp_min(v[0], 0.1))
        }
        12 => case!("conv2d", [u(&[c, h, w]), u(&[3, c, 3, 3]), u(&[3])], |g, v| g.conv2d(v[0], v[1], v[2], 1)),
        13 => case!("conv2d_valid", [u(&[c, h, w]), u(&[3, c, 3, 3]), u(&[3])], |g, v| g.conv2d(v[0], v[1], v[2], 0)),
        14 => case!("masked_conv3d_a", [u(&[2, 3, 3, 3]), u(&[2, 2, 3, 3, 3]), u(&[2])], |g, v| g
            .masked_conv3d(v[0], v[1], v[2], MaskType::A)),
        15 => case!("masked_conv3d_b", [u(&[2, 3, 3, 3]), u(&[2, 2, 3, 3, 3]), u(&[2])], |g, v| g
            .masked_conv3d(v[0], v[1], v[2], MaskType::B)),
        16 => case!("global_avg_pool", [u(&[c, h, w])], |g, v| g.global_avg_pool(v[0])),
        17 => case!("mean", [u(&[c, h, w])], |g, v| {
            let m = g.mean(v[0])?;
            g.mul(m, m)
        }),
        18 => case!("sum_axis", [u(&[3, 4, 2])], |g, v| g.sum_axis(v[0], 1)),
        19 => case!("mean_axis", [u(&[3, 4, 2])], |g, v| g.mean_axis(v[0], 2)),
        20 => case!("softmax", [u(&[4, 3]).map(|x| 3.0 * x)], |g, v| g.softmax(v[0], 0)),
        21 => case!("concat_narrow", [u(&[2, 3]), u(&[3, 3])], |g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            g.narrow(c, 1, 3)
        }),
        22 => case!("index_select", [u(&[4, 3])], |g, v| g.index_select(v[0], &[2, 0, 3, 1])),
        23 => case!("reshape_permute", [u(&[2, 3, 4])], |g, v| {
            let r = g.reshape(v[0], &[6, 4])?;
            let r = g.reshape(r, &[2, 3, 4])?;
            g.permute(r, &[2, 0, 1])
        }),
        24 => case!("scale_channels", [u(&[3, 2, 2]), u(&[3])], |g, v| g.scale_channels(v[0], v[1])),
        25 => case!("filter2d_avg_pool", [u(&[2, 6, 8])], |g, v| {
            let k = Tensor::new(&[3, 3], (1..=9).map(|i| i as f64 / 45.0).collect())?;
            let f = g.filter2d_valid(v[0], &k)?;
            let p = g.avg_pool2(v[0])?;
            let (f, p) = (g.sum(f)?, g.mul(p, p)?);
            let p = g.sum(p)?;
            g.add(f, p)
        }),
        _ => case!("pick_axis0", [u(&[3, 5])], |g, v| g.pick_axis0(v[0], &[2, 0, 1, 1, 0])),
    }
}

fn primitives_suite(seed: u64) -> Result<SuiteResult> {
    let mut acc = Acc::new("primitives", OP_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..4 * 27 {
        let pc = primitive_case(case, &mut rng);
        let wseed = rng.gen();
        for k in 0..pc.inputs.len() {
            let others = pc.inputs.clone();
            let build = pc.build;
            let rep = finite_difference_check(
                |g, x| {
                    let vars: Vec<Var> = others
                        .iter()
                        .enumerate()
                        .map(|(j, t)| if j == k { x } else { g.constant(t.clone()) })
                        .collect();
                    let out = build(g, &vars)?;
                    weighted_sum(g, out, wseed)
                },
                &pc.inputs[k],
                &opts(OP_TOL, None, 0),
            )?;
            acc.add(&format!("{} input {k} (case {case})", pc.name), &rep);
        }
        acc.cases += 1;
    }
    Ok(acc.finish())
}

/// Samples `per_param` indices from each named tensor.
fn samples(store: &ParamStore, names: &[String], per_param: usize, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
    names
        .iter()
        .flat_map(|n| {
            let len = store.get(n).map_or(1, Tensor::numel);
            (0..per_param).map(|_| (n.clone(), rng.gen_range(0..len))).collect::<Vec<_>>()
        })
        .collect()
}

fn rcab_suite(seed: u64) -> Result<SuiteResult> {
    let mut acc = Acc::new("rcab", OP_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..MIN_CASES {
        let c = [2, 4][case % 2];
        let mut store = ParamStore::new();
        store.insert("x", Tensor::rand_uniform(&[c, 4, 4], -1.0, 1.0, &mut rng));
        store.init_conv("b.conv1", &[c, c, 3, 3], &mut rng);
        store.init_conv("b.conv2", &[c, c, 3, 3], &mut rng);
        store.init_conv("b.ca_reduce", &[1, c, 1, 1], &mut rng);
        store.init_conv("b.ca_expand", &[c, 1, 1, 1], &mut rng);
        let wseed = rng.gen();
        let names: Vec<String> = store.names().cloned().collect();
        let picks = samples(&store, &names, 1, &mut rng);
        let rep = check_param_gradients(
            &store,
            |g, s| {
                let x = g.param(s, "x")?;
                let y = rcab_forward(g, s, "b", x, 3)?;
                weighted_sum(g, y, wseed)
            },
            &picks,
            &opts(OP_TOL, None, 0),
        )?;
        acc.add(&format!("case {case}"), &rep);
        acc.cases += 1;
    }
    Ok(acc.finish())
}

fn random_gmm(q: usize, rng: &mut ChaCha8Rng) -> Result<GmmParams> {
    let pi: Vec<f64> = (0..q).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = pi.iter().sum();
    let pi: Vec<f64> = pi.iter().map(|p| p / total).collect();
    let mut mu: Vec<f64> = (0..q).map(|_| rng.gen_range(-2.0..2.0)).collect();
    mu.sort_by(f64::total_cmp);
    let sigma: Vec<f64> = (0..q).map(|_| rng.gen_range(0.3..1.2)).collect();
    GmmParams::from_moments(&pi, &mu, &sigma)
}

fn gmm_suite(seed: u64, nll: bool) -> Result<SuiteResult> {
    let mut acc = Acc::new(if nll { "gmm_nll" } else { "soft_quantizer" }, OP_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..MIN_CASES {
        let q = 2 + case % 7;
        let mut store = ParamStore::new();
        random_gmm(q, &mut rng)?.store(&mut store, "gmm");
        store.insert("z", Tensor::rand_uniform(&[6], -2.5, 2.5, &mut rng));
        let wseed = rng.gen();
        let names: Vec<String> = store.names().cloned().collect();
        let picks = samples(&store, &names, 2, &mut rng);
        let rep = check_param_gradients(
            &store,
            |g, s| {
                let z = g.param(s, "z")?;
                let v = GmmVars::bind(g, s, "gmm")?;
                if nll {
                    gmm_nll_var(g, z, &v)
                } else {
                    let y = quantize_soft_var(g, z, &v)?;
                    weighted_sum(g, y, wseed)
                }
            },
            &picks,
            &opts(OP_TOL, None, 0),
        )?;
        acc.add(&format!("q={q} case {case}"), &rep);
        acc.cases += 1;
    }
    Ok(acc.finish())
}

fn context_suite(seed: u64) -> Result<SuiteResult> {
    let mut acc = Acc::new("context_model", OP_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..MIN_CASES {
        let mut cfg = ContextModelConfig::new(3 + case % 3);
        cfg.hidden_channels = 3;
        cfg.residual_layers = case % 2;
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, "ctx", &mut rng)?;
        jitter(&mut store, "ctx", &mut rng);
        store.insert("input", Tensor::rand_uniform(&[1, 2, 3, 3], -0.5, 0.5, &mut rng));
        let wseed = rng.gen();
        let names: Vec<String> = store.names().cloned().collect();
        let picks = samples(&store, &names, 1, &mut rng);
        let rep = check_param_gradients(
            &store,
            |g, s| {
                let x = g.param(s, "input")?;
                let p = pmf_var(g, s, "ctx", &cfg, x)?;
                weighted_sum(g, p, wseed)
            },
            &picks,
            &opts(OP_TOL, None, 0),
        )?;
        acc.add(&format!("case {case}"), &rep);
        acc.cases += 1;
    }
    Ok(acc.finish())
}

fn ms_ssim_suite(seed: u64) -> Result<SuiteResult> {
    let mut acc = Acc::new("ms_ssim", OP_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..MIN_CASES {
        let side = if case % 4 == 3 { 32 } else { 16 };
        let a = synthetic_image(side, side, &mut rng);
        let noise = Tensor::rand_uniform(&[3, side, side], -0.15, 0.15, &mut rng);
        let b = a.zip_map(&noise, "noise", |x, n| (x + n).clamp(0.0, 1.0))?;
        let rep = finite_difference_check(
            |g, y| {
                let x = g.constant(a.clone());
                ms_ssim_var(g, x, y)
            },
            &b,
            &opts(OP_TOL, Some(3), rng.gen()),
        )?;
        acc.add(&format!("{side}x{side} case {case}"), &rep);
        acc.cases += 1;
    }
    Ok(acc.finish())
}

/// Adds noise to every parameter under `prefix`. Zero biases put masked-conv
/// outputs exactly on the ReLU kink, where central differences are one-sided.
fn jitter(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

/// Smallest model that still has every component of the objective.
pub fn tiny_config() -> Config {
    let mut c = Config::toy();
    c.model.codec.enc_channels = [4, 4, 4, 4];
    c.model.codec.dec_channels = [4, 4, 4, 4];
    c.model.ctx_hidden = 4;
    c.train.quantizer_mode = QuantizerMode::Soft;
    c
}

fn total_loss_suite(seed: u64) -> Result<SuiteResult> {
    let mut acc = Acc::new("total_loss", COMPOSITE_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    let fd = FdOptions {
        abs_floor: COMPOSITE_ABS_FLOOR,
        ..opts(COMPOSITE_TOL, None, 0)
    };
    for case in 0..MIN_CASES {
        let mut model = Model::init(cfg.model.clone(), &mut rng)?;
        for g in 0..model.num_groups() {
            jitter(&mut model.params, &ctx_prefix(g), &mut rng);
        }
        let img = synthetic_image(16, 16, &mut rng);
        let build = |g: &mut Graph, s: &ParamStore| -> Result<Var> { Ok(batch_loss_var(g, &model, s, std::slice::from_ref(&img), &cfg.train)?.0) };
        let mut g = Graph::new();
        let loss = build(&mut g, &model.params)?;
        let grads = g.backward(loss)?;
        let eval = |s: &ParamStore| -> Result<f64> {
            let mut g = Graph::new();
            let out = build(&mut g, s)?;
            Ok(g.value(out).item())
        };
        let central = |name: &str, i: usize, h: f64| -> Result<f64> {
            let mut s = model.params.clone();
            let base = s.get(name).unwrap().data()[i];
            s.get_mut(name).unwrap().data_mut()[i] = base + h;
            let fp = eval(&s)?;
            s.get_mut(name).unwrap().data_mut()[i] = base - h;
            Ok((fp - eval(&s)?) / (2.0 * h))
        };
        let names: Vec<String> = model.params.names().cloned().collect();
        let mut elements = Vec::new();
        let mut attempts = 0;
        while elements.len() < 2 && attempts < 20 {
            attempts += 1;
            let name = &names[rng.gen_range(0..names.len())];
            let i = rng.gen_range(0..model.params.get(name).unwrap().numel());
            let coarse = central(name, i, fd.eps)?;
            let fine = central(name, i, fd.eps / 2.0)?;
            if relative_error(coarse, fine, fd.abs_floor) > fd.tol / 2.0 {
                acc.skipped += 1;
                continue;
            }
            let analytic = grads.param(name).map_or(0.0, |t| t.data()[i]);
            elements.push(ElementCheck {
                index: elements.len(),
                analytic,
                numeric: fine,
                rel_error: relative_error(analytic, fine, fd.abs_floor),
            });
        }
        let rep = GradCheckReport::from_elements(elements, fd.tol);
        if rep.elements.is_empty() {
            acc.failures.push(format!("case {case}: no smooth sample in 20 draws"));
        }
        acc.add(&format!("case {case}"), &rep);
        acc.cases += 1;
    }
    Ok(acc.finish())
}

/// `x²` with the backward rule `x` instead of `2x`.
fn corrupted_square(g: &mut Graph, x: Var) -> Result<Var> {
    let value = g.value(x).map(|v| v * v);
    g.custom(
        "corrupted_square",
        &[x],
        value,
        Box::new(|grad, inputs, _| Ok(vec![grad.zip_map(inputs[0], "corrupted_square", |g, x| g * x)?])),
    )
}

fn corrupted_suite(seed: u64) -> Result<SuiteResult> {
    let mut acc = Acc::new(CORRUPTED, OP_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..MIN_CASES {
        let x = away_from(&[4], -1.0, 1.0, 0.0, 0.1, &mut rng);
        let rep = finite_difference_check(
            |g, x| {
                let y = corrupted_square(g, x)?;
                g.sum(y)
            },
            &x,
            &opts(OP_TOL, None, 0),
        )?;
        acc.add(&format!("case {case}"), &rep);
        acc.cases += 1;
    }
    Ok(acc.finish())
}

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteResult> {
    match name {
        "primitives" => primitives_suite(seed),
        "rcab" => rcab_suite(seed),
        "soft_quantizer" => gmm_suite(seed, false),
        "gmm_nll" => gmm_suite(seed, true),
        "context_model" => context_suite(seed),
        "ms_ssim" => ms_ssim_suite(seed),
        "total_loss" => total_loss_suite(seed),
        CORRUPTED => corrupted_suite(seed),
        other => Err(Error::InvalidArgument(format!(
            "unknown suite {other}; expected one of {}, {CORRUPTED}",
            SUITES.join(", ")
        ))),
    }
}

/// Runs one suite, or every suite in [`SUITES`] when `module` is `None`.
pub fn run(module: Option<&str>, seed: u64) -> Result<Vec<SuiteResult>> {
    match module {
        Some(m) => Ok(vec![run_suite(m, seed)?]),
        None => SUITES.iter().map(|s| run_suite(s, seed)).collect(),
    }
}

pub fn report_text(results: &[SuiteResult]) -> String {
    let mut s = String::new();
    for r in results {
        let _ = writeln!(
            s,
            "{:<18} {:>4} cases {:>5} checks {:>3} skipped  max rel err {:.3e}  tol {:.0e}  {}",
            r.name,
            r.cases,
            r.checks,
            r.skipped,
            r.max_rel_error,
            r.tol,
            if r.passed { "PASS" } else { "FAIL" }
        );
        for f in r.failures.iter().take(5) {
            let _ = writeln!(s, "    {f}");
        }
        if r.failures.len() > 5 {
            let _ = writeln!(s, "    ... {} more", r.failures.len() - 5);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_rejected() {
        assert!(run_suite("nope", 0).is_err());
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let r = run_suite(CORRUPTED, 1).unwrap();
        assert!(!r.passed);
        assert_eq!(r.failures.len(), r.cases);
    }

    #[test]
    fn primitives_pass_and_report_is_seeded() {
        let a = run_suite("primitives", 2).unwrap();
        assert!(a.passed, "{}", report_text(std::slice::from_ref(&a)));
        assert!(a.cases >= MIN_CASES);
        assert_eq!(report_text(&[a]), report_text(&[run_suite("primitives", 2).unwrap()]));
    }
}
