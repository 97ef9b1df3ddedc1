//! Finite-difference checks of every differentiable operation, grouped into
//! suites that the command line can run one at a time.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::autodiff::{gradcheck, GradcheckOptions, Tape, Value, Var};
use crate::dpm::{bilinear_sample, build_sampling_grid, monotone_reparam, project_column, PoolMode};
use crate::error::{contract_err, Error, Result};
use crate::objective::{cmm_apply, combined_loss, feature_loss, l1_loss, FeatureExtractor, FeatureSpec};
use crate::predictors::{ConvNet, CurveMapping, NetConfig};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    All,
    Dpm,
    Cmm,
    Conv,
    Predictor,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "dpm" => Self::Dpm,
            "cmm" => Self::Cmm,
            "conv" => Self::Conv,
            "predictor" => Self::Predictor,
            other => return Err(contract_err!("unknown gradcheck suite {other:?}")),
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::Dpm => "dpm",
            Self::Cmm => "cmm",
            Self::Conv => "conv",
            Self::Predictor => "predictor",
        })
    }
}

/// Outcome for one operation over all seeds.
#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub suite: Suite,
    pub op: &'static str,
    pub seeds: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Elements skipped because they sit on a non-differentiable point.
    pub boundary: usize,
    pub failures: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

type CaseFn = fn(&Tape, &[Var], &Value) -> Result<Var>;

/// An operation under test: input shapes and ranges, and the function that
/// maps inputs to an array output (contracted with random weights).
struct Case {
    suite: Suite,
    op: &'static str,
    inputs: fn(&mut Rng) -> Vec<Value>,
    f: CaseFn,
    /// Elements checked per input per seed (`None` for all).
    sample: Option<usize>,
}

fn rand_value(rng: &mut Rng, dims: &[usize], lo: f64, hi: f64) -> Value {
    let n = dims.iter().product();
    Value::from_parts(dims.to_vec(), (0..n).map(|_| rng.range(lo, hi)).collect())
}

/// `sum(y * w)` with fixed weights `w`, so every output element matters.
fn contract(tape: &Tape, y: Var, weights: &Value) -> Result<Var> {
    let n = tape.value(y).len();
    let w = Value::from_parts(tape.dims(y), weights.data()[..n].to_vec());
    let w = tape.constant(w);
    Ok(tape.sum(tape.mul(y, w)?))
}

fn unary(f: fn(&Tape, Var) -> Var) -> impl Fn(&Tape, &[Var], &Value) -> Result<Var> {
    move |t, v, w| contract(t, f(t, v[0]), w)
}

macro_rules! unary_case {
    ($op:literal, $lo:expr, $hi:expr, $f:expr) => {
        Case {
            suite: Suite::Conv,
            op: $op,
            inputs: |r| vec![rand_value(r, &[3, 5], $lo, $hi)],
            f: |t, v, w| unary($f)(t, v, w),
            sample: None,
        }
    };
}

fn toy_net(mapping: Option<CurveMapping>) -> NetConfig {
    let mut cfg = match mapping {
        Some(m) => NetConfig::curves(16, 16, m),
        None => NetConfig::direct(16, 16),
    };
    cfg.channels = vec![2, 3];
    cfg
}

/// Network weights in a fixed order, used to rebuild a `ParamSet` from the
/// checked inputs.
fn net_inputs(cfg: NetConfig, rng: &mut Rng) -> Vec<Value> {
    let seed = rng.next_u64();
    let net = ConvNet::new(cfg, seed).expect("toy config is valid");
    let mut v: Vec<Value> = net.params().iter().map(|(_, p)| p.clone()).collect();
    v.push(rand_value(rng, &[16, 16], 0.0, 1.0));
    v
}

fn net_loss(tape: &Tape, vars: &[Var], weights: &Value, cfg: NetConfig) -> Result<Var> {
    let template = ConvNet::zeroed(cfg)?;
    let names: Vec<String> = template.params().names().map(str::to_string).collect();
    let bound = crate::predictors::Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
    let img = vars[names.len()];
    let fx = FeatureExtractor::new(FeatureSpec {
        scales: 1,
        channels: 2,
        ..Default::default()
    })?;
    let targets = |off: usize| Value::from_parts(vec![1, 16], weights.data()[off..off + 16].iter().map(|v| v.abs()).collect());
    let (p2, p3) = match template.config().head {
        crate::predictors::Head::Curves { .. } => {
            let curves = template.predict_curves(tape, &bound, img)?;
            let band = |a: usize, b: usize| -> Result<Var> {
                let up = tape.select(curves, a)?;
                let lo = tape.select(curves, b)?;
                let row = project_column(tape, img, up, lo, 8, PoolMode::Mean)?;
                tape.reshape(row, &[1, 16])
            };
            (band(0, 1)?, band(1, 2)?)
        }
        crate::predictors::Head::Direct => (
            template.predict_pm_direct(tape, &bound, img, crate::dpm::Band::B2)?,
            template.predict_pm_direct(tape, &bound, img, crate::dpm::Band::B3)?,
        ),
    };
    let lo = tape.constant(Value::from_parts(vec![1], vec![0.1]));
    let hi = tape.constant(Value::from_parts(vec![1], vec![0.9]));
    let p2 = cmm_apply(tape, p2, lo, hi)?;
    let p3 = cmm_apply(tape, p3, lo, hi)?;
    combined_loss(tape, p2, &targets(0), p3, &targets(16), 0.2, &fx)
}

fn cases() -> Vec<Case> {
    vec![
        unary_case!("neg", -2.0, 2.0, |t, x| t.neg(x)),
        unary_case!("scale", -2.0, 2.0, |t, x| t.scale(x, -1.7)),
        unary_case!("add_scalar", -2.0, 2.0, |t, x| t.add_scalar(x, 0.3)),
        unary_case!("abs", -2.0, 2.0, |t, x| t.abs(x)),
        unary_case!("tanh", -2.0, 2.0, |t, x| t.tanh(x)),
        unary_case!("relu", -2.0, 2.0, |t, x| t.relu(x)),
        unary_case!("sigmoid", -4.0, 4.0, |t, x| t.sigmoid(x)),
        unary_case!("softplus", -4.0, 4.0, |t, x| t.softplus(x)),
        unary_case!("square", -2.0, 2.0, |t, x| t.square(x)),
        unary_case!("clamp", -2.0, 2.0, |t, x| t.clamp(x, -0.5, 0.7)),
        unary_case!("floor_at", -1.0, 1.0, |t, x| t.floor_at(x, 0.1)),
        unary_case!("mean", -2.0, 2.0, |t, x| t.mean(x)),
        Case {
            suite: Suite::Conv,
            op: "add_sub_mul_div",
            inputs: |r| vec![rand_value(r, &[3, 5], -2.0, 2.0), rand_value(r, &[3, 5], 0.5, 2.0)],
            f: |t, v, w| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(v[0], v[1])?;
                let p = t.mul(s, d)?;
                let q = t.div(p, v[1])?;
                contract(t, q, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Conv,
            op: "broadcast_scalar",
            inputs: |r| vec![rand_value(r, &[3, 5], -2.0, 2.0), rand_value(r, &[1], 0.5, 2.0)],
            f: |t, v, w| {
                let a = t.sub(v[0], v[1])?;
                let b = t.div(a, v[1])?;
                contract(t, b, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Conv,
            op: "reshape_select_stack",
            inputs: |r| vec![rand_value(r, &[2, 3, 4], -2.0, 2.0)],
            f: |t, v, w| {
                let x = t.reshape(v[0], &[6, 4])?;
                let rows = [t.select(x, 5)?, t.select(x, 0)?, t.select(x, 2)?];
                let s = t.stack(&rows)?;
                let s = t.square(s);
                contract(t, s, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Conv,
            op: "conv2d",
            inputs: |r| vec![rand_value(r, &[1, 4, 5], -1.0, 1.0), rand_value(r, &[2, 1, 3, 3], -1.0, 1.0)],
            f: |t, v, w| {
                let y = t.conv2d(v[0], v[1], (1, 1), (1, 1))?;
                contract(t, y, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Conv,
            op: "conv2d_strided",
            inputs: |r| vec![rand_value(r, &[2, 6, 5], -1.0, 1.0), rand_value(r, &[3, 2, 2, 3], -1.0, 1.0)],
            f: |t, v, w| {
                let y = t.conv2d(v[0], v[1], (2, 1), (0, 1))?;
                contract(t, y, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Conv,
            op: "add_channel_bias",
            inputs: |r| vec![rand_value(r, &[2, 3, 4], -1.0, 1.0), rand_value(r, &[2], -1.0, 1.0)],
            f: |t, v, w| {
                let y = t.add_channel_bias(v[0], v[1])?;
                contract(t, t.square(y), w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Conv,
            op: "upsample_linear_1d",
            inputs: |r| vec![rand_value(r, &[3, 5], -1.0, 1.0)],
            f: |t, v, w| {
                let y = t.upsample_linear_1d(v[0], 2)?;
                contract(t, y, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Conv,
            op: "area_downsample",
            inputs: |r| vec![rand_value(r, &[2, 6, 4], -1.0, 1.0)],
            f: |t, v, w| {
                let y = t.area_downsample(v[0], 2, 2)?;
                contract(t, t.square(y), w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Conv,
            op: "pad_edge",
            inputs: |r| vec![rand_value(r, &[1, 3, 4], -1.0, 1.0)],
            f: |t, v, w| {
                let y = t.pad_edge(v[0], 1, 2)?;
                contract(t, y, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Conv,
            op: "pool_mean_axis",
            inputs: |r| vec![rand_value(r, &[4, 5], -1.0, 1.0)],
            f: |t, v, w| {
                let y = t.pool_mean_axis(v[0], 0)?;
                contract(t, t.square(y), w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Conv,
            op: "pool_max_axis",
            inputs: |r| vec![rand_value(r, &[4, 5], -1.0, 1.0)],
            f: |t, v, w| {
                let y = t.pool_max_axis(v[0], 0)?;
                contract(t, y, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Dpm,
            op: "sampling_grid",
            inputs: |r| vec![rand_value(r, &[5], -0.9, 0.0), rand_value(r, &[5], 0.0, 0.9)],
            f: |t, v, w| {
                let g = build_sampling_grid(t, v[0], v[1], 4)?;
                contract(t, g, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Dpm,
            op: "bilinear_sample",
            inputs: |r| vec![rand_value(r, &[6, 5], 0.0, 1.0), rand_value(r, &[4, 5, 2], -0.95, 0.95)],
            f: |t, v, w| {
                let y = bilinear_sample(t, v[0], v[1])?;
                contract(t, y, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Dpm,
            op: "project_column_mean",
            inputs: |r| {
                vec![
                    rand_value(r, &[8, 6], 0.0, 1.0),
                    rand_value(r, &[6], -0.8, -0.1),
                    rand_value(r, &[6], 0.1, 0.8),
                ]
            },
            f: |t, v, w| {
                let y = project_column(t, v[0], v[1], v[2], 5, PoolMode::Mean)?;
                contract(t, y, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Dpm,
            op: "project_column_max",
            inputs: |r| {
                vec![
                    rand_value(r, &[8, 6], 0.0, 1.0),
                    rand_value(r, &[6], -0.8, -0.1),
                    rand_value(r, &[6], 0.1, 0.8),
                ]
            },
            f: |t, v, w| {
                let y = project_column(t, v[0], v[1], v[2], 5, PoolMode::Max)?;
                contract(t, y, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Dpm,
            op: "monotone_reparam",
            inputs: |r| vec![rand_value(r, &[3, 5], -2.0, 2.0)],
            f: |t, v, w| {
                let y = monotone_reparam(t, v[0], 0.25)?;
                contract(t, y, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Dpm,
            op: "reparam_project",
            inputs: |r| vec![rand_value(r, &[8, 6], 0.0, 1.0), rand_value(r, &[3, 6], -1.0, 1.0)],
            f: |t, v, w| {
                let c = monotone_reparam(t, v[1], 0.25)?;
                let up = t.select(c, 0)?;
                let lo = t.select(c, 2)?;
                let y = project_column(t, v[0], up, lo, 6, PoolMode::Mean)?;
                contract(t, y, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Cmm,
            op: "cmm_apply",
            inputs: |r| {
                vec![
                    rand_value(r, &[3, 5], 0.0, 1.0),
                    rand_value(r, &[1], -0.2, 0.2),
                    rand_value(r, &[1], 0.8, 1.2),
                ]
            },
            f: |t, v, w| {
                let y = cmm_apply(t, v[0], v[1], v[2])?;
                contract(t, y, w)
            },
            sample: None,
        },
        Case {
            suite: Suite::Cmm,
            op: "l1_loss",
            inputs: |r| vec![rand_value(r, &[3, 5], 0.0, 1.0)],
            f: |t, v, w| {
                let target = Value::from_parts(vec![3, 5], w.data()[..15].to_vec());
                l1_loss(t, v[0], &target)
            },
            sample: None,
        },
        Case {
            suite: Suite::Cmm,
            op: "feature_loss",
            inputs: |r| vec![rand_value(r, &[4, 6], 0.0, 1.0)],
            f: |t, v, w| {
                let fx = FeatureExtractor::new(FeatureSpec::default())?;
                let target = Value::from_parts(vec![4, 6], w.data()[..24].to_vec());
                feature_loss(t, v[0], &target, &fx)
            },
            sample: None,
        },
        Case {
            suite: Suite::Cmm,
            op: "combined_loss",
            inputs: |r| {
                vec![
                    rand_value(r, &[2, 6], 0.0, 1.0),
                    rand_value(r, &[2, 6], 0.0, 1.0),
                    rand_value(r, &[1], -0.2, 0.2),
                    rand_value(r, &[1], 0.8, 1.2),
                ]
            },
            f: |t, v, w| {
                let fx = FeatureExtractor::new(FeatureSpec::default())?;
                let g2 = Value::from_parts(vec![2, 6], w.data()[..12].to_vec());
                let g3 = Value::from_parts(vec![2, 6], w.data()[12..24].to_vec());
                let p2 = cmm_apply(t, v[0], v[2], v[3])?;
                let p3 = cmm_apply(t, v[1], v[2], v[3])?;
                combined_loss(t, p2, &g2, p3, &g3, 0.2, &fx)
            },
            sample: None,
        },
        Case {
            suite: Suite::Predictor,
            op: "cnn_dpm_loss_tanh",
            inputs: |r| net_inputs(toy_net(Some(CurveMapping::Tanh)), r),
            f: |t, v, w| net_loss(t, v, w, toy_net(Some(CurveMapping::Tanh))),
            sample: Some(4),
        },
        Case {
            suite: Suite::Predictor,
            op: "cnn_dpm_loss_monotone",
            inputs: |r| net_inputs(toy_net(Some(CurveMapping::Monotone)), r),
            f: |t, v, w| net_loss(t, v, w, toy_net(Some(CurveMapping::Monotone))),
            sample: Some(4),
        },
        Case {
            suite: Suite::Predictor,
            op: "cnn_only_loss",
            inputs: |r| net_inputs(toy_net(None), r),
            f: |t, v, w| net_loss(t, v, w, toy_net(None)),
            sample: Some(4),
        },
    ]
}

/// Names of the operations a suite covers.
pub fn operations(which: Suite) -> Vec<&'static str> {
    cases()
        .into_iter()
        .filter(|c| which == Suite::All || c.suite == which)
        .map(|c| c.op)
        .collect()
}

/// Runs every case of `which` for seeds `first_seed .. first_seed + seeds`.
pub fn run(which: Suite, first_seed: u64, seeds: usize) -> Result<Vec<CaseResult>> {
    if seeds == 0 {
        return Err(contract_err!("need at least one seed"));
    }
    let mut out = Vec::new();
    for case in cases().into_iter().filter(|c| which == Suite::All || c.suite == which) {
        let mut res = CaseResult {
            suite: case.suite,
            op: case.op,
            seeds,
            checked: 0,
            max_rel_err: 0.0,
            boundary: 0,
            failures: 0,
        };
        for seed in first_seed..first_seed + seeds as u64 {
            let mut rng = Rng::new(seed, case.op);
            let inputs = (case.inputs)(&mut rng);
            let weights = rand_value(&mut rng, &[64], -1.0, 1.0);
            let opts = GradcheckOptions {
                max_elements: case.sample,
                seed,
                ..Default::default()
            };
            let f = case.f;
            let report = gradcheck(|t, v| f(t, v, &weights), &inputs, &opts)?;
            res.checked += report.checked();
            res.max_rel_err = res.max_rel_err.max(report.max_rel_err());
            res.boundary += report.boundary_count();
            res.failures += report.failure_count();
        }
        out.push(res);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_partition_all() {
        let all = operations(Suite::All).len();
        let parts: usize = [Suite::Dpm, Suite::Cmm, Suite::Conv, Suite::Predictor]
            .iter()
            .map(|&s| operations(s).len())
            .sum();
        assert_eq!(all, parts);
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn cmm_suite_passes_one_seed() {
        let res = run(Suite::Cmm, 0, 1).unwrap();
        assert!(res.iter().all(CaseResult::passed), "{res:?}");
    }
}
