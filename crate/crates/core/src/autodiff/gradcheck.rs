//! Central finite-difference gradient checking in f64.

use serde::Serialize;

use super::{Tape, Value, Var};
use crate::error::{contract_err, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum allowed relative error `|a-n| / max(1e-8, |a|+|n|)`.
    pub tol: f64,
    /// Absolute difference below which an element passes regardless of its
    /// relative error (round-off floor for near-zero gradients).
    pub atol: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            atol: 1e-9,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    /// Largest relative error over elements with gradient magnitude of at
    /// least 1e-6, boundary cases excluded.
    pub max_rel_err: f64,
    pub failures: Vec<usize>,
    /// Elements on or within one step of a non-differentiable point;
    /// excluded from the failure count.
    pub boundary: Vec<usize>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.failures.is_empty())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failure_count(&self) -> usize {
        self.inputs.iter().map(|r| r.failures.len()).sum()
    }

    pub fn boundary_count(&self) -> usize {
        self.inputs.iter().map(|r| r.boundary.len()).sum()
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }
}

/// Gradients smaller than this are left out of the reported relative error;
/// their relative error is dominated by round-off.
const REPORT_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar function `f` with central
/// differences for every element of every input.
pub fn gradcheck<F>(f: F, inputs: &[Value], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let root = f(&tape, &vars)?;
    if tape.value(root).len() != 1 {
        return Err(contract_err!("gradcheck needs a scalar-valued function"));
    }
    let grads = tape.backward(root)?;

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if i == which {
                    let mut p = v.clone();
                    p.data_mut()[idx] += delta;
                    t.constant(p)
                } else {
                    t.constant(v.clone())
                }
            })
            .collect();
        let r = f(&t, &vs)?;
        let value = t.value(r).data()[0];
        Ok(value)
    };

    let mut rng = Rng::new(opts.seed, "gradcheck");
    let mut report = GradcheckReport::default();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        let mut indices: Vec<usize> = (0..input.len()).collect();
        if let Some(k) = opts.max_elements {
            if k < indices.len() {
                rng.shuffle(&mut indices);
                indices.truncate(k);
                indices.sort_unstable();
            }
        }
        let mut r = InputReport {
            input: i,
            checked: indices.len(),
            ..Default::default()
        };
        for &idx in &indices {
            let h = opts.h;
            let fp = eval(i, idx, h)?;
            let fm = eval(i, idx, -h)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[idx];
            let err = rel_err(a, numeric);
            if (a - numeric).abs() <= opts.atol || err <= opts.tol {
                if a.abs() + numeric.abs() >= REPORT_FLOOR {
                    r.max_rel_err = r.max_rel_err.max(err);
                }
                continue;
            }
            // a kink within `h` of the point spoils the wide difference but
            // not a narrower one
            let hs = h / 10.0;
            let narrow = (eval(i, idx, hs)? - eval(i, idx, -hs)?) / (2.0 * hs);
            let near_kink = (a - narrow).abs() <= opts.atol || rel_err(a, narrow) <= opts.tol;
            if near_kink || is_kink(&eval, i, idx, h, fp, fm)? {
                r.boundary.push(idx);
            } else {
                r.max_rel_err = r.max_rel_err.max(err);
                r.failures.push(idx);
            }
        }
        report.inputs.push(r);
    }
    Ok(report)
}

/// A kink shows up as a gap between the one-sided slopes that does not
/// shrink with the step; on smooth functions the gap scales with `h`.
fn is_kink(
    eval: &dyn Fn(usize, usize, f64) -> Result<f64>,
    which: usize,
    idx: usize,
    h: f64,
    fp: f64,
    fm: f64,
) -> Result<bool> {
    let f0 = eval(which, idx, 0.0)?;
    let gap = |fp: f64, fm: f64, h: f64| ((fp - f0) - (f0 - fm)) / h;
    let big = gap(fp, fm, h);
    let hs = h / 10.0;
    let small = gap(eval(which, idx, hs)?, eval(which, idx, -hs)?, hs);
    Ok(big.abs() > 1e-6 && small.abs() > 0.5 * big.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Value::new(vec![2], vec![1.0, 2.0]).unwrap();
        let report = gradcheck(
            |t, v| Ok(t.sum(t.square(v[0]))),
            &[x],
            &GradcheckOptions {
                tol: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_err() < 1e-6);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Value::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        // custom op with a deliberately wrong backward (factor 3 instead of 2)
        let report = gradcheck(
            |t, v| {
                let xv = t.value(v[0]);
                let y = xv.map(|a| a * a).unwrap();
                let src = xv.clone();
                let sq = t.custom(&[v[0]], y, move |g, _| {
                    let d = src.data().iter().zip(g.data()).map(|(a, g)| 3.0 * a * g).collect();
                    vec![Some(Value::from_parts(src.dims().to_vec(), d))]
                });
                Ok(t.sum(sq))
            },
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failure_count(), 3);
    }

    #[test]
    fn clamp_boundary_is_flagged_not_failed() {
        let x = Value::new(vec![3], vec![-1.0, 0.25, 0.5]).unwrap();
        let report = gradcheck(
            |t, v| Ok(t.sum(t.clamp(v[0], -1.0, 1.0))),
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.boundary_count(), 1);
        assert_eq!(report.inputs[0].boundary, vec![0]);
    }

    #[test]
    fn subsampling_limits_work() {
        let x = Value::from_fn(&[50], |i| i as f64 * 0.01).unwrap();
        let report = gradcheck(
            |t, v| Ok(t.sum(t.tanh(v[0]))),
            &[x],
            &GradcheckOptions {
                max_elements: Some(7),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.checked(), 7);
        assert!(report.passed());
    }
}
