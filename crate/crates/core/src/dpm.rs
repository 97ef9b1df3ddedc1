//! Differentiable projection between layer curves.
//!
//! For one B-scan and two boundary curves, `M` points are placed uniformly
//! (endpoints included) between the curves in every column, giving an
//! `M x W x 2` grid of normalized `(x, y)` positions. The B-scan is
//! bilinearly resampled at the grid and pooled over the vertical axis, which
//! yields one line of the projection map.
//!
//! Coordinates are endpoint aligned: `-1` is the center of the first
//! row/column and `+1` the center of the last. Samples outside the image are
//! clamped to the border.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, Tape, Value, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default number of samples between two curves.
pub const DEFAULT_SAMPLES: usize = 64;
/// Default spacing scale for [`monotone_reparam`].
pub const DEFAULT_GAP_SCALE: f64 = 0.25;
/// Span below which min-max normalization returns all zeros.
pub const NORM_EPS: f64 = 1e-6;
/// Width of the soft cap that keeps reparameterized curves below +1.
const CAP_WIDTH: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Mean,
    Max,
}

impl FromStr for PoolMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(contract_err!("unknown pooling mode {other:?}")),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
        })
    }
}

/// The two projection bands: B2 spans ILM..OPL, B3 spans OPL..BM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    B2,
    B3,
}

impl Band {
    pub const ALL: [Band; 2] = [Band::B2, Band::B3];

    /// (upper, lower) layer indices into a `[K, W]` curve tensor.
    pub fn layers(self) -> (usize, usize) {
        match self {
            Band::B2 => (0, 1),
            Band::B3 => (1, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::B2 => "b2",
            Band::B3 => "b3",
        }
    }
}

impl FromStr for Band {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "b2" => Ok(Self::B2),
            "b3" => Ok(Self::B3),
            other => Err(contract_err!("unknown band {other:?}")),
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `[K, W]` normalized boundary positions for one B-scan.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCurves(Tensor);

impl LayerCurves {
    pub fn new(coords: Tensor) -> Result<Self> {
        if coords.ndim() != 2 {
            return Err(shape_err!("layer curves must be [K, W], got {:?}", coords.dims()));
        }
        if let Some(v) = coords.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(contract_err!("curve coordinate {v} outside [-1, 1]"));
        }
        Ok(Self(coords))
    }

    pub fn layers(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn is_ordered(&self) -> bool {
        crossing_fraction(&self.0).map(|f| f == 0.0).unwrap_or(false)
    }
}

/// `[D, W]` en-face projection map, one row per B-scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMap(pub Tensor);

impl ProjectionMap {
    /// Min-max normalization over the whole map; a constant map becomes zeros.
    pub fn normalized(&self) -> ProjectionMap {
        ProjectionMap(self.0.min_max_normalized(NORM_EPS))
    }
}

/// Projection maps of both bands.
#[derive(Clone, Debug, PartialEq)]
pub struct BandPair {
    pub b2: Tensor,
    pub b3: Tensor,
}

impl BandPair {
    pub fn get(&self, band: Band) -> &Tensor {
        match band {
            Band::B2 => &self.b2,
            Band::B3 => &self.b3,
        }
    }

    /// Each map min-max normalized on its own.
    pub fn normalized(&self) -> Self {
        Self {
            b2: self.b2.min_max_normalized(NORM_EPS),
            b3: self.b3.min_max_normalized(NORM_EPS),
        }
    }
}

/// Fraction of columns in which some boundary lies strictly below the next
/// one. Accepts `[K, W]` or `[D, K, W]`.
pub fn crossing_fraction<T: Scalar>(curves: &Tensor<T>) -> Result<f64> {
    let (d, k, w) = match *curves.dims() {
        [k, w] => (1, k, w),
        [d, k, w] => (d, k, w),
        _ => return Err(shape_err!("curves must be [K,W] or [D,K,W], got {:?}", curves.dims())),
    };
    let c = curves.data();
    let mut crossed = 0usize;
    for s in 0..d {
        for col in 0..w {
            let at = |layer: usize| c[(s * k + layer) * w + col].to_f64();
            if (1..k).any(|layer| at(layer - 1) > at(layer)) {
                crossed += 1;
            }
        }
    }
    Ok(crossed as f64 / (d * w) as f64)
}

/// Normalized abscissa of column `w` in an image `width` columns wide.
pub fn column_abscissa(w: usize, width: usize) -> f64 {
    if width == 1 {
        0.0
    } else {
        -1.0 + 2.0 * w as f64 / (width - 1) as f64
    }
}

/// Normalized coordinate to continuous pixel position on an axis of `n` samples.
pub fn to_pixel(c: f64, n: usize) -> f64 {
    (c + 1.0) * 0.5 * (n as f64 - 1.0)
}

/// Pixel position to normalized coordinate.
pub fn to_normalized(p: f64, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        2.0 * p / (n as f64 - 1.0) - 1.0
    }
}

/// Spatial position matrix `[M, W, 2]` between two `[W]` curves.
///
/// Row `j` sits at `upper + t_j (lower - upper)` with `t_j = j / (M - 1)`,
/// so rows 0 and `M - 1` reproduce the curves exactly.
pub fn build_sampling_grid(tape: &Tape, upper: Var, lower: Var, m: usize) -> Result<Var> {
    if m < 2 {
        return Err(contract_err!("need at least 2 samples between curves, got {m}"));
    }
    let uv = tape.value(upper);
    let lv = tape.value(lower);
    if uv.ndim() != 1 || uv.dims() != lv.dims() {
        return Err(shape_err!(
            "curves must be equal-length [W], got {:?} and {:?}",
            uv.dims(),
            lv.dims()
        ));
    }
    let w = uv.len();
    let ts: Vec<f64> = (0..m).map(|j| j as f64 / (m - 1) as f64).collect();
    let mut g = Vec::with_capacity(m * w * 2);
    for &t in &ts {
        for col in 0..w {
            let (a, b) = (uv.data()[col], lv.data()[col]);
            let y = if t == 1.0 { b } else { a + t * (b - a) };
            g.push(column_abscissa(col, w));
            g.push(y);
        }
    }
    let value = Value::from_parts(vec![m, w, 2], g);
    Ok(tape.custom(&[upper, lower], value, move |grad, needs| {
        let mut gu = vec![0.0; w];
        let mut gl = vec![0.0; w];
        for (j, &t) in ts.iter().enumerate() {
            for col in 0..w {
                let gy = grad.data()[(j * w + col) * 2 + 1];
                gu[col] += (1.0 - t) * gy;
                gl[col] += t * gy;
            }
        }
        vec![
            needs[0].then(|| Value::from_parts(vec![w], gu)),
            needs[1].then(|| Value::from_parts(vec![w], gl)),
        ]
    }))
}

/// Interpolation stencil along one axis: (low index, high index, high weight,
/// d(position)/d(normalized coordinate)).
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
    dpos: f64,
}

fn axis_tap(c: f64, n: usize) -> Tap {
    if n == 1 {
        return Tap {
            i0: 0,
            i1: 0,
            frac: 0.0,
            dpos: 0.0,
        };
    }
    let max = (n - 1) as f64;
    let raw = to_pixel(c, n);
    let scale = 0.5 * max;
    let (mut p, inside) = if raw < 0.0 {
        (0.0, false)
    } else if raw > max {
        (max, false)
    } else {
        (raw, true)
    };
    let r = p.round();
    if (p - r).abs() < 1e-9 {
        p = r;
    }
    let i0 = (p.floor() as usize).min(n - 2);
    Tap {
        i0,
        i1: i0 + 1,
        frac: p - i0 as f64,
        dpos: if inside { scale } else { 0.0 },
    }
}

/// Bilinear resampling of an `[H, W]` image at an `[M, W', 2]` grid of
/// normalized `(x, y)` positions, giving `[M, W']`.
pub fn bilinear_sample(tape: &Tape, img: Var, grid: Var) -> Result<Var> {
    let iv = tape.value(img);
    let gv = tape.value(grid);
    if iv.ndim() != 2 {
        return Err(shape_err!("image must be [H, W], got {:?}", iv.dims()));
    }
    if gv.ndim() != 3 || gv.dims()[2] != 2 {
        return Err(shape_err!("grid must be [M, W, 2], got {:?}", gv.dims()));
    }
    let (h, w) = (iv.dims()[0], iv.dims()[1]);
    let (m, gw) = (gv.dims()[0], gv.dims()[1]);
    let taps: Vec<(Tap, Tap)> = gv
        .data()
        .chunks_exact(2)
        .map(|xy| (axis_tap(xy[0], w), axis_tap(xy[1], h)))
        .collect();
    let px = |y: usize, x: usize| iv.data()[y * w + x];
    let out: Vec<f64> = taps
        .iter()
        .map(|&(tx, ty)| {
            let top = (1.0 - tx.frac) * px(ty.i0, tx.i0) + tx.frac * px(ty.i0, tx.i1);
            let bot = (1.0 - tx.frac) * px(ty.i1, tx.i0) + tx.frac * px(ty.i1, tx.i1);
            (1.0 - ty.frac) * top + ty.frac * bot
        })
        .collect();
    let value = Value::from_parts(vec![m, gw], out);
    let gdims = gv.dims().to_vec();
    Ok(tape.custom(&[img, grid], value, move |g, needs| {
        let px = |y: usize, x: usize| iv.data()[y * w + x];
        let gimg = needs[0].then(|| {
            let mut gi = vec![0.0; h * w];
            for (&(tx, ty), &go) in taps.iter().zip(g.data()) {
                gi[ty.i0 * w + tx.i0] += go * (1.0 - ty.frac) * (1.0 - tx.frac);
                gi[ty.i0 * w + tx.i1] += go * (1.0 - ty.frac) * tx.frac;
                gi[ty.i1 * w + tx.i0] += go * ty.frac * (1.0 - tx.frac);
                gi[ty.i1 * w + tx.i1] += go * ty.frac * tx.frac;
            }
            Value::from_parts(vec![h, w], gi)
        });
        let ggrid = needs[1].then(|| {
            let mut gg = Vec::with_capacity(taps.len() * 2);
            for (&(tx, ty), &go) in taps.iter().zip(g.data()) {
                let (a, b) = (px(ty.i0, tx.i0), px(ty.i0, tx.i1));
                let (c, d) = (px(ty.i1, tx.i0), px(ty.i1, tx.i1));
                let dx = (1.0 - ty.frac) * (b - a) + ty.frac * (d - c);
                let dy = (1.0 - tx.frac) * (c - a) + tx.frac * (d - b);
                gg.push(go * dx * tx.dpos);
                gg.push(go * dy * ty.dpos);
            }
            Value::from_parts(gdims.clone(), gg)
        });
        vec![gimg, ggrid]
    }))
}

/// One projection-map line: pool the resampled band between `upper` and
/// `lower` over the vertical axis.
pub fn project_column(
    tape: &Tape,
    slice: Var,
    upper: Var,
    lower: Var,
    m: usize,
    mode: PoolMode,
) -> Result<Var> {
    let grid = build_sampling_grid(tape, upper, lower, m)?;
    let sampled = bilinear_sample(tape, slice, grid)?;
    match mode {
        PoolMode::Mean => tape.pool_mean_axis(sampled, 0),
        PoolMode::Max => tape.pool_max_axis(sampled, 0),
    }
}

/// Projects a `[D, H, W]` volume with per-slice `[D, K, W]` curves, returning
/// the un-normalized `[D, W]` map for the band between layers `band.0` and
/// `band.1`.
pub fn project_volume<T: Scalar, U: Scalar>(
    vol: &Tensor<T>,
    curves: &Tensor<U>,
    band: (usize, usize),
    m: usize,
    mode: PoolMode,
) -> Result<ProjectionMap> {
    let [d, h, w] = *vol.dims() else {
        return Err(shape_err!("volume must be [D, H, W], got {:?}", vol.dims()));
    };
    let [cd, k, cw] = *curves.dims() else {
        return Err(shape_err!("curves must be [D, K, W], got {:?}", curves.dims()));
    };
    if cd != d || cw != w {
        return Err(shape_err!(
            "curves {:?} do not match volume {:?}",
            curves.dims(),
            vol.dims()
        ));
    }
    let (ku, kl) = band;
    if !(ku < kl && kl < k) {
        return Err(contract_err!("band {band:?} invalid for {k} layers"));
    }
    let rows: Vec<Vec<f32>> = (0..d)
        .into_par_iter()
        .map(|s| -> Result<Vec<f32>> {
            let tape = Tape::new();
            let plane = Value::from_parts(
                vec![h, w],
                vol.data()[s * h * w..(s + 1) * h * w].iter().map(|v| v.to_f64()).collect(),
            );
            let row = |layer: usize| {
                Value::from_parts(
                    vec![w],
                    curves.data()[(s * k + layer) * w..(s * k + layer + 1) * w]
                        .iter()
                        .map(|v| v.to_f64())
                        .collect(),
                )
            };
            let img = tape.constant(plane);
            let up = tape.constant(row(ku));
            let lo = tape.constant(row(kl));
            let col = project_column(&tape, img, up, lo, m, mode)?;
            let out = tape.value(col).data().iter().map(|&v| v as f32).collect();
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(ProjectionMap(Tensor::new(vec![d, w], rows.concat())?))
}

/// Reference projection over whole pixel rows: mean or max of
/// `slice[r][w]` for `r` in `upper_px[w]..=lower_px[w]`.
pub fn oracle_project<T: Scalar>(
    slice: &Tensor<T>,
    upper_px: &[usize],
    lower_px: &[usize],
    mode: PoolMode,
) -> Result<Tensor<f64>> {
    let [h, w] = *slice.dims() else {
        return Err(shape_err!("slice must be [H, W], got {:?}", slice.dims()));
    };
    if upper_px.len() != w || lower_px.len() != w {
        return Err(shape_err!("row indices must have {w} entries"));
    }
    let mut out = Vec::with_capacity(w);
    for col in 0..w {
        let (a, b) = (upper_px[col], lower_px[col]);
        if a > b || b >= h {
            return Err(contract_err!("rows {a}..={b} invalid for column {col} of height {h}"));
        }
        let vals = (a..=b).map(|r| slice.data()[r * w + col].to_f64());
        out.push(match mode {
            PoolMode::Mean => vals.sum::<f64>() / (b - a + 1) as f64,
            PoolMode::Max => vals.fold(f64::NEG_INFINITY, f64::max),
        });
    }
    Tensor::new(vec![w], out)
}

fn soft_cap(x: f64) -> (f64, f64) {
    let knee = 1.0 - CAP_WIDTH;
    if x <= knee {
        (x, 1.0)
    } else {
        let e = (-(x - knee) / CAP_WIDTH).exp();
        (1.0 - CAP_WIDTH * e, e)
    }
}

/// Maps unconstrained `[K, W]` values to ordered curves in `[-1, 1]`.
///
/// Layer 0 is `tanh(raw_0)`; each following layer adds a non-negative gap
/// `gap_scale * softplus(raw_k)`. The running sums pass through a C1 soft cap
/// that is the identity below `1 - 0.05` and saturates at 1, which keeps
/// the layers non-decreasing in `k`.
pub fn monotone_reparam(tape: &Tape, raw: Var, gap_scale: f64) -> Result<Var> {
    let rv = tape.value(raw);
    let [k, w] = *rv.dims() else {
        return Err(shape_err!("raw curves must be [K, W], got {:?}", rv.dims()));
    };
    let r = |layer: usize, col: usize| rv.data()[layer * w + col];
    let mut out = vec![0.0; k * w];
    let mut slope = vec![0.0; k * w];
    for col in 0..w {
        let mut u = r(0, col).tanh();
        for layer in 0..k {
            if layer > 0 {
                u += gap_scale * softplus(r(layer, col));
            }
            let (c, dc) = soft_cap(u);
            out[layer * w + col] = c;
            slope[layer * w + col] = dc;
        }
    }
    let value = Value::from_parts(vec![k, w], out);
    let rv2 = Rc::clone(&rv);
    Ok(tape.custom(&[raw], value, move |g, _| {
        let mut gr = vec![0.0; k * w];
        for col in 0..w {
            let mut suffix = 0.0;
            for layer in (0..k).rev() {
                suffix += g.data()[layer * w + col] * slope[layer * w + col];
                let x = rv2.data()[layer * w + col];
                gr[layer * w + col] = if layer == 0 {
                    let t = x.tanh();
                    suffix * (1.0 - t * t)
                } else {
                    suffix * gap_scale * sigmoid(x)
                };
            }
        }
        vec![Some(Value::from_parts(vec![k, w], gr))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v1(data: &[f64]) -> Value {
        Value::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn grid_endpoints_and_uniform_spacing() {
        let tape = Tape::new();
        let up = tape.constant(v1(&[-1.0]));
        let lo = tape.constant(v1(&[1.0]));
        let g = build_sampling_grid(&tape, up, lo, 3).unwrap();
        let gv = tape.value(g);
        assert_eq!(gv.dims(), &[3, 1, 2]);
        let ys: Vec<f64> = gv.data().chunks(2).map(|p| p[1]).collect();
        assert_eq!(ys, vec![-1.0, 0.0, 1.0]);
        assert!(gv.data().chunks(2).all(|p| p[0] == 0.0));

        let tape = Tape::new();
        let up = tape.constant(v1(&[0.2]));
        let lo = tape.constant(v1(&[0.6]));
        let g = build_sampling_grid(&tape, up, lo, 5).unwrap();
        let ys: Vec<f64> = tape.value(g).data().chunks(2).map(|p| p[1]).collect();
        for (y, e) in ys.iter().zip([0.2, 0.3, 0.4, 0.5, 0.6]) {
            assert!((y - e).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_degenerate_and_errors() {
        let tape = Tape::new();
        let c = tape.constant(v1(&[0.3, -0.4]));
        let g = build_sampling_grid(&tape, c, c, 4).unwrap();
        let gv = tape.value(g);
        for j in 0..4 {
            assert_eq!(gv.get(&[j, 0, 1]).unwrap(), 0.3);
            assert_eq!(gv.get(&[j, 1, 1]).unwrap(), -0.4);
            assert_eq!(gv.get(&[j, 0, 0]).unwrap(), -1.0);
            assert_eq!(gv.get(&[j, 1, 0]).unwrap(), 1.0);
        }
        assert!(build_sampling_grid(&tape, c, c, 1).is_err());
    }

    #[test]
    fn grid_gradient_weights_sum_to_one() {
        for j in 0..7 {
            let tape = Tape::new();
            let up = tape.param(v1(&[-0.3]));
            let lo = tape.param(v1(&[0.5]));
            let g = build_sampling_grid(&tape, up, lo, 7).unwrap();
            // pick y of row j via a one-hot seed
            let mut seed = Value::zeros(&[7, 1, 2]).unwrap();
            seed.data_mut()[j * 2 + 1] = 1.0;
            let grads = tape.backward_with(g, seed).unwrap();
            let (du, dl) = (grads.get(up).data()[0], grads.get(lo).data()[0]);
            let t = j as f64 / 6.0;
            assert!((du - (1.0 - t)).abs() < 1e-15);
            assert!((dl - t).abs() < 1e-15);
            assert!((du + dl - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_flat_field_and_midpoint() {
        let tape = Tape::new();
        let img = tape.constant(Value::full(&[4, 3], 0.7).unwrap());
        let grid = tape.param(Value::new(vec![2, 1, 2], vec![0.13, -0.4, -0.77, 0.9]).unwrap());
        let s = bilinear_sample(&tape, img, grid).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let sum = tape.sum(s);
        let g = tape.backward(sum).unwrap().get(grid);
        assert!(g.data().iter().all(|&v| v.abs() < 1e-15));

        // 2-row column (a, b); y = 0 is the vertical midpoint
        let tape = Tape::new();
        let img = tape.constant(Value::new(vec![2, 1], vec![0.2, 0.8]).unwrap());
        let grid = tape.constant(Value::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap());
        let s = bilinear_sample(&tape, img, grid).unwrap();
        assert!((tape.value(s).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bilinear_exact_abscissa_stays_in_column() {
        let img = Value::from_fn(&[5, 7], |i| (i * 37 % 11) as f64 / 11.0).unwrap();
        let tape = Tape::new();
        let im = tape.constant(img.clone());
        let mut g = Vec::new();
        for col in 0..7 {
            g.push(column_abscissa(col, 7));
            g.push(to_normalized(1.25, 5));
        }
        let grid = tape.constant(Value::new(vec![1, 7, 2], g).unwrap());
        let s = bilinear_sample(&tape, im, grid).unwrap();
        for col in 0..7 {
            let a = img.get(&[1, col]).unwrap();
            let b = img.get(&[2, col]).unwrap();
            assert_eq!(tape.value(s).data()[col], 0.75 * a + 0.25 * b);
        }
    }

    #[test]
    fn bilinear_clamps_outside() {
        let tape = Tape::new();
        let img = tape.constant(Value::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let grid = tape.param(Value::new(vec![1, 2, 2], vec![-3.0, -3.0, 5.0, 5.0]).unwrap());
        let s = bilinear_sample(&tape, img, grid).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 4.0]);
        let sum = tape.sum(s);
        let g = tape.backward(sum).unwrap().get(grid);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn project_column_constant_and_zero_thickness() {
        for mode in [PoolMode::Mean, PoolMode::Max] {
            let tape = Tape::new();
            let img = tape.constant(Value::full(&[9, 4], 0.35).unwrap());
            let up = tape.constant(v1(&[-0.9, -0.2, 0.1, 0.4]));
            let lo = tape.constant(v1(&[0.5, 0.3, 0.9, 0.45]));
            let col = project_column(&tape, img, up, lo, 16, mode).unwrap();
            assert!(tape.value(col).data().iter().all(|&v| (v - 0.35).abs() < 1e-15));
        }
        let img = Value::from_fn(&[9, 3], |i| ((i * 7) % 5) as f64 * 0.2).unwrap();
        let tape = Tape::new();
        let im = tape.constant(img.clone());
        let c = tape.constant(v1(&[-0.5, 0.0, 0.5]));
        let col = project_column(&tape, im, c, c, 8, PoolMode::Mean).unwrap();
        let grid = build_sampling_grid(&tape, c, c, 1 + 1).unwrap();
        let on_curve = bilinear_sample(&tape, im, grid).unwrap();
        let expect = tape.value(on_curve);
        for w in 0..3 {
            assert!((tape.value(col).data()[w] - expect.data()[w]).abs() < 1e-15);
        }
    }

    #[test]
    fn ramp_mean_between_exact_rows() {
        // image value = r / (H - 1); curves on rows r1 < r2
        let h = 11;
        let img = Value::from_fn(&[h, 2], |i| (i / 2) as f64 / (h - 1) as f64).unwrap();
        let (r1, r2) = (2.0, 7.0);
        let tape = Tape::new();
        let im = tape.constant(img.clone());
        let up = tape.constant(v1(&[to_normalized(r1, h); 2]));
        let lo = tape.constant(v1(&[to_normalized(r2, h); 2]));
        let col = project_column(&tape, im, up, lo, 64, PoolMode::Mean).unwrap();
        let expect = (r1 + r2) / (2.0 * (h - 1) as f64);
        for &v in tape.value(col).data() {
            assert!((v - expect).abs() < 1e-12);
        }
        let oracle = oracle_project(&img, &[2, 2], &[7, 7], PoolMode::Mean).unwrap();
        assert!((oracle.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn oracle_examples() {
        let slice = Tensor::<f64>::new(vec![4, 1], vec![0.0, 10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0])
            .unwrap();
        let m = oracle_project(&slice, &[1], &[3], PoolMode::Mean).unwrap();
        assert!((m.data()[0] - 20.0 / 255.0).abs() < 1e-15);
        let one = oracle_project(&slice, &[2], &[2], PoolMode::Max).unwrap();
        assert_eq!(one.data()[0], 20.0 / 255.0);
        assert!(oracle_project(&slice, &[3], &[1], PoolMode::Mean).is_err());
        assert!(oracle_project(&slice, &[0], &[4], PoolMode::Mean).is_err());
    }

    #[test]
    fn monotone_reparam_at_zero() {
        let tape = Tape::new();
        let raw = tape.constant(Value::zeros(&[3, 2]).unwrap());
        let c = monotone_reparam(&tape, raw, DEFAULT_GAP_SCALE).unwrap();
        let cv = tape.value(c);
        let gap = 2f64.ln() * 0.25;
        assert!((gap - 0.1733).abs() < 1e-4);
        for col in 0..2 {
            assert_eq!(cv.get(&[0, col]).unwrap(), 0.0);
            assert!((cv.get(&[1, col]).unwrap() - gap).abs() < 1e-15);
            assert!((cv.get(&[2, col]).unwrap() - 2.0 * gap).abs() < 1e-15);
        }
    }

    #[test]
    fn monotone_reparam_saturates_below_one() {
        let tape = Tape::new();
        let raw = tape.constant(Value::new(vec![3, 1], vec![3.0, 40.0, 40.0]).unwrap());
        let c = monotone_reparam(&tape, raw, 0.25).unwrap();
        let cv = tape.value(c);
        let d = cv.data();
        assert!(d[0] <= d[1] && d[1] <= d[2] && d[2] <= 1.0);
        assert!(LayerCurves::new(cv.cast()).unwrap().is_ordered());
    }

    #[test]
    fn crossing_fraction_counts_columns() {
        let t = Tensor::<f32>::new(vec![3, 4], vec![
            0.0, 0.0, 0.5, 0.0, //
            0.1, -0.1, 0.6, 0.2, //
            0.2, 0.3, 0.4, 0.3,
        ])
        .unwrap();
        assert_eq!(crossing_fraction(&t).unwrap(), 0.5);
        assert!(!LayerCurves::new(t).unwrap().is_ordered());
    }

    #[test]
    fn layer_curves_reject_out_of_range() {
        assert!(LayerCurves::new(Tensor::new(vec![1, 2], vec![0.0, 1.5]).unwrap()).is_err());
        assert!(LayerCurves::new(Tensor::new(vec![2], vec![0.0, 0.5]).unwrap()).is_err());
    }

    #[test]
    fn project_volume_checks_extents() {
        let vol = Tensor::<f32>::full(&[2, 5, 4], 0.5).unwrap();
        let curves = Tensor::<f32>::zeros(&[2, 3, 4]).unwrap();
        assert!(project_volume(&vol, &curves, (0, 1), 8, PoolMode::Mean).is_ok());
        let bad = Tensor::<f32>::zeros(&[3, 3, 4]).unwrap();
        assert!(project_volume(&vol, &bad, (0, 1), 8, PoolMode::Mean).is_err());
        assert!(project_volume(&vol, &curves, (1, 1), 8, PoolMode::Mean).is_err());
        assert!(project_volume(&vol, &curves, (1, 3), 8, PoolMode::Mean).is_err());
    }
}
