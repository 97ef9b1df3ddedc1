//! Conditional min-max normalization, training losses and image metrics.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Value, Var};
use crate::dpm::Band;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Floor on the CMM denominator.
pub const CMM_EPS: f64 = 1e-6;
/// Default B3 weight in the combined loss.
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Learnable `(min, max)` pair per training entry.
///
/// Entries are keyed by an id string; training uses one entry per subject and
/// band (see [`CmmTable::entry_id`]) because ground-truth maps are normalized
/// per map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CmmTable {
    entries: IndexMap<String, (f64, f64)>,
}

impl CmmTable {
    /// Every entry starts at `(0, 1)`, which makes [`cmm_apply`] the identity.
    pub fn new<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entries = IndexMap::new();
        for id in ids {
            let id = id.into();
            if entries.insert(id.clone(), (0.0, 1.0)).is_some() {
                return Err(contract_err!("duplicate CMM entry {id:?}"));
            }
        }
        Ok(Self { entries })
    }

    /// Table with both band entries for each subject.
    pub fn for_subjects<S: AsRef<str>>(subjects: &[S]) -> Result<Self> {
        Self::new(
            subjects
                .iter()
                .flat_map(|s| Band::ALL.map(|b| Self::entry_id(s.as_ref(), b))),
        )
    }

    pub fn entry_id(subject: &str, band: Band) -> String {
        format!("{subject}:{band}")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, id: &str) -> Result<(f64, f64)> {
        self.entries
            .get(id)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no CMM entry for {id:?}")))
    }

    pub fn set(&mut self, id: &str, min: f64, max: f64) -> Result<()> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::NonFinite(format!("CMM entry {id:?}: ({min}, {max})")));
        }
        let slot = self
            .entries
            .get_mut(id)
            .ok_or_else(|| Error::Lookup(format!("no CMM entry for {id:?}")))?;
        *slot = (min, max);
        Ok(())
    }

    /// Puts the entry's parameters on the tape as trainable scalars.
    pub fn leaves(&self, tape: &Tape, id: &str) -> Result<(Var, Var)> {
        let (lo, hi) = self.get(id)?;
        Ok((
            tape.param(Value::from_parts(vec![1], vec![lo])),
            tape.param(Value::from_parts(vec![1], vec![hi])),
        ))
    }

    /// Looks up `id` and normalizes `pred` with its parameters.
    pub fn apply(&self, tape: &Tape, pred: Var, id: &str) -> Result<Var> {
        let (lo, hi) = self.leaves(tape, id)?;
        cmm_apply(tape, pred, lo, hi)
    }

    /// `[S, 2]` tensor of `(min, max)` rows in table order.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = self
            .entries
            .values()
            .flat_map(|&(lo, hi)| [lo as f32, hi as f32])
            .collect();
        Tensor::new(vec![self.entries.len(), 2], data)
    }

    pub fn from_tensor(ids: &[String], t: &Tensor) -> Result<Self> {
        if t.dims() != [ids.len(), 2] {
            return Err(shape_err!("CMM tensor {:?} for {} entries", t.dims(), ids.len()));
        }
        let mut table = Self::new(ids.iter().cloned())?;
        for (i, id) in ids.iter().enumerate() {
            table.set(id, t.data()[2 * i] as f64, t.data()[2 * i + 1] as f64)?;
        }
        Ok(table)
    }
}

/// `(I - min) / max(eps, max - min)` with gradients to all three inputs.
pub fn cmm_apply(tape: &Tape, pred: Var, min: Var, max: Var) -> Result<Var> {
    let span = tape.sub(max, min)?;
    let span = tape.floor_at(span, CMM_EPS);
    let shifted = tape.sub(pred, min)?;
    tape.div(shifted, span)
}

/// Mean absolute difference between a node and a fixed target.
pub fn l1_loss(tape: &Tape, a: Var, b: &Value) -> Result<Var> {
    if tape.value(a).dims() != b.dims() {
        return Err(shape_err!("l1_loss operands {:?} and {:?}", tape.dims(a), b.dims()));
    }
    let target = tape.constant(b.clone());
    let diff = tape.sub(a, target)?;
    Ok(tape.mean(tape.abs(diff)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct FeatureSpec {
    pub seed: u64,
    pub scales: usize,
    pub channels: usize,
    /// Subtract each kernel's mean so constant offsets produce no response.
    pub zero_mean: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            scales: 2,
            channels: 8,
            zero_mean: true,
        }
    }
}

/// Frozen bank of random 3x3 filters applied at several dyadic scales, with
/// an absolute-value nonlinearity. Borders are edge-replicated.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    spec: FeatureSpec,
    kernels: Vec<Value>,
}

impl FeatureExtractor {
    pub fn new(spec: FeatureSpec) -> Result<Self> {
        if spec.scales == 0 || spec.channels == 0 {
            return Err(contract_err!("feature extractor needs at least one scale and channel"));
        }
        let mut rng = Rng::new(spec.seed, "feature-bank");
        let bound = 1.0 / 3.0;
        let kernels = (0..spec.scales)
            .map(|_| {
                let mut w: Vec<f64> = (0..spec.channels * 9).map(|_| rng.range(-bound, bound)).collect();
                if spec.zero_mean {
                    for k in w.chunks_mut(9) {
                        let m = k.iter().sum::<f64>() / 9.0;
                        k.iter_mut().for_each(|v| *v -= m);
                    }
                }
                Value::from_parts(vec![spec.channels, 1, 3, 3], w)
            })
            .collect();
        Ok(Self { spec, kernels })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    /// SHA-256 over all kernel weights, for verifying that the bank is frozen.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for k in &self.kernels {
            for v in k.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Feature maps of a `[H, W]` node, one `[C, H_s, W_s]` node per scale.
    pub fn features(&self, tape: &Tape, x: Var) -> Result<Vec<Var>> {
        let dims = tape.dims(x);
        let [h, w] = dims[..] else {
            return Err(shape_err!("feature input must be [H, W], got {dims:?}"));
        };
        let x = tape.reshape(x, &[1, h, w])?;
        self.kernels
            .iter()
            .enumerate()
            .map(|(s, k)| {
                let f = 1usize << s;
                let xs = if f == 1 { x } else { tape.area_downsample(x, f, f)? };
                let padded = tape.pad_edge(xs, 1, 1)?;
                let kern = tape.constant(k.clone());
                let y = tape.conv2d(padded, kern, (1, 1), (0, 0))?;
                Ok(tape.abs(y))
            })
            .collect()
    }
}

/// Sum over scales of the mean absolute feature difference.
pub fn feature_loss(tape: &Tape, a: Var, b: &Value, fx: &FeatureExtractor) -> Result<Var> {
    if tape.value(a).dims() != b.dims() {
        return Err(shape_err!("feature_loss operands {:?} and {:?}", tape.dims(a), b.dims()));
    }
    let target = tape.constant(b.clone());
    let fa = fx.features(tape, a)?;
    let fb = fx.features(tape, target)?;
    let mut total: Option<Var> = None;
    for (pa, pb) in fa.into_iter().zip(fb) {
        let d = tape.sub(pa, pb)?;
        let term = tape.mean(tape.abs(d));
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one scale"))
}

/// L1 plus feature loss for one band.
pub fn band_loss(tape: &Tape, pred: Var, gt: &Value, fx: &FeatureExtractor) -> Result<Var> {
    let l1 = l1_loss(tape, pred, gt)?;
    let lf = feature_loss(tape, pred, gt, fx)?;
    tape.add(l1, lf)
}

/// `L_B2 + lambda * L_B3` on already normalized predictions.
pub fn combined_loss(
    tape: &Tape,
    pred_b2: Var,
    gt_b2: &Value,
    pred_b3: Var,
    gt_b3: &Value,
    lambda: f64,
    fx: &FeatureExtractor,
) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(contract_err!("lambda must be >= 0, got {lambda}"));
    }
    let l2 = band_loss(tape, pred_b2, gt_b2, fx)?;
    let l3 = band_loss(tape, pred_b3, gt_b3, fx)?;
    let l3 = tape.scale(l3, lambda);
    tape.add(l2, l3)
}

fn check_same<A: Scalar, B: Scalar>(a: &Tensor<A>, b: &Tensor<B>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{what} operands {:?} and {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
pub fn psnr<A: Scalar, B: Scalar>(a: &Tensor<A>, b: &Tensor<B>, range: f64) -> Result<f64> {
    check_same(a, b, "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained 11x11 Gaussian
/// windows (sigma 1.5, K1 0.01, K2 0.03, dynamic range 1).
pub fn ssim<A: Scalar, B: Scalar>(a: &Tensor<A>, b: &Tensor<B>) -> Result<f64> {
    check_same(a, b, "ssim")?;
    let [h, w] = *a.dims() else {
        return Err(shape_err!("ssim needs 2-D images, got {:?}", a.dims()));
    };
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(contract_err!("ssim needs at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}"));
    }
    let x: Vec<f64> = a.data().iter().map(|v| v.to_f64()).collect();
    let y: Vec<f64> = b.data().iter().map(|v| v.to_f64()).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let g = gaussian_window();
    let mx = filter_valid(&x, h, w, &g);
    let my = filter_valid(&y, h, w, &g);
    let xx = filter_valid(&prod(&x, &x), h, w, &g);
    let yy = filter_valid(&prod(&y, &y), h, w, &g);
    let xy = filter_valid(&prod(&x, &y), h, w, &g);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = xx[i] - ux * ux;
            let vy = yy[i] - uy * uy;
            let cxy = xy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub volume: String,
    pub band: String,
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricRecord {
    pub fn compute<A: Scalar, B: Scalar>(
        volume: &str,
        band: &str,
        pred: &Tensor<A>,
        gt: &Tensor<B>,
    ) -> Result<Self> {
        Ok(Self {
            volume: volume.to_string(),
            band: band.to_string(),
            psnr: psnr(pred, gt, 1.0)?,
            ssim: ssim(pred, gt)?,
        })
    }
}

/// Per-band mean over a set of records.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRecord {
    pub aggregate: bool,
    pub band: String,
    pub count: usize,
    #[serde(serialize_with = "serialize_db")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

/// Means per band, in band-name order.
pub fn aggregate(records: &[MetricRecord]) -> Vec<AggregateRecord> {
    let mut groups: BTreeMap<&str, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.band.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(band, rs)| {
            let n = rs.len() as f64;
            AggregateRecord {
                aggregate: true,
                band: band.to_string(),
                count: rs.len(),
                psnr_mean: rs.iter().map(|r| r.psnr).sum::<f64>() / n,
                ssim_mean: rs.iter().map(|r| r.ssim).sum::<f64>() / n,
            }
        })
        .collect()
}

/// JSON-lines report: per-map records followed by the aggregates.
pub fn report_jsonl(records: &[MetricRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    for a in aggregate(records) {
        out.push_str(&serde_json::to_string(&a)?);
        out.push('\n');
    }
    Ok(out)
}
