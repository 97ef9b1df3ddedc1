//! Adam, the learning-rate schedule, and the training and fitting loops.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::autodiff::{Tape, Value, Var};
use crate::dataset::{Dataset, Subject};
use crate::dpm::{project_column, project_volume, Band, BandPair, PoolMode, DEFAULT_SAMPLES};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::io::{read_tsr, write_tsr};
use crate::objective::{
    combined_loss, psnr, ssim, CmmTable, FeatureExtractor, FeatureSpec, DEFAULT_LAMBDA,
};
use crate::predictors::{init_free_coords, ConvNet, CurveMapping, Head, InitMode, NetConfig, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-tensor Adam moments with their own step counts, so tensors that are
/// absent from a step (CMM entries of other subjects) stay untouched.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: IndexMap<String, Slot>,
}

#[derive(Clone, Debug)]
struct Slot {
    m: Value,
    v: Value,
    t: u64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: IndexMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates taken so far for `name`.
    pub fn steps(&self, name: &str) -> u64 {
        self.slots.get(name).map_or(0, |s| s.t)
    }

    /// One bias-corrected update of a single tensor.
    pub fn update(&mut self, name: &str, param: &mut Value, grad: &Value, lr: f64) -> Result<()> {
        if param.dims() != grad.dims() {
            return Err(shape_err!(
                "gradient {:?} for parameter {name} {:?}",
                grad.dims(),
                param.dims()
            ));
        }
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: Value::zeros(param.dims()).expect("non-empty dims"),
            v: Value::zeros(param.dims()).expect("non-empty dims"),
            t: 0,
        });
        if let Some(bad) = grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name}[{bad}] at step {}",
                slot.t + 1
            )));
        }
        slot.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(slot.t as i32);
        let c2 = 1.0 - b2.powi(slot.t as i32);
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *p -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Applies one Adam update to every parameter that has a gradient. All
/// gradients are checked before anything is modified.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &IndexMap<String, Value>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(contract_err!("learning rate must be positive, got {lr}"));
    }
    for (name, g) in grads {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name} at step {}",
                state.steps(name) + 1
            )));
        }
    }
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        state.update(name, p, g, lr)?;
    }
    Ok(())
}

/// Decays from `lr0` at the first epoch to `lr0 / 100` at the last.
pub fn lr_schedule(lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs <= 1 {
        return lr0;
    }
    lr0 * 1e-2f64.powf(epoch as f64 / (total_epochs - 1) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    /// [`lr_schedule`]: reach 1% of `lr0` at the final epoch.
    #[default]
    OverRun,
    /// Multiply by 0.01 after every epoch.
    PerEpoch,
}

impl LrDecay {
    pub fn lr(self, lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
        match self {
            Self::OverRun => lr_schedule(lr0, epoch, total_epochs),
            Self::PerEpoch => lr0 * 1e-2f64.powi(epoch as i32),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Curve predictor followed by the projection module.
    #[default]
    CnnDpm,
    /// Network regressing projection-map rows directly.
    CnnOnly,
}

impl FromStr for Pipeline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn_dpm" => Ok(Self::CnnDpm),
            "cnn_only" => Ok(Self::CnnOnly),
            other => Err(contract_err!("unknown pipeline {other:?}")),
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CnnDpm => "cnn_dpm",
            Self::CnnOnly => "cnn_only",
        })
    }
}

/// Starting values of the CMM table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmmInit {
    /// `(0, 1)` for every entry.
    Identity,
    /// Min and max of each subject's maps as predicted by the initial network.
    #[default]
    Warm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pipeline: Pipeline,
    pub epochs: usize,
    pub lr: f64,
    /// Slices per batch. The reference setting is 72; 8 keeps CPU runs short.
    pub batch_size: usize,
    pub lambda: f64,
    /// Samples between curves (M).
    pub samples: usize,
    pub seed: u64,
    pub cmm: bool,
    pub monotone: bool,
    /// CMM parameters use `lr * cmm_lr_scale`.
    pub cmm_lr_scale: f64,
    pub cmm_init: CmmInit,
    pub decay: LrDecay,
    pub channels: Vec<usize>,
    pub feature: FeatureSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::CnnDpm,
            epochs: 30,
            lr: 1e-4,
            batch_size: 8,
            lambda: DEFAULT_LAMBDA,
            samples: DEFAULT_SAMPLES,
            seed: 0,
            cmm: true,
            monotone: false,
            cmm_lr_scale: 10.0,
            cmm_init: CmmInit::Warm,
            decay: LrDecay::OverRun,
            channels: vec![8, 16, 16],
            feature: FeatureSpec::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || !(self.lambda >= 0.0) || self.samples < 2 {
            return Err(contract_err!(
                "invalid training config: lr {}, batch {}, lambda {}, M {}",
                self.lr,
                self.batch_size,
                self.lambda,
                self.samples
            ));
        }
        Ok(())
    }

    pub fn net_config(&self, height: usize, width: usize) -> NetConfig {
        let mut net = match self.pipeline {
            Pipeline::CnnDpm => NetConfig::curves(height, width, CurveMapping::from_flag(self.monotone)),
            Pipeline::CnnOnly => NetConfig::direct(height, width),
        };
        net.channels = self.channels.clone();
        net
    }
}

fn serialize_metric<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

/// One line of `history.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(serialize_with = "serialize_metric")]
    pub val_psnr_b2: Option<f64>,
    #[serde(serialize_with = "serialize_metric")]
    pub val_ssim_b2: Option<f64>,
    #[serde(serialize_with = "serialize_metric")]
    pub val_psnr_b3: Option<f64>,
    #[serde(serialize_with = "serialize_metric")]
    pub val_ssim_b3: Option<f64>,
}

/// Mean PSNR/SSIM per band over a set of subjects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BandMetrics {
    pub psnr_b2: f64,
    pub ssim_b2: f64,
    pub psnr_b3: f64,
    pub ssim_b3: f64,
}

impl BandMetrics {
    pub fn ssim(&self, band: Band) -> f64 {
        match band {
            Band::B2 => self.ssim_b2,
            Band::B3 => self.ssim_b3,
        }
    }

    pub fn psnr(&self, band: Band) -> f64 {
        match band {
            Band::B2 => self.psnr_b2,
            Band::B3 => self.psnr_b3,
        }
    }

    /// Averages metrics of `(prediction, ground truth)` map pairs.
    pub fn of_pairs(pairs: &[(BandPair, BandPair)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(contract_err!("no projection maps to evaluate"));
        }
        let n = pairs.len() as f64;
        let mut m = Self::default();
        for (pred, gt) in pairs {
            m.psnr_b2 += psnr(&pred.b2, &gt.b2, 1.0)? / n;
            m.ssim_b2 += ssim(&pred.b2, &gt.b2)? / n;
            m.psnr_b3 += psnr(&pred.b3, &gt.b3, 1.0)? / n;
            m.ssim_b3 += ssim(&pred.b3, &gt.b3)? / n;
        }
        Ok(m)
    }
}

/// Inference output for one volume.
#[derive(Clone, Debug)]
pub struct Inference {
    /// Projection maps before normalization.
    pub raw: BandPair,
    /// Each map min-max normalized by its own range.
    pub pm: BandPair,
    /// `[D, 3, W]` predicted boundaries (curve pipeline only).
    pub curves: Option<Tensor>,
}

/// Network plus CMM table, as stored on disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: ConvNet,
    pub cmm: CmmTable,
    pub step: u64,
}

impl Checkpoint {
    /// Network tensors and `manifest.json`, plus `cmm.tsr` (`[S, 2]`) and
    /// `subjects.json` naming its rows.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.net.save(dir, self.step)?;
        let ids: Vec<&str> = self.cmm.ids().collect();
        fs::write(dir.join("subjects.json"), serde_json::to_vec_pretty(&ids)?)?;
        if !self.cmm.is_empty() {
            write_tsr(&self.cmm.to_tensor()?, dir.join("cmm.tsr"))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (net, step) = ConvNet::load(dir)?;
        let ids: Vec<String> = match fs::read_to_string(dir.join("subjects.json")) {
            Ok(s) => serde_json::from_str(&s)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let cmm = if ids.is_empty() {
            CmmTable::default()
        } else {
            CmmTable::from_tensor(&ids, &read_tsr(dir.join("cmm.tsr"))?)?
        };
        Ok(Self { net, cmm, step })
    }

    pub fn infer(&self, volume: &Tensor, samples: usize) -> Result<Inference> {
        infer(&self.net, volume, samples)
    }
}

fn slice_value(volume: &Tensor, d: usize) -> Result<Value> {
    Ok(volume.outer(d)?.cast())
}

fn rows_value(map: &Tensor, rows: Range<usize>) -> Result<Value> {
    let w = map.dims()[1];
    Value::new(
        vec![rows.len(), w],
        map.data()[rows.start * w..rows.end * w].iter().map(|&v| v as f64).collect(),
    )
}

/// Raw `[W]` rows for both bands from one B-scan.
fn forward_slice(tape: &Tape, net: &ConvNet, bound: &crate::predictors::Bound, img: Var, samples: usize) -> Result<([Var; 2], Option<Var>)> {
    match net.config().head {
        Head::Curves { .. } => {
            let curves = net.predict_curves(tape, bound, img)?;
            let rows = Band::ALL.map(|band| -> Result<Var> {
                let (ku, kl) = band.layers();
                let up = tape.select(curves, ku)?;
                let lo = tape.select(curves, kl)?;
                project_column(tape, img, up, lo, samples, PoolMode::Mean)
            });
            let [b2, b3] = rows;
            Ok(([b2?, b3?], Some(curves)))
        }
        Head::Direct => {
            let raw = net.forward(tape, bound, img)?;
            Ok(([tape.select(raw, 0)?, tape.select(raw, 1)?], None))
        }
    }
}

/// Predicts both projection maps of a volume, slice by slice, and
/// normalizes each by its own min and max. CMM is not used.
pub fn infer(net: &ConvNet, volume: &Tensor, samples: usize) -> Result<Inference> {
    infer_with(net, volume, samples, true)
}

/// [`infer`] with explicit control over slice parallelism; both paths give
/// identical results.
pub fn infer_with(net: &ConvNet, volume: &Tensor, samples: usize, parallel: bool) -> Result<Inference> {
    let [d, h, w] = *volume.dims() else {
        return Err(shape_err!("volume must be [D, H, W], got {:?}", volume.dims()));
    };
    let cfg = net.config();
    if (h, w) != (cfg.height, cfg.width) {
        return Err(shape_err!(
            "checkpoint expects {}x{} B-scans, volume has {h}x{w}",
            cfg.height,
            cfg.width
        ));
    }
    let one = |s: usize| -> Result<(Vec<f32>, Vec<f32>, Option<Vec<f32>>)> {
        let tape = Tape::new();
        let bound = net.params().bind(&tape);
        let img = tape.constant(slice_value(volume, s)?);
        let ([b2, b3], curves) = forward_slice(&tape, net, &bound, img, samples)?;
        let grab = |v: Var| tape.value(v).data().iter().map(|&x| x as f32).collect::<Vec<_>>();
        Ok((grab(b2), grab(b3), curves.map(grab)))
    };
    let rows: Vec<_> = if parallel {
        (0..d).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..d).map(one).collect::<Result<_>>()?
    };
    let mut b2 = Vec::with_capacity(d * w);
    let mut b3 = Vec::with_capacity(d * w);
    let mut curves = Vec::new();
    for (r2, r3, c) in rows {
        b2.extend(r2);
        b3.extend(r3);
        if let Some(c) = c {
            curves.extend(c);
        }
    }
    let raw = BandPair {
        b2: Tensor::new(vec![d, w], b2)?,
        b3: Tensor::new(vec![d, w], b3)?,
    };
    let curves = if curves.is_empty() {
        None
    } else {
        Some(Tensor::new(vec![d, 3, w], curves)?)
    };
    Ok(Inference {
        pm: raw.normalized(),
        raw,
        curves,
    })
}

/// Raw projection maps of both bands for given `[D, 3, W]` curves.
pub fn project_bands(volume: &Tensor, curves: &Tensor, samples: usize) -> Result<BandPair> {
    Ok(BandPair {
        b2: project_volume(volume, curves, Band::B2.layers(), samples, PoolMode::Mean)?.0,
        b3: project_volume(volume, curves, Band::B3.layers(), samples, PoolMode::Mean)?.0,
    })
}

/// Model, CMM table and optimizer state for one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: ConvNet,
    pub cmm: CmmTable,
    adam: AdamState,
    cmm_adam: AdamState,
    features: FeatureExtractor,
    pub steps: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, height: usize, width: usize, subjects: &[String]) -> Result<Self> {
        cfg.validate()?;
        let net = ConvNet::new(cfg.net_config(height, width), cfg.seed)?;
        let cmm = if cfg.cmm {
            CmmTable::for_subjects(subjects)?
        } else {
            CmmTable::default()
        };
        let features = FeatureExtractor::new(cfg.feature.clone())?;
        Ok(Self {
            cfg,
            net,
            cmm,
            adam: AdamState::new(),
            cmm_adam: AdamState::new(),
            features,
            steps: 0,
        })
    }

    /// Sets every subject's CMM entries to the range of the maps the current
    /// network predicts for it.
    pub fn warm_start_cmm(&mut self, subjects: &[Subject]) -> Result<()> {
        for s in subjects {
            let raw = self.infer(&s.oct)?.raw;
            for band in Band::ALL {
                let (lo, hi) = raw.get(band).min_max();
                let id = CmmTable::entry_id(&s.id, band);
                self.cmm.set(&id, lo, hi)?;
            }
        }
        Ok(())
    }

    pub fn features(&self) -> &FeatureExtractor {
        &self.features
    }

    /// Loss on slices `rows` of `subject` for the current weights.
    pub fn loss(&self, subject: &Subject, rows: Range<usize>) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.net.params().bind(&tape);
        let (loss, _) = self.batch_loss(&tape, &bound, subject, rows)?;
        let v = tape.value(loss).data()[0];
        Ok(v)
    }

    fn batch_loss(
        &self,
        tape: &Tape,
        bound: &crate::predictors::Bound,
        subject: &Subject,
        rows: Range<usize>,
    ) -> Result<(Var, Vec<(String, Var, Var)>)> {
        if rows.is_empty() || rows.end > subject.depth() {
            return Err(contract_err!("slice range {rows:?} invalid for {}", subject.id));
        }
        let mut per_band: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        for d in rows.clone() {
            let img = tape.constant(slice_value(&subject.oct, d)?);
            let (pair, _) = forward_slice(tape, &self.net, bound, img, self.cfg.samples)?;
            per_band[0].push(pair[0]);
            per_band[1].push(pair[1]);
        }
        let mut cmm_vars = Vec::new();
        let mut preds = Vec::with_capacity(2);
        for (band, rows_b) in Band::ALL.into_iter().zip(&per_band) {
            let stacked = tape.stack(rows_b)?;
            let pred = if self.cfg.cmm {
                let id = CmmTable::entry_id(&subject.id, band);
                let (lo, hi) = self.cmm.leaves(tape, &id)?;
                cmm_vars.push((id, lo, hi));
                crate::objective::cmm_apply(tape, stacked, lo, hi)?
            } else {
                stacked
            };
            preds.push(pred);
        }
        let g2 = rows_value(&subject.gt.b2, rows.clone())?;
        let g3 = rows_value(&subject.gt.b3, rows)?;
        let loss = combined_loss(tape, preds[0], &g2, preds[1], &g3, self.cfg.lambda, &self.features)?;
        Ok((loss, cmm_vars))
    }

    /// One optimizer step on slices `rows` of `subject`; returns the loss
    /// before the update.
    pub fn step(&mut self, subject: &Subject, rows: Range<usize>, lr: f64) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.net.params().bind(&tape);
        let (loss, cmm_vars) = self.batch_loss(&tape, &bound, subject, rows)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {value} at step {} on {}",
                self.steps + 1,
                subject.id
            )));
        }
        let grads = tape.backward(loss)?;
        let net_grads: IndexMap<String, Value> = bound
            .iter()
            .map(|(name, v)| (name.to_string(), grads.get(v)))
            .collect();
        let mut cmm_grads = Vec::new();
        for (id, lo, hi) in &cmm_vars {
            let g = Value::new(vec![2], vec![grads.get(*lo).data()[0], grads.get(*hi).data()[0]])?;
            cmm_grads.push((id.clone(), g));
        }
        adam_step(self.net.params_mut(), &net_grads, &mut self.adam, lr)?;
        for (id, g) in cmm_grads {
            let (lo, hi) = self.cmm.get(&id)?;
            let mut p = Value::new(vec![2], vec![lo, hi])?;
            self.cmm_adam.update(&id, &mut p, &g, lr * self.cfg.cmm_lr_scale)?;
            self.cmm.set(&id, p.data()[0], p.data()[1])?;
        }
        self.steps += 1;
        Ok(value)
    }

    pub fn infer(&self, volume: &Tensor) -> Result<Inference> {
        infer(&self.net, volume, self.cfg.samples)
    }

    /// Validation metrics through the inference path.
    pub fn evaluate(&self, subjects: &[Subject]) -> Result<BandMetrics> {
        let pairs = subjects
            .iter()
            .map(|s| Ok((self.infer(&s.oct)?.pm, s.gt.clone())))
            .collect::<Result<Vec<_>>>()?;
        BandMetrics::of_pairs(&pairs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            cmm: self.cmm.clone(),
            step: self.steps,
        }
    }
}

/// Contiguous slice runs covering every slice of every subject once, with a
/// random phase per subject, in shuffled order.
pub fn epoch_batches(subjects: &[Subject], batch: usize, rng: &mut Rng) -> Vec<(usize, Range<usize>)> {
    let mut out = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        let d = s.depth();
        let phase = if batch > 1 { rng.below(batch.min(d)) } else { 0 };
        let mut start = 0;
        let mut end = if phase == 0 { batch.min(d) } else { phase };
        while start < d {
            out.push((i, start..end));
            start = end;
            end = (end + batch).min(d);
        }
    }
    rng.shuffle(&mut out);
    out
}

/// Result of [`train`].
pub struct TrainOutcome {
    /// Best-validation checkpoint (the initialization if no epoch improved on it).
    pub best: Checkpoint,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub feature_checksum: (String, String),
}

/// Trains the selected pipeline on `dataset.train`, validating on
/// `dataset.val` after every epoch.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    if dataset.train.is_empty() {
        return Err(contract_err!("training set is empty"));
    }
    let (h, w) = dataset.extents()?;
    let ids: Vec<String> = dataset.train.iter().map(|s| s.id.clone()).collect();
    let mut trainer = Trainer::new(cfg.clone(), h, w, &ids)?;
    if cfg.cmm && cfg.cmm_init == CmmInit::Warm {
        trainer.warm_start_cmm(&dataset.train)?;
    }
    let checksum_before = trainer.features().checksum();
    let mut rng = Rng::new(cfg.seed, "batches");
    let score = |m: &BandMetrics| 0.5 * (m.ssim_b2 + m.ssim_b3);
    let mut best = trainer.checkpoint();
    let mut best_score = if dataset.val.is_empty() {
        f64::NEG_INFINITY
    } else {
        score(&trainer.evaluate(&dataset.val)?)
    };
    let mut best_epoch = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.decay.lr(cfg.lr, epoch, cfg.epochs);
        let batches = epoch_batches(&dataset.train, cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for (i, rows) in &batches {
            total += trainer.step(&dataset.train[*i], rows.clone(), lr)?;
        }
        let train_loss = total / batches.len() as f64;
        let val = if dataset.val.is_empty() {
            None
        } else {
            Some(trainer.evaluate(&dataset.val)?)
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_psnr_b2: val.map(|m| m.psnr_b2),
            val_ssim_b2: val.map(|m| m.ssim_b2),
            val_psnr_b3: val.map(|m| m.psnr_b3),
            val_ssim_b3: val.map(|m| m.ssim_b3),
        };
        on_epoch(&record);
        history.push(record);
        let s = val.map_or(-train_loss, |m| score(&m));
        if s > best_score {
            best_score = s;
            best = trainer.checkpoint();
            best_epoch = Some(epoch);
        }
    }
    let checksum_after = trainer.features().checksum();
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        feature_checksum: (checksum_before, checksum_after),
    })
}

/// Writes `history` as JSON lines.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub init: InitMode,
    pub monotone: bool,
    pub samples: usize,
    pub lambda: f64,
    pub seed: u64,
    pub cmm: bool,
    pub cmm_lr_scale: f64,
    pub feature: FeatureSpec,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-4,
            init: InitMode::Random,
            monotone: false,
            samples: DEFAULT_SAMPLES,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            cmm: true,
            cmm_lr_scale: 10.0,
            feature: FeatureSpec::default(),
        }
    }
}

/// Result of [`fit_dpm_only`].
#[derive(Clone, Debug)]
pub struct FitResult {
    /// `[D, 3, W]` fitted boundaries.
    pub curves: Tensor,
    /// Loss before every step, per slice.
    pub traces: Vec<Vec<f64>>,
    pub cmm: CmmTable,
}

/// Optimizes free boundary coordinates for every slice against the target
/// maps, slice by slice in index order. One CMM pair per band is shared by
/// all slices of the volume.
pub fn fit_dpm_only(volume: &Tensor, target_b2: &Tensor, target_b3: &Tensor, cfg: &FitConfig) -> Result<FitResult> {
    let [d, _, w] = *volume.dims() else {
        return Err(shape_err!("volume must be [D, H, W], got {:?}", volume.dims()));
    };
    for t in [target_b2, target_b3] {
        if t.dims() != [d, w] {
            return Err(shape_err!("target map {:?} for volume {:?}", t.dims(), volume.dims()));
        }
    }
    if !(cfg.lr > 0.0) || cfg.samples < 2 {
        return Err(contract_err!("invalid fit config: lr {}, M {}", cfg.lr, cfg.samples));
    }
    let mapping = CurveMapping::from_flag(cfg.monotone);
    let features = FeatureExtractor::new(cfg.feature.clone())?;
    let mut cmm = if cfg.cmm {
        CmmTable::for_subjects(&["fit"])?
    } else {
        CmmTable::default()
    };
    let mut cmm_adam = AdamState::new();
    let root = Rng::new(cfg.seed, "fit-dpm");
    let mut curves = Vec::with_capacity(d * 3 * w);
    let mut traces = Vec::with_capacity(d);
    for s in 0..d {
        let img_value = slice_value(volume, s)?;
        let g2 = rows_value(target_b2, s..s + 1)?;
        let g3 = rows_value(target_b3, s..s + 1)?;
        let mut rng = root.split(&format!("slice{s}"));
        let mut params = init_free_coords(3, w, cfg.init, mapping, &mut rng)?;
        let mut adam = AdamState::new();
        let mut trace = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let tape = Tape::new();
            let raw = tape.param(params.raw.clone());
            let img = tape.constant(img_value.clone());
            let c = params.curves(&tape, raw)?;
            let mut preds = Vec::with_capacity(2);
            let mut cmm_vars = Vec::new();
            for band in Band::ALL {
                let (ku, kl) = band.layers();
                let up = tape.select(c, ku)?;
                let lo = tape.select(c, kl)?;
                let row = project_column(&tape, img, up, lo, cfg.samples, PoolMode::Mean)?;
                let row = tape.reshape(row, &[1, w])?;
                preds.push(if cfg.cmm {
                    let id = CmmTable::entry_id("fit", band);
                    let (a, b) = cmm.leaves(&tape, &id)?;
                    cmm_vars.push((id, a, b));
                    crate::objective::cmm_apply(&tape, row, a, b)?
                } else {
                    row
                });
            }
            let loss = combined_loss(&tape, preds[0], &g2, preds[1], &g3, cfg.lambda, &features)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("fit loss {value} on slice {s}")));
            }
            trace.push(value);
            let grads = tape.backward(loss)?;
            adam.update("raw", &mut params.raw, &grads.get(raw), cfg.lr)?;
            for (id, a, b) in cmm_vars {
                let (lo, hi) = cmm.get(&id)?;
                let mut p = Value::new(vec![2], vec![lo, hi])?;
                let g = Value::new(vec![2], vec![grads.get(a).data()[0], grads.get(b).data()[0]])?;
                cmm_adam.update(&id, &mut p, &g, cfg.lr * cfg.cmm_lr_scale)?;
                cmm.set(&id, p.data()[0], p.data()[1])?;
            }
        }
        curves.extend(params.curve_values()?.data().iter().map(|&v| v as f32));
        traces.push(trace);
    }
    Ok(FitResult {
        curves: Tensor::new(vec![d, 3, w], curves)?,
        traces,
        cmm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut st = AdamState::new();
        let mut p = Value::new(vec![2], vec![1.0, 1.0]).unwrap();
        let g = Value::new(vec![2], vec![3.0, -0.5]).unwrap();
        st.update("p", &mut p, &g, 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
        assert!((p.data()[1] - 1.1).abs() < 1e-8);
        assert_eq!(st.steps("p"), 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut st = AdamState::new();
        let mut p = Value::new(vec![3], vec![0.3, -0.2, 5.0]).unwrap();
        let before = p.clone();
        st.update("p", &mut p, &Value::zeros(&[3]).unwrap(), 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_non_finite_without_touching_params() {
        let mut params = ParamSet::new();
        params.insert("a", Value::zeros(&[1]).unwrap());
        params.insert("b", Value::zeros(&[1]).unwrap());
        let mut grads = IndexMap::new();
        grads.insert("a".to_string(), Value::full(&[1], 1.0).unwrap());
        grads.insert("b".to_string(), Value::from_parts(vec![1], vec![f64::NAN]));
        let mut st = AdamState::new();
        let err = adam_step(&mut params, &grads, &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains('b') && m.contains("step 1")));
        assert_eq!(params.get("a").unwrap().data()[0], 0.0);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(lr_schedule(1e-4, 0, 30), 1e-4);
        assert!((lr_schedule(1e-4, 29, 30) - 1e-6).abs() < 1e-18);
        assert!((lr_schedule(1.0, 5, 11) - 0.1).abs() < 1e-12);
        assert_eq!(lr_schedule(0.3, 0, 1), 0.3);
        let mut prev = f64::INFINITY;
        for e in 0..20 {
            let lr = lr_schedule(1.0, e, 20);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!((LrDecay::PerEpoch.lr(1.0, 2, 10) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn batches_cover_every_slice_once() {
        let s = Subject {
            id: "s".into(),
            oct: Tensor::zeros(&[13, 2, 2]).unwrap(),
            octa: None,
            gt: BandPair {
                b2: Tensor::zeros(&[13, 2]).unwrap(),
                b3: Tensor::zeros(&[13, 2]).unwrap(),
            },
            octa_gt: None,
            truth_curves: None,
        };
        let subjects = vec![s.clone(), s];
        let mut rng = Rng::new(1, "b");
        for _ in 0..5 {
            let batches = epoch_batches(&subjects, 4, &mut rng);
            for i in 0..2 {
                let mut seen = [0; 13];
                for (_, r) in batches.iter().filter(|(j, _)| *j == i) {
                    assert!(!r.is_empty() && r.len() <= 4);
                    for d in r.clone() {
                        seen[d] += 1;
                    }
                }
                assert!(seen.iter().all(|&c| c == 1));
            }
        }
    }
}
