//! Coordinate producers: a small convolutional column predictor, free
//! per-slice coordinates, and a direct projection-map regressor.
//!
//! Both networks share one trunk: 2x2 area downsampling, then per stage a
//! 3x3 convolution with bias, ReLU and vertical 2x area downsampling. A head
//! convolution spanning the whole remaining height collapses each column to
//! one value per output channel, and linear upsampling restores the width.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Value, Var};
use crate::dpm::{monotone_reparam, Band, DEFAULT_GAP_SCALE};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::io::{read_tsr, write_tsr};
use crate::rng::Rng;

/// Number of layer boundaries (ILM, OPL, BM).
pub const NUM_LAYERS: usize = 3;

/// How unconstrained head outputs become curve coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveMapping {
    /// Independent `tanh` per layer; curves may cross.
    #[default]
    Tanh,
    /// [`monotone_reparam`]; curves are ordered.
    Monotone,
}

impl CurveMapping {
    pub fn from_flag(monotone: bool) -> Self {
        if monotone {
            Self::Monotone
        } else {
            Self::Tanh
        }
    }

    pub fn apply(self, tape: &Tape, raw: Var) -> Result<Var> {
        match self {
            Self::Tanh => Ok(tape.tanh(raw)),
            Self::Monotone => monotone_reparam(tape, raw, DEFAULT_GAP_SCALE),
        }
    }

    /// Raw values that map to the given per-layer coordinates. For the
    /// monotone mapping the coordinates must be strictly increasing and
    /// below the soft cap.
    pub fn inverse(self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.iter().any(|c| !(-1.0 < *c && *c < 1.0)) {
            return Err(contract_err!("coordinates must lie in (-1, 1): {coords:?}"));
        }
        match self {
            Self::Tanh => Ok(coords.iter().map(|c| c.atanh()).collect()),
            Self::Monotone => {
                let mut raw = Vec::with_capacity(coords.len());
                for (k, &c) in coords.iter().enumerate() {
                    if k == 0 {
                        raw.push(c.atanh());
                        continue;
                    }
                    let gap = (c - coords[k - 1]) / DEFAULT_GAP_SCALE;
                    if gap <= 0.0 || c > 0.95 {
                        return Err(contract_err!("monotone inverse needs increasing values below 0.95"));
                    }
                    raw.push(softplus_inv(gap));
                }
                Ok(raw)
            }
        }
    }
}

fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Default starting curves `(-0.5, 0, 0.5)`, generalized to `k` evenly spaced layers.
pub fn equispaced_coords(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.0];
    }
    (0..k).map(|i| -0.5 + i as f64 / (k - 1) as f64).collect()
}

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet(IndexMap<String, Value>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Value) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Value> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Value> {
        self.0
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.0.values().map(Value::len).sum()
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        )
    }
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(IndexMap<String, Var>);

impl Bound {
    /// Binds existing tape variables by name.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self(vars.into_iter().collect())
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("parameter {name:?} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// What the collapse head produces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// One row per layer boundary, mapped into `[-1, 1]`.
    Curves { mapping: CurveMapping },
    /// One raw projection-map row per band (B2, B3).
    Direct,
}

impl Head {
    pub fn outputs(&self) -> usize {
        match self {
            Head::Curves { .. } => NUM_LAYERS,
            Head::Direct => Band::ALL.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// B-scan extents the network accepts; both must be even.
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub head: Head,
}

impl NetConfig {
    pub fn curves(height: usize, width: usize, mapping: CurveMapping) -> Self {
        Self {
            height,
            width,
            channels: vec![8, 16, 16],
            head: Head::Curves { mapping },
        }
    }

    pub fn direct(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: vec![8, 16, 16],
            head: Head::Direct,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 4 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(shape_err!(
                "network input must have even extents (H >= 2, W >= 4), got {}x{}",
                self.height,
                self.width
            ));
        }
        if self.channels.contains(&0) {
            return Err(contract_err!("stage channel counts must be positive"));
        }
        Ok(())
    }

    /// Height left after the input and stage downsampling.
    pub fn collapsed_height(&self) -> usize {
        self.channels
            .iter()
            .fold(self.height / 2, |h, _| h.div_ceil(2))
    }
}

/// Convolutional network mapping one `[H, W]` B-scan to `[outputs, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    config: NetConfig,
    params: ParamSet,
}

fn stage_names(i: usize) -> (String, String) {
    (format!("stage{i}.weight"), format!("stage{i}.bias"))
}

const HEAD_W: &str = "head.weight";
const HEAD_B: &str = "head.bias";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    file: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: NetConfig,
    step: u64,
    tensors: IndexMap<String, TensorEntry>,
}

impl ConvNet {
    /// Seeded fan-in scaled uniform initialization. The curve head's bias
    /// starts at the equispaced curves so training begins from ordered layers.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed, "convnet-init");
        let mut params = ParamSet::new();
        let mut uniform = |dims: &[usize], fan_in: usize, gain: f64| {
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            Value::from_fn(dims, |_| rng.range(-bound, bound))
        };
        let mut cin = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            let (wn, bn) = stage_names(i);
            params.insert(wn, uniform(&[c, cin, 3, 3], cin * 9, 2f64.sqrt())?);
            params.insert(bn, Value::zeros(&[c])?);
            cin = c;
        }
        let hr = config.collapsed_height();
        let out = config.head.outputs();
        params.insert(HEAD_W, uniform(&[out, cin, hr, 1], cin * hr, 1.0)?);
        let bias = match config.head {
            Head::Curves { mapping } => mapping.inverse(&equispaced_coords(out))?,
            Head::Direct => vec![0.0; out],
        };
        params.insert(HEAD_B, Value::new(vec![out], bias)?);
        Ok(Self { config, params })
    }

    /// Same architecture with every weight and bias zero.
    pub fn zeroed(config: NetConfig) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        for v in net.params.0.values_mut() {
            *v = Value::zeros(v.dims())?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Raw head output `[outputs, W]` for a bound parameter set.
    pub fn forward(&self, tape: &Tape, bound: &Bound, slice: Var) -> Result<Var> {
        let dims = tape.dims(slice);
        if dims != [self.config.height, self.config.width] {
            return Err(shape_err!(
                "network expects [{}, {}] B-scans, got {dims:?}",
                self.config.height,
                self.config.width
            ));
        }
        let x = tape.reshape(slice, &[1, dims[0], dims[1]])?;
        let mut x = tape.area_downsample(x, 2, 2)?;
        for i in 0..self.config.channels.len() {
            let (wn, bn) = stage_names(i);
            x = tape.conv2d(x, bound.get(&wn)?, (1, 1), (1, 1))?;
            x = tape.add_channel_bias(x, bound.get(&bn)?)?;
            x = tape.relu(x);
            x = tape.area_downsample(x, 2, 1)?;
        }
        let y = tape.conv2d(x, bound.get(HEAD_W)?, (1, 1), (0, 0))?;
        let y = tape.add_channel_bias(y, bound.get(HEAD_B)?)?;
        let out = self.config.head.outputs();
        let y = tape.reshape(y, &[out, self.config.width / 2])?;
        tape.upsample_linear_1d(y, 2)
    }

    /// Layer curves `[3, W]` in `[-1, 1]`.
    pub fn predict_curves(&self, tape: &Tape, bound: &Bound, slice: Var) -> Result<Var> {
        let Head::Curves { mapping } = self.config.head else {
            return Err(contract_err!("network has no curve head"));
        };
        let raw = self.forward(tape, bound, slice)?;
        mapping.apply(tape, raw)
    }

    /// Raw `[1, W]` projection-map row for `band`.
    pub fn predict_pm_direct(&self, tape: &Tape, bound: &Bound, slice: Var, band: Band) -> Result<Var> {
        if self.config.head != Head::Direct {
            return Err(contract_err!("network has no direct projection head"));
        }
        let raw = self.forward(tape, bound, slice)?;
        let row = tape.select(raw, band.layers().0)?;
        tape.reshape(row, &[1, self.config.width])
    }

    /// Writes one TSR file per tensor plus `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, step: u64) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut tensors = IndexMap::new();
        for (name, value) in self.params.iter() {
            let file = format!("{name}.tsr");
            write_tsr(value, dir.join(&file))?;
            tensors.insert(
                name.to_string(),
                TensorEntry {
                    file,
                    dims: value.dims().to_vec(),
                },
            );
        }
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            step,
            tensors,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`ConvNet::save`], returning the step count.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, u64)> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut net = Self::new(manifest.config, 0)?;
        let expected: Vec<String> = net.params.names().map(String::from).collect();
        for name in expected {
            let entry = manifest
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Consistency(format!("checkpoint lacks {name:?}")))?;
            let t = read_tsr(dir.join(&entry.file))?.cast::<f64>();
            let slot = net.params.get_mut(&name)?;
            if t.dims() != slot.dims() || t.dims() != entry.dims.as_slice() {
                return Err(Error::Consistency(format!(
                    "{name}: stored {:?}, manifest {:?}, expected {:?}",
                    t.dims(),
                    entry.dims,
                    slot.dims()
                )));
            }
            *slot = t;
        }
        Ok((net, manifest.step))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Equispaced,
    Random,
}

/// Unconstrained per-slice curve parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeCoordParams {
    pub raw: Value,
    pub mapping: CurveMapping,
}

impl FreeCoordParams {
    pub fn curves(&self, tape: &Tape, raw: Var) -> Result<Var> {
        self.mapping.apply(tape, raw)
    }

    /// Evaluates the mapping without a gradient tape.
    pub fn curve_values(&self) -> Result<Value> {
        let tape = Tape::new();
        let raw = tape.constant(self.raw.clone());
        let c = self.curves(&tape, raw)?;
        Ok((*tape.value(c)).clone())
    }
}

/// Equispaced: every column starts at [`equispaced_coords`]. Random: raw
/// values drawn from N(0, 0.1^2).
pub fn init_free_coords(
    k: usize,
    w: usize,
    mode: InitMode,
    mapping: CurveMapping,
    rng: &mut Rng,
) -> Result<FreeCoordParams> {
    if k == 0 || w == 0 {
        return Err(contract_err!("free coordinates need K, W >= 1"));
    }
    let raw = match mode {
        InitMode::Equispaced => {
            let col = mapping.inverse(&equispaced_coords(k))?;
            Value::from_fn(&[k, w], |i| col[i / w])?
        }
        InitMode::Random => Value::from_fn(&[k, w], |_| rng.normal(0.0, 0.1))?,
    };
    Ok(FreeCoordParams { raw, mapping })
}
