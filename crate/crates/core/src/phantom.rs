//! Synthetic retina volumes with exactly known layer boundaries.
//!
//! Three boundary surfaces (ILM, OPL, BM) are smooth cosine series over the
//! en-face plane. Between them sit an inner band that is brighter near the
//! ILM and an outer band that is brighter near the BM. Vessels are tubes that
//! run through the inner band: dark interiors in OCT, bright in OCTA, with a
//! shadow that attenuates the outer band beneath them.
//!
//! Ground-truth projection maps integrate a continuous image with a
//! 257-point trapezoidal rule between the true boundaries. By default the
//! continuous image is the depth-wise linear reconstruction of the rendered
//! voxels; [`GtIntegrand::Analytic`] integrates the analytic band model
//! instead, with only the noise residual reconstructed from voxels.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::dpm::{Band, BandPair};
use crate::error::{contract_err, Error, Result};
use crate::io::{save_volume, write_pgm, write_tsr, Modality, VolumeMeta};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Trapezoidal sub-intervals used for ground-truth integration.
pub const GT_SUBINTERVALS: usize = 256;
/// Steepness multiplier for the steep stress case.
const STEEP_FACTOR: f64 = 4.0;
/// Curves stay inside this normalized range.
/// Highest cosine order of the band textures.
const TEXTURE_ORDER: usize = 8;
const CURVE_LIMIT: f64 = 0.98;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Base,
    /// Bright Gaussian blob straddling the OPL.
    Lesion,
    /// Boundary undulation amplified as far as the gap constraint allows.
    Steep,
    /// Five-fold noise in the lower-right en-face quadrant.
    LowQuality,
}

impl Variant {
    pub const STRESS: [Variant; 3] = [Variant::Lesion, Variant::Steep, Variant::LowQuality];

    pub fn suffix(self) -> &'static str {
        match self {
            Variant::Base => "",
            Variant::Lesion => "lesion",
            Variant::Steep => "steep",
            Variant::LowQuality => "lowq",
        }
    }
}

/// What the ground-truth integration treats as the continuous image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtIntegrand {
    /// Depth-wise linear reconstruction of the rendered voxels.
    #[default]
    Sampled,
    /// The analytic band model plus the linearly reconstructed noise residual.
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Highest cosine order of the boundary surfaces along each en-face axis.
    pub harmonics: usize,
    /// Bound on each boundary's deviation from its base depth (normalized units).
    pub amplitude: f64,
    /// Share of the deviation common to all three boundaries.
    pub shared_fraction: f64,
    pub min_gap_px: f64,
    /// Base normalized depths of ILM, OPL and BM.
    pub layer_depths: [f64; 3],
    pub vessels: usize,
    pub vessel_radius: (f64, f64),
    pub vessel_contrast: (f64, f64),
    /// Vessel center depth as a fraction of the inner band thickness.
    pub vessel_depth: (f64, f64),
    pub noise_sigma: f64,
    pub inner: f64,
    pub outer: f64,
    pub background: f64,
    /// Inner band intensity drop from ILM to OPL.
    pub inner_tilt: f64,
    /// Outer band intensity rise from OPL to BM.
    pub outer_tilt: f64,
    /// Zero-mean brightening of the inner band at both of its edges.
    pub inner_edge_boost: f64,
    /// Relative amplitude of the en-face reflectivity textures. Each band
    /// blends three independent textures with weights that vary with relative
    /// depth, so only the full band reproduces its projection.
    pub texture: f64,
    /// Logistic scale of the boundary transitions in pixels; 0 gives hard edges.
    pub edge_width: f64,
    /// OCTA vessel brightness above background.
    pub flow: f64,
    pub gt_integrand: GtIntegrand,
    pub variant: Variant,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            depth: 32,
            height: 128,
            width: 128,
            seed: 0,
            harmonics: 3,
            amplitude: 0.08,
            shared_fraction: 0.75,
            min_gap_px: 12.0,
            layer_depths: [-0.45, -0.05, 0.35],
            vessels: 6,
            vessel_radius: (1.5, 3.5),
            vessel_contrast: (0.3, 0.6),
            vessel_depth: (0.3, 0.6),
            noise_sigma: 0.02,
            inner: 0.55,
            outer: 0.25,
            background: 0.05,
            inner_tilt: 0.2,
            outer_tilt: 0.1,
            inner_edge_boost: 0.1,
            texture: 0.3,
            edge_width: 1.0,
            flow: 0.7,
            gt_integrand: GtIntegrand::Sampled,
            variant: Variant::Base,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.height < 2 || self.width < 2 {
            return Err(contract_err!(
                "phantom extents {}x{}x{} too small",
                self.depth,
                self.height,
                self.width
            ));
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !(ordered(self.vessel_radius) && ordered(self.vessel_contrast) && ordered(self.vessel_depth)) {
            return Err(contract_err!("vessel parameter ranges must be finite with lo <= hi"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let (up, down) = (1.0 + self.texture, 1.0 - self.texture);
        let levels = [
            (self.inner + self.inner_tilt / 2.0 + self.inner_edge_boost) * up,
            (self.inner - self.inner_tilt / 2.0 - self.inner_edge_boost) * down,
            (self.outer + self.outer_tilt / 2.0) * up,
            (self.outer - self.outer_tilt / 2.0) * down,
            self.background,
            self.background + self.flow,
        ];
        if !levels.into_iter().all(unit) || !unit(self.vessel_contrast.1) || !unit(self.shared_fraction) {
            return Err(contract_err!("phantom intensities must stay within [0, 1]"));
        }
        if self.noise_sigma < 0.0 || self.edge_width < 0.0 || self.amplitude < 0.0 || self.texture < 0.0 {
            return Err(contract_err!("noise, edge width, amplitude and texture must be non-negative"));
        }
        Ok(())
    }

    fn px_per_unit(&self) -> f64 {
        (self.height - 1) as f64 / 2.0
    }
}

/// Cosine series `sum a cos(p pi u + phi) cos(q pi v + psi)` over `[0,1]^2`.
#[derive(Clone, Debug)]
struct Surface {
    terms: Vec<(f64, f64, f64, f64, f64)>,
}

impl Surface {
    fn random(rng: &mut Rng, order: usize, amplitude: f64) -> Self {
        let mut terms = Vec::new();
        for p in 0..=order {
            for q in 0..=order {
                if p + q == 0 {
                    continue;
                }
                let a = rng.normal(0.0, 1.0) / (1 + p + q) as f64;
                let phi = rng.range(0.0, std::f64::consts::TAU);
                let psi = rng.range(0.0, std::f64::consts::TAU);
                terms.push((p as f64, q as f64, a, phi, psi));
            }
        }
        let total: f64 = terms.iter().map(|t| t.2.abs()).sum();
        if total > 0.0 {
            for t in &mut terms {
                t.2 *= amplitude / total;
            }
        }
        Self { terms }
    }

    fn eval(&self, u: f64, v: f64) -> f64 {
        use std::f64::consts::PI;
        self.terms
            .iter()
            .map(|&(p, q, a, phi, psi)| a * (p * PI * u + phi).cos() * (q * PI * v + psi).cos())
            .sum()
    }
}

fn unit_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Largest scale `f` such that `base + f * dev` keeps every gap at least
/// `min_gap` and every curve inside the allowed range.
fn max_feasible_scale(base: &[f64; 3], devs: &[[f64; 3]], min_gap: f64) -> f64 {
    let mut f = f64::INFINITY;
    for dev in devs {
        for k in 0..3 {
            if dev[k] > 0.0 {
                f = f.min((CURVE_LIMIT - base[k]) / dev[k]);
            } else if dev[k] < 0.0 {
                f = f.min((-CURVE_LIMIT - base[k]) / dev[k]);
            }
            if k > 0 {
                let slack = base[k] - base[k - 1] - min_gap;
                let shrink = dev[k] - dev[k - 1];
                if slack < 0.0 {
                    return 0.0;
                }
                if shrink < 0.0 {
                    f = f.min(slack / -shrink);
                }
            }
        }
    }
    f
}

#[derive(Clone, Debug)]
struct Vessel {
    radius: f64,
    contrast: f64,
    depth: f64,
    /// En-face polyline in (slice * slice_spacing, column) pixel units.
    path: Vec<(f64, f64)>,
}

impl Vessel {
    fn random(rng: &mut Rng, spec: &PhantomSpec, extent: (f64, f64)) -> Self {
        let (ld, lw) = extent;
        let radius = rng.range(spec.vessel_radius.0, spec.vessel_radius.1);
        let contrast = rng.range(spec.vessel_contrast.0, spec.vessel_contrast.1);
        let depth = rng.range(spec.vessel_depth.0, spec.vessel_depth.1);
        let center = (rng.range(0.0, ld), rng.range(0.0, lw));
        let theta = rng.range(0.0, std::f64::consts::PI);
        let wiggle = rng.range(0.0, 8.0);
        let wavelength = rng.range(40.0, 120.0);
        let phase = rng.range(0.0, std::f64::consts::TAU);
        let (dir, normal) = ((theta.cos(), theta.sin()), (-theta.sin(), theta.cos()));
        let half = ld.hypot(lw).ceil() as i64 + 4;
        let path = (-half..=half)
            .map(|t| {
                let t = t as f64;
                let off = wiggle * (std::f64::consts::TAU * t / wavelength + phase).sin();
                (
                    center.0 + t * dir.0 + off * normal.0,
                    center.1 + t * dir.1 + off * normal.1,
                )
            })
            .collect();
        Self {
            radius,
            contrast,
            depth,
            path,
        }
    }

    fn distance(&self, p: (f64, f64)) -> f64 {
        self.path
            .windows(2)
            .map(|seg| {
                let (a, b) = (seg[0], seg[1]);
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let len2 = dx * dx + dy * dy;
                let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
                (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// A vessel's cross-section in one A-scan.
#[derive(Clone, Copy, Debug)]
struct Crossing {
    center: f64,
    half: f64,
    contrast: f64,
}

/// Everything the continuous image model needs for one (slice, column).
#[derive(Clone, Debug)]
struct Column {
    b: [f64; 3],
    crossings: Vec<Crossing>,
    shadow: f64,
    lesion: f64,
    /// Texture values of the inner and outer bands.
    texture: [[f64; 3]; 2],
}

/// `1 + sum_j t_j b_j(r)` with the quadratic Bernstein basis on `r` in [0, 1].
fn blend(t: &[f64; 3], r: f64) -> f64 {
    let r = r.clamp(0.0, 1.0);
    let q = 1.0 - r;
    1.0 + t[0] * q * q + t[1] * 2.0 * r * q + t[2] * r * r
}

struct Model<'a> {
    spec: &'a PhantomSpec,
}

impl Model<'_> {
    fn edge(&self, z: f64) -> f64 {
        let tau = self.spec.edge_width;
        if tau == 0.0 {
            if z >= 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            sigmoid(z / tau)
        }
    }

    fn vessel_profile(&self, c: &Crossing, y: f64) -> f64 {
        self.edge(c.half - (y - c.center).abs())
    }

    fn oct(&self, col: &Column, y: f64) -> f64 {
        let s = self.spec;
        let [b0, b1, b2] = col.b;
        let (s0, s1, s2) = (self.edge(y - b0), self.edge(y - b1), self.edge(y - b2));
        let r_in = (y - b0) / (b1 - b0);
        let r_out = (y - b1) / (b2 - b1);
        let dark: f64 = col
            .crossings
            .iter()
            .map(|c| 1.0 - c.contrast * self.vessel_profile(c, y))
            .product();
        let profile = s.inner + s.inner_tilt * (0.5 - r_in)
            + s.inner_edge_boost * (std::f64::consts::TAU * r_in).cos();
        let inner = profile * blend(&col.texture[0], r_in) * dark;
        let outer = (s.outer + s.outer_tilt * (r_out - 0.5)) * blend(&col.texture[1], r_out) * col.shadow;
        let bg = s.background;
        let mut v = bg + (inner - bg) * s0 * (1.0 - s1) + (outer - bg) * s1 * (1.0 - s2);
        if col.lesion != 0.0 {
            v += col.lesion * (-(y - b1).powi(2) / (2.0 * 3.0 * 3.0)).exp();
        }
        v
    }

    fn octa(&self, col: &Column, y: f64) -> f64 {
        let open: f64 = col
            .crossings
            .iter()
            .map(|c| 1.0 - self.vessel_profile(c, y))
            .product();
        self.spec.background + self.spec.flow * (1.0 - open)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomTruth {
    /// `[D, 3, W]` normalized ILM, OPL, BM positions.
    pub curves: Tensor,
    /// Vessel centerlines as `(slice, normalized depth, column)` points.
    pub vessels: Vec<Vec<[f64; 3]>>,
    /// Per-map min-max normalized ground truth.
    pub gt_pm: BandPair,
    /// Ground truth before normalization.
    pub raw_pm: BandPair,
    pub octa_gt_pm: BandPair,
    pub octa_raw_pm: BandPair,
    /// Amplitude multiplier that was applied to the boundary undulation.
    pub amplitude_scale: f64,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub spec: PhantomSpec,
    /// `[D, H, W]` OCT intensities in `[0, 1]`.
    pub oct: Tensor,
    pub octa: Tensor,
    pub truth: PhantomTruth,
}

/// Generates an OCT/OCTA pair and its ground truth, fully determined by `spec`.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (d_n, h_n, w_n) = (spec.depth, spec.height, spec.width);
    let px = spec.px_per_unit();
    let root = Rng::new(spec.seed, "phantom");

    // boundary surfaces
    let mut srng = root.split("surfaces");
    let common = Surface::random(&mut srng, spec.harmonics, spec.amplitude * spec.shared_fraction);
    let own: Vec<Surface> = (0..3)
        .map(|_| Surface::random(&mut srng, spec.harmonics, spec.amplitude * (1.0 - spec.shared_fraction)))
        .collect();
    let devs: Vec<[f64; 3]> = (0..d_n * w_n)
        .map(|i| {
            let (u, v) = (unit_coord(i / w_n, d_n), unit_coord(i % w_n, w_n));
            let c = common.eval(u, v);
            [0, 1, 2].map(|k| c + own[k].eval(u, v))
        })
        .collect();
    let min_gap = spec.min_gap_px / px;
    let feasible = max_feasible_scale(&spec.layer_depths, &devs, min_gap);
    let scale = match spec.variant {
        Variant::Steep => {
            if feasible <= 1.0 {
                return Err(contract_err!(
                    "steep variant infeasible: undulation can grow by at most {feasible:.3}x"
                ));
            }
            feasible.min(STEEP_FACTOR)
        }
        _ => 1.0,
    };
    if feasible < scale {
        return Err(contract_err!(
            "boundaries violate the {} px minimum gap or leave the image at height {h_n}",
            spec.min_gap_px
        ));
    }
    let mut curve_data = vec![0f32; d_n * 3 * w_n];
    for d in 0..d_n {
        for w in 0..w_n {
            for k in 0..3 {
                let c = spec.layer_depths[k] + scale * devs[d * w_n + w][k];
                curve_data[(d * 3 + k) * w_n + w] = c as f32;
            }
        }
    }
    let curves = Tensor::new(vec![d_n, 3, w_n], curve_data)?;
    let to_px = |c: f32| (c as f64 + 1.0) * px;
    let boundary = |d: usize, w: usize| [0, 1, 2].map(|k| to_px(curves.data()[(d * 3 + k) * w_n + w]));

    // vessels and lesion in en-face pixel units
    let spacing = if d_n > 1 { (w_n - 1) as f64 / (d_n - 1) as f64 } else { 1.0 };
    let extent = ((d_n - 1) as f64 * spacing, (w_n - 1) as f64);
    let mut vrng = root.split("vessels");
    let vessels: Vec<Vessel> = (0..spec.vessels)
        .map(|_| Vessel::random(&mut vrng, spec, extent))
        .collect();
    let mut trng = root.split("texture");
    let textures: [[Surface; 3]; 2] =
        [0, 1].map(|_| [0, 1, 2].map(|_| Surface::random(&mut trng, TEXTURE_ORDER, spec.texture)));

    let lesion = (spec.variant == Variant::Lesion).then(|| {
        let mut lrng = root.split("lesion");
        (
            lrng.range(0.3, 0.7) * extent.0,
            lrng.range(0.3, 0.7) * extent.1,
        )
    });

    let columns: Vec<Column> = (0..d_n * w_n)
        .into_par_iter()
        .map(|i| {
            let (d, w) = (i / w_n, i % w_n);
            let b = boundary(d, w);
            let p = (d as f64 * spacing, w as f64);
            let mut crossings = Vec::new();
            let mut shadow = 1.0;
            for v in &vessels {
                let rho = v.distance(p);
                if rho < v.radius {
                    let half = (v.radius * v.radius - rho * rho).sqrt();
                    crossings.push(Crossing {
                        center: b[0] + v.depth * (b[1] - b[0]),
                        half,
                        contrast: v.contrast,
                    });
                    shadow *= 1.0 - v.contrast * half / v.radius;
                }
            }
            let lesion = lesion.map_or(0.0, |(ld, lw)| {
                let r2 = (p.0 - ld).powi(2) + (p.1 - lw).powi(2);
                0.3 * (-r2 / (2.0 * 6.0 * 6.0)).exp()
            });
            let (u, v) = (unit_coord(d, d_n), unit_coord(w, w_n));
            Column {
                b,
                crossings,
                shadow,
                lesion,
                texture: textures.each_ref().map(|band| band.each_ref().map(|t| t.eval(u, v))),
            }
        })
        .collect();

    let model = Model { spec };
    let noisy_quadrant = |d: usize, w: usize| {
        spec.variant == Variant::LowQuality && 2 * d >= d_n && 2 * w >= w_n
    };
    let mut nrng = root.split("noise");
    // the part of the continuous image that is linearly reconstructed from voxels
    let analytic = spec.gt_integrand == GtIntegrand::Analytic;
    let mut render = |f: &dyn Fn(&Column, f64) -> f64| -> (Tensor, Vec<f64>) {
        let mut vol = vec![0f32; d_n * h_n * w_n];
        let mut residual = vec![0f64; d_n * h_n * w_n];
        for d in 0..d_n {
            for y in 0..h_n {
                for w in 0..w_n {
                    let col = &columns[d * w_n + w];
                    let clean = f(col, y as f64);
                    let sigma = spec.noise_sigma * if noisy_quadrant(d, w) { 5.0 } else { 1.0 };
                    let noise = if sigma > 0.0 { nrng.normal(0.0, sigma) } else { 0.0 };
                    let v = (clean + noise).clamp(0.0, 1.0) as f32;
                    let idx = (d * h_n + y) * w_n + w;
                    vol[idx] = v;
                    residual[idx] = if analytic { v as f64 - clean } else { v as f64 };
                }
            }
        }
        (Tensor::from_parts(vec![d_n, h_n, w_n], vol), residual)
    };
    let (oct, oct_res) = render(&|c, y| model.oct(c, y));
    let (octa, octa_res) = render(&|c, y| model.octa(c, y));

    let integrate = |f: &(dyn Fn(&Column, f64) -> f64 + Sync), residual: &[f64], band: Band| -> Tensor {
        let (ku, kl) = band.layers();
        let data = (0..d_n * w_n)
            .into_par_iter()
            .map(|i| {
                let (d, w) = (i / w_n, i % w_n);
                let col = &columns[i];
                let interp = |y: f64| {
                    let y = y.clamp(0.0, (h_n - 1) as f64);
                    let i0 = (y.floor() as usize).min(h_n.saturating_sub(2));
                    let i1 = (i0 + 1).min(h_n - 1);
                    let t = y - i0 as f64;
                    let r = |row: usize| residual[(d * h_n + row) * w_n + w];
                    (1.0 - t) * r(i0) + t * r(i1)
                };
                let (a, b) = (col.b[ku], col.b[kl]);
                let g = |y: f64| if analytic { f(col, y) + interp(y) } else { interp(y) };
                let n = GT_SUBINTERVALS;
                let mut acc = 0.0;
                for j in 0..=n {
                    let y = a + (b - a) * j as f64 / n as f64;
                    let wgt = if j == 0 || j == n { 0.5 } else { 1.0 };
                    acc += wgt * g(y);
                }
                (acc / n as f64) as f32
            })
            .collect();
        Tensor::from_parts(vec![d_n, w_n], data)
    };
    let oct_fn = |c: &Column, y: f64| model.oct(c, y);
    let octa_fn = |c: &Column, y: f64| model.octa(c, y);
    let raw_pm = BandPair {
        b2: integrate(&oct_fn, &oct_res, Band::B2),
        b3: integrate(&oct_fn, &oct_res, Band::B3),
    };
    let octa_raw_pm = BandPair {
        b2: integrate(&octa_fn, &octa_res, Band::B2),
        b3: integrate(&octa_fn, &octa_res, Band::B3),
    };

    let centerlines = vessels
        .iter()
        .map(|v| {
            v.path
                .iter()
                .filter(|p| (0.0..=extent.0).contains(&p.0) && (0.0..=extent.1).contains(&p.1))
                .map(|&(pd, pw)| {
                    let (d, w) = ((pd / spacing).round() as usize, pw.round() as usize);
                    let b = columns[d * w_n + w].b;
                    let y = b[0] + v.depth * (b[1] - b[0]);
                    [pd / spacing, y / px - 1.0, pw]
                })
                .collect()
        })
        .collect();

    Ok(Phantom {
        spec: spec.clone(),
        oct,
        octa,
        truth: PhantomTruth {
            curves,
            vessels: centerlines,
            gt_pm: raw_pm.normalized(),
            raw_pm,
            octa_gt_pm: octa_raw_pm.normalized(),
            octa_raw_pm,
            amplitude_scale: scale,
        },
    })
}

/// The three stress variants of `spec`, sharing its seed.
pub fn stress_cases(spec: &PhantomSpec) -> Result<Vec<(Variant, Phantom)>> {
    Variant::STRESS
        .iter()
        .map(|&variant| {
            let s = PhantomSpec {
                variant,
                ..spec.clone()
            };
            Ok((variant, generate(&s)?))
        })
        .collect()
}

/// Subject-id to split assignment written as `dataset.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub spec: PhantomSpec,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Stress-case subject ids stored under `test/`.
    #[serde(default)]
    pub stress: Vec<String>,
}

impl DatasetIndex {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(root.as_ref().join("dataset.json"))?)?)
    }

    pub fn subject_dir(root: &Path, split: &str, id: &str) -> PathBuf {
        root.join(split).join(id)
    }
}

pub fn subject_id(i: usize) -> String {
    format!("phantom_{i:03}")
}

/// Validation and test each get `max(1, floor(n / 5))` subjects; the rest train.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(contract_err!("need ≥ 3 subjects, got {n}"));
    }
    let held = (n / 5).max(1);
    Ok((n - 2 * held, held, held))
}

/// Per-subject spec: the base spec with a seed derived from the subject id.
pub fn subject_spec(base: &PhantomSpec, id: &str) -> PhantomSpec {
    PhantomSpec {
        seed: Rng::new(base.seed, id).next_u64(),
        ..base.clone()
    }
}

/// Writes one subject directory: volumes, truth curves, ground-truth maps.
pub fn write_subject(dir: &Path, id: &str, ph: &Phantom) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = |modality| VolumeMeta {
        subject_id: id.to_string(),
        modality,
        depth: ph.spec.depth,
        height: ph.spec.height,
        width: ph.spec.width,
        intensity_range: (0.0, 1.0),
    };
    save_volume(dir.join("oct"), &meta(Modality::Oct), &ph.oct)?;
    save_volume(dir.join("octa"), &meta(Modality::Octa), &ph.octa)?;
    let t = &ph.truth;
    write_tsr(&t.curves, dir.join("truth_curves.tsr"))?;
    for band in Band::ALL {
        let n = band.name();
        write_pgm(t.gt_pm.get(band), dir.join(format!("gt_pm_{n}.pgm")), 65535)?;
        write_tsr(t.gt_pm.get(band), dir.join(format!("gt_pm_{n}.tsr")))?;
        write_tsr(t.raw_pm.get(band), dir.join(format!("gt_pm_{n}_raw.tsr")))?;
        write_pgm(t.octa_gt_pm.get(band), dir.join(format!("octa_gt_pm_{n}.pgm")), 65535)?;
        write_tsr(t.octa_gt_pm.get(band), dir.join(format!("octa_gt_pm_{n}.tsr")))?;
        write_tsr(t.octa_raw_pm.get(band), dir.join(format!("octa_gt_pm_{n}_raw.tsr")))?;
    }
    fs::write(dir.join("vessels.json"), serde_json::to_vec(&t.vessels)?)?;
    fs::write(dir.join("phantom.json"), serde_json::to_vec_pretty(&ph.spec)?)?;
    Ok(())
}

/// Generates `n` subjects under `out/{train,val,test}/phantom_NNN`. With
/// `stress`, every test subject also gets its three stress variants as
/// `phantom_NNN_{lesion,steep,lowq}` under `test/`.
pub fn export_dataset(out: impl AsRef<Path>, n: usize, base: &PhantomSpec, stress: bool) -> Result<DatasetIndex> {
    let out = out.as_ref();
    let (n_train, n_val, _) = split_sizes(n)?;
    let mut ids: Vec<String> = (0..n).map(subject_id).collect();
    Rng::new(base.seed, "split").shuffle(&mut ids);
    let mut index = DatasetIndex {
        spec: base.clone(),
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
        stress: Vec::new(),
    };
    index.train.sort();
    index.val.sort();
    index.test.sort();

    let jobs: Vec<(&str, &String)> = [("train", &index.train), ("val", &index.val), ("test", &index.test)]
        .into_iter()
        .flat_map(|(split, ids)| ids.iter().map(move |id| (split, id)))
        .collect();
    for (split, id) in jobs {
        let ph = generate(&subject_spec(base, id))?;
        write_subject(&DatasetIndex::subject_dir(out, split, id), id, &ph)?;
    }
    if stress {
        for id in index.test.clone() {
            for (variant, ph) in stress_cases(&subject_spec(base, &id))? {
                let sid = format!("{id}_{}", variant.suffix());
                write_subject(&DatasetIndex::subject_dir(out, "test", &sid), &sid, &ph)?;
                index.stress.push(sid);
            }
        }
    }
    fs::write(out.join("dataset.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

impl From<Variant> for String {
    fn from(v: Variant) -> Self {
        v.suffix().to_string()
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "lesion" => Ok(Self::Lesion),
            "steep" => Ok(Self::Steep),
            "lowq" | "low_quality" => Ok(Self::LowQuality),
            other => Err(contract_err!("unknown phantom variant {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            depth: 4,
            height: 64,
            width: 32,
            min_gap_px: 6.0,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.oct, b.oct);
        assert_eq!(a.octa, b.octa);
        assert_eq!(a.truth, b.truth);
        let c = generate(&PhantomSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.oct, c.oct);
    }

    #[test]
    fn truth_curves_ordered_with_gap() {
        let ph = generate(&small()).unwrap();
        let s = &ph.spec;
        let c = &ph.truth.curves;
        for d in 0..s.depth {
            for w in 0..s.width {
                for k in 1..3 {
                    let gap = (c.get(&[d, k, w]).unwrap() - c.get(&[d, k - 1, w]).unwrap()) as f64;
                    assert!(gap * s.px_per_unit() >= s.min_gap_px - 1e-6);
                }
            }
        }
    }

    #[test]
    fn height_too_small_is_rejected() {
        let spec = PhantomSpec {
            height: 24,
            min_gap_px: 12.0,
            ..small()
        };
        assert!(matches!(generate(&spec), Err(Error::Contract(_))));
    }

    #[test]
    fn inner_band_brighter_than_outer() {
        let ph = generate(&small()).unwrap();
        assert!(ph.truth.raw_pm.b2.mean() > ph.truth.raw_pm.b3.mean());
    }

    #[test]
    fn uniform_band_normalizes_to_zeros() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            vessels: 0,
            texture: 0.0,
            edge_width: 0.0,
            gt_integrand: GtIntegrand::Analytic,
            ..small()
        };
        let ph = generate(&spec).unwrap();
        let (lo, hi) = ph.truth.raw_pm.b2.min_max();
        assert!(hi - lo < 1e-6, "span {}", hi - lo);
        assert!(ph.truth.gt_pm.b2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stress_variants_keep_truth_where_expected() {
        let base = generate(&small()).unwrap();
        let cases = stress_cases(&small()).unwrap();
        for (variant, ph) in &cases {
            match variant {
                Variant::Lesion | Variant::LowQuality => {
                    assert_eq!(ph.truth.curves, base.truth.curves);
                    assert_ne!(ph.oct, base.oct);
                }
                Variant::Steep => {
                    assert!(ph.truth.amplitude_scale > 1.0);
                    assert!(crate::dpm::crossing_fraction(&ph.truth.curves).unwrap() == 0.0);
                }
                Variant::Base => unreachable!(),
            }
        }
    }

    #[test]
    fn steep_infeasible_is_error() {
        let spec = PhantomSpec {
            variant: Variant::Steep,
            amplitude: 0.6,
            layer_depths: [-0.3, 0.0, 0.3],
            ..small()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_sizes(5).unwrap(), (3, 1, 1));
        assert_eq!(split_sizes(3).unwrap(), (1, 1, 1));
        assert_eq!(split_sizes(10).unwrap(), (6, 2, 2));
        assert!(split_sizes(2).is_err());
        assert_eq!(subject_id(7), "phantom_007");
    }
}
