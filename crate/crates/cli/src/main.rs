mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dpm_core::dataset::Dataset;
use dpm_core::dpm::{crossing_fraction, project_volume, Band, BandPair, PoolMode, ProjectionMap, DEFAULT_SAMPLES};
use dpm_core::gradsuite::{self, Suite};
use dpm_core::io::{load_volume, read_tsr, write_pgm, write_tsr};
use dpm_core::objective::{aggregate, report_jsonl, MetricRecord};
use dpm_core::optim::{self, Checkpoint, FitConfig, Pipeline, TrainConfig};
use dpm_core::phantom::{export_dataset, PhantomSpec};
use dpm_core::predictors::InitMode;
use dpm_core::{Error, Tensor};

use settings::{resolve, Overrides, Run, UsageError};

#[derive(Parser)]
#[command(name = "dpm", version, about = "Projection maps from OCT B-scans via differentiable layer curves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired OCT/OCTA dataset.
    GenPhantom(GenPhantomArgs),
    /// Train the CNN+DPM or CNN-only pipeline.
    Train(TrainArgs),
    /// Fit free layer coordinates per slice on every test volume.
    FitDpm(FitArgs),
    /// Project a volume between given curves.
    Project(ProjectArgs),
    /// Apply curves inferred on OCT to the paired OCTA volume.
    Transfer(TransferArgs),
    /// PSNR/SSIM of predicted maps against ground truth.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file with settings; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenPhantomArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `stress` adds lesion, steep and low-quality variants of each test subject.
    #[arg(long)]
    preset: Option<Preset>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Preset {
    #[default]
    Base,
    Stress,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct GenPhantomSettings {
    out: PathBuf,
    subjects: usize,
    seed: u64,
    preset: Preset,
    phantom: PhantomSpec,
}

impl Default for GenPhantomSettings {
    fn default() -> Self {
        Self {
            out: PathBuf::from("phantom"),
            subjects: 5,
            seed: 0,
            preset: Preset::Base,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_pipeline)]
    pipeline: Option<Pipeline>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Samples between curves.
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_cmm: bool,
    #[arg(long)]
    monotone: bool,
}

fn parse_pipeline(s: &str) -> std::result::Result<Pipeline, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct TrainSettings {
    data: PathBuf,
    out: PathBuf,
    #[serde(flatten)]
    train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            data: PathBuf::from("phantom"),
            out: PathBuf::from("run"),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "M")]
    m: Option<usize>,
    /// `random` (default) or `equispaced` initial curves.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    monotone: bool,
    #[arg(long)]
    no_cmm: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct FitSettings {
    data: PathBuf,
    out: PathBuf,
    #[serde(flatten)]
    fit: FitConfig,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            data: PathBuf::from("phantom"),
            out: PathBuf::from("fit"),
            fit: FitConfig::default(),
        }
    }
}

#[derive(Args)]
struct ProjectArgs {
    #[command(flatten)]
    common: Common,
    /// Volume directory (`meta.json` + slices).
    #[arg(long)]
    volume: Option<PathBuf>,
    /// `[D, K, W]` curves TSR.
    #[arg(long)]
    curves: Option<PathBuf>,
    #[arg(long, value_parser = parse_band)]
    band: Option<Band>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<PoolMode>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_band(s: &str) -> std::result::Result<Band, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<PoolMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct ProjectSettings {
    volume: Option<PathBuf>,
    curves: Option<PathBuf>,
    band: Band,
    mode: PoolMode,
    samples: usize,
    out: PathBuf,
}

impl Default for ProjectSettings {
    fn default() -> Self {
        Self {
            volume: None,
            curves: None,
            band: Band::B2,
            mode: PoolMode::Mean,
            samples: DEFAULT_SAMPLES,
            out: PathBuf::from("projection"),
        }
    }
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    oct_checkpoint: Option<PathBuf>,
    #[arg(long)]
    oct_volume: Option<PathBuf>,
    #[arg(long)]
    octa_volume: Option<PathBuf>,
    /// Directory with `octa_gt_pm_b{2,3}.tsr`; defaults to the OCTA volume's parent.
    #[arg(long)]
    octa_gt: Option<PathBuf>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct TransferSettings {
    oct_checkpoint: Option<PathBuf>,
    oct_volume: Option<PathBuf>,
    octa_volume: Option<PathBuf>,
    octa_gt: Option<PathBuf>,
    samples: usize,
    out: PathBuf,
}

impl Default for TransferSettings {
    fn default() -> Self {
        Self {
            oct_checkpoint: None,
            oct_volume: None,
            octa_volume: None,
            octa_gt: None,
            samples: DEFAULT_SAMPLES,
            out: PathBuf::from("transfer"),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of predicted maps, or of one subdirectory per volume.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth directory with the same layout as `--pred`.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// File stem of predicted maps: `<stem>_b2.tsr`.
    #[arg(long)]
    pred_stem: Option<String>,
    #[arg(long)]
    gt_stem: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct EvalSettings {
    pred: Option<PathBuf>,
    gt: Option<PathBuf>,
    pred_stem: String,
    gt_stem: String,
    out: PathBuf,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            pred: None,
            gt: None,
            pred_stem: "pm".into(),
            gt_stem: "gt_pm".into(),
            out: PathBuf::from("eval"),
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    which: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds per operation.
    #[arg(long)]
    seeds: Option<usize>,
    /// Optional directory for `gradcheck.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct GradcheckSettings {
    which: String,
    seed: u64,
    seeds: usize,
    out: Option<PathBuf>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            which: "all".into(),
            seed: 0,
            seeds: 10,
            out: None,
        }
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    match v {
        Some(p) => Ok(p),
        None => bail!(UsageError(format!("missing required --{flag}"))),
    }
}

/// Writes normalized PGM/TSR and raw TSR for one map; returns the paths.
fn write_map(dir: &Path, stem: &str, raw: &Tensor) -> Result<Vec<PathBuf>> {
    let norm = ProjectionMap(raw.clone()).normalized().0;
    let paths = vec![
        dir.join(format!("{stem}.pgm")),
        dir.join(format!("{stem}.tsr")),
        dir.join(format!("{stem}_raw.tsr")),
    ];
    write_pgm(&norm, &paths[0], 65535)?;
    write_tsr(&norm, &paths[1])?;
    write_tsr(raw, &paths[2])?;
    Ok(paths)
}

fn write_pair(dir: &Path, stem: &str, raw: &BandPair) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for band in Band::ALL {
        out.extend(write_map(dir, &format!("{stem}_{band}"), raw.get(band))?);
    }
    Ok(out)
}

fn print_metrics(title: &str, rows: &[(String, optim::BandMetrics)]) {
    println!("{title}");
    println!("{:<24} {:>10} {:>8} {:>10} {:>8}", "volume", "B2 PSNR", "B2 SSIM", "B3 PSNR", "B3 SSIM");
    for (name, m) in rows {
        println!(
            "{:<24} {:>10.4} {:>8.4} {:>10.4} {:>8.4}",
            name, m.psnr_b2, m.ssim_b2, m.psnr_b3, m.ssim_b3
        );
    }
}

fn gen_phantom(a: GenPhantomArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("out", a.out).set("subjects", a.subjects).set("seed", a.seed).set("preset", a.preset);
    let s: GenPhantomSettings = resolve(a.common.config.as_deref(), o)?;
    let run = Run::start("gen-phantom");
    let base = PhantomSpec {
        seed: s.seed,
        ..s.phantom.clone()
    };
    let index = export_dataset(&s.out, s.subjects, &base, s.preset == Preset::Stress)?;
    println!(
        "wrote {} subjects to {} (train {}, val {}, test {}, stress {})",
        s.subjects,
        s.out.display(),
        index.train.len(),
        index.val.len(),
        index.test.len(),
        index.stress.len()
    );
    run.finish(&s.out, &s, Some(s.seed), vec![s.out.join("dataset.json")])?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("data", a.data)
        .set("out", a.out)
        .set("pipeline", a.pipeline)
        .set("epochs", a.epochs)
        .set("lr", a.lr)
        .set("lambda", a.lambda)
        .set("batch_size", a.batch)
        .set("samples", a.m)
        .set("seed", a.seed)
        .flag("cmm", a.no_cmm, false)
        .flag("monotone", a.monotone, true);
    let s: TrainSettings = resolve(a.common.config.as_deref(), o)?;
    let run = Run::start("train");
    let data = Dataset::load(&s.data).with_context(|| format!("loading dataset {}", s.data.display()))?;
    let cfg = &s.train;
    println!(
        "training {} on {} subjects for {} epochs (lr {}, batch {}, lambda {}, M {}, cmm {})",
        cfg.pipeline,
        data.train.len(),
        cfg.epochs,
        cfg.lr,
        cfg.batch_size,
        cfg.lambda,
        cfg.samples,
        cfg.cmm
    );
    let outcome = optim::train(&data, cfg, |r| {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.5}  val B2 {} / {}  B3 {} / {}",
            r.epoch,
            r.lr,
            r.train_loss,
            fmt(r.val_psnr_b2),
            fmt(r.val_ssim_b2),
            fmt(r.val_psnr_b3),
            fmt(r.val_ssim_b3)
        );
    })?;
    let ckpt_dir = s.out.join("checkpoint");
    outcome.best.save(&ckpt_dir)?;
    let history = s.out.join("history.jsonl");
    optim::write_history(&history, &outcome.history)?;
    let (before, after) = &outcome.feature_checksum;
    if before != after {
        bail!("feature extractor weights changed during training");
    }
    match outcome.best_epoch {
        Some(e) => println!("best checkpoint: epoch {e}"),
        None => println!("best checkpoint: initialization"),
    }
    if !data.val.is_empty() {
        let rows = data
            .val
            .iter()
            .map(|v| {
                let pm = outcome.best.infer(&v.oct, cfg.samples)?.pm;
                Ok((v.id.clone(), optim::BandMetrics::of_pairs(&[(pm, v.gt.clone())])?))
            })
            .collect::<Result<Vec<_>>>()?;
        print_metrics("validation (best checkpoint)", &rows);
    }
    run.finish(&s.out, &s, Some(cfg.seed), vec![ckpt_dir, history])?;
    Ok(())
}

fn fit_dpm(a: FitArgs) -> Result<()> {
    let init = a
        .init
        .map(|s| match s.as_str() {
            "random" => Ok(InitMode::Random),
            "equispaced" => Ok(InitMode::Equispaced),
            other => Err(UsageError(format!("unknown --init {other:?}"))),
        })
        .transpose()?;
    let mut o = Overrides::default();
    o.set("data", a.data)
        .set("out", a.out)
        .set("steps", a.steps)
        .set("seed", a.seed)
        .set("lr", a.lr)
        .set("samples", a.m)
        .set("init", init)
        .flag("monotone", a.monotone, true)
        .flag("cmm", a.no_cmm, false);
    let s: FitSettings = resolve(a.common.config.as_deref(), o)?;
    let run = Run::start("fit-dpm");
    let data = Dataset::load(&s.data).with_context(|| format!("loading dataset {}", s.data.display()))?;
    if data.test.is_empty() {
        bail!("dataset {} has no test subjects", s.data.display());
    }
    fs::create_dir_all(&s.out)?;
    let mut outputs = Vec::new();
    let mut report = Vec::new();
    let mut rows = Vec::new();
    for subj in &data.test {
        let fit = optim::fit_dpm_only(&subj.oct, &subj.gt.b2, &subj.gt.b3, &s.fit)?;
        let dir = s.out.join(&subj.id);
        fs::create_dir_all(&dir)?;
        let curves_path = dir.join("curves.tsr");
        write_tsr(&fit.curves, &curves_path)?;
        outputs.push(curves_path);
        let raw = optim::project_bands(&subj.oct, &fit.curves, s.fit.samples)?;
        outputs.extend(write_pair(&dir, "pm", &raw)?);
        let metrics = optim::BandMetrics::of_pairs(&[(raw.normalized(), subj.gt.clone())])?;
        let crossing = crossing_fraction(&fit.curves)?;
        let final_loss = fit.traces.iter().filter_map(|t| t.last()).sum::<f64>() / fit.traces.len() as f64;
        report.push(serde_json::json!({
            "volume": subj.id,
            "crossing_fraction": crossing,
            "final_loss": final_loss,
            "ssim_b2": metrics.ssim_b2,
            "ssim_b3": metrics.ssim_b3,
            "psnr_b2": metrics.psnr_b2,
            "psnr_b3": metrics.psnr_b3,
        }));
        println!("{}: crossing fraction {crossing:.4}", subj.id);
        rows.push((subj.id.clone(), metrics));
    }
    print_metrics("free-coordinate fit", &rows);
    let report_path = s.out.join("report.json");
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?)?;
    outputs.push(report_path);
    run.finish(&s.out, &s, Some(s.fit.seed), outputs)?;
    Ok(())
}

fn project(a: ProjectArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("volume", a.volume)
        .set("curves", a.curves)
        .set("band", a.band)
        .set("mode", a.mode)
        .set("samples", a.m)
        .set("out", a.out);
    let s: ProjectSettings = resolve(a.common.config.as_deref(), o)?;
    let run = Run::start("project");
    let (_, vol) = load_volume(required(&s.volume, "volume")?)?;
    let curves = read_tsr(required(&s.curves, "curves")?)?;
    let pm = project_volume(&vol, &curves, s.band.layers(), s.samples, s.mode)?;
    fs::create_dir_all(&s.out)?;
    let outputs = write_map(&s.out, &format!("pm_{}", s.band), &pm.0)?;
    println!("projected {} ({} pooling) to {}", s.band, s.mode, s.out.display());
    run.finish(&s.out, &s, None, outputs)?;
    Ok(())
}

/// Accepts a training output directory as well as the checkpoint itself.
fn checkpoint_dir(p: &Path) -> PathBuf {
    let nested = p.join("checkpoint");
    if nested.join("manifest.json").exists() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn transfer(a: TransferArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("oct_checkpoint", a.oct_checkpoint)
        .set("oct_volume", a.oct_volume)
        .set("octa_volume", a.octa_volume)
        .set("octa_gt", a.octa_gt)
        .set("samples", a.m)
        .set("out", a.out);
    let s: TransferSettings = resolve(a.common.config.as_deref(), o)?;
    let run = Run::start("transfer");
    let ckpt = Checkpoint::load(checkpoint_dir(required(&s.oct_checkpoint, "oct-checkpoint")?))?;
    let (_, oct) = load_volume(required(&s.oct_volume, "oct-volume")?)?;
    let octa_dir = required(&s.octa_volume, "octa-volume")?;
    let (_, octa) = load_volume(octa_dir)?;
    if oct.dims() != octa.dims() {
        return Err(Error::Shape(format!(
            "OCT volume {:?} and OCTA volume {:?} differ",
            oct.dims(),
            octa.dims()
        ))
        .into());
    }
    let inference = ckpt.infer(&oct, s.samples)?;
    let Some(curves) = inference.curves else {
        bail!("checkpoint has no curve head; transfer needs the CNN+DPM pipeline");
    };
    let raw = optim::project_bands(&octa, &curves, s.samples)?;
    fs::create_dir_all(&s.out)?;
    let curves_path = s.out.join("curves.tsr");
    write_tsr(&curves, &curves_path)?;
    let mut outputs = vec![curves_path];
    outputs.extend(write_pair(&s.out, "octa_pm", &raw)?);
    let gt_dir = s
        .octa_gt
        .clone()
        .or_else(|| octa_dir.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let gt_paths = Band::ALL.map(|b| gt_dir.join(format!("octa_gt_pm_{b}.tsr")));
    let mut summary = serde_json::json!({ "crossing_fraction": crossing_fraction(&curves)? });
    if gt_paths.iter().all(|p| p.exists()) {
        let gt = BandPair {
            b2: read_tsr(&gt_paths[0])?,
            b3: read_tsr(&gt_paths[1])?,
        };
        let m = optim::BandMetrics::of_pairs(&[(raw.normalized(), gt)])?;
        summary["ssim_b2"] = m.ssim_b2.into();
        summary["ssim_b3"] = m.ssim_b3.into();
        summary["psnr_b2"] = json_f64(m.psnr_b2);
        summary["psnr_b3"] = json_f64(m.psnr_b3);
        print_metrics("transfer to OCTA", &[("octa".to_string(), m)]);
    } else {
        println!("no OCTA ground truth found in {}; metrics skipped", gt_dir.display());
    }
    let summary_path = s.out.join("transfer.json");
    fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)?;
    outputs.push(summary_path);
    run.finish(&s.out, &s, None, outputs)?;
    Ok(())
}

/// PSNR is +inf for identical maps, which JSON cannot hold.
fn json_f64(v: f64) -> serde_json::Value {
    if v.is_finite() {
        v.into()
    } else {
        "inf".into()
    }
}

/// Maps of one volume found under `dir` with file names `<stem>_b2.tsr` etc.
fn find_maps(dir: &Path, stem: &str) -> Result<Vec<(Band, Tensor)>> {
    let mut out = Vec::new();
    for band in Band::ALL {
        let p = dir.join(format!("{stem}_{band}.tsr"));
        if p.exists() {
            out.push((band, read_tsr(&p)?));
        }
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("pred", a.pred)
        .set("gt", a.gt)
        .set("pred_stem", a.pred_stem)
        .set("gt_stem", a.gt_stem)
        .set("out", a.out);
    let s: EvalSettings = resolve(a.common.config.as_deref(), o)?;
    let run = Run::start("eval");
    let pred_root = required(&s.pred, "pred")?;
    let gt_root = required(&s.gt, "gt")?;
    let mut volumes: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    if !find_maps(pred_root, &s.pred_stem)?.is_empty() {
        let name = pred_root.file_name().map_or("volume".into(), |n| n.to_string_lossy().into_owned());
        volumes.push((name, pred_root.to_path_buf(), gt_root.to_path_buf()));
    } else {
        let mut entries: Vec<_> = fs::read_dir(pred_root)
            .with_context(|| format!("reading {}", pred_root.display()))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        entries.sort();
        for name in entries {
            volumes.push((name.clone(), pred_root.join(&name), gt_root.join(&name)));
        }
    }
    let mut records = Vec::new();
    for (name, pdir, gdir) in &volumes {
        let pred = find_maps(pdir, &s.pred_stem)?;
        let gt = find_maps(gdir, &s.gt_stem)?;
        for (band, p) in &pred {
            let Some((_, g)) = gt.iter().find(|(b, _)| b == band) else {
                continue;
            };
            if p.dims() != g.dims() {
                return Err(Error::Shape(format!(
                    "{name} {band}: prediction {:?} vs ground truth {:?}",
                    p.dims(),
                    g.dims()
                ))
                .into());
            }
            records.push(MetricRecord::compute(name, band.name(), p, g)?);
        }
    }
    if records.is_empty() {
        bail!(
            "no matching {}_b*.tsr / {}_b*.tsr pairs under {} and {}",
            s.pred_stem,
            s.gt_stem,
            pred_root.display(),
            gt_root.display()
        );
    }
    fs::create_dir_all(&s.out)?;
    let path = s.out.join("metrics.jsonl");
    fs::write(&path, report_jsonl(&records)?)?;
    println!("{:<24} {:<5} {:>10} {:>8}", "volume", "band", "PSNR", "SSIM");
    for r in &records {
        println!("{:<24} {:<5} {:>10.4} {:>8.4}", r.volume, r.band, r.psnr, r.ssim);
    }
    for agg in aggregate(&records) {
        println!("{:<24} {:<5} {:>10.4} {:>8.4}", format!("mean of {}", agg.count), agg.band, agg.psnr_mean, agg.ssim_mean);
    }
    run.finish(&s.out, &s, None, vec![path])?;
    Ok(())
}

/// Returns whether every check passed.
fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let mut o = Overrides::default();
    o.set("which", a.which).set("seed", a.seed).set("seeds", a.seeds).set("out", a.out);
    let s: GradcheckSettings = resolve(a.common.config.as_deref(), o)?;
    let which: Suite = s.which.parse().map_err(|e: Error| UsageError(e.to_string()))?;
    let run = Run::start("gradcheck");
    let results = gradsuite::run(which, s.seed, s.seeds)?;
    println!(
        "{:<10} {:<24} {:>8} {:>12} {:>9} {:>9}  result",
        "suite", "op", "checked", "max rel err", "boundary", "failures"
    );
    for r in &results {
        println!(
            "{:<10} {:<24} {:>8} {:>12.3e} {:>9} {:>9}  {}",
            r.suite.to_string(),
            r.op,
            r.checked,
            r.max_rel_err,
            r.boundary,
            r.failures,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let passed = results.iter().all(|r| r.passed());
    let boundary: usize = results.iter().map(|r| r.boundary).sum();
    println!(
        "{} operations, {} seeds each, {boundary} boundary elements excluded: {}",
        results.len(),
        s.seeds,
        if passed { "all passed" } else { "FAILED" }
    );
    if let Some(dir) = &s.out {
        fs::create_dir_all(dir)?;
        let path = dir.join("gradcheck.json");
        fs::write(&path, serde_json::to_vec_pretty(&results)?)?;
        run.finish(dir, &s, Some(s.seed), vec![path])?;
    }
    Ok(passed)
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenPhantom(a) => gen_phantom(a)?,
        Command::Train(a) => train(a)?,
        Command::FitDpm(a) => fit_dpm(a)?,
        Command::Project(a) => project(a)?,
        Command::Transfer(a) => transfer(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
