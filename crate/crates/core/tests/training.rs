use dpm_core::dataset::{Dataset, Subject};
use dpm_core::dpm::crossing_fraction;
use dpm_core::objective::CmmTable;
use dpm_core::optim::{
    fit_dpm_only, infer_with, train, Checkpoint, FitConfig, Pipeline, TrainConfig, Trainer,
};
use dpm_core::phantom::PhantomSpec;
use dpm_core::predictors::InitMode;
use dpm_core::Tensor;

fn small_spec() -> PhantomSpec {
    PhantomSpec {
        depth: 12,
        height: 64,
        width: 32,
        ..Default::default()
    }
}

fn small_dataset() -> Dataset {
    Dataset::phantom(5, &small_spec()).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 1,
        channels: vec![4, 8],
        ..Default::default()
    }
}

fn trainer_for(data: &Dataset, cfg: TrainConfig) -> Trainer {
    let (h, w) = data.extents().unwrap();
    let ids: Vec<String> = data.train.iter().map(|s| s.id.clone()).collect();
    Trainer::new(cfg, h, w, &ids).unwrap()
}

fn block_means(trace: &[f64], block: usize) -> Vec<f64> {
    trace.chunks(block).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[test]
fn overfitting_four_slices_lowers_the_loss() {
    let data = small_dataset();
    for pipeline in [Pipeline::CnnDpm, Pipeline::CnnOnly] {
        let mut t = trainer_for(&data, TrainConfig { pipeline, ..config() });
        t.warm_start_cmm(&data.train).unwrap();
        let s = &data.train[0];
        let trace: Vec<f64> = (0..50).map(|_| t.step(s, 0..4, 3e-3).unwrap()).collect();
        let means = block_means(&trace, 10);
        println!("{pipeline}: {means:?}");
        for pair in means.windows(2) {
            assert!(pair[1] < pair[0], "{pipeline}: block means {means:?}");
        }
    }
}

#[test]
fn a_step_only_moves_cmm_entries_of_its_subject() {
    let data = small_dataset();
    let mut t = trainer_for(&data, config());
    let before = t.cmm.clone();
    t.step(&data.train[0], 0..2, 1e-2).unwrap();
    for id in before.ids() {
        let moved = before.get(id).unwrap() != t.cmm.get(id).unwrap();
        assert_eq!(moved, id.starts_with(&format!("{}:", data.train[0].id)), "{id}");
    }
}

#[test]
fn without_cmm_the_table_is_empty_and_training_still_runs() {
    let data = small_dataset();
    let mut t = trainer_for(&data, TrainConfig { cmm: false, ..config() });
    assert!(t.cmm.is_empty());
    assert!(t.step(&data.train[0], 0..2, 1e-3).unwrap().is_finite());
}

#[test]
fn lambda_zero_ignores_the_outer_band() {
    let data = small_dataset();
    let t = trainer_for(&data, TrainConfig { lambda: 0.0, ..config() });
    let s = &data.train[0];
    let mut changed: Subject = s.clone();
    changed.gt.b3 = s.gt.b3.map(|v| 1.0 - v).unwrap();
    assert_eq!(t.loss(s, 0..3).unwrap(), t.loss(&changed, 0..3).unwrap());
    let t = trainer_for(&data, config());
    assert_ne!(t.loss(s, 0..3).unwrap(), t.loss(&changed, 0..3).unwrap());
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let data = small_dataset();
    let cfg = TrainConfig { epochs: 0, ..config() };
    let out = train(&data, &cfg, |_| {}).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, None);
    assert_eq!(out.best.net, trainer_for(&data, cfg).net);
}

#[test]
fn training_records_history_and_freezes_features() {
    let data = small_dataset();
    let cfg = TrainConfig { epochs: 2, ..config() };
    let mut seen = Vec::new();
    let out = train(&data, &cfg, |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![0, 1]);
    assert_eq!(out.history.len(), 2);
    assert!(out.history.iter().all(|r| r.val_ssim_b2.is_some() && r.train_loss.is_finite()));
    assert_eq!(out.feature_checksum.0, out.feature_checksum.1);
    let again = train(&data, &cfg, |_| {}).unwrap();
    assert_eq!(out.best.net, again.best.net);
}

#[test]
fn checkpoint_roundtrip_preserves_weights_cmm_and_predictions() {
    let data = small_dataset();
    let mut t = trainer_for(&data, config());
    t.warm_start_cmm(&data.train).unwrap();
    t.step(&data.train[1], 0..3, 1e-3).unwrap();
    let ck = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    // TSR payloads are f32: the first roundtrip rounds, later ones are exact
    for ((name, a), (_, b)) in ck.net.params().iter().zip(back.net.params().iter()) {
        assert_eq!(a.cast::<f32>().cast::<f64>(), *b, "{name}");
    }
    assert_eq!(back.step, 1);
    for id in ck.cmm.ids() {
        let (a, b) = (ck.cmm.get(id).unwrap(), back.cmm.get(id).unwrap());
        assert_eq!(((a.0 as f32) as f64, (a.1 as f32) as f64), b);
    }
    let dir2 = tempfile::tempdir().unwrap();
    back.save(dir2.path()).unwrap();
    let again = Checkpoint::load(dir2.path()).unwrap();
    assert_eq!(again.net, back.net);
    assert_eq!(again.cmm, back.cmm);

    let vol = &data.test[0].oct;
    let a = ck.infer(vol, 32).unwrap();
    let b = back.infer(vol, 32).unwrap();
    assert!(a.pm.b2.mean_abs_diff(&b.pm.b2).unwrap() < 1e-4);
    assert!(a.curves.unwrap().mean_abs_diff(&b.curves.unwrap()).unwrap() < 1e-5);
}

#[test]
fn parallel_and_serial_inference_agree_exactly() {
    let data = small_dataset();
    for pipeline in [Pipeline::CnnDpm, Pipeline::CnnOnly] {
        let t = trainer_for(&data, TrainConfig { pipeline, ..config() });
        let vol = &data.test[0].oct;
        let par = infer_with(&t.net, vol, 64, true).unwrap();
        let ser = infer_with(&t.net, vol, 64, false).unwrap();
        assert_eq!(par.raw, ser.raw);
        assert_eq!(par.pm, ser.pm);
        assert_eq!(par.curves, ser.curves);
        for band in [&par.pm.b2, &par.pm.b3] {
            let (lo, hi) = band.min_max();
            assert!(lo == 0.0 && (hi - 1.0).abs() < 1e-6, "{lo} {hi}");
        }
    }
}

#[test]
fn inference_rejects_foreign_extents() {
    let data = small_dataset();
    let t = trainer_for(&data, config());
    let wrong = Tensor::<f32>::zeros(&[2, 64, 40]).unwrap();
    assert!(t.infer(&wrong).is_err());
}

#[test]
fn cmm_table_has_two_entries_per_training_subject() {
    let data = small_dataset();
    let t = trainer_for(&data, config());
    assert_eq!(t.cmm.len(), 2 * data.train.len());
    let id = CmmTable::entry_id(&data.train[0].id, dpm_core::dpm::Band::B2);
    assert_eq!(t.cmm.get(&id).unwrap(), (0.0, 1.0));
}

#[test]
fn free_fit_without_steps_returns_the_initial_curves() {
    let s = &small_dataset().test[0];
    let cfg = FitConfig {
        steps: 0,
        init: InitMode::Equispaced,
        ..Default::default()
    };
    let fit = fit_dpm_only(&s.oct, &s.gt.b2, &s.gt.b3, &cfg).unwrap();
    let w = s.oct.dims()[2];
    for (i, &v) in fit.curves.data().iter().enumerate() {
        let want = [-0.5, 0.0, 0.5][(i / w) % 3];
        assert!((v - want).abs() < 1e-6);
    }
}

#[test]
fn free_fit_is_deterministic_and_monotone_fit_never_crosses() {
    let s = &small_dataset().test[0];
    let cfg = FitConfig {
        steps: 20,
        lr: 1e-2,
        ..Default::default()
    };
    let a = fit_dpm_only(&s.oct, &s.gt.b2, &s.gt.b3, &cfg).unwrap();
    let b = fit_dpm_only(&s.oct, &s.gt.b2, &s.gt.b3, &cfg).unwrap();
    assert_eq!(a.curves, b.curves);
    assert_eq!(a.traces.len(), s.oct.dims()[0]);
    assert!(a.traces.iter().all(|t| t.len() == 20));
    assert!(crossing_fraction(&a.curves).unwrap() > 0.0);
    let m = fit_dpm_only(&s.oct, &s.gt.b2, &s.gt.b3, &FitConfig { monotone: true, ..cfg }).unwrap();
    assert_eq!(crossing_fraction(&m.curves).unwrap(), 0.0);
}

#[test]
fn free_fit_descends_from_equispaced_start() {
    let s = &small_dataset().test[0];
    let cfg = FitConfig {
        steps: 60,
        lr: 1e-2,
        init: InitMode::Equispaced,
        monotone: true,
        ..Default::default()
    };
    let fit = fit_dpm_only(&s.oct, &s.gt.b2, &s.gt.b3, &cfg).unwrap();
    for trace in &fit.traces {
        assert!(trace.last().unwrap() < &trace[0]);
    }
}

#[test]
fn free_fit_started_at_the_truth_stays_there() {
    // intensity ramps across columns only, so both bands already span [0, 1]
    // and the equispaced start reproduces the targets exactly
    let (d, h, w) = (2, 32, 16);
    let vol = Tensor::<f32>::from_fn(&[d, h, w], |i| (i % w) as f32 / (w - 1) as f32).unwrap();
    let target = Tensor::<f32>::from_fn(&[d, w], |i| (i % w) as f32 / (w - 1) as f32).unwrap();
    let cfg = FitConfig {
        steps: 25,
        lr: 1e-2,
        init: InitMode::Equispaced,
        ..Default::default()
    };
    let fit = fit_dpm_only(&vol, &target, &target, &cfg).unwrap();
    for trace in &fit.traces {
        assert!(trace.iter().all(|&l| l < 1e-6), "{trace:?}");
    }
    for (i, &v) in fit.curves.data().iter().enumerate() {
        let want = [-0.5, 0.0, 0.5][(i / w) % 3];
        assert!((v - want).abs() < 1e-6);
    }
}
