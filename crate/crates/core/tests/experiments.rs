use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use jscc_core::data::{encode_png, synthetic, Dataset};
use jscc_core::experiments::*;
use jscc_core::model::{Model, ModelKind, ModelSpec};
use jscc_core::training::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};

const SIDE: usize = 16;

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        ..TrainConfig::desk()
    }
}

fn fit(kind: ModelKind, cfg: TrainConfig, train_set: &Dataset, eval_set: &Dataset) -> Checkpoint {
    let mut model = Model::build(ModelSpec::with_default_plan(kind, SIDE), cfg.seed).unwrap();
    let history = train(&mut model, train_set, Some(eval_set), &cfg, 0).unwrap();
    Checkpoint {
        model,
        train: cfg,
        epoch: cfg.epochs,
        history,
    }
}

struct Trained {
    eval: Dataset,
    ae: Checkpoint,
    vae: Checkpoint,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let (train_set, eval) = synthetic(160, SIDE, 4).split(128);
        let ae = fit(ModelKind::Ae, config(8), &train_set, &eval);
        let vae = fit(ModelKind::Vae, config(8), &train_set, &eval);
        Trained { eval, ae, vae }
    })
}

#[test]
fn sweep_cardinality_and_order() {
    let t = trained();
    let snrs = [-5.0, 0.0, 5.0, 10.0, 20.0];
    let records = snr_sweep(&[t.ae.clone(), t.vae.clone()], &snrs, &t.eval, &[0, 1, 2], 16).unwrap();
    assert_eq!(records.len(), 30);
    assert_eq!(records[0].model, "ae");
    assert_eq!(records[29].model, "vae");
    assert_eq!((records[4].test_snr_db, records[4].seed), (0.0, 1));
    for r in &records {
        assert!((-1.0..=1.0).contains(&r.ssim) && r.psnr_db <= 100.0);
    }
    let csv = sweep_csv(&records);
    assert_eq!(csv.lines().count(), 31);
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
}

#[test]
fn sweep_is_monotone_and_matches_training_eval() {
    let t = trained();
    let records = snr_sweep(std::slice::from_ref(&t.ae), &[-5.0, 10.0, 20.0], &t.eval, &[0, 1, 2], 16).unwrap();
    let mean = |snr: f64| {
        let v: Vec<f64> = records.iter().filter(|r| r.test_snr_db == snr).map(|r| r.psnr_db).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(20.0) >= mean(-5.0), "{records:?}");
    let last = t.ae.history.last().unwrap().eval_psnr_db.unwrap();
    assert!((mean(10.0) - last).abs() <= 0.5, "sweep {} vs history {last}", mean(10.0));
}

#[test]
fn sweep_rejects_mismatched_data() {
    let t = trained();
    let other = synthetic(4, 32, 0);
    assert!(snr_sweep(std::slice::from_ref(&t.ae), &[0.0], &other, &[0], 4).is_err());
}

#[test]
fn self_comparison_is_all_ties() {
    let t = trained();
    let report = compare_robustness(&t.ae, &t.ae, 10.0, &[-5.0, 0.0], &t.eval, &[0, 1, 2], 16).unwrap();
    assert_eq!(report.cells.len(), 6);
    assert_eq!(report.psnr_fraction, 1.0);
    assert_eq!(report.ssim_fraction, 1.0);
    assert!(report.table().contains("# vae >= ae: psnr 1 ssim 1"));
}

#[test]
fn comparison_is_reported_for_a_trained_pair() {
    let t = trained();
    let report = compare_robustness(&t.ae, &t.vae, 10.0, &[-5.0, 0.0], &t.eval, &[0, 1, 2], 16).unwrap();
    assert_eq!(report.table().lines().count(), 8);
    assert!((0.0..=1.0).contains(&report.ssim_fraction));
}

#[test]
fn comparison_validates_inputs() {
    let t = trained();
    assert!(compare_robustness(&t.ae, &t.vae, 10.0, &[], &t.eval, &[0], 16).is_err());
    assert!(compare_robustness(&t.ae, &t.vae, 5.0, &[0.0], &t.eval, &[0], 16).is_err());
    let mut other = t.vae.clone();
    other.train.lr_initial = 5e-4;
    let err = compare_robustness(&t.ae, &other, 10.0, &[0.0], &t.eval, &[0], 16).unwrap_err();
    assert!(err.to_string().contains("different configurations"), "{err}");
    // the KL weight only exists for the VAE and does not count as a mismatch
    let mut beta = t.vae.clone();
    beta.train.loss.beta_kl = 0.5;
    assert!(compare_robustness(&t.ae, &beta, 10.0, &[0.0], &t.eval, &[0], 16).is_ok());
}

#[test]
fn grid_layout_and_determinism() {
    let t = trained();
    let images: Vec<_> = (0..5).map(|i| t.eval.image(i)).collect();
    let models = [t.ae.clone(), t.vae.clone(), t.ae.clone(), t.vae.clone()];
    let grid = reconstruct_grid(&models, &images, 0.0, 7).unwrap();
    let cell = SIDE + GRID_GUTTER;
    assert_eq!(grid.shape(), &[3, 5 * cell - GRID_GUTTER, 5 * cell - GRID_GUTTER]);
    let again = reconstruct_grid(&models, &images, 0.0, 7).unwrap();
    assert_eq!(encode_png(&grid).unwrap(), encode_png(&again).unwrap());

    let single = reconstruct_grid(&[], &images[..1], 0.0, 0).unwrap();
    assert_eq!(single, images[0]);

    let wrong = synthetic(1, 32, 0).image(0);
    assert!(reconstruct_grid(&models, &[wrong], 0.0, 0).is_err());
}

#[test]
fn latent_histogram_outputs() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("hist.csv");
    let (csv, json) = latent_histogram_cmd(&t.ae, &t.eval, &out).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    let rows = text.lines().count() - 1;
    assert!(rows >= 1 && rows <= 64 * 64);
    let total: u64 = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total as usize, t.eval.len());
    let sidecar: HistogramSidecar = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert_eq!(sidecar.samples, t.eval.len());
    assert!(sidecar.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn duplicated_image_lands_in_one_bin() {
    let t = trained();
    let img = t.eval.image(0);
    let copies = Dataset::from_images(jscc_core::data::Source::Synthetic, &vec![img; 6]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv, _) = latent_histogram_cmd(&t.vae, &copies, &dir.path().join("h.csv")).unwrap();
    let text = fs::read_to_string(csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].ends_with(",6"));
}

const MINIMAL: &str = r#"{
    "dataset": {"source": "synthetic", "max_count": 12, "eval_count": 4, "synthetic_seed": 3},
    "model": {"kind": "vae", "input_shape": [3, 32, 32], "sampler": "convolutional", "k": 512},
    "train": {"epochs": 1, "batch_size": 4, "seed": 9},
    "eval": {"test_snrs": [0, 10], "seeds": [0, 1], "output_dir": "out", "grid_images": 2}
}"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let start = std::time::Instant::now();
    let first = run(&config).unwrap();
    assert!(start.elapsed().as_secs() < 60);
    let csv = fs::read(&first.sweep_csv).unwrap();
    let ckpt = fs::read(&first.checkpoint).unwrap();

    let names: Vec<&str> = first.index.artifacts.iter().map(|a| a.path.as_str()).collect();
    assert_eq!(
        names,
        ["model.ckpt", "history.json", "sweep.csv", "grid.png", "latent_hist.csv", "latent_hist.json"]
    );
    for a in &first.index.artifacts {
        let path = first.output_dir.join(&a.path);
        assert_eq!(sha256_file(&path).unwrap(), a.sha256);
        assert_eq!(fs::metadata(&path).unwrap().len(), a.bytes);
    }
    let index: RunIndex = serde_json::from_slice(&fs::read(first.output_dir.join("index.json")).unwrap()).unwrap();
    assert_eq!(index, first.index);
    assert_eq!(String::from_utf8(csv.clone()).unwrap().lines().count(), 1 + 2 * 2);

    let second = run(&config).unwrap();
    assert_eq!(fs::read(&second.sweep_csv).unwrap(), csv);
    assert_eq!(fs::read(&second.checkpoint).unwrap(), ckpt);
    assert_eq!(load_checkpoint(&second.checkpoint).unwrap().epoch, 1);
}

#[test]
fn failing_stage_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace(r#""source": "synthetic", "max_count": 12"#, r#""source": "cifar10", "paths": ["missing.bin"]"#);
    let err = run(&write_config(dir.path(), &text)).unwrap_err();
    assert!(err.to_string().contains("data"), "{err}");
    assert!(err.is_validation());
}

fn jscc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_jscc")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    assert_eq!(jscc(&[]).status.code(), Some(1));
    assert_eq!(jscc(&["--help"]).status.code(), Some(0));
    assert_eq!(jscc(&["sweep", "--bogus"]).status.code(), Some(1));

    let ok = jscc(&["gradcheck", "--op", "add", "--seeds", "3"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("add"));
    assert_eq!(jscc(&["gradcheck", "--op", "no_such_op"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"dataset": {"source": "synthetic", "max_count": 4}}"#).unwrap();
    let out = jscc(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model"));

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let data = dir.path().join("d.bin");
    jscc_core::data::write_cifar10(&data, &synthetic(2, 32, 0)).unwrap();
    let out = jscc(&["sweep", "--ckpt", garbage.to_str().unwrap(), "--snrs", "0", "--data", data.to_str().unwrap(), "--csv", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_train_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &MINIMAL.replace("\"vae\"", "\"ae\"").replace("\"convolutional\"", "\"none\""));
    let out_dir = dir.path().join("trained");
    let status = jscc(&["train", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    let ckpt = out_dir.join("model.ckpt");
    let ck = load_checkpoint(&ckpt).unwrap();

    let data = dir.path().join("eval.bin");
    jscc_core::data::write_cifar10(&data, &synthetic(3, 32, 1)).unwrap();
    let csv = dir.path().join("s.csv");
    let a = [ckpt.to_str().unwrap(), data.to_str().unwrap(), csv.to_str().unwrap()];
    let out = jscc(&["sweep", "--ckpt", a[0], "--snrs", "-5,0,5", "--data", a[1], "--csv", a[2], "--seeds", "0,1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 3 * 2);

    let copy = dir.path().join("copy.ckpt");
    save_checkpoint(&copy, &ck).unwrap();
    let out = jscc(&["compare", "--ae", a[0], "--vae", copy.to_str().unwrap(), "--snrs", "-5,0", "--data", a[1]]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("psnr 1 ssim 1"));
}
