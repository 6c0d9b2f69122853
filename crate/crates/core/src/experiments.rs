//! SNR sweeps, robustness comparisons, reconstruction grids, latent
//! histograms and the end-to-end `run` pipeline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use jscc_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::data::{self, compose_grid, encode_png, Dataset, Source};
use crate::error::{Error, Result};
use crate::metrics::latent_pca_histogram;
use crate::model::{Model, ModelSpec};
use crate::training::{evaluate, save_checkpoint, train, Checkpoint, EvalResult, TrainConfig};

pub const CSV_HEADER: &str = "model,loss,train_snr_db,test_snr_db,seed,psnr_db,ssim";
pub const GRID_GUTTER: usize = 2;

fn default_eval_count() -> usize {
    500
}
fn default_side() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: Source,
    /// Binary files (CIFAR-10, STL-10) or one directory (folder). Relative
    /// paths resolve against the config file's directory.
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    /// Total images to load; for `synthetic`, the number generated.
    pub max_count: Option<usize>,
    /// Images held out from the end of the set for evaluation.
    #[serde(default = "default_eval_count")]
    pub eval_count: usize,
    /// Image side for `synthetic`.
    #[serde(default = "default_side")]
    pub synthetic_side: usize,
    #[serde(default)]
    pub synthetic_seed: u64,
}

fn default_snrs() -> Vec<f64> {
    vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_grid_images() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_snrs")]
    pub test_snrs: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_grid_images")]
    pub grid_images: usize,
    /// Test SNR of the reconstruction grid; the training SNR when absent.
    pub grid_snr_db: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.test_snrs.is_empty() {
            return Err(Error::Config("eval.test_snrs must not be empty".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        for &snr in &self.eval.test_snrs {
            crate::channel::snr_to_sigma2(snr, self.train.power)?;
        }
        match self.dataset.source {
            Source::Synthetic => {
                if self.dataset.max_count.is_none() {
                    return Err(Error::Config("dataset.max_count is required for synthetic data".into()));
                }
            }
            Source::Folder if self.dataset.paths.len() != 1 => {
                return Err(Error::Config("a folder dataset takes exactly one path".into()))
            }
            Source::Stl10 if self.dataset.paths.len() != 1 => {
                return Err(Error::Config("an STL-10 dataset takes exactly one file".into()))
            }
            _ if self.dataset.paths.is_empty() => {
                return Err(Error::Config("dataset.paths must list at least one file".into()))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Loads the dataset described by `section`, resolving paths against `base`.
pub fn load_dataset(section: &DatasetSection, base: &Path) -> Result<Dataset> {
    let paths: Vec<PathBuf> = section.paths.iter().map(|p| base.join(p)).collect();
    for p in &paths {
        if !p.exists() {
            return Err(Error::Config(format!("dataset path {} does not exist", p.display())));
        }
    }
    let data = match section.source {
        Source::Cifar10 => data::load_cifar10(&paths, section.max_count)?,
        Source::Stl10 => data::load_stl10(&paths[0], section.max_count)?,
        Source::Folder => data::load_folder(&paths[0], section.max_count)?,
        Source::Synthetic => data::synthetic(
            section.max_count.unwrap_or(0),
            section.synthetic_side,
            section.synthetic_seed,
        ),
    };
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    Ok(data)
}

/// Splits off the last `eval_count` images (at most half the set).
pub fn train_eval_split(data: &Dataset, eval_count: usize) -> (Dataset, Dataset) {
    let eval = eval_count.min(data.len() / 2);
    data.split(data.len() - eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub model: String,
    pub loss: String,
    pub train_snr_db: f64,
    pub test_snr_db: f64,
    pub seed: u64,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl SweepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.model, self.loss, self.train_snr_db, self.test_snr_db, self.seed, self.psnr_db, self.ssim
        )
    }
}

pub fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn check_compatible(ckpt: &Checkpoint, data: &Dataset) -> Result<()> {
    if ckpt.model.spec().input_shape != data.shape() {
        return Err(Error::Config(format!(
            "checkpoint expects {:?} images, dataset holds {:?}",
            ckpt.model.spec().input_shape,
            data.shape()
        )));
    }
    Ok(())
}

/// Evaluates every `(checkpoint, test SNR, seed)` cell with fresh channel
/// noise. Records come out in that nesting order.
pub fn snr_sweep(
    checkpoints: &[Checkpoint],
    test_snrs: &[f64],
    data: &Dataset,
    seeds: &[u64],
    batch_size: usize,
) -> Result<Vec<SweepRecord>> {
    if data.is_empty() {
        return Err(Error::Config("sweep dataset is empty".into()));
    }
    let mut records = Vec::with_capacity(checkpoints.len() * test_snrs.len() * seeds.len());
    for ckpt in checkpoints {
        check_compatible(ckpt, data)?;
        let spec = ckpt.model.spec();
        for &snr in test_snrs {
            let channel = ChannelConfig::new(ckpt.train.power, snr, spec.k)?;
            for &seed in seeds {
                let r = evaluate(&ckpt.model, data, &channel, ckpt.train.eval_mode(), seed, batch_size)?;
                records.push(SweepRecord {
                    model: spec.kind.as_str().into(),
                    loss: ckpt.train.loss.reconstruction.as_str().into(),
                    train_snr_db: ckpt.train.train_snr_db,
                    test_snr_db: snr,
                    seed,
                    psnr_db: r.psnr_db,
                    ssim: r.ssim,
                });
            }
        }
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessCell {
    pub test_snr_db: f64,
    pub seed: u64,
    pub ae: EvalResult,
    pub vae: EvalResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub cells: Vec<RobustnessCell>,
    /// Fraction of cells where the VAE's PSNR is at least the AE's.
    pub psnr_fraction: f64,
    pub ssim_fraction: f64,
}

impl RobustnessReport {
    pub fn table(&self) -> String {
        let mut out = String::from("test_snr_db,seed,ae_psnr_db,vae_psnr_db,ae_ssim,vae_ssim\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.test_snr_db, c.seed, c.ae.psnr_db, c.vae.psnr_db, c.ae.ssim, c.vae.ssim
            );
        }
        let _ = writeln!(out, "# vae >= ae: psnr {} ssim {}", self.psnr_fraction, self.ssim_fraction);
        out
    }
}

fn comparable(cfg: &TrainConfig) -> TrainConfig {
    let mut c = *cfg;
    c.loss.beta_kl = 0.0;
    c
}

/// Head-to-head evaluation of an AE and a VAE trained under the same
/// configuration, at SNRs below the training SNR.
pub fn compare_robustness(
    ae: &Checkpoint,
    vae: &Checkpoint,
    train_snr_db: f64,
    low_snrs: &[f64],
    data: &Dataset,
    seeds: &[u64],
    batch_size: usize,
) -> Result<RobustnessReport> {
    if low_snrs.is_empty() {
        return Err(Error::Config("comparison needs at least one test SNR".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    for (name, c) in [("AE", ae), ("VAE", vae)] {
        if c.train.train_snr_db != train_snr_db {
            return Err(Error::Config(format!(
                "{name} checkpoint was trained at {} dB, not {train_snr_db} dB",
                c.train.train_snr_db
            )));
        }
        check_compatible(c, data)?;
    }
    if comparable(&ae.train) != comparable(&vae.train) {
        return Err(Error::Config(
            "checkpoints were trained with different configurations; comparison is invalid".into(),
        ));
    }
    let mut cells = Vec::new();
    for &snr in low_snrs {
        for &seed in seeds {
            let run = |c: &Checkpoint| -> Result<EvalResult> {
                let channel = ChannelConfig::new(c.train.power, snr, c.model.spec().k)?;
                evaluate(&c.model, data, &channel, c.train.eval_mode(), seed, batch_size)
            };
            cells.push(RobustnessCell {
                test_snr_db: snr,
                seed,
                ae: run(ae)?,
                vae: run(vae)?,
            });
        }
    }
    let n = cells.len() as f64;
    let psnr_fraction = cells.iter().filter(|c| c.vae.psnr_db >= c.ae.psnr_db).count() as f64 / n;
    let ssim_fraction = cells.iter().filter(|c| c.vae.ssim >= c.ae.ssim).count() as f64 / n;
    Ok(RobustnessReport {
        cells,
        psnr_fraction,
        ssim_fraction,
    })
}

/// One row per image: the original followed by each model's reconstruction
/// at `test_snr_db`.
pub fn reconstruct_grid(models: &[Checkpoint], images: &[Tensor<f32>], test_snr_db: f64, seed: u64) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(Error::Config("grid needs at least one image".into()));
    }
    let mut rows = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let mut row = vec![img.clone()];
        for (m, ckpt) in models.iter().enumerate() {
            let spec = ckpt.model.spec();
            if img.shape() != spec.input_shape {
                return Err(Error::Config(format!(
                    "image {i} has shape {:?}, model {m} expects {:?}",
                    img.shape(),
                    spec.input_shape
                )));
            }
            let channel = ChannelConfig::new(ckpt.train.power, test_snr_db, spec.k)?;
            let s = img.shape();
            let x = img.clone().reshaped(&[1, s[0], s[1], s[2]])?;
            let t = ckpt.model.transmit(&x, &channel, ckpt.train.eval_mode(), crate::seed::derive(seed, &[i as u64, m as u64]))?;
            row.push(t.x_hat.reshaped(s)?);
        }
        rows.push(row);
    }
    compose_grid(&rows, GRID_GUTTER)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSidecar {
    pub samples: usize,
    pub latent_dim: usize,
    pub bins: usize,
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// Covariance spectrum, descending.
    pub eigenvalues: Vec<f64>,
}

/// Pre-channel latents of `data` reduced to two principal components.
/// Writes the nonzero histogram cells as `row,col,count` CSV to `out` and
/// a JSON sidecar next to it. Returns both paths.
pub fn latent_histogram_cmd(ckpt: &Checkpoint, data: &Dataset, out: &Path) -> Result<(PathBuf, PathBuf)> {
    if data.is_empty() {
        return Err(Error::Config("latent histogram needs a nonempty dataset".into()));
    }
    check_compatible(ckpt, data)?;
    let mut latents = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(64) {
        latents.extend(ckpt.model.encode(&data.batch(chunk))?);
    }
    let pca = latent_pca_histogram(&latents)?;
    let mut csv = String::from("row,col,count\n");
    for (r, c, n) in pca.histogram.nonzero_cells() {
        let _ = writeln!(csv, "{r},{c},{n}");
    }
    write_file(out, csv.as_bytes())?;
    let sidecar = HistogramSidecar {
        samples: latents.len(),
        latent_dim: latents[0].len(),
        bins: pca.histogram.bins,
        x_edges: pca.histogram.x_edges.clone(),
        y_edges: pca.histogram.y_edges.clone(),
        eigenvalues: pca.eigenvalues.clone(),
    };
    let json_path = out.with_extension("json");
    write_file(&json_path, &serde_json::to_vec_pretty(&sidecar)?)?;
    Ok((out.to_path_buf(), json_path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub sweep_csv: PathBuf,
    pub index: RunIndex,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Trains a model per the config and writes its checkpoint and history to
/// `out_dir`. Returns the checkpoint and the held-out evaluation slice.
pub fn train_from_config(cfg: &ExperimentConfig, base: &Path, out_dir: &Path) -> Result<(Checkpoint, Dataset, Vec<PathBuf>)> {
    let data = stage("data", load_dataset(&cfg.dataset, base))?;
    let (train_set, eval_set) = train_eval_split(&data, cfg.dataset.eval_count);
    let ckpt = stage("train", (|| {
        let mut model = Model::build(cfg.model.clone(), cfg.train.seed)?;
        let history = train(&mut model, &train_set, Some(&eval_set), &cfg.train, 0)?;
        Ok(Checkpoint {
            model,
            train: cfg.train,
            epoch: cfg.train.epochs,
            history,
        })
    })())?;
    let paths = stage("train", (|| {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let ckpt_path = out_dir.join("model.ckpt");
        save_checkpoint(&ckpt_path, &ckpt)?;
        let hist_path = out_dir.join("history.json");
        write_file(&hist_path, &serde_json::to_vec_pretty(&ckpt.history)?)?;
        Ok(vec![ckpt_path, hist_path])
    })())?;
    Ok((ckpt, eval_set, paths))
}

/// Full pipeline: data, training, SNR sweep, reconstruction grid and latent
/// histogram, then an index of every artifact with its SHA-256. A failing
/// stage aborts the run; artifacts written before it stay on disk.
pub fn run(config_path: &Path) -> Result<RunOutput> {
    let cfg = ExperimentConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let out_dir = base.join(&cfg.eval.output_dir);
    let (ckpt, eval_set, mut artifacts) = train_from_config(&cfg, base, &out_dir)?;
    let batch = cfg.train.batch_size;

    let sweep_path = out_dir.join("sweep.csv");
    stage("sweep", (|| {
        let records = snr_sweep(std::slice::from_ref(&ckpt), &cfg.eval.test_snrs, &eval_set, &cfg.eval.seeds, batch)?;
        write_file(&sweep_path, sweep_csv(&records).as_bytes())
    })())?;
    artifacts.push(sweep_path.clone());

    let grid_path = out_dir.join("grid.png");
    stage("grid", (|| {
        let count = cfg.eval.grid_images.min(eval_set.len()).max(1);
        let images: Vec<Tensor<f32>> = (0..count).map(|i| eval_set.image(i)).collect();
        let snr = cfg.eval.grid_snr_db.unwrap_or(cfg.train.train_snr_db);
        let grid = reconstruct_grid(std::slice::from_ref(&ckpt), &images, snr, cfg.eval.seeds[0])?;
        write_file(&grid_path, &encode_png(&grid)?)
    })())?;
    artifacts.push(grid_path);

    let hist = stage("latent", latent_histogram_cmd(&ckpt, &eval_set, &out_dir.join("latent_hist.csv")))?;
    artifacts.extend([hist.0, hist.1]);

    let index = stage("index", (|| {
        let mut entries = Vec::new();
        for p in &artifacts {
            let rel = p.strip_prefix(&out_dir).unwrap_or(p);
            entries.push(Artifact {
                path: rel.to_string_lossy().into_owned(),
                sha256: sha256_file(p)?,
                bytes: fs::metadata(p).map_err(|e| Error::io(p, e))?.len(),
            });
        }
        let index = RunIndex { artifacts: entries };
        write_file(&out_dir.join("index.json"), &serde_json::to_vec_pretty(&index)?)?;
        Ok(index)
    })())?;

    Ok(RunOutput {
        checkpoint: out_dir.join("model.ckpt"),
        output_dir: out_dir,
        sweep_csv: sweep_path,
        index,
    })
}

/// Interprets a `--data` argument: a directory is a folder of images; a
/// file is CIFAR-10 or STL-10 depending on which record size divides it.
pub fn load_data_path(path: &Path, source: Option<Source>, max_count: Option<usize>) -> Result<Dataset> {
    let source = match source {
        Some(s) => s,
        None if path.is_dir() => Source::Folder,
        None => {
            let len = fs::metadata(path).map_err(|e| Error::io(path, e))?.len() as usize;
            if len % data::CIFAR_RECORD == 0 {
                Source::Cifar10
            } else if len % data::STL_RECORD == 0 {
                Source::Stl10
            } else {
                return Err(Error::format(
                    path,
                    "size matches neither CIFAR-10 (3073-byte) nor STL-10 (27648-byte) records",
                ));
            }
        }
    };
    match source {
        Source::Cifar10 => data::load_cifar10(&[path.to_path_buf()], max_count),
        Source::Stl10 => data::load_stl10(path, max_count),
        Source::Folder => data::load_folder(path, max_count),
        Source::Synthetic => Err(Error::Config("synthetic data has no path; use a config file".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": {"source": "synthetic", "max_count": 12, "eval_count": 4},
        "model": {"kind": "ae", "input_shape": [3, 32, 32], "sampler": "none", "k": 512},
        "train": {"epochs": 1, "batch_size": 4}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.eval.test_snrs, vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0]);
        assert_eq!(cfg.eval.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.train.lr_initial, 1e-3);
    }

    #[test]
    fn missing_model_section_names_the_key() {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        v.as_object_mut().unwrap().remove("model");
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("model"), "{err}");
    }

    #[test]
    fn empty_snr_list_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        v["eval"] = serde_json::json!({"test_snrs": []});
        assert!(ExperimentConfig::from_json(&v.to_string()).unwrap_err().is_validation());
    }

    #[test]
    fn csv_row_format() {
        let r = SweepRecord {
            model: "vae".into(),
            loss: "mixed".into(),
            train_snr_db: 10.0,
            test_snr_db: -5.0,
            seed: 2,
            psnr_db: 23.456789123,
            ssim: 0.8123456,
        };
        assert_eq!(r.csv_row(), "vae,mixed,10,-5,2,23.456789123,0.8123456");
        assert!(sweep_csv(&[r]).starts_with(CSV_HEADER));
    }
}
