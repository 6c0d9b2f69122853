use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jscc_autodiff::gradcheck::run_case;
use jscc_core::data::{encode_png, read_image, Source};
use jscc_core::experiments::{
    compare_robustness, latent_histogram_cmd, load_data_path, reconstruct_grid, run, snr_sweep, sweep_csv,
    train_from_config, ExperimentConfig,
};
use jscc_core::gradcases::all_cases;
use jscc_core::training::{load_checkpoint, Checkpoint};
use jscc_core::{Error, Result};

/// Learned joint source-channel coding of images over an AWGN channel.
#[derive(Parser, Debug)]
#[command(name = "jscc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the model of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints over a list of test SNRs and seeds.
    Sweep {
        #[arg(long = "ckpt", required = true, num_args = 1..)]
        ckpts: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        snrs: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        data_opts: DataOpts,
    },
    /// Compare an AE and a VAE checkpoint below their training SNR.
    Compare {
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        snrs: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Training SNR both checkpoints must share; read from the AE checkpoint if omitted.
        #[arg(long, allow_negative_numbers = true)]
        train_snr: Option<f64>,
        #[command(flatten)]
        data_opts: DataOpts,
    },
    /// Write a PNG grid: each image followed by every model's reconstruction.
    Grid {
        #[arg(long = "ckpt", num_args = 0..)]
        ckpts: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        snr: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Two-component PCA histogram of pre-channel latents.
    LatentHist {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data_opts: DataOpts,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Only this case.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train, sweep and write all artifacts for a config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct DataOpts {
    /// cifar10, stl10 or folder; guessed from the path when omitted.
    #[arg(long, value_parser = parse_source)]
    format: Option<Source>,
    #[arg(long)]
    max_count: Option<usize>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

fn parse_source(s: &str) -> std::result::Result<Source, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown data format `{s}` (expected cifar10, stl10 or folder)"))
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    paths.iter().map(|p| load_checkpoint(p)).collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let (ckpt, _, paths) = train_from_config(&cfg, base, &out)?;
            if let Some(last) = ckpt.history.last() {
                println!(
                    "epoch {}: loss {:.6} eval psnr {:?} ssim {:?}",
                    last.epoch, last.train_loss, last.eval_psnr_db, last.eval_ssim
                );
            }
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Sweep {
            ckpts,
            snrs,
            data,
            csv,
            seeds,
            data_opts,
        } => {
            let models = load_all(&ckpts)?;
            let data = load_data_path(&data, data_opts.format, data_opts.max_count)?;
            let records = snr_sweep(&models, &snrs, &data, &seeds, data_opts.batch_size)?;
            write(&csv, sweep_csv(&records).as_bytes())?;
            println!("wrote {} records to {}", records.len(), csv.display());
        }
        Command::Compare {
            ae,
            vae,
            snrs,
            data,
            seeds,
            train_snr,
            data_opts,
        } => {
            let (ae, vae) = (load_checkpoint(&ae)?, load_checkpoint(&vae)?);
            let data = load_data_path(&data, data_opts.format, data_opts.max_count)?;
            let train_snr = train_snr.unwrap_or(ae.train.train_snr_db);
            let report = compare_robustness(&ae, &vae, train_snr, &snrs, &data, &seeds, data_opts.batch_size)?;
            print!("{}", report.table());
        }
        Command::Grid {
            ckpts,
            images,
            snr,
            out,
            seed,
        } => {
            let models = load_all(&ckpts)?;
            let images = images.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
            let grid = reconstruct_grid(&models, &images, snr, seed)?;
            write(&out, &encode_png(&grid)?)?;
            println!("wrote {}", out.display());
        }
        Command::LatentHist {
            ckpt,
            data,
            out,
            data_opts,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let data = load_data_path(&data, data_opts.format, data_opts.max_count)?;
            let (csv, json) = latent_histogram_cmd(&ckpt, &data, &out)?;
            println!("wrote {} and {}", csv.display(), json.display());
        }
        Command::Gradcheck { op, seeds, tolerance } => {
            let cases = all_cases();
            let selected: Vec<_> = cases.iter().filter(|c| op.as_ref().is_none_or(|o| &c.name == o)).collect();
            if selected.is_empty() {
                return Err(Error::Config(format!("unknown op `{}`", op.unwrap_or_default())));
            }
            let mut ok = true;
            for case in selected {
                let (mut worst, mut raw) = (0.0f64, 0.0f64);
                for seed in 0..seeds {
                    let r = run_case(case, None, seed)?;
                    worst = worst.max(r.worst());
                    raw = raw.max(r.worst_raw());
                }
                let verdict = if worst < tolerance { "ok" } else { "FAIL" };
                ok &= worst < tolerance;
                println!("{:<20} max rel error {worst:.3e} (1e-8 floor: {raw:.3e}) {verdict}", case.name);
            }
            return Ok(ok);
        }
        Command::Run { config } => {
            let out = run(&config)?;
            for a in &out.index.artifacts {
                println!("{}  {}", a.sha256, a.path);
            }
            println!("index: {}", out.output_dir.join("index.json").display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
