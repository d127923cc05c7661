//! `ctmamba`: phantoms, low-dose simulation, noise spectra, training and evaluation
//! for the CT-Mamba denoiser.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctmamba_core::data::{load_pairs, make_dataset, read_grid, save_pairs, simulate_low_dose, synth_phantom, write_grid, NoiseModel, PhantomSpec};
use ctmamba_core::experiments::{
    ablate_nps, ablate_scan, denoise_image, input_metrics, load_model, nps_distance, scan_report_csv, uniform_roi_pairs,
};
use ctmamba_core::loss::PhiMode;
use ctmamba_core::metrics::{metrics, DEFAULT_DATA_RANGE};
use ctmamba_core::nps::{nps2d, radialize};
use ctmamba_core::params::write_atomic;
use ctmamba_core::scan_order::{locality_profile, ScanKind, ScanOrder};
use ctmamba_core::train::{grad_check, toy_configs, train_loop, GradCheckOptions, GradObjective, RunConfig};
use ctmamba_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ctmamba", version, about = "Low-dose CT denoising with selective state space scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a scan order's coordinates and locality statistics as CSV.
    ScanDemo {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value = "zigzag")]
        kind: ScanKind,
    },
    /// Radial noise power spectrum of a noise-only image.
    Nps {
        #[arg(long)]
        input: PathBuf,
        /// Column pitch in mm (defaults to the file's).
        #[arg(long)]
        px: Option<f64>,
        /// Row pitch in mm (defaults to the file's).
        #[arg(long)]
        py: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "on")]
        detrend: Switch,
    },
    /// Rasterize a phantom description (JSON) to a grid file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade a normal-dose image to a reduced dose.
    Simulate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        dose: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Base noise level in HU.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Denoise an image with a trained checkpoint.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR, SSIM and RMSE of a test image against a reference, as CSV.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DATA_RANGE)]
        range: f64,
    },
    /// Write a synthetic dataset of phantom pairs (DIR/ldct, DIR/ndct).
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.25)]
        dose: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a denoiser.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per scan order and report validation metrics.
    AblateScan {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with and without the deep NPS term and compare noise texture on uniform ROIs.
    AblateNps {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        rois: usize,
        #[arg(long, default_value_t = 32)]
        roi_size: usize,
        #[arg(long, default_value_t = 0.25)]
        dose: f64,
    },
    /// Radial-NPS distance between removed and true noise on simulated uniform ROIs.
    NpsDistance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        rois: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 32)]
        roi_size: usize,
        #[arg(long, default_value_t = 0.25)]
        dose: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients with finite differences on a small network.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value = "full")]
        objective: ObjectiveArg,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        /// Plain central differences instead of the extrapolated estimate.
        #[arg(long)]
        no_richardson: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Full,
    Smooth,
    L1,
    Nps,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhiArg {
    Joint,
    Frozen,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Desk,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory with `ldct/` and `ndct/` subdirectories.
    #[arg(long)]
    data: PathBuf,
    /// Validation directory in the same layout.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patches_per_image: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    nps_warmup: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    scan: Option<ScanKind>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    msc_scales: Option<usize>,
    #[arg(long)]
    state_size: Option<usize>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    /// How the loss network treats noise images.
    #[arg(long, value_enum)]
    phi: Option<PhiArg>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
                RunConfig::from_json(&text)?
            }
            None => match self.preset {
                Preset::Default => RunConfig::default(),
                Preset::Desk => RunConfig::desk(),
            },
        };
        let t = &mut cfg.train;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(t.epochs, self.epochs);
        set!(t.seed, self.seed);
        set!(t.lr_start, self.lr_start);
        set!(t.lr_end, self.lr_end);
        set!(t.beta1, self.beta1);
        set!(t.beta2, self.beta2);
        set!(t.eps, self.eps);
        set!(t.weight_decay, self.weight_decay);
        set!(t.batch_size, self.batch_size);
        set!(t.patches_per_image, self.patches_per_image);
        set!(t.patch_size, self.patch_size);
        set!(t.checkpoint_every, self.checkpoint_every);
        let w = &mut cfg.loss.weights;
        set!(w.nps_warmup_epochs, self.nps_warmup);
        set!(w.gamma1, self.gamma1);
        set!(w.gamma2, self.gamma2);
        set!(w.lambda3, self.lambda3);
        if let Some(phi) = self.phi {
            cfg.loss.phi = match phi {
                PhiArg::Joint => PhiMode::Joint,
                PhiArg::Frozen => PhiMode::Frozen,
                PhiArg::Identity => PhiMode::Identity,
            };
        }
        let n = &mut cfg.net;
        set!(n.scan, self.scan);
        set!(n.channels, self.channels);
        set!(n.msc_scales, self.msc_scales);
        set!(n.czss.state_size, self.state_size);
        if let Some(s) = self.seed {
            n.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn datasets(&self) -> Result<(Vec<ctmamba_core::data::ImagePair>, Vec<ctmamba_core::data::ImagePair>)> {
        let train = load_pairs(&self.data)?;
        let val = match &self.val {
            Some(v) => load_pairs(v)?,
            None => Vec::new(),
        };
        Ok((train, val))
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ScanDemo { height, width, kind } => {
            let order = ScanOrder::generate(kind, height, width)?;
            let mut s = String::from("index,row,col\n");
            for (i, (r, c)) in order.coords().iter().enumerate() {
                let _ = writeln!(s, "{i},{r},{c}");
            }
            s.push_str("max_jump_chebyshev,mean_jump_chebyshev,max_jump_euclidean\n");
            match locality_profile(&order) {
                Ok(p) => {
                    let _ = writeln!(s, "{},{},{}", p.max_jump_chebyshev, p.mean_jump_chebyshev, p.max_jump_euclidean);
                }
                Err(_) => s.push_str("0,0,0\n"),
            }
            write_text(None, &s)
        }
        Command::Nps {
            input,
            px,
            py,
            out,
            detrend,
        } => {
            let img = read_grid(&input)?;
            let px = px.unwrap_or(img.px as f64);
            let py = py.unwrap_or(img.py as f64);
            let nps = nps2d(&img.to_f64(), img.height, img.width, px, py, matches!(detrend, Switch::On))?;
            let r = radialize(&nps)?;
            let mut s = String::from("bin_center,value\n");
            for (c, v) in r.bin_centers.iter().zip(&r.values) {
                let _ = writeln!(s, "{c},{v}");
            }
            write_text(out.as_deref(), &s)
        }
        Command::Synth { spec, out } => {
            let spec = PhantomSpec::from_json_file(&spec)?;
            write_grid(&synth_phantom(&spec)?, &out)
        }
        Command::Simulate {
            input,
            dose,
            seed,
            out,
            sigma,
        } => {
            let mut model = NoiseModel::default();
            if let Some(s) = sigma {
                model.sigma = s;
            }
            let nd = read_grid(&input)?;
            write_grid(&simulate_low_dose(&nd, dose, seed, &model)?, &out)
        }
        Command::Denoise { model, input, out } => {
            let (cfg, store) = load_model(&model)?;
            let img = read_grid(&input)?;
            write_grid(&denoise_image(&store, &cfg.net, &img)?, &out)
        }
        Command::Metrics { reference, test, range } => {
            let (a, b) = (read_grid(&reference)?, read_grid(&test)?);
            if !a.same_geometry(&b) {
                return Err(Error::Shape(format!(
                    "{}x{} reference vs {}x{} test",
                    a.height, a.width, b.height, b.width
                )));
            }
            let m = metrics(&a.to_f64(), &b.to_f64(), a.height, a.width, range)?;
            write_text(None, &format!("psnr,ssim,rmse\n{},{},{}\n", m.psnr, m.ssim, m.rmse))
        }
        Command::MakeDataset {
            out,
            count,
            size,
            dose,
            seed,
        } => save_pairs(&out, &make_dataset(count, size, dose, seed, &NoiseModel::default())?),
        Command::Train { run, out } => {
            let cfg = run.config()?;
            let (train, val) = run.datasets()?;
            let res = train_loop(&train, &val, &cfg, Some(&out))?;
            if let Some(last) = res.log.last() {
                eprintln!("trained {} epochs; final loss {:.6}, validation PSNR {:.3} dB", res.log.len(), last.loss, last.val_psnr);
            }
            Ok(())
        }
        Command::AblateScan { run, out } => {
            let cfg = run.config()?;
            let (train, val) = run.datasets()?;
            if val.is_empty() {
                return Err(Error::InvalidParameter("scan ablation needs --val".into()));
            }
            create_dir(&out)?;
            let rows = ablate_scan(&train, &val, &cfg, Some(&out))?;
            let report = scan_report_csv(&rows);
            write_atomic(&out.join("scan_ablation.csv"), report.as_bytes())?;
            let noisy = input_metrics(&val)?;
            eprintln!("noisy input: psnr {:.4} ssim {:.6} rmse {:.4}", noisy.psnr, noisy.ssim, noisy.rmse);
            write_text(None, &report)
        }
        Command::AblateNps {
            run,
            out,
            rois,
            roi_size,
            dose,
        } => {
            let cfg = run.config()?;
            let (train, val) = run.datasets()?;
            let size = train.first().map(|p| p.ldct.height).unwrap_or(64);
            let roi_pairs = uniform_roi_pairs(rois, size, dose, cfg.train.seed ^ 0x5eed, &NoiseModel::default())?;
            create_dir(&out)?;
            let res = ablate_nps(&train, &val, &roi_pairs, roi_size, &cfg, Some(&out))?;
            let json = serde_json::to_string_pretty(&res).expect("report serializes");
            write_atomic(&out.join("nps_ablation.json"), json.as_bytes())?;
            write_text(
                None,
                &format!("variant,nps_distance\nwith_nps,{}\nwithout_nps,{}\n", res.with_nps, res.without_nps),
            )
        }
        Command::NpsDistance {
            model,
            rois,
            size,
            roi_size,
            dose,
            seed,
        } => {
            let (cfg, store) = load_model(&model)?;
            let pairs = uniform_roi_pairs(rois, size, dose, seed, &NoiseModel::default())?;
            let d = nps_distance(&store, &cfg.net, &pairs, roi_size)?;
            write_text(None, &format!("{d}\n"))
        }
        Command::GradCheck {
            seed,
            objective,
            step,
            no_richardson,
        } => {
            let (net, loss) = toy_configs();
            let opts = GradCheckOptions {
                objective: match objective {
                    ObjectiveArg::Full => GradObjective::Full,
                    ObjectiveArg::Smooth => GradObjective::Smooth,
                    ObjectiveArg::L1 => GradObjective::L1Only,
                    ObjectiveArg::Nps => GradObjective::NpsOnly,
                },
                step,
                richardson: !no_richardson,
                ..GradCheckOptions::default()
            };
            let r = grad_check(&net, &loss, seed, &opts)?;
            let mut s = String::from("parameter,checked,max_rel_err\n");
            for e in &r.entries {
                let _ = writeln!(s, "{},{},{:e}", e.name, e.checked, e.max_rel_err);
            }
            let _ = writeln!(s, "overall,{},{:e}", r.checked, r.overall_max);
            write_text(None, &s)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
