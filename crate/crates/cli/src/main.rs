//! `dehazesnn` command-line driver.
//!
//! Exit status is 0 on success, 1 for usage or validation errors (reported
//! before any heavy work starts) and 2 for failures during computation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dehazesnn::config::RunConfig;
use dehazesnn::gradcheck;
use dehazesnn::model::cost::{count_macs, CostReport, MAC_CONVENTION};
use dehazesnn::model::{checkpoint, DehazeSnn, ModelConfig};
use dehazesnn::tensor::OpKind;
use dehazesnn::train::data::{load_image, png_stems, save_image};
use dehazesnn::train::haze::synthesize_haze;
use dehazesnn::train::{evaluate, PairedDataset, Trainer, CHECKPOINT_FILE, LOG_FILE};

#[derive(Parser)]
#[command(name = "dehazesnn", version, about = "Spiking U-Net for single image dehazing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run configuration.
    Train {
        config: PathBuf,
        /// Continue from `<checkpoint_dir>/latest.dsnn`.
        #[arg(long)]
        resume: bool,
    },
    /// Dehaze one PNG.
    Infer { checkpoint: PathBuf, input: PathBuf, output: PathBuf },
    /// Score a checkpoint on `<dir>/hazy` against `<dir>/gt`.
    Eval { checkpoint: PathBuf, data_dir: PathBuf },
    /// Parameter and MAC counts of a variant at one input size.
    Cost { variant: String, height: usize, width: usize },
    /// Finite-difference check of every reverse rule.
    Gradcheck {
        /// Perturb one operation's reverse rule (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write `<out>/hazy` and `<out>/gt` from a directory of clean PNGs.
    Synth {
        clean_dir: PathBuf,
        out_dir: PathBuf,
        /// Transmission in (0, 1].
        #[arg(long, default_value_t = 0.8)]
        t: f64,
        /// Airlight in [0, 1].
        #[arg(long = "a", default_value_t = 0.8)]
        airlight: f64,
        /// Draw a smooth random transmission field from this seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = Result<(), Failure>;

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Train { config, resume } => train(&config, resume),
        Command::Infer { checkpoint, input, output } => infer(&checkpoint, &input, &output),
        Command::Eval { checkpoint, data_dir } => eval(&checkpoint, &data_dir),
        Command::Cost { variant, height, width } => cost(&variant, height, width),
        Command::Gradcheck { corrupt } => run_gradcheck(corrupt.as_deref()),
        Command::Synth { clean_dir, out_dir, t, airlight, seed } => synth(&clean_dir, &out_dir, t, airlight, seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_model(path: &Path) -> Result<DehazeSnn<f32>, Failure> {
    let (model, _) = checkpoint::load::<f32>(path).with_context(|| format!("loading {}", path.display())).invalid()?;
    Ok(model)
}

fn train(config: &Path, resume: bool) -> Outcome {
    let cfg = RunConfig::load(config).invalid()?;
    cfg.check_paths().invalid()?;
    let model_cfg = cfg.model_config().invalid()?;
    let opts = cfg.train_options();
    let train_dir = cfg.data.train_dir.clone().expect("validated");
    let ds = PairedDataset::open(&train_dir, cfg.data.patch_size, cfg.data.flip).invalid()?;
    let val = match &cfg.data.val_dir {
        Some(d) => Some(PairedDataset::open(d, cfg.data.patch_size, false).invalid()?),
        None => None,
    };
    let latest = cfg.run.checkpoint_dir.join(CHECKPOINT_FILE);

    let mut trainer = if resume {
        let t = Trainer::resume(&latest, opts).invalid()?;
        if t.model.config != model_cfg {
            return Err(Failure::Invalid(anyhow!("{} was trained with a different [model] section", latest.display())));
        }
        eprintln!("resuming at step {} from {}", t.state.step, latest.display());
        t
    } else {
        let model = DehazeSnn::<f32>::from_seed(model_cfg, cfg.run.seed).invalid()?;
        Trainer::new(model, opts).invalid()?
    };
    eprintln!(
        "training {} ({} params) on {} pairs for {} steps",
        trainer.model.config.variant,
        trainer.model.count_params(),
        ds.len(),
        trainer.opts.steps
    );
    let chunk = match trainer.opts.eval_every {
        0 => 100,
        k => k.min(100),
    };
    while !trainer.done() {
        trainer.run(&ds, val.as_ref(), Some(chunk)).runtime()?;
        if let Some(r) = trainer.log.last() {
            let scores = match (r.psnr, r.ssim) {
                (Some(p), Some(s)) => format!(" psnr {p:.2} ssim {s:.4}"),
                _ => String::new(),
            };
            eprintln!("step {:>7} loss {:.6} lr {:.3e}/{:.3e}{scores}", r.step + 1, r.loss, r.lr_main, r.lr_lif);
        }
    }
    println!("checkpoint {}", latest.display());
    println!("log {}", cfg.run.checkpoint_dir.join(LOG_FILE).display());
    Ok(())
}

fn infer(ckpt: &Path, input: &Path, output: &Path) -> Outcome {
    let model = load_model(ckpt)?;
    let image = load_image(input).with_context(|| format!("reading {}", input.display())).invalid()?;
    let out = model.infer(&image).runtime()?;
    save_image(output, &out).with_context(|| format!("writing {}", output.display())).runtime()?;
    let d = out.shape().dims();
    println!("wrote {} ({}x{})", output.display(), d[3], d[2]);
    Ok(())
}

fn eval(ckpt: &Path, dir: &Path) -> Outcome {
    let model = load_model(ckpt)?;
    let ds = PairedDataset::open(dir, 1, false).invalid()?;
    let report = evaluate(&model, &ds).runtime()?;
    println!("{:<32} {:>9} {:>8}", "image", "PSNR", "SSIM");
    for s in &report.images {
        println!("{:<32} {:>9.3} {:>8.5}", s.stem, s.psnr, s.ssim);
    }
    println!("{:<32} {:>9.3} {:>8.5}", "mean", report.mean_psnr, report.mean_ssim);
    println!("{}", serde_json::to_string(&report).runtime()?);
    Ok(())
}

fn cost(variant: &str, height: usize, width: usize) -> Outcome {
    let cfg = ModelConfig::preset(variant).invalid()?;
    let m = cfg.pad_multiple();
    if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
        return Err(Failure::Invalid(anyhow!("height and width must be positive multiples of {m}, got {height}x{width}")));
    }
    count_macs(&cfg, height, width).invalid()?;
    let model = DehazeSnn::<f32>::from_seed(cfg, 0).runtime()?;
    let r = CostReport::new(&model, height, width).runtime()?;
    println!("{r}");
    let line = serde_json::json!({
        "variant": r.variant,
        "height": r.height,
        "width": r.width,
        "params": r.params,
        "macs": r.macs.total(),
        "macs_conv": r.macs.conv,
        "macs_depthwise": r.macs.depthwise,
        "macs_pointwise": r.macs.pointwise,
        "macs_lif": r.macs.lif,
        "convention": MAC_CONVENTION,
    });
    println!("{line}");
    Ok(())
}

fn run_gradcheck(corrupt: Option<&str>) -> Outcome {
    let kind = match corrupt {
        None => None,
        Some(name) => {
            let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Some(OpKind::from_name(name).ok_or_else(|| anyhow!("unknown op {name}; known: {}", names.join(", "))).invalid()?)
        }
    };
    let report = gradcheck::run_suite(kind);
    println!("{report}");
    let failed: Vec<_> = report.failures().map(|c| c.name.clone()).collect();
    if !failed.is_empty() {
        return Err(Failure::Runtime(anyhow!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn synth(clean_dir: &Path, out_dir: &Path, t: f64, airlight: f64, seed: Option<u64>) -> Outcome {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Failure::Invalid(anyhow!("--t must lie in (0, 1], got {t}")));
    }
    if !(0.0..=1.0).contains(&airlight) {
        return Err(Failure::Invalid(anyhow!("--a must lie in [0, 1], got {airlight}")));
    }
    let stems = png_stems(clean_dir).invalid()?;
    if stems.is_empty() {
        return Err(Failure::Invalid(anyhow!("no PNG files in {}", clean_dir.display())));
    }
    let (hazy_dir, gt_dir) = (out_dir.join("hazy"), out_dir.join("gt"));
    for d in [&hazy_dir, &gt_dir] {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display())).runtime()?;
    }
    for (k, (stem, path)) in stems.iter().enumerate() {
        let clean = load_image(path).with_context(|| format!("reading {}", path.display())).runtime()?;
        let hazy = match seed {
            None => synthesize_haze(&clean, t, airlight, None::<&mut ChaCha8Rng>),
            Some(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                rng.set_stream(k as u64);
                synthesize_haze(&clean, t, airlight, Some(&mut rng))
            }
        }
        .runtime()?;
        let name = format!("{stem}.png");
        save_image(&hazy_dir.join(&name), &hazy).runtime()?;
        std::fs::copy(path, gt_dir.join(&name)).with_context(|| format!("copying {}", path.display())).runtime()?;
    }
    println!("wrote {} pairs under {}", stems.len(), out_dir.display());
    Ok(())
}
