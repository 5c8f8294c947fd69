use clap::{Args, Parser, Subcommand, ValueEnum};
use ltuda::config::TrainConfig;
use ltuda::evaluate::{evaluate_model, run_model};
use ltuda::inference::threshold_classify;
use ltuda::labels::{generate_synthetic, read_f32_grid, write_i16_grid, Dataset, SynthConfig};
use ltuda::prototypes::{dot, PrototypeBank};
use ltuda::trainer::{load_checkpoint, run_ablation, train_run, RunOptions, StageSelection};
use ltuda::{Error, Grid};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ltuda", version, about = "Partially-supervised segmentation toolkit")]
struct Cli {
    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic partially-labeled dataset.
    GenData {
        #[arg(long, default_value_t = 4)]
        classes: u8,
        #[arg(long, default_value_t = 10)]
        per_subset: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Held-out fully labeled images (defaults to --per-subset).
        #[arg(long)]
        test_images: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method into a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::Both)]
        stage: StageArg,
        /// Stage-1 checkpoint for `--stage 2` (default: RUNDIR/ckpt_stage1.bin).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted stage from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Train baseline, +CDA and the full method and compare them.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint's student on the held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Threshold (defaults to the checkpoint's config).
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Write int16 label maps for a dataset directory or a folder of square `.f32` images.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print prototype norms and pairwise cosine similarities as CSV.
    InspectProtos {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override such as `aug.strong.views=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> ltuda::Result<TrainConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = seed {
            overrides.push(format!("seed={s}"));
        }
        TrainConfig::load(self.config.as_deref(), &overrides)
    }
}

fn predict(ckpt: &Path, input: &Path, tau: f64, out: &Path) -> ltuda::Result<usize> {
    ltuda::inference::check_tau(tau)?;
    let model = load_checkpoint(ckpt)?.state.student;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut jobs: Vec<(String, Grid<f32>)> = Vec::new();
    if input.join("manifest.json").exists() {
        let ds = Dataset::load(input)?;
        let files = ds
            .manifest
            .subsets
            .iter()
            .flat_map(|s| s.samples.iter())
            .chain(ds.manifest.test.iter())
            .map(|f| f.image.clone());
        for (file, rec) in files.zip(ds.train.iter().chain(ds.test.iter())) {
            jobs.push((file.replace(['/', '\\'], "_"), rec.image.clone()));
        }
    } else {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "f32"))
            .collect();
        entries.sort();
        for p in entries {
            let len = std::fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len() as usize / 4;
            let side = (len as f64).sqrt().round() as usize;
            if side * side != len {
                return Err(Error::Validation(format!("{} is not a square float32 image", p.display())));
            }
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            jobs.push((name, read_f32_grid(&p, side, side)?));
        }
    }
    for (name, image) in &jobs {
        let preds = run_model(&model, &[image], 1, false)?;
        let labels = threshold_classify(&preds.probs[0], tau)?;
        let stem = name.trim_end_matches(".f32");
        let path = out.join(format!("{stem}.pred.i16"));
        write_i16_grid(&path, &labels.classes.map(|&v| v as i16))?;
    }
    Ok(jobs.len())
}

fn bank_rows(name: &str, bank: &PrototypeBank, out: &mut String) {
    for s in 0..bank.slots() {
        let p = bank.slot(s);
        let norm = dot(p, p).sqrt();
        out.push_str(&format!("{name},{s},{},{},{norm:.9}", s / bank.k, s % bank.k));
        for t in 0..bank.slots() {
            out.push_str(&format!(",{:.6}", dot(p, bank.slot(t))));
        }
        out.push('\n');
    }
}

fn run(cli: Cli) -> ltuda::Result<()> {
    match cli.command {
        Command::GenData {
            classes,
            per_subset,
            size,
            test_images,
            out,
        } => {
            let mut cfg = SynthConfig::new(classes, per_subset, size, cli.seed.unwrap_or(0));
            if let Some(t) = test_images {
                cfg.test_images = t;
            }
            let m = generate_synthetic(&cfg, &out)?;
            println!("wrote {} subsets x {per_subset} images and {} test images to {}", m.subsets.len(), m.test.len(), out.display());
        }
        Command::Train {
            cfg,
            data,
            out,
            stage,
            init,
            resume,
            quiet,
        } => {
            let config = cfg.resolve(cli.seed)?;
            let ds = Dataset::load(&data)?;
            let stages = match stage {
                StageArg::One => StageSelection::One,
                StageArg::Two => StageSelection::Two,
                StageArg::Both => StageSelection::Both,
            };
            let path = train_run(
                &config,
                &ds,
                &RunOptions {
                    out_dir: &out,
                    stages,
                    init: init.as_deref(),
                    resume: resume.as_deref(),
                    verbose: !quiet,
                },
            )?;
            println!("{}", path.display());
        }
        Command::Ablate { cfg, data, out, quiet } => {
            let config = cfg.resolve(cli.seed)?;
            let ds = Dataset::load(&data)?;
            let report = run_ablation(&config, &ds, &out, !quiet)?;
            print!("{}", report.to_csv());
        }
        Command::Eval { ckpt, data, out, tau } => {
            let ck = load_checkpoint(&ckpt)?;
            let tau = tau.unwrap_or(ck.config.tau);
            ltuda::inference::check_tau(tau)?;
            let ds = Dataset::load(&data)?;
            let set = if ds.test.is_empty() { &ds.train } else { &ds.test };
            let report = evaluate_model(&ck.state.student, set, tau, true)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            report.write(&out)?;
            print!("{}", report.to_csv());
        }
        Command::Predict { ckpt, input, tau, out } => {
            let n = predict(&ckpt, &input, tau, &out)?;
            println!("wrote {n} label maps to {}", out.display());
        }
        Command::InspectProtos { ckpt } => {
            let ck = load_checkpoint(&ckpt)?;
            let banks = ck
                .state
                .banks
                .ok_or_else(|| Error::Validation(format!("{} holds no prototype banks", ckpt.display())))?;
            let mut s = String::from("bank,slot,class,k,norm");
            for t in 0..banks.labeled.slots() {
                s.push_str(&format!(",cos_{t}"));
            }
            s.push('\n');
            bank_rows("labeled", &banks.labeled, &mut s);
            bank_rows("unlabeled", &banks.unlabeled, &mut s);
            print!("{s}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
