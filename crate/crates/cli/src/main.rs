use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cmivtp::checkpoint::{load_checkpoint, save_checkpoint};
use cmivtp::config::{read_config, RunConfig};
use cmivtp::data::VesselSample;
use cmivtp::dataset::{read_dataset, write_dataset};
use cmivtp::eval::{evaluate, EvalGrid, ExperimentReport};
use cmivtp::model::{fnv1a, CmivtpModel, Predictor};
use cmivtp::pca::pca_project;
use cmivtp::plot::{line_chart, Series};
use cmivtp::scenario::generate_dataset;
use cmivtp::train::{curve_csv, train, EpochRecord};
use cmivtp::vgtb::{bank_tracks, build_bank, TrajectoryBank};
use cmivtp_numerics::Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "cmivtp", version, about = "Multimodal AIS + CCTV vessel trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic waterway dataset as JSON lines.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trajectory bank commands.
    Bank {
        #[command(subcommand)]
        cmd: BankCmd,
    },
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate checkpoints over the dark-rate and horizon grid.
    Eval(EvalArgs),
    /// Predict K futures for one vessel and write them as JSON.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample_id: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project sampled latents onto two principal components.
    LatentViz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BankCmd {
    /// Cluster the fully observed AIS tracks of a dataset into a bank.
    Build {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 16)]
        kmax: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV; an SVG chart is written next to it.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Train one model per horizon in `--dt`, each with its own bank.
    #[arg(long)]
    per_horizon: bool,
    #[arg(long, value_delimiter = ',', default_value = "12,24,36")]
    dt: Vec<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
    rho: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "12,24,36")]
    dt: Vec<usize>,
    /// Number of seeded runs R.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    plots: Option<PathBuf>,
    /// Load `<ckpt stem>-dt<N>.<ext>` for every horizon instead of truncating one model.
    #[arg(long)]
    per_horizon: bool,
}

fn horizon_path(base: &Path, dt: usize) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt");
    let name = match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}-dt{dt}.{ext}"),
        None => format!("{stem}-dt{dt}"),
    };
    base.with_file_name(name)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(read_config(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn file_hash(path: &Path) -> Result<u64> {
    Ok(fnv1a(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

fn loss_chart(curve: &[EpochRecord]) -> String {
    let pick = |f: fn(&EpochRecord) -> f64| curve.iter().map(|r| (r.epoch as f64, f(r))).collect();
    line_chart(
        "training loss",
        "epoch",
        "loss",
        &[
            Series { name: "total".into(), points: pick(|r| r.total) },
            Series { name: "rec".into(), points: pick(|r| r.rec) },
        ],
    )
}

fn run_generate(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let data = generate_dataset(&cfg.waterway, cfg.scenarios, seed)?;
    write_dataset(out, &data)?;
    eprintln!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn window_sizes(data: &[VesselSample]) -> Result<(usize, usize)> {
    let first = data.first().context("dataset is empty")?;
    Ok((first.t_obs(), data.iter().map(|s| s.t_fut()).min().unwrap_or(0)))
}

fn run_bank_build(data: &Path, kmax: usize, seed: u64, out: &Path) -> Result<()> {
    let samples = read_dataset(data)?;
    let (t_obs, t_fut) = window_sizes(&samples)?;
    let bank = build_bank(&bank_tracks(&samples), kmax, t_obs, t_fut, seed)?;
    bank.write(out)?;
    eprintln!("wrote {} prototypes to {}", bank.entries.len(), out.display());
    Ok(())
}

fn train_one(cfg: &RunConfig, data: &[VesselSample], bank: Option<TrajectoryBank>, out: &Path, curve: Option<&Path>) -> Result<()> {
    let mut model = CmivtpModel::new(cfg.model.clone())?;
    if cfg.model.use_bank {
        let bank = bank.context("use_bank is set: pass --bank or set `use_bank = false`")?;
        model.set_bank(Some(bank))?;
    }
    let outcome = train(&mut model, data, &cfg.train)?;
    save_checkpoint(out, &model)?;
    if let Some(path) = curve {
        write(path, &curve_csv(&outcome.curve))?;
        write(&path.with_extension("svg"), &loss_chart(&outcome.curve))?;
    }
    if let (Some(a), Some(b)) = (outcome.curve.first(), outcome.curve.last()) {
        eprintln!("{} steps, loss {:.6} -> {:.6}, wrote {}", outcome.steps, a.total, b.total, out.display());
    }
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let data = read_dataset(&args.data)?;
    let (t_obs, t_fut) = window_sizes(&data)?;
    if t_obs != cfg.model.t_obs {
        bail!("dataset has t_obs = {t_obs}, config has {}", cfg.model.t_obs);
    }
    if !args.per_horizon {
        if t_fut < cfg.model.t_fut {
            bail!("dataset has t_fut = {t_fut}, config needs {}", cfg.model.t_fut);
        }
        let bank = args.bank.as_ref().map(TrajectoryBank::read).transpose()?;
        return train_one(&cfg, &data, bank, &args.out, args.curve.as_deref());
    }
    if args.bank.is_some() {
        bail!("--per-horizon builds one bank per horizon; drop --bank");
    }
    for &dt in &args.dt {
        if dt > t_fut {
            bail!("horizon {dt} exceeds dataset t_fut = {t_fut}");
        }
        let mut c = cfg.clone();
        c.model.t_fut = dt;
        let bank = if c.model.use_bank {
            Some(build_bank(&bank_tracks(&data), c.train.k_max, t_obs, dt, c.train.seed)?)
        } else {
            None
        };
        let curve = args.curve.as_deref().map(|p| horizon_path(p, dt));
        train_one(&c, &data, bank, &horizon_path(&args.out, dt), curve.as_deref())?;
    }
    Ok(())
}

fn rho_chart(report: &ExperimentReport, metric: &str) -> String {
    let mut horizons: Vec<usize> = report.cells.keys().map(|k| k.dt).collect();
    horizons.dedup();
    let series: Vec<Series> = horizons
        .iter()
        .map(|&dt| Series {
            name: format!("dt={dt}"),
            points: report
                .cells
                .iter()
                .filter(|(k, _)| k.dt == dt && k.density.is_none())
                .filter_map(|(k, c)| c.as_ref().and_then(|c| c.get(metric)).map(|s| (k.rho, s.mean)))
                .collect(),
        })
        .collect();
    line_chart(&format!("{metric} vs dark rate"), "rho", metric, &series)
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let inputs: Vec<PathBuf> = if args.per_horizon {
        args.dt.iter().map(|&dt| horizon_path(&args.ckpt, dt)).collect()
    } else {
        vec![args.ckpt.clone()]
    };
    let mut watched: Vec<(PathBuf, u64)> = Vec::new();
    for p in inputs.iter().chain([&args.data]) {
        watched.push((p.clone(), file_hash(p)?));
    }

    let data = read_dataset(&args.data)?;
    let models = inputs.iter().map(|p| load_checkpoint(p, None)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&dyn Predictor> = models.iter().map(|m| m as &dyn Predictor).collect();
    let grid = EvalGrid {
        rhos: args.rho.clone(),
        horizons: args.dt.clone(),
        seeds: (0..args.seeds).map(|i| args.seed_base + i).collect(),
    };
    let report = evaluate(&data, &refs, &grid, models[0].cfg.hash())?;

    for (p, h) in &watched {
        if file_hash(p)? != *h {
            bail!("{} changed during evaluation", p.display());
        }
    }
    write(&args.report, &report.to_csv())?;
    if let Some(dir) = &args.plots {
        write(&dir.join("ais_min_ade_vs_rho.svg"), &rho_chart(&report, "ais_min_ade"))?;
        write(&dir.join("cctv_min_ade_vs_rho.svg"), &rho_chart(&report, "cctv_min_ade"))?;
    }
    eprintln!(
        "{} cells over {} runs in {:.2}s, wrote {}",
        report.cells.len(),
        report.runs,
        report.runtime_secs,
        args.report.display()
    );
    Ok(())
}

fn run_predict(ckpt: &Path, data: &Path, id: &str, seed: u64, out: &Path) -> Result<()> {
    let model = load_checkpoint(ckpt, None)?;
    let samples = read_dataset(data)?;
    let sample = samples
        .iter()
        .find(|s| s.vessel_id == id)
        .with_context(|| format!("no sample with id `{id}` in {}", data.display()))?;
    let preds = model.predict(sample, &mut Rng::new(seed))?;
    let doc = json!({
        "vessel_id": sample.vessel_id,
        "k": preds.k(),
        "t_fut": model.cfg.t_fut,
        "ais": preds.ais,
        "cctv": preds.cctv,
        "latents": preds.latents,
    });
    write(out, &serde_json::to_string_pretty(&doc)?)
}

fn run_latent_viz(ckpt: &Path, data: &Path, seed: u64, out: &Path) -> Result<()> {
    let model = load_checkpoint(ckpt, None)?;
    let samples = read_dataset(data)?;
    let root = Rng::new(seed);
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let preds = model.predict(s, &mut root.fork(i as u64))?;
        for (k, z) in preds.latents.into_iter().enumerate() {
            labels.push((s.vessel_id.clone(), k, s.density));
            rows.push(z);
        }
    }
    let pca = pca_project(&rows)?;
    if let Some(w) = &pca.warning {
        eprintln!("warning: {w}");
    }
    let mut text = String::from("vessel_id,mode,density,pc1,pc2\n");
    for ((id, k, density), p) in labels.iter().zip(&pca.projection) {
        text.push_str(&format!("{id},{k},{density},{},{}\n", p[0], p[1]));
    }
    write(out, &text)?;
    eprintln!("projected {} latents, eigenvalues {:?}", rows.len(), pca.eigenvalues);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Generate { config, seed, out } => run_generate(config.as_deref(), seed, &out),
        Cmd::Bank {
            cmd: BankCmd::Build { data, kmax, seed, out },
        } => run_bank_build(&data, kmax, seed, &out),
        Cmd::Train(args) => run_train(&args),
        Cmd::Eval(args) => run_eval(&args),
        Cmd::Predict { ckpt, data, sample_id, seed, out } => run_predict(&ckpt, &data, &sample_id, seed, &out),
        Cmd::LatentViz { ckpt, data, seed, out } => run_latent_viz(&ckpt, &data, seed, &out),
    }
}
