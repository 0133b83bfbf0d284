mod config;
mod data;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use rpt::ablation::{ablate_blocks, ablate_losses, AblationRow};
use rpt::debias::{debias_trial, DebiasConfig};
use rpt::episodes::{EpisodeSampler, Mode, Setting};
use rpt::eval::{aggregate, evaluate};
use rpt::model::{load_segmenter, save_fixture, ModelKind, RptModel};
use rpt::optim::OptimizerSpec;
use rpt::train::{train, LogRow};
use rpt::Exec;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "rpt", version, about = "Few-shot medical image segmentation with regional prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with pseudo-masks.
    MakeData(MakeDataArgs),
    /// Train on one fold's training patients.
    Train(RunArgs),
    /// Evaluate a checkpoint on test folds.
    Eval(EvalArgs),
    /// Block-depth and loss-term sweeps.
    Ablate(AblateArgs),
    /// Render loss curves, sweep bars and segmentation panels.
    Plot(PlotArgs),
    /// Write a parameter-free oracle or background checkpoint.
    MakeFixture(FixtureArgs),
    /// Full model against the single-prototype baseline on lesion-bearing supports.
    Debias(DebiasArgs),
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    patients: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// In-plane size in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 32)]
    depth: usize,
    /// Target voxels per pseudo-label cluster.
    #[arg(long, default_value_t = 2000)]
    granularity: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Sgd,
    Adam,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    setting: Option<u8>,
    /// Held-out classes, comma separated; default all.
    #[arg(long, value_delimiter = ',')]
    test_classes: Option<Vec<i32>>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    n_regions: Option<usize>,
    /// Feature width.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<Opt>,
    /// Working image size for training and evaluation.
    #[arg(long)]
    image_size: Option<usize>,
    /// Run data-parallel loops on one thread.
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        c.apply_env()?;
        if let Some(v) = &self.data {
            c.data = v.clone();
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = self.fold {
            c.fold = v;
        }
        if let Some(v) = self.setting {
            c.setting = Setting::try_from(v).map_err(rpt::Error::Parameter)?;
        }
        if let Some(v) = &self.test_classes {
            c.test_classes = v.clone();
        }
        let t = &mut c.train;
        if let Some(v) = self.iterations {
            t.iterations = v;
        }
        if let Some(v) = self.n_blocks {
            t.model.rpt.n_blocks = v;
        }
        if let Some(v) = self.n_regions {
            t.model.n_regions = v;
        }
        if let Some(v) = self.width {
            t.model.width = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.lr {
            t.lr0 = v;
        }
        match self.optimizer {
            Some(Opt::Sgd) => t.optimizer = OptimizerSpec::default(),
            Some(Opt::Adam) => t.optimizer = OptimizerSpec::adam(),
            None => {}
        }
        if let Some(v) = self.image_size {
            t.sampler.image_size = v;
            c.eval.image_size = v;
        }
        c.train.validate()?;
        Ok(c)
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint path; `{fold}` is replaced by the fold index.
    #[arg(long)]
    checkpoint: String,
    /// `all` or a fold index; defaults to the configured fold.
    #[arg(long)]
    folds: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Transformer depths to sweep, comma separated.
    #[arg(long)]
    blocks: Option<String>,
    /// Sweep the three loss configurations.
    #[arg(long)]
    losses: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Output directory of a finished `train` run.
    #[arg(long)]
    run: PathBuf,
    /// Where to write images; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Block-sweep CSV; defaults to the run directory's, if present.
    #[arg(long)]
    ablation: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    panels: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    Oracle,
    Background,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, value_enum)]
    kind: Fixture,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DebiasArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Clean supports instead of lesion-bearing ones.
    #[arg(long)]
    clean: bool,
    #[arg(long)]
    sequential: bool,
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_make_data(a: &MakeDataArgs) -> Result<()> {
    let spec = data::DataSpec {
        patients: a.patients,
        classes: a.classes,
        seed: a.seed,
        size: a.size,
        depth: a.depth,
        granularity: a.granularity,
    };
    let m = data::make_data(&a.out, &spec)?;
    println!("{} patients, {} classes -> {}", m.patients.len(), m.classes.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let ds = data::load(&cfg.data)?;
    let fold = ds.fold(&cfg, cfg.fold)?;
    cfg.save(&cfg.out)?;
    let mut log: Vec<LogRow> = Vec::new();
    let result = train(&ds.pool, &fold, &cfg.train, |r| log.push(*r));
    write_csv(&cfg.out.join("loss.csv"), &log)?;
    let meta = json!({"fold": cfg.fold, "setting": u8::from(cfg.setting), "seed": cfg.train.seed});
    let out = match result {
        Ok(out) => out,
        Err(rpt::Error::Diverged {
            iteration,
            stage,
            last_good,
        }) => {
            let path = cfg.out.join("last_good.ckpt");
            RptModel {
                cfg: cfg.train.model,
                params: (*last_good).clone(),
            }
            .save(&path, meta)?;
            eprintln!("last good parameters: {}", path.display());
            return Err(rpt::Error::Diverged {
                iteration,
                stage,
                last_good,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    let path = cfg.out.join("model.ckpt");
    out.model.save(&path, meta)?;
    if let Some(last) = out.log.last() {
        println!("final loss {:.6} (ce {:.6})", last.total, last.ce);
    }
    if out.skipped > 0 {
        println!("skipped {} degenerate episodes", out.skipped);
    }
    println!("checkpoint {}", path.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let ds = data::load(&cfg.data)?;
    let folds: Vec<usize> = match a.folds.as_deref() {
        None => vec![cfg.fold],
        Some("all") => (0..rpt::episodes::sampler::NUM_FOLDS).collect(),
        Some(k) => vec![k
            .parse()
            .map_err(|_| rpt::Error::Parameter(format!("--folds expects `all` or an index, got `{k}`")))?],
    };
    cfg.save(&cfg.out)?;
    let eval_cfg = ds.eval_config(&cfg);
    let mut reports = Vec::new();
    for k in folds {
        let fold = ds.fold(&cfg, k)?;
        let ckpt = PathBuf::from(a.checkpoint.replace("{fold}", &k.to_string()));
        if !ckpt.exists() {
            return Err(rpt::Error::Input(format!("checkpoint {} not found", ckpt.display())).into());
        }
        let (_, seg) = load_segmenter(&ckpt)?;
        let report = evaluate(seg.as_ref(), &ds.pool, &fold, &eval_cfg, a.run.exec())?;
        write_json(&cfg.out.join(format!("eval_fold{k}.json")), &report)?;
        std::fs::write(cfg.out.join(format!("eval_fold{k}.txt")), report.table())?;
        print!("{}", report.table());
        reports.push(report);
    }
    if reports.len() > 1 {
        let cv = aggregate(reports);
        write_json(&cfg.out.join("eval_all.json"), &cv)?;
        for (k, m) in cv.fold_means.iter().enumerate() {
            println!("fold {k}: {m:.2}");
        }
        println!("mean Dice: {:.2}", cv.grand_mean);
    } else {
        println!("mean Dice: {:.2}", reports[0].mean);
    }
    Ok(())
}

fn print_rows(rows: &[AblationRow]) {
    println!("{:<20} {:>8} {:>10}", "config", "dice(%)", "loss");
    for r in rows {
        println!("{:<20} {:>8.2} {:>10.4}", r.label, r.mean_dice, r.final_loss);
    }
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    if a.blocks.is_none() && !a.losses {
        bail!(rpt::Error::Parameter("nothing to sweep: pass --blocks and/or --losses".into()));
    }
    let cfg = a.run.resolve()?;
    let blocks = match &a.blocks {
        Some(s) => Some(
            s.split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| rpt::Error::Parameter(format!("--blocks: {e}")))?,
        ),
        None => None,
    };
    if blocks.as_ref().is_some_and(|b| b.is_empty()) {
        bail!(rpt::Error::Parameter("empty block sweep".into()));
    }
    let ds = data::load(&cfg.data)?;
    let fold = ds.fold(&cfg, cfg.fold)?;
    cfg.save(&cfg.out)?;
    let eval_cfg = ds.eval_config(&cfg);
    if let Some(b) = blocks {
        let rows = ablate_blocks(&ds.pool, &fold, &cfg.train, &eval_cfg, &b, a.run.exec())?;
        write_csv(&cfg.out.join("ablation_blocks.csv"), &rows)?;
        print_rows(&rows);
    }
    if a.losses {
        let rows = ablate_losses(&ds.pool, &fold, &cfg.train, &eval_cfg, a.run.exec())?;
        write_csv(&cfg.out.join("ablation_losses.csv"), &rows)?;
        print_rows(&rows);
    }
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.run.join(config::RUN_CONFIG))?;
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    std::fs::create_dir_all(&out)?;
    let mut written = Vec::new();

    let loss = a.run.join("loss.csv");
    if loss.exists() {
        let rows: Vec<LogRow> = csv::Reader::from_path(&loss)?
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("reading {}", loss.display()))?;
        let col = |f: fn(&LogRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
        // the raw boundary term is left out: it is on a pixel-distance scale
        // and carries almost no weight early in the schedule
        let (total, ce, dice) = (col(|r| r.total), col(|r| r.ce), col(|r| r.dice));
        let p = out.join("loss_curve.png");
        plot::line_plot(&p, &[(&total, plot::BLACK), (&ce, plot::BLUE), (&dice, plot::RED)])?;
        written.push(p);
    }

    let sweep = a.ablation.clone().unwrap_or_else(|| a.run.join("ablation_blocks.csv"));
    if sweep.exists() {
        let rows: Vec<AblationRow> = csv::Reader::from_path(&sweep)?
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("reading {}", sweep.display()))?;
        let p = out.join("dice_vs_blocks.png");
        plot::bar_chart(&p, &rows.iter().map(|r| r.mean_dice).collect::<Vec<_>>(), plot::BLUE)?;
        written.push(p);
    }

    let ckpt = a.run.join("model.ckpt");
    if ckpt.exists() && a.panels > 0 {
        let ds = data::load(&cfg.data)?;
        let fold = ds.fold(&cfg, cfg.fold)?;
        let (_, seg) = load_segmenter(&ckpt)?;
        let sampler = EpisodeSampler::new(&ds.pool, &fold, cfg.train.seed, Mode::Eval, &cfg.train.sampler)?;
        for i in 0..a.panels {
            let ep = sampler.sample(i)?;
            let pred = seg.segment(&ep)?.mapv(|v| v > cfg.eval.threshold);
            let p = out.join(format!("panel_{i}.png"));
            plot::triptych(&p, &ep.support_image, &ep.support_mask, &ep.query_image, &ep.query_mask, &pred)?;
            written.push(p);
        }
    }
    if written.is_empty() {
        bail!(rpt::Error::Input(format!("nothing to plot in {}", a.run.display())));
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_fixture(a: &FixtureArgs) -> Result<()> {
    let kind = match a.kind {
        Fixture::Oracle => ModelKind::Oracle,
        Fixture::Background => ModelKind::ConstantBackground,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_fixture(&a.out, kind)?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_debias(a: &DebiasArgs) -> Result<()> {
    let mut cfg = DebiasConfig::default();
    if let Some(v) = a.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = a.iterations {
        cfg.train.iterations = v;
    }
    cfg.support_lesions = !a.clean;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("debias_config.json"), &cfg)?;
    let exec = if a.sequential { Exec::Sequential } else { Exec::Parallel };
    let mut rows = Vec::new();
    for seed in a.first_seed..a.first_seed + a.seeds {
        let r = debias_trial(seed, &cfg, exec)?;
        println!("seed {seed}: full {:.2} baseline {:.2}", r.full, r.baseline);
        rows.push(r);
        write_csv(&a.out.join("debias.csv"), &rows)?;
    }
    let wins = rows.iter().filter(|r| r.full_wins()).count();
    println!("full model ahead in {wins} of {} seeds", rows.len());
    Ok(())
}

/// 3 for numerical failure, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e
        .chain()
        .any(|c| c.downcast_ref::<rpt::Error>().is_some_and(rpt::Error::is_numeric));
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::MakeData(a) => cmd_make_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Plot(a) => cmd_plot(a),
        Command::MakeFixture(a) => cmd_fixture(a),
        Command::Debias(a) => cmd_debias(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
