mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cadaseg::config::{ExperimentConfig, FinetuneScope, Method};
use cadaseg::data::{export_dataset, DomainDatasets};
use cadaseg::eval::{evaluate_model, predict_masks, MetricsRow};
use cadaseg::experiments::run_ratio_sweep;
use cadaseg::report::{
    line_plot, loss_series, metrics_csv, overlay, read_sweep_csv, save_png, sweep_csv, sweep_series, text_table, Series,
    PALETTE,
};
use cadaseg::trainer::{finetune_run, train, TrainHistory};
use cadaseg::{DomainId, Error, Result};
use clap::{Args, Parser, Subcommand};

use run::{load_manifest, load_metrics, load_model, prepare_output, read, run_dir_name, write, Run};

#[derive(Parser)]
#[command(name = "cadaseg", version, about = "Cross-anatomy semi-supervised domain adaptation for 2D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment file; built-in desk settings when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.k_max`, or `train.finetune_iters` for finetune.
    #[arg(long)]
    iters: Option<usize>,
    /// Output root.
    #[arg(long, env = "CADASEG_OUT_ROOT", default_value = "runs")]
    out: PathBuf,
    /// Replace existing output.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset to disk.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train one method into a new run directory.
    Train(Common),
    /// Fine-tune a trained model on the labeled target images.
    Finetune {
        /// Run directory or checkpoint file of the pretrained model.
        #[arg(long)]
        from: PathBuf,
        #[arg(long, default_value = "all")]
        scope: FinetuneScope,
        #[command(flatten)]
        common: Common,
    },
    /// Score a run directory or checkpoint on the test split.
    Evaluate {
        /// Run directory or checkpoint file.
        #[arg(long)]
        model: PathBuf,
        /// Experiment file; read from the run's manifest when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and score every ablation method.
    Ablation(Common),
    /// Annotation-ratio sweep with a fully supervised upper bound.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.03,0.05,0.1,0.3,0.5")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "cs_cada")]
        methods: Vec<Method>,
        #[command(flatten)]
        common: Common,
    },
    /// Merge run directories into tables, plots and overlays.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        /// Overlay images per run.
        #[arg(long, default_value_t = 4)]
        overlays: usize,
        #[arg(long)]
        force: bool,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::ConfigFile { .. } => 2,
        Error::Config(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, out, force } => generate(config.as_deref(), &out, force),
        Command::Train(c) => train_cmd(&c).map(|_| ()),
        Command::Finetune { from, scope, common } => finetune_cmd(&from, scope, &common),
        Command::Evaluate { model, config } => evaluate_cmd(&model, config.as_deref()),
        Command::Ablation(c) => ablation_cmd(&c),
        Command::Sweep { ratios, methods, common } => sweep_cmd(&common, &ratios, &methods),
        Command::Report { runs, out, overlays, force } => report_cmd(&runs, &out, overlays, force),
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(common.method.unwrap_or(Method::CsCada)),
    };
    if let Some(m) = common.method {
        cfg.method = m;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(k) = common.iters {
        cfg.train.k_max = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig) -> Result<(DomainDatasets, f64)> {
    let t = Instant::now();
    let ds = cfg.data.load()?;
    Ok((ds, t.elapsed().as_secs_f64()))
}

fn generate(config: Option<&Path>, out: &Path, force: bool) -> Result<()> {
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(Method::CsCada),
    };
    let ds = cfg.data.load()?;
    prepare_output(out, force)?;
    let n = export_dataset(&ds, out)?;
    println!(
        "wrote {n} images to {}: source_labeled {}, target_labeled {}, target_unlabeled {}, validation {}, test {}",
        out.display(),
        ds.source_labeled.len(),
        ds.target_labeled.len(),
        ds.target_unlabeled.len(),
        ds.validation.len(),
        ds.test.len()
    );
    println!("content hash {}", ds.content_hash());
    Ok(())
}

/// Trains `cfg` into a fresh run directory under `root`.
fn train_into(root: &Path, cfg: &ExperimentConfig, force: bool) -> Result<(PathBuf, MetricsRow)> {
    cfg.validate()?;
    let (ds, data_secs) = load_data(cfg)?;
    cfg.check_datasets(&ds)?;
    let dir = root.join(run_dir_name(cfg.method.name(), cfg.seed));
    let mut run = Run::start(dir, force, cfg, &ds, None, data_secs)?;
    eprintln!("training {} (seed {}, {} iterations) in {}", cfg.method, cfg.seed, cfg.train.k_max, run.dir.display());
    let result = train(cfg, &ds).and_then(|outcome| run.finish(&outcome, &ds));
    match result {
        Ok(row) => Ok((run.dir, row)),
        Err(e) => {
            run.fail(&e);
            Err(e)
        }
    }
}

fn train_cmd(common: &Common) -> Result<PathBuf> {
    let cfg = resolve(common)?;
    let (dir, row) = train_into(&common.out, &cfg, common.force)?;
    print!("{}", text_table(std::slice::from_ref(&row)));
    println!("run directory {}", dir.display());
    Ok(dir)
}

fn finetune_cmd(from: &Path, scope: FinetuneScope, common: &Common) -> Result<()> {
    let mut cfg = match (&common.config, from.is_dir()) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, true) => load_manifest(from)?.config,
        (None, false) => ExperimentConfig::desk(Method::BaselineSource),
    };
    cfg.method = match scope {
        FinetuneScope::LastBlock => Method::FinetuneLast,
        FinetuneScope::All => Method::FinetuneAll,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(k) = common.iters {
        cfg.train.finetune_iters = k;
    }
    cfg.validate()?;
    let pretrained = load_model(from)?.student;
    if pretrained.arch != cfg.model {
        return Err(Error::Config("checkpoint architecture differs from the configured model".into()));
    }
    let (ds, data_secs) = load_data(&cfg)?;
    let dir = common.out.join(run_dir_name(cfg.method.name(), cfg.seed));
    let mut run = Run::start(dir, common.force, &cfg, &ds, Some(from.to_path_buf()), data_secs)?;
    let result = finetune_run(&pretrained, scope, &ds.target_labeled, &cfg).and_then(|o| run.finish(&o, &ds));
    match result {
        Ok(row) => {
            print!("{}", text_table(std::slice::from_ref(&row)));
            println!("run directory {}", run.dir.display());
            Ok(())
        }
        Err(e) => {
            run.fail(&e);
            Err(e)
        }
    }
}

fn evaluate_cmd(model: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None if model.is_dir() => load_manifest(model)?.config,
        None => return Err(Error::Config("evaluating a checkpoint file needs --config".into())),
    };
    let params = load_model(model)?.student;
    let ds = cfg.data.load()?;
    let row = evaluate_model(cfg.method.name(), &params, &ds.test, DomainId::Target, ds.spacing)?;
    print!("{}", text_table(std::slice::from_ref(&row)));
    Ok(())
}

fn ablation_cmd(common: &Common) -> Result<()> {
    let base = resolve(common)?;
    let root = common.out.join(format!("ablation_{}_{}", base.seed, run::stamp()));
    prepare_output(&root, common.force)?;
    let mut rows = Vec::new();
    for method in Method::ABLATION {
        let cfg = ExperimentConfig { method, ..base.clone() };
        rows.push(train_into(&root, &cfg, common.force)?.1);
    }
    let table = text_table(&rows);
    write(&root.join("ablation.txt"), &table)?;
    write(&root.join("ablation.csv"), &metrics_csv(&rows)?)?;
    print!("{table}");
    println!("ablation directory {}", root.display());
    Ok(())
}

fn sweep_cmd(common: &Common, ratios: &[f64], methods: &[Method]) -> Result<()> {
    let base = resolve(common)?;
    let (ds, _) = load_data(&base)?;
    let dir = common.out.join(format!("sweep_{}_{}", base.seed, run::stamp()));
    prepare_output(&dir, common.force)?;
    write(&dir.join(run::CONFIG), &base.to_toml()?)?;
    let rows = run_ratio_sweep(&base, &ds, ratios, methods)?;
    write(&dir.join(SWEEP_CSV), &sweep_csv(&rows)?)?;
    for r in &rows {
        let tag = if r.upper_bound { " (upper bound)" } else { "" };
        println!("{:<16} ratio {:<5} labeled {:<4} dice {:.2}±{:.2}{tag}", r.method, r.ratio, r.labeled, r.dice_mean, r.dice_sd);
    }
    println!("sweep directory {}", dir.display());
    Ok(())
}

const SWEEP_CSV: &str = "sweep.csv";

fn run_label(dir: &Path) -> String {
    dir.file_name().map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
}

fn legend_line(file: &str, series: &[Series]) -> String {
    let items: Vec<String> = series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let [r, g, b] = PALETTE[i % PALETTE.len()];
            format!("{} = rgb({r},{g},{b})", s.label)
        })
        .collect();
    format!("{file}: {}\n", items.join(", "))
}

fn overlays_for(dir: &Path, out: &Path, label: &str, count: usize) -> Result<usize> {
    let manifest = load_manifest(dir)?;
    let params = load_model(dir)?.student;
    let ds = manifest.config.data.load()?;
    if ds.test_set_hash() != manifest.test_set_hash {
        eprintln!("warning: regenerated test set of {} differs from the one it was scored on", dir.display());
    }
    let cases = &ds.test[..count.min(ds.test.len())];
    let preds = predict_masks(&params, cases, DomainId::Target)?;
    for (i, (case, pred)) in cases.iter().zip(&preds).enumerate() {
        save_png(&out.join(format!("{label}_overlay_{i}.png")), &overlay(&case.image, pred, &case.mask)?)?;
    }
    Ok(cases.len())
}

fn report_cmd(runs: &[PathBuf], out: &Path, overlays: usize, force: bool) -> Result<()> {
    prepare_output(out, force)?;
    let mut rows = Vec::new();
    let mut legend = String::new();
    for dir in runs {
        let label = run_label(dir);
        if dir.join(run::METRICS_JSON).exists() {
            rows.push(load_metrics(dir)?);
        }
        let history = dir.join(run::HISTORY);
        if history.exists() {
            let series = loss_series(&TrainHistory::read_losses_csv(&history)?);
            let file = format!("{label}_loss.png");
            save_png(&out.join(&file), &line_plot(&series, 640, 400)?)?;
            legend.push_str(&legend_line(&file, &series));
        }
        let sweep = dir.join(SWEEP_CSV);
        if sweep.exists() {
            let series = sweep_series(&read_sweep_csv(&read(&sweep)?)?);
            let file = format!("{label}_dice_vs_ratio.png");
            save_png(&out.join(&file), &line_plot(&series, 640, 400)?)?;
            legend.push_str(&legend_line(&file, &series));
        }
        if overlays > 0 && dir.join(run::BEST_CHECKPOINT).exists() {
            overlays_for(dir, out, &label, overlays)?;
        }
    }
    let table = text_table(&rows);
    write(&out.join("report.txt"), &table)?;
    write(&out.join("report.csv"), &metrics_csv(&rows)?)?;
    if !legend.is_empty() {
        let colours = "overlays: true positive = green, false negative = red, false positive = orange, prediction boundary = white\n";
        write(&out.join("legend.txt"), &format!("{legend}{colours}"))?;
    }
    print!("{table}");
    Ok(())
}
