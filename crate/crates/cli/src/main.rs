use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tailmix::cam::{cache_all, FeatureCache};
use tailmix::config::ExperimentConfig;
use tailmix::data::{
    generate_synthetic, ingest_cifar, load_dataset, load_manifest, make_profile, write_dataset, SyntheticSpec,
};
use tailmix::metrics::{masked_means, pca_scatter, Metrics};
use tailmix::nn::ModelParams;
use tailmix::pipeline::{
    evaluate, finetune_phase2, train_phase1, write_atomic, Layout, RunRecord, METRICS_FILE, RUN_LOG,
};
use tailmix::report::{emit_report, groups_csv, ReportInput, Stage, StageSummary, ALL_FORMATS};
use tailmix::{Error, Result};

const RESOLVED_CONFIG: &str = "config.resolved.txt";

#[derive(Parser)]
#[command(name = "tailmix", version, about = "Long-tailed classification with feature-space augmentation of tail classes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file (flat `key = value`).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set phase2.h_r=0.95`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; defaults to the config's `output.dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Default output root when neither the config nor `--out` sets one.
    #[arg(long, env = "TAILMIX_OUT", hide_env_values = true)]
    out_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) the long-tailed dataset.
    GenData(Common),
    /// Train the full network on the long-tailed split.
    Phase1(Common),
    /// Cache features, CAMs and probabilities of the Phase-I checkpoint.
    CacheFeatures(Common),
    /// Fine-tune the classifier on balanced, augmented batches.
    Phase2(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to the Phase-I checkpoint.
        #[arg(long, conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a freshly initialised network instead.
        #[arg(long)]
        untrained: bool,
    },
    /// Tables, summaries and figures from finished runs.
    Report(Common),
    /// Sweep Phase-II settings on the cached Phase-I features.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `key=v1,v2,...`; keys may omit the `phase2.` prefix. Repeat for a product grid.
        #[arg(long, required = true)]
        grid: Vec<String>,
    },
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(root) = &common.out_root {
        if !cfg.is_set("output.dir") {
            cfg.set("output.dir", &root.to_string_lossy(), 0)?;
        }
    }
    if let Some(out) = &common.out {
        cfg.set("output.dir", &out.to_string_lossy(), 0)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string(), 0)?;
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join(RESOLVED_CONFIG), cfg.to_text().as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, producer: &'static str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        });
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn load_cache(dir: &Path) -> Result<FeatureCache> {
    FeatureCache::load(dir)
}

fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.data_dir();
    let counts = make_profile(cfg.n_classes, cfg.imbalance, cfg.n_max)?;
    let (manifest, train, test) = match cfg.data_source {
        tailmix::data::DataSource::Synthetic => {
            generate_synthetic(&SyntheticSpec::desk(cfg.n_classes), &counts, cfg.test_per_class, cfg.seed)?
        }
        tailmix::data::DataSource::CifarBinary => {
            let read = |name: String| -> Result<Vec<u8>> {
                let p = cfg.cifar_dir.join(&name);
                fs::read(&p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))
            };
            let train_files = (1..=5).map(|i| read(format!("data_batch_{i}.bin"))).collect::<Result<Vec<_>>>()?;
            let test_files = vec![read("test_batch.bin".into())?];
            ingest_cifar(&train_files, &test_files, &counts, Some(cfg.seed))?
        }
    };
    write_dataset(&dir, &manifest, &train, &test)?;
    write_resolved(cfg, &dir)?;
    println!("wrote {} training and {} test images to {}", train.len(), test.len(), dir.display());
    println!("class counts {:?}", manifest.counts);
    Ok(())
}

fn phase1(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let (manifest, train, test) = load_dataset(&cfg.data_dir())?;
    let out = layout.phase1();
    write_resolved(cfg, &out)?;
    let outcome = train_phase1(cfg, &manifest, &train, &test, &out)?;
    println!(
        "phase1: overall {:.4}, tail {}",
        outcome.metrics.overall,
        fmt_opt(outcome.metrics.tail_accuracy())
    );
    Ok(())
}

fn cache_features(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let (_, train, _) = load_dataset(&cfg.data_dir())?;
    let params = ModelParams::load_checkpoint(&layout.phase1_checkpoint())?;
    let cache = cache_all(&params, &train, 256)?;
    cache.save(&layout.cache())?;
    write_resolved(cfg, &layout.cache())?;
    println!("cached {} samples in {}", cache.len(), layout.cache().display());
    Ok(())
}

fn phase2(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let (manifest, _, test) = load_dataset(&cfg.data_dir())?;
    let params = ModelParams::load_checkpoint(&layout.phase1_checkpoint())?;
    let cache = load_cache(&layout.cache())?;
    let out = layout.phase2(cfg.phase2_arm());
    write_resolved(cfg, &out)?;
    let o = finetune_phase2(cfg, &manifest, &params, &cache, &test, Some(&out))?;
    println!(
        "phase2 {}: overall {:.4} -> {:.4} (best {:.4} at {}), tail {} -> {}",
        cfg.phase2_arm(),
        o.initial_metrics.overall,
        o.last_metrics.overall,
        o.best_metrics.overall,
        o.best_iteration,
        fmt_opt(o.initial_metrics.tail_accuracy()),
        fmt_opt(o.last_metrics.tail_accuracy())
    );
    Ok(())
}

fn eval(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>, untrained: bool) -> Result<()> {
    let layout = Layout::new(cfg);
    let (manifest, _, test) = load_dataset(&cfg.data_dir())?;
    let (params, name) = if untrained {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (ModelParams::<f32>::init(&cfg.arch(), &mut rng)?, "untrained".to_string())
    } else {
        let dir = checkpoint.unwrap_or_else(|| layout.phase1_checkpoint());
        let name = dir.file_name().map_or("checkpoint".into(), |n| n.to_string_lossy().into_owned());
        (ModelParams::load_checkpoint(&dir)?, name)
    };
    if params.arch.n_classes != manifest.n_classes() {
        return Err(Error::Data(format!(
            "checkpoint has {} classes, dataset has {}",
            params.arch.n_classes,
            manifest.n_classes()
        )));
    }
    let m = evaluate(&params, &test, &manifest.counts)?;
    let out = layout.root.join("eval").join(&name);
    write_resolved(cfg, &out)?;
    write_atomic(&out.join(METRICS_FILE), serde_json::to_string_pretty(&m)?.as_bytes())?;
    let summary = StageSummary::of(&Stage {
        label: name.clone(),
        phase: "eval".into(),
        arm: name,
        metrics: m,
    });
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(serde::Deserialize)]
struct Phase2Summary {
    last: Metrics,
    best: Metrics,
}

fn report(cfg: &ExperimentConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let manifest = load_manifest(&cfg.data_dir())?;
    let p1_dir = layout.phase1();
    let p1_metrics: Metrics = read_json(&p1_dir.join(METRICS_FILE), "phase1")?;
    let mut stages = vec![Stage {
        label: "phase1".into(),
        phase: "phase1".into(),
        arm: cfg.loss.as_str().into(),
        metrics: p1_metrics,
    }];
    let mut runs = vec![RunRecord::load(&p1_dir.join(RUN_LOG), "phase1")?];
    let mut arms = 0;
    for arm in ["aug", "noaug"] {
        let dir = layout.phase2(arm);
        if !dir.join(METRICS_FILE).exists() {
            continue;
        }
        arms += 1;
        let s: Phase2Summary = read_json(&dir.join(METRICS_FILE), "phase2")?;
        stages.push(Stage {
            label: format!("phase2_{arm}"),
            phase: "phase2".into(),
            arm: arm.into(),
            metrics: s.last,
        });
        stages.push(Stage {
            label: format!("phase2_{arm}_best"),
            phase: "phase2_best".into(),
            arm: arm.into(),
            metrics: s.best,
        });
        runs.push(RunRecord::load(&dir.join(RUN_LOG), "phase2")?);
    }
    if arms == 0 {
        return Err(Error::MissingArtifact {
            path: layout.phase2(cfg.phase2_arm()).join(METRICS_FILE),
            producer: "phase2",
        });
    }
    let scatter = match load_cache(&layout.cache()) {
        Ok(cache) => {
            let a = &cfg.phase2.augment;
            Some(pca_scatter(&masked_means(&cache, a.tau_s, a.tau_g, |_| true)?)?)
        }
        Err(Error::MissingArtifact { .. }) => None,
        Err(e) => return Err(e),
    };
    let dir = layout.report();
    let input = ReportInput {
        class_names: &manifest.class_names,
        stages: &stages,
        runs: &runs,
        scatter: scatter.as_ref(),
    };
    let files = emit_report(&input, &ALL_FORMATS, &dir)?;
    write_resolved(cfg, &dir)?;
    print!("{}", groups_csv(&stages));
    println!("wrote {} files to {}", files.len() + 1, dir.display());
    Ok(())
}

fn grid_key(k: &str) -> String {
    if k.contains('.') {
        k.to_string()
    } else {
        format!("phase2.{k}")
    }
}

fn ablate(cfg: &ExperimentConfig, grid: &[String]) -> Result<()> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for g in grid {
        let (k, vs) = g.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            key: g.clone(),
            reason: "grid must look like key=v1,v2".into(),
        })?;
        let key = grid_key(k.trim());
        if !key.starts_with("phase2.") {
            return Err(Error::Config {
                line: 0,
                key,
                reason: "only phase2 settings can be swept on a fixed Phase-I checkpoint".into(),
            });
        }
        axes.push((key, vs.split(',').map(|v| v.trim().to_string()).collect()));
    }
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, vs) in &axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                vs.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    let layout = Layout::new(cfg);
    let (manifest, _, test) = load_dataset(&cfg.data_dir())?;
    let params = ModelParams::load_checkpoint(&layout.phase1_checkpoint())?;
    let cache = load_cache(&layout.cache())?;
    let root = layout.root.join("ablate");
    let mut table = String::new();
    let names: Vec<&str> = axes.iter().map(|(k, _)| k.trim_start_matches("phase2.")).collect();
    table.push_str(&format!(
        "{},head_classes,tail_classes,initial_overall,overall,many,medium,few,tail,best_overall,best_iteration\n",
        names.join(",")
    ));
    for cell in cells {
        let mut c = cfg.clone();
        for (k, v) in &cell {
            c.set(k, v, 0)?;
        }
        c.validate()?;
        let tag: Vec<String> = cell
            .iter()
            .map(|(k, v)| format!("{}={v}", k.trim_start_matches("phase2.")))
            .collect();
        let dir = root.join(tag.join("_"));
        write_resolved(&c, &dir)?;
        let o = finetune_phase2(&c, &manifest, &params, &cache, &test, Some(&dir))?;
        let g = &o.last_metrics.groups;
        let values: Vec<&str> = cell.iter().map(|(_, v)| v.as_str()).collect();
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            values.join(","),
            o.split.h,
            o.split.tail_class_ids.len(),
            o.initial_metrics.overall,
            o.last_metrics.overall,
            fmt_opt(g.many),
            fmt_opt(g.medium),
            fmt_opt(g.few),
            fmt_opt(o.last_metrics.tail_accuracy()),
            o.best_metrics.overall,
            o.best_iteration
        ));
        info!("ablate {}: overall {:.4}", tag.join(" "), o.last_metrics.overall);
    }
    write_atomic(&root.join("summary.csv"), table.as_bytes())?;
    write_resolved(cfg, &root)?;
    print!("{table}");
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| v.to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&resolve(&c)?),
        Command::Phase1(c) => phase1(&resolve(&c)?),
        Command::CacheFeatures(c) => cache_features(&resolve(&c)?),
        Command::Phase2(c) => phase2(&resolve(&c)?),
        Command::Eval {
            common,
            checkpoint,
            untrained,
        } => eval(&resolve(&common)?, checkpoint, untrained),
        Command::Report(c) => report(&resolve(&c)?),
        Command::Ablate { common, grid } => ablate(&resolve(&common)?, &grid),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
