mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use descry_core::dataset::{load_dataset_as, load_detections, Dataset};
use descry_core::describability::{
    build_union, dataset_accuracy, render_prompt, spectrum, Averaging, DatasetScore,
    DescribabilityProfile, PromptMatrix,
};
use descry_core::embedding::{ann_key, prompt_key, read_store};
use descry_core::episode::{sample_many, write_episode_manifest};
use descry_core::eval::{evaluate_dataset, write_ap_result, RunInfo};
use descry_core::report::{
    aggregate, ap_ratio, csv_field, load_results_dir, load_spectrum, load_splits, render_reports, RunMatrix,
    StdMode,
};
use descry_core::{fsutil, Error};

use config::{CollectionConfig, ConfigError};

#[derive(Parser)]
#[command(name = "descry", version, about = "Text-describability splits, K-shot episodes and per-split AP reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load every dataset in the config and report problems
    Validate(ConfigArg),
    /// Zero-shot crop accuracy per dataset and the resulting splits
    Profile(ProfileArgs),
    /// Write K-shot training episodes
    Sample(SampleArgs),
    /// Compute AP for one detection result file
    Evaluate(EvaluateArgs),
    /// Aggregate per-run AP into per-split tables and ratios
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides split_sizes from the config, e.g. 12,12,11
    #[arg(long, value_delimiter = ',')]
    split_sizes: Option<Vec<usize>>,
    /// Average accuracy over classes instead of crops
    #[arg(long = "macro")]
    macro_avg: bool,
    #[arg(long)]
    svg: bool,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Shot counts; defaults to the config's shots
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<u32>>,
    /// Seeds; defaults to 0..seeds from the config
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Restrict to these dataset ids
    #[arg(long)]
    dataset: Vec<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run information recorded in the result (all three or none)
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    seed: Option<u32>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of result JSON files, or a CSV run matrix
    #[arg(long)]
    results: PathBuf,
    /// CSV with dataset_id and split columns
    #[arg(long)]
    splits: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Spectrum CSV written by `profile`, copied into the report
    #[arg(long)]
    spectrum: Option<PathBuf>,
    /// Supplies ratio_pairs
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra OVD:COD method pair
    #[arg(long)]
    ratio: Vec<String>,
    /// Use the n-1 denominator for the spread across seeds
    #[arg(long)]
    sample_std: bool,
    #[arg(long)]
    svg: bool,
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Failure already reported on stdout.
#[derive(Debug)]
struct Reported;

impl std::fmt::Display for Reported {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("validation failed")
    }
}

impl std::error::Error for Reported {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if cause.is::<Reported>() || cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_io() { 3 } else { 2 };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Validate(a) => validate(&a),
        Command::Profile(a) => profile(&a),
        Command::Sample(a) => sample(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Report(a) => report(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.is::<Reported>() {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn set_jobs(jobs: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            bail!(Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn load_all(cfg: &CollectionConfig) -> anyhow::Result<Vec<Dataset>> {
    cfg.datasets
        .iter()
        .map(|d| {
            load_dataset_as(&d.annotation_path, d.dataset_id.clone())
                .with_context(|| format!("dataset {}", d.dataset_id))
        })
        .collect()
}

fn validate(args: &ConfigArg) -> anyhow::Result<()> {
    let cfg = CollectionConfig::load(&args.config)?;
    let mut failed = false;
    let mut loaded = Vec::new();
    for entry in &cfg.datasets {
        let id = &entry.dataset_id;
        let ds = match load_dataset_as(&entry.annotation_path, id.clone()) {
            Ok(ds) => ds,
            Err(e) => {
                println!("FAIL {id}: {e}");
                failed = true;
                continue;
            }
        };
        if let Some(path) = &entry.embedding_path {
            let missing = read_store(path).map(|store| {
                ds.annotations()
                    .iter()
                    .filter(|a| !a.ignore && store.get(&ann_key(a.id)).is_none())
                    .count()
            });
            match missing {
                Ok(0) => {}
                Ok(n) => {
                    println!("FAIL {id}: {n} annotation(s) have no embedding in {}", path.display());
                    failed = true;
                    continue;
                }
                Err(e) => {
                    println!("FAIL {id}: {e}");
                    failed = true;
                    continue;
                }
            }
        }
        let ignored = ds.annotations().iter().filter(|a| a.ignore).count();
        println!(
            "OK   {id}: {} images, {} annotations ({ignored} ignore), {} categories",
            ds.images().len(),
            ds.annotations().len(),
            ds.categories().len()
        );
        loaded.push(ds);
    }
    if !cfg.split_sizes.is_empty() {
        let total: usize = cfg.split_sizes.iter().sum();
        if total != cfg.datasets.len() {
            println!(
                "FAIL config: split_sizes sum to {total} but there are {} datasets",
                cfg.datasets.len()
            );
            failed = true;
        }
    }
    if let (Some(path), false) = (&cfg.prompt_embedding_path, loaded.is_empty()) {
        let check = build_union(&loaded).and_then(|union| {
            let store = read_store(path)?;
            PromptMatrix::from_store(&store, &union).map(|_| ())
        });
        if let Err(e) = check {
            println!("FAIL prompts: {e}");
            failed = true;
        }
    }
    if failed {
        bail!(Reported);
    }
    Ok(())
}

fn profile(args: &ProfileArgs) -> anyhow::Result<()> {
    set_jobs(args.jobs)?;
    let cfg = CollectionConfig::load(&args.config)?;
    let sizes = args.split_sizes.clone().unwrap_or_else(|| cfg.split_sizes.clone());
    if sizes.is_empty() {
        bail!(Usage("split sizes are required (--split-sizes or split_sizes in the config)".into()));
    }
    let prompt_path = cfg
        .prompt_embedding_path
        .as_ref()
        .ok_or_else(|| ConfigError("prompt_embedding_path is not set".into()))?;
    let datasets = load_all(&cfg)?;
    let union = build_union(&datasets)?;
    let prompts = PromptMatrix::from_store(&read_store(prompt_path)?, &union)?;
    let averaging = if args.macro_avg {
        Averaging::Macro
    } else {
        Averaging::Micro
    };
    let mut scores = BTreeMap::new();
    for (entry, ds) in cfg.datasets.iter().zip(&datasets) {
        let path = entry.embedding_path.as_ref().ok_or_else(|| {
            ConfigError(format!("dataset {} has no embedding_path", entry.dataset_id))
        })?;
        let store = read_store(path)?;
        let acc = dataset_accuracy(ds, &store, &union, &prompts, averaging)
            .with_context(|| format!("dataset {}", entry.dataset_id))?;
        scores.insert(
            entry.dataset_id.clone(),
            DatasetScore {
                accuracy: acc.accuracy,
                evaluated: acc.evaluated,
            },
        );
    }
    let profile = DescribabilityProfile::new(scores, &sizes)?;
    let rows = spectrum(&profile);

    let mut classes = String::from("index,class,prompt_key,prompt_text\n");
    for (i, c) in union.classes().iter().enumerate() {
        let text = render_prompt(&cfg.prompt_template, c);
        classes.push_str(&format!(
            "{i},{},{},{}\n",
            csv_field(c),
            csv_field(&prompt_key(c)),
            csv_field(&text)
        ));
    }
    fsutil::write_atomic(&args.out.join("union_classes.csv"), classes.as_bytes())?;
    fsutil::write_atomic(
        &args.out.join("splits.csv"),
        descry_core::report::splits_csv(profile.splits()).as_bytes(),
    )?;
    fsutil::write_atomic(
        &args.out.join("spectrum.csv"),
        descry_core::report::spectrum_csv(&rows).as_bytes(),
    )?;
    if args.svg {
        fsutil::write_atomic(
            &args.out.join("spectrum.svg"),
            descry_core::report::spectrum_svg(&rows).as_bytes(),
        )?;
    }
    for r in &rows {
        println!("{}\t{:.4}\t{}\t{}", r.dataset_id, r.accuracy, r.evaluated, r.split);
    }
    Ok(())
}

/// Directory name for a dataset id.
fn dir_name(id: &str) -> String {
    id.chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect()
}

fn sample(args: &SampleArgs) -> anyhow::Result<()> {
    if args.jobs == 0 {
        bail!(Usage("--jobs must be at least 1".into()));
    }
    let cfg = CollectionConfig::load(&args.config)?;
    let shots = args.k.clone().unwrap_or_else(|| cfg.shots.clone());
    if shots.is_empty() || shots.contains(&0) {
        bail!(Usage("--k values must be positive".into()));
    }
    let seeds = args
        .seed
        .clone()
        .unwrap_or_else(|| (0..u64::from(cfg.seeds)).collect());
    for id in &args.dataset {
        if cfg.dataset(id).is_none() {
            bail!(Usage(format!("unknown dataset {id:?}")));
        }
    }
    let requests: Vec<(u32, u64)> = shots
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    println!("dataset_id,k,seed,images,annotations,shortfall_categories");
    for entry in &cfg.datasets {
        if !args.dataset.is_empty() && !args.dataset.contains(&entry.dataset_id) {
            continue;
        }
        let ds = load_dataset_as(&entry.annotation_path, entry.dataset_id.clone())
            .with_context(|| format!("dataset {}", entry.dataset_id))?;
        let episodes = sample_many(&ds, &requests, args.jobs)?;
        let dir = args.out.join(dir_name(&entry.dataset_id));
        for e in &episodes {
            write_episode_manifest(e, &ds, &dir.join(format!("k{}_seed{}.json", e.k, e.seed)))?;
            println!(
                "{},{},{},{},{},{}",
                csv_field(&e.dataset_id),
                e.k,
                e.seed,
                e.image_ids.len(),
                e.annotation_ids.len(),
                e.shortfall_categories.len()
            );
        }
    }
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    set_jobs(args.jobs)?;
    let run = match (&args.method, args.k, args.seed) {
        (Some(method), Some(k), Some(seed)) => Some(RunInfo {
            method: method.clone(),
            k,
            seed,
        }),
        (None, None, None) => None,
        _ => bail!(Usage("--method, --k and --seed must be given together".into())),
    };
    let cfg = CollectionConfig::load(&args.config)?;
    let entry = cfg
        .dataset(&args.dataset)
        .ok_or_else(|| Usage(format!("unknown dataset {:?}", args.dataset)))?;
    let ds = load_dataset_as(&entry.annotation_path, entry.dataset_id.clone())?;
    let dets = load_detections(&args.detections, &ds)
        .with_context(|| format!("detections {}", args.detections.display()))?;
    let mut result = evaluate_dataset(&ds, &dets)?;
    result.run = run;
    write_ap_result(&result, &args.out)?;
    match result.ap_5095 {
        Some(ap) => println!("{}\t{:.4}", result.dataset_id, ap),
        None => println!("{}\tundefined (no ground truth)", result.dataset_id),
    }
    Ok(())
}

fn parse_pair(s: &str) -> anyhow::Result<(String, String)> {
    let (o, c) = s
        .rsplit_once(':')
        .ok_or_else(|| Usage(format!("--ratio expects OVD:COD, got {s:?}")))?;
    if o.is_empty() || c.is_empty() {
        bail!(Usage(format!("--ratio expects OVD:COD, got {s:?}")));
    }
    Ok((o.to_owned(), c.to_owned()))
}

fn load_matrix(path: &Path) -> anyhow::Result<RunMatrix> {
    let matrix = if path.is_dir() {
        load_results_dir(path)?
    } else if path.exists() {
        RunMatrix::load_csv(path)?
    } else {
        return Err(anyhow!(Error::Io {
            path: path.to_owned(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        }));
    };
    Ok(matrix)
}

fn report(args: &ReportArgs) -> anyhow::Result<()> {
    let mut pairs = Vec::new();
    if let Some(path) = &args.config {
        let cfg = CollectionConfig::load(path)?;
        pairs.extend(cfg.ratio_pairs.into_iter().map(|p| (p.ovd, p.cod)));
    }
    for r in &args.ratio {
        pairs.push(parse_pair(r)?);
    }
    let matrix = load_matrix(&args.results)
        .with_context(|| format!("results {}", args.results.display()))?;
    let splits = load_splits(&args.splits)?;
    let mode = if args.sample_std {
        StdMode::Sample
    } else {
        StdMode::Population
    };
    let summary = aggregate(&matrix, &splits, mode)?;
    let mut ratios = Vec::new();
    for (ovd, cod) in &pairs {
        ratios.extend(ap_ratio(&summary, ovd, cod)?);
    }
    let spectrum_rows = args.spectrum.as_deref().map(load_spectrum).transpose()?;
    let written = render_reports(&summary, &ratios, spectrum_rows.as_deref(), &args.out, args.svg)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
