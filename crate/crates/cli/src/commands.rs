use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};

use promptseg_core::data::{build_dataset, default_tasks, split_partition, DatasetManifest, SplitManifest};
use promptseg_core::metrics::{evaluate_samples, EvalReport};
use promptseg_core::model::{checkpoint, DecoderKind};
use promptseg_core::training::{train, TrainConfig, TrainData, HISTORY_FILE};

use crate::args::{EvalArgs, Format, SynthArgs, TrainArgs, TrainFlags};
use crate::record::{code_version_hash, ExperimentRecord, CONFIG_FILE, RECORD_FILE, REPORT_FILE, SPLIT_FILE};

pub fn print_report(report: &EvalReport, format: Format) -> anyhow::Result<()> {
    match format {
        Format::Table => print!("{}", report.to_table()),
        Format::Csv => report.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

fn dir_has_entries(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<DatasetManifest> {
    if dir_has_entries(&args.out) {
        if !args.force {
            bail!("{} is not empty; pass --force to replace the dataset in it", args.out.display());
        }
        // only remove what a previous synth run wrote
        for sub in ["images", "masks"] {
            let p = args.out.join(sub);
            if p.is_dir() {
                std::fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
        let m = args.out.join("manifest.json");
        if m.is_file() {
            std::fs::remove_file(&m)?;
        }
    }
    if args.tasks < 2 {
        bail!("--tasks must be at least 2");
    }
    let manifest = build_dataset(args.n_samples, &default_tasks(args.tasks), args.size, args.seed_data, &args.out)?;
    println!("manifest: {}", args.out.join("manifest.json").display());
    for t in &manifest.tasks {
        let n = manifest.samples.iter().filter(|s| s.masks.contains_key(&t.task_id)).count();
        println!("task {} {:<16} {n} masks", t.task_id, t.name);
    }
    Ok(manifest)
}

/// Trains one configuration into `out`, writing the config, split, history,
/// checkpoints, final report and record.
pub fn run_training(
    name: &str,
    data_dir: &Path,
    manifest: &DatasetManifest,
    split: &SplitManifest,
    cfg: &TrainConfig,
    out: &Path,
) -> anyhow::Result<ExperimentRecord> {
    let start = Instant::now();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let split_path = out.join(SPLIT_FILE);
    std::fs::write(&split_path, serde_json::to_string_pretty(split)?)?;
    let data = TrainData::load(manifest, split)?;
    let outcome = train(cfg, &data, Some(out))?;
    let final_report = outcome.final_eval().cloned();
    if let Some(r) = &final_report {
        r.save_csv(&out.join(REPORT_FILE))?;
    }
    let record = ExperimentRecord {
        name: name.to_string(),
        config: cfg.clone(),
        code_version: code_version_hash(),
        data_dir: data_dir.to_path_buf(),
        dataset_root_seed: manifest.root_seed,
        split_path,
        split: split.clone(),
        history_path: out.join(HISTORY_FILE),
        final_report,
        best: outcome.best,
        uplc_violations: outcome.steps.iter().map(|s| s.uplc_violations).sum(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    record.save(out)?;
    Ok(record)
}

/// Flags resolved against the dataset: without `--size` or a config file the
/// dataset's image size is used.
pub fn resolve_config(flags: &TrainFlags, manifest: &DatasetManifest) -> anyhow::Result<TrainConfig> {
    let mut cfg = flags.resolve()?;
    if flags.size.is_none() && flags.config.is_none() {
        cfg.image_size = manifest.image_size;
    }
    Ok(cfg)
}

pub fn resolve_split(manifest: &DatasetManifest, flags: &TrainFlags, cfg: &TrainConfig) -> anyhow::Result<SplitManifest> {
    Ok(split_partition(manifest, flags.labeled_fraction(), cfg.seeds.data)?)
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<ExperimentRecord> {
    if args.out.join(RECORD_FILE).exists() || args.out.join(HISTORY_FILE).exists() {
        if !args.force {
            bail!("{} already holds a run; pass --force to overwrite it", args.out.display());
        }
    }
    let manifest = DatasetManifest::open(&args.data)?;
    let cfg = resolve_config(&args.flags, &manifest)?;
    let split = resolve_split(&manifest, &args.flags, &cfg)?;
    let name = args.out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let record = run_training(&name, &args.data, &manifest, &split, &cfg, &args.out)?;
    if let Some(r) = &record.final_report {
        print!("{}", r.to_table());
    }
    println!("record: {}", args.out.join(RECORD_FILE).display());
    Ok(record)
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<EvalReport> {
    let (model, meta) = checkpoint::load(&args.checkpoint)?;
    let prompt_enabled = meta
        .get("train_config")
        .and_then(|c| c.get("prompt_enabled"))
        .and_then(|v| v.as_bool())
        .unwrap_or(true);
    let manifest = DatasetManifest::open(&args.data)?;
    let split_path = match &args.split {
        Some(p) => p.clone(),
        None => args.checkpoint.parent().unwrap_or(Path::new(".")).join(SPLIT_FILE),
    };
    let text = std::fs::read_to_string(&split_path).with_context(|| format!("reading split {}", split_path.display()))?;
    let split: SplitManifest = serde_json::from_str(&text)?;
    let samples = split.test_ids.iter().map(|id| manifest.load_sample(id)).collect::<Result<Vec<_>, _>>()?;
    let which = if args.pd { DecoderKind::Pd } else { DecoderKind::Sd };
    let report = evaluate_samples(&model, &manifest, &samples, prompt_enabled, which)?;
    print_report(&report, args.format)?;
    if let Some(out) = &args.out {
        report.save_csv(out)?;
    }
    std::io::stdout().flush()?;
    Ok(report)
}
