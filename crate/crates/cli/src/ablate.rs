use std::path::Path;

use anyhow::bail;

use promptseg_core::data::DatasetManifest;
use promptseg_core::training::TrainConfig;

use crate::args::{AblateArgs, Format};
use crate::commands::{resolve_config, resolve_split, run_training};
use crate::record::ExperimentRecord;

pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "uplc_sweep.csv";

/// `(name, prompt_enabled, uplc_enabled)` in table order.
pub const GRID: [(&str, bool, bool); 4] =
    [("no_prompt_no_uplc", false, false), ("no_prompt", false, true), ("no_uplc", true, false), ("full", true, true)];

#[derive(Debug, Default)]
pub struct AblationOutcome {
    pub grid: Vec<ExperimentRecord>,
    /// `(N, record)` in increasing `N`.
    pub sweep: Vec<(usize, ExperimentRecord)>,
    pub failures: Vec<(String, String)>,
}

fn mark(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "no"
    }
}

fn write_grid(out: &Path, manifest: &DatasetManifest, grid: &[ExperimentRecord], format: Format) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(out.join(ABLATION_FILE))?;
    let mut header = vec!["arm".to_string(), "prompt".into(), "uplc".into(), "mdice".into(), "miou".into()];
    header.extend(manifest.tasks.iter().map(|t| format!("dice_{}", t.task_id)));
    w.write_record(&header)?;
    let mut table = format!("{:<20} {:>6} {:>6} {:>8} {:>8}\n", "arm", "PuD", "UPLC", "mDice", "mIoU");
    for r in grid {
        let Some(rep) = &r.final_report else { continue };
        let mut row = vec![
            r.name.clone(),
            mark(r.config.prompt_enabled).into(),
            mark(r.config.uplc_enabled).into(),
            rep.mdice.to_string(),
            rep.miou.to_string(),
        ];
        row.extend(manifest.tasks.iter().map(|t| rep.task_dice(t.task_id).map(|d| d.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
        table += &format!(
            "{:<20} {:>6} {:>6} {:>8.2} {:>8.2}\n",
            r.name,
            mark(r.config.prompt_enabled),
            mark(r.config.uplc_enabled),
            rep.mdice,
            rep.miou
        );
    }
    w.flush()?;
    if format == Format::Table {
        print!("{table}");
    } else {
        print!("{}", std::fs::read_to_string(out.join(ABLATION_FILE))?);
    }
    Ok(())
}

fn write_sweep(out: &Path, sweep: &[(usize, ExperimentRecord)]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(out.join(SWEEP_FILE))?;
    w.write_record(["n", "mdice", "miou", "uplc_violations", "run"])?;
    for (n, r) in sweep {
        let (md, mi) = r.final_report.as_ref().map_or((String::new(), String::new()), |x| (x.mdice.to_string(), x.miou.to_string()));
        w.write_record([n.to_string(), md, mi, r.uplc_violations.to_string(), r.name.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the on/off grid and the perturbation-count sweep with shared seeds
/// and split. Completed arms are kept on disk even when another fails.
pub fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<AblationOutcome> {
    if args.out.join(ABLATION_FILE).exists() || args.out.join(SWEEP_FILE).exists() {
        if !args.force {
            bail!("{} already holds an ablation; pass --force to overwrite it", args.out.display());
        }
    }
    let manifest = DatasetManifest::open(&args.data)?;
    let base = resolve_config(&args.flags, &manifest)?;
    let split = resolve_split(&manifest, &args.flags, &base)?;
    std::fs::create_dir_all(&args.out)?;
    let mut outcome = AblationOutcome::default();
    let run = |name: String, cfg: TrainConfig, outcome: &mut AblationOutcome| -> Option<ExperimentRecord> {
        eprintln!("arm {name}");
        match run_training(&name, &args.data, &manifest, &split, &cfg, &args.out.join(&name)) {
            Ok(r) => Some(r),
            Err(e) => {
                outcome.failures.push((name, format!("{e:#}")));
                None
            }
        }
    };
    if !args.sweep_only {
        for (name, prompt, uplc) in GRID {
            let cfg = TrainConfig { prompt_enabled: prompt, uplc_enabled: uplc, ..base.clone() };
            if let Some(r) = run(name.to_string(), cfg, &mut outcome) {
                outcome.grid.push(r);
            }
        }
        write_grid(&args.out, &manifest, &outcome.grid, args.format)?;
    }
    let mut ns = args.sweep.clone();
    ns.sort_unstable();
    ns.dedup();
    for n in ns {
        let reuse = outcome
            .grid
            .iter()
            .find(|r| r.config.prompt_enabled && r.config.uplc_enabled && r.config.uplc.n == n)
            .cloned();
        let rec = match reuse {
            Some(r) => Some(r),
            None => {
                let mut cfg = TrainConfig { prompt_enabled: true, uplc_enabled: true, ..base.clone() };
                cfg.uplc.n = n;
                run(format!("sweep_n{n}"), cfg, &mut outcome)
            }
        };
        if let Some(r) = rec {
            outcome.sweep.push((n, r));
        }
    }
    write_sweep(&args.out, &outcome.sweep)?;
    if !outcome.failures.is_empty() {
        let list: Vec<String> = outcome.failures.iter().map(|(n, e)| format!("{n}: {e}")).collect();
        bail!("{} arm(s) failed; completed arms were kept\n{}", list.len(), list.join("\n"));
    }
    Ok(outcome)
}
