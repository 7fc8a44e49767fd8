use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::bail;

use promptseg_core::training::HISTORY_FILE;

use crate::args::{Format, ReportArgs};
use crate::record::{ExperimentRecord, RECORD_FILE};
use crate::svg;

pub const SUMMARY_FILE: &str = "summary.csv";

/// Records found in `dir` itself and its immediate subdirectories, sorted by
/// directory name.
pub fn collect_records(dir: &Path) -> anyhow::Result<Vec<(PathBuf, ExperimentRecord)>> {
    let mut dirs = vec![dir.to_path_buf()];
    if dir.is_dir() {
        let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        subs.sort();
        dirs.extend(subs);
    }
    let mut out = Vec::new();
    for d in dirs {
        let p = d.join(RECORD_FILE);
        if p.is_file() {
            out.push((d, ExperimentRecord::load(&p)?));
        }
    }
    Ok(out)
}

fn read_history(dir: &Path, rec: &ExperimentRecord) -> anyhow::Result<Vec<(f64, f64, f64)>> {
    let path = if rec.history_path.is_file() { rec.history_path.clone() } else { dir.join(HISTORY_FILE) };
    let mut r = csv::Reader::from_path(&path)?;
    let mut rows = Vec::new();
    for row in r.records() {
        let row = row?;
        rows.push((row[0].parse()?, row[3].parse()?, row[4].parse()?));
    }
    Ok(rows)
}

#[derive(Debug, Default)]
pub struct ReportOutcome {
    pub files: Vec<PathBuf>,
}

pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<ReportOutcome> {
    let records = collect_records(&args.records)?;
    if records.is_empty() {
        bail!("no {RECORD_FILE} found in {} or its subdirectories", args.records.display());
    }
    std::fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();
    let tasks: BTreeMap<usize, String> = records
        .iter()
        .filter_map(|(_, r)| r.final_report.as_ref())
        .flat_map(|rep| rep.tasks.iter().map(|t| (t.task_id, t.task_name.clone())))
        .collect();

    let summary = args.out.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&summary)?;
    let mut header: Vec<String> = ["run", "prompt", "uplc", "unlabeled", "uplc_n", "labeled_fraction", "epochs", "mdice", "miou"]
        .map(String::from)
        .to_vec();
    header.extend(tasks.keys().map(|t| format!("dice_{t}")));
    w.write_record(&header)?;
    let mut table = format!("{:<22} {:>6} {:>5} {:>5} {:>3} {:>8} {:>8}\n", "run", "prompt", "uplc", "unl", "N", "mDice", "mIoU");
    for (_, r) in &records {
        let c = &r.config;
        let (md, mi) = r.final_report.as_ref().map_or((f64::NAN, f64::NAN), |x| (x.mdice, x.miou));
        let mut row = vec![
            r.name.clone(),
            c.prompt_enabled.to_string(),
            c.uplc_enabled.to_string(),
            c.use_unlabeled.to_string(),
            c.uplc.n.to_string(),
            r.split.labeled_fraction.to_string(),
            c.epochs.to_string(),
            md.to_string(),
            mi.to_string(),
        ];
        row.extend(tasks.keys().map(|t| {
            r.final_report.as_ref().and_then(|x| x.task_dice(*t)).map(|d| d.to_string()).unwrap_or_default()
        }));
        w.write_record(&row)?;
        table += &format!(
            "{:<22} {:>6} {:>5} {:>5} {:>3} {:>8.2} {:>8.2}\n",
            r.name, c.prompt_enabled, c.uplc_enabled, c.use_unlabeled, c.uplc.n, md, mi
        );
    }
    w.flush()?;
    files.push(summary.clone());
    match args.format {
        Format::Table => print!("{table}"),
        Format::Csv => print!("{}", std::fs::read_to_string(&summary)?),
    }
    if records.len() < 2 {
        return Ok(ReportOutcome { files });
    }

    // loss curves
    let mut series = Vec::new();
    let mut w = csv::Writer::from_path(args.out.join("loss_curves.csv"))?;
    w.write_record(["run", "epoch", "l_sup", "l_unsup"])?;
    for (dir, r) in &records {
        let h = read_history(dir, r)?;
        for &(e, s, u) in &h {
            w.write_record([r.name.clone(), e.to_string(), s.to_string(), u.to_string()])?;
        }
        series.push((format!("{} sup", r.name), h.iter().map(|&(e, s, _)| (e, s)).collect::<Vec<_>>()));
    }
    w.flush()?;
    files.push(args.out.join("loss_curves.csv"));
    let p = args.out.join("loss_curves.svg");
    std::fs::write(&p, svg::line_chart("Supervised loss", "epoch", "loss", &series))?;
    files.push(p);

    // per-task dice bars
    let with_reports: Vec<&ExperimentRecord> = records.iter().map(|(_, r)| r).filter(|r| r.final_report.is_some()).collect();
    let mut w = csv::Writer::from_path(args.out.join("task_dice.csv"))?;
    w.write_record(["run", "task_id", "task", "dice"])?;
    let groups: Vec<String> = tasks.values().cloned().collect();
    let names: Vec<String> = with_reports.iter().map(|r| r.name.clone()).collect();
    let mut values = vec![vec![0.0; names.len()]; groups.len()];
    for (s, r) in with_reports.iter().enumerate() {
        let rep = r.final_report.as_ref().unwrap();
        for (g, (tid, tname)) in tasks.iter().enumerate() {
            if let Some(d) = rep.task_dice(*tid) {
                values[g][s] = d;
                w.write_record([r.name.clone(), tid.to_string(), tname.clone(), d.to_string()])?;
            }
        }
    }
    w.flush()?;
    files.push(args.out.join("task_dice.csv"));
    let p = args.out.join("task_dice.svg");
    std::fs::write(&p, svg::bar_chart("Per-task Dice", "Dice (%)", &groups, &names, &values))?;
    files.push(p);

    // perturbation-count curve over full-method runs that differ in N
    let mut by_n: BTreeMap<usize, f64> = BTreeMap::new();
    for r in &with_reports {
        let c = &r.config;
        if c.prompt_enabled && c.uplc_enabled && c.use_unlabeled {
            by_n.entry(c.uplc.n).or_insert(r.final_report.as_ref().unwrap().mdice);
        }
    }
    if by_n.len() >= 2 {
        let mut w = csv::Writer::from_path(args.out.join("n_sweep.csv"))?;
        w.write_record(["n", "mdice"])?;
        for (n, d) in &by_n {
            w.write_record([n.to_string(), d.to_string()])?;
        }
        w.flush()?;
        files.push(args.out.join("n_sweep.csv"));
        let pts: Vec<(f64, f64)> = by_n.iter().map(|(&n, &d)| (n as f64, d)).collect();
        let p = args.out.join("n_sweep.svg");
        std::fs::write(&p, svg::line_chart("Perturbation count", "N", "mDice (%)", &[("mDice".into(), pts)]))?;
        files.push(p);
    }
    Ok(ReportOutcome { files })
}
