//! Sequential experiment execution and run summaries.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use globset::Glob;

use mpfio_core::verify::{timed, ExperimentReport, Table};

use crate::config::{ConfigError, LoadedConfig};
use crate::experiments::{self, Planned};

/// Options that override the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub filter: Option<String>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub out: PathBuf,
    pub reports: Vec<ExperimentReport>,
}

impl RunOutcome {
    pub fn all_passed(&self) -> bool {
        self.reports.iter().all(|r| r.pass)
    }
}

/// Experiments selected by `filter` (a glob over ids), in id order.
pub fn select(cfg: &LoadedConfig, filter: Option<&str>) -> Result<Vec<Planned>, ConfigError> {
    let planned = experiments::plan_all(cfg)?;
    let Some(pattern) = filter else { return Ok(planned) };
    let glob = Glob::new(pattern)
        .map_err(|e| ConfigError { field: "--filter".into(), line: None, message: e.to_string() })?
        .compile_matcher();
    Ok(planned.into_iter().filter(|p| glob.is_match(&p.id)).collect())
}

pub fn out_dir(cfg: &LoadedConfig, opts: &RunOptions) -> PathBuf {
    opts.out.clone().or_else(|| cfg.config.run.out.clone()).unwrap_or_else(|| PathBuf::from("results"))
}

/// Runs the selected experiments and writes reports plus summaries to the
/// output directory.
pub fn run(cfg: &LoadedConfig, opts: &RunOptions, mut log: impl Write) -> Result<RunOutcome> {
    let planned = select(cfg, opts.filter.as_deref())?;
    let out = out_dir(cfg, opts);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let seed = opts.seed.unwrap_or(cfg.config.run.seed);
    let mut reports = Vec::new();
    let mut timing = Table::new("timing", &["id", "kind", "wall_ms"]);
    for p in &planned {
        writeln!(log, "running {} ({})", p.id, p.kind)?;
        let (report, ms) = timed(|| experiments::run(cfg, p, seed));
        let mut report = report.with_context(|| format!("experiment '{}'", p.id))?;
        report.timing.insert("wall_ms".into(), ms);
        report.write(&out).with_context(|| format!("writing report for '{}'", p.id))?;
        let failed = report.failed_checks();
        writeln!(log, "  {} {}", if report.pass { "pass" } else { "FAIL" }, failed.join(","))?;
        timing.push([p.id.clone(), p.kind.clone(), format!("{ms:.3}")]);
        reports.push(report);
    }
    write_summary(&out, &planned, &reports)?;
    fs::write(out.join("summary.timing.csv"), timing.to_csv())?;
    Ok(RunOutcome { out, reports })
}

fn write_summary(out: &Path, planned: &[Planned], reports: &[ExperimentReport]) -> Result<()> {
    let mut t = Table::new("summary", &["id", "kind", "pass", "failed_checks"]);
    for (p, r) in planned.iter().zip(reports) {
        t.push([p.id.clone(), p.kind.clone(), r.pass.to_string(), r.failed_checks().join(";")]);
    }
    fs::write(out.join("summary.csv"), t.to_csv())?;
    Ok(())
}

/// Worker count: flag or environment, then config, then available cores.
pub fn workers(flag: Option<usize>, cfg: Option<&LoadedConfig>) -> usize {
    flag.or_else(|| cfg.and_then(|c| c.config.run.workers))
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(run: &str) -> LoadedConfig {
        LoadedConfig::parse(&format!(
            "[space]\ndims = [1]\n[grid]\nextent = 1.0\npoints = 16\n{run}\
             [experiments.l2_norm]\n[experiments.atom_validity]\ncount = 2\n[experiments.atom_more]\nkind = \"atom_validity\"\ncount = 2\n"
        ))
        .unwrap()
    }

    #[test]
    fn workers_follow_precedence() {
        let c = cfg("[run]\nworkers = 3\n");
        assert_eq!(workers(Some(2), Some(&c)), 2);
        assert_eq!(workers(None, Some(&c)), 3);
        assert!(workers(None, None) >= 1);
        assert!(workers(Some(0), None) >= 1);
    }

    #[test]
    fn filter_is_a_glob_over_ids() {
        let c = cfg("");
        let ids = |f: Option<&str>| select(&c, f).unwrap().into_iter().map(|p| p.id).collect::<Vec<_>>();
        assert_eq!(ids(None), ["atom_more", "atom_validity", "l2_norm"]);
        assert_eq!(ids(Some("atom_*")), ["atom_more", "atom_validity"]);
        assert!(ids(Some("zzz")).is_empty());
        assert_eq!(select(&c, Some("[")).unwrap_err().field, "--filter");
    }

    #[test]
    fn run_writes_reports_and_summaries() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("[run]\nseed = 3\n");
        let opts = RunOptions { out: Some(dir.path().to_path_buf()), seed: None, filter: None };
        let outcome = run(&c, &opts, std::io::sink()).unwrap();
        assert!(outcome.all_passed());
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 4);
        let timing = fs::read_to_string(dir.path().join("summary.timing.csv")).unwrap();
        assert!(timing.starts_with("id,kind,wall_ms\n"));
        let report = fs::read_to_string(dir.path().join("l2_norm.json")).unwrap();
        assert!(!report.contains("wall_ms"));
        assert!(fs::read_to_string(dir.path().join("l2_norm.timing.json")).unwrap().contains("wall_ms"));
    }
}
