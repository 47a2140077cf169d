//! Run-directory layout: four artifacts plus `manifest.json`.
//!
//! Every artifact carries the configuration hash and master seed: JSON files
//! as top-level fields, CSV files in a leading `# config_hash=… master_seed=…`
//! line. The manifest is written first with `complete = false` and rewritten
//! after each artifact, so an interrupted run leaves an honest manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mlsa_core::asymptotics::rates;
use mlsa_core::config::{sha256_hex, Experiment, ExperimentConfig};
use mlsa_core::harness::cost_curve_csv;
use mlsa_core::params::Regime;
use mlsa_core::sa_driver::RunRecord;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::CliResult;

pub const MANIFEST: &str = "manifest.json";
pub const RECORDS: &str = "records.csv";
pub const CLT_REPORT: &str = "clt_report.json";
pub const COST_CURVE: &str = "cost_curve.csv";
pub const L2_MONITOR: &str = "l2_monitor.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub regime: Regime,
    /// Cost rate `𝔯` (slow regime only).
    pub rate: Option<f64>,
    pub scale: f64,
    pub replicas: u64,
    pub complete: bool,
    pub files: Vec<FileEntry>,
}

pub fn csv_tag(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} master_seed={seed}\n")
}

/// Parses the leading tag line of an artifact CSV.
pub fn parse_csv_tag(text: &str) -> Option<(String, u64)> {
    let line = text.lines().next()?.strip_prefix("# ")?;
    let mut hash = None;
    let mut seed = None;
    for field in line.split_whitespace() {
        match field.split_once('=')? {
            ("config_hash", h) => hash = Some(h.to_owned()),
            ("master_seed", s) => seed = s.parse().ok(),
            _ => {}
        }
    }
    Some((hash?, seed?))
}

fn records_csv(records: &[RunRecord]) -> String {
    let d = records
        .iter()
        .find_map(|r| r.checkpoints.first())
        .map_or(0, |c| c.theta.len());
    let mut out = String::from("replica,valid,n");
    for i in 0..d {
        let _ = write!(out, ",theta_{i}");
    }
    for i in 0..d {
        let _ = write!(out, ",theta_bar_{i}");
    }
    out.push_str(",cost,level,excursion\n");
    for r in records {
        for c in &r.checkpoints {
            let _ = write!(out, "{},{},{}", r.stream, r.valid, c.n);
            for x in c.theta.iter().chain(&c.theta_bar) {
                let _ = write!(out, ",{x:e}");
            }
            let exc = c.excursion.map_or(String::new(), |e| format!("{e:e}"));
            let _ = writeln!(out, ",{:e},{},{exc}", c.cost, c.level);
        }
    }
    out
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> CliResult<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(mlsa_core::Error::from)?;
    fs::write(dir.join(MANIFEST), text + "\n")?;
    Ok(())
}

fn add(dir: &Path, manifest: &mut Manifest, name: &str, contents: &str) -> CliResult<()> {
    fs::write(dir.join(name), contents)?;
    manifest.files.push(FileEntry {
        name: name.to_owned(),
        sha256: sha256_hex(contents.as_bytes()),
        bytes: contents.len() as u64,
    });
    write_manifest(dir, manifest)
}

fn tagged_json(hash: &str, seed: u64, key: &str, value: impl Serialize) -> CliResult<String> {
    let v = json!({ "config_hash": hash, "master_seed": seed, key: value });
    Ok(serde_json::to_string_pretty(&v).map_err(mlsa_core::Error::from)? + "\n")
}

pub fn run(cfg: &ExperimentConfig, experiment: &Experiment, workers: usize, dir: &Path) -> CliResult<()> {
    let hash = cfg.hash()?;
    let seed = experiment.spec.master_seed;
    let params = experiment.schedule.params();
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        config_hash: hash.clone(),
        master_seed: seed,
        regime: params.regime(),
        rate: (params.regime() == Regime::Slow).then(|| rates(params).r),
        scale: params.scale(),
        replicas: experiment.spec.replicas,
        complete: false,
        files: Vec::new(),
    };
    write_manifest(dir, &manifest)?;
    println!("config_hash {hash}");
    println!("master_seed {seed}");

    let out = experiment.run(workers)?;
    let aborted = out.records.iter().filter(|r| !r.valid).count();
    println!("replicas {} aborted {aborted} screened {}", out.records.len(), out.screened.len());

    add(dir, &mut manifest, RECORDS, &(csv_tag(&hash, seed) + &records_csv(&out.records)))?;
    add(dir, &mut manifest, CLT_REPORT, &tagged_json(&hash, seed, "clt", &out.clt)?)?;
    add(dir, &mut manifest, COST_CURVE, &(csv_tag(&hash, seed) + &cost_curve_csv(&out.cost_curve)))?;
    add(dir, &mut manifest, L2_MONITOR, &tagged_json(&hash, seed, "l2", &out.l2)?)?;
    manifest.complete = true;
    write_manifest(dir, &manifest)?;

    if let Some(clt) = out.clt.done() {
        let s = &clt.statistics;
        println!(
            "clt n {} frobenius {:.4} mean_norm {:.4} ks {}{}",
            clt.checkpoint,
            s.frobenius_relative,
            s.mean_norm(),
            if s.ks_pass { "pass" } else { "fail" },
            if s.underpowered { " underpowered" } else { "" }
        );
    }
    if let Some(l2) = out.l2.done() {
        match l2.ratio {
            Some(r) => println!("l2 ratio {r:.4}"),
            None => println!("l2 ratio undefined"),
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}
