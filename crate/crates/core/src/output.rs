//! Run artifacts: `rounds.csv`, `summary.json` and `curve.tsv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Serialize, Serializer};

use crate::config::ExperimentConfig;
use crate::engine::RunReport;
use crate::error::Result;

pub const ROUNDS_HEADER: &str =
    "round,test_accuracy,n_sampled,n_clean_candidates,n_noisy_candidates,comm_units";

pub fn rounds_csv(report: &RunReport) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    for r in &report.per_round {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            r.test_accuracy,
            r.sampled.len(),
            r.clean_candidates.len(),
            r.noisy_candidates.len(),
            r.comm_units
        );
    }
    out
}

/// A number, or the string `"n/a"` when absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrNa(pub Option<f64>);

impl Serialize for OrNa {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(v) => s.serialize_f64(v),
            None => s.serialize_str("n/a"),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub mode: &'static str,
    pub seed: u64,
    pub final_accuracy: f64,
    pub identification_accuracy: OrNa,
    pub total_comm_units: usize,
    pub rounds: usize,
    pub pruned_ids: &'a [usize],
    pub ncs: &'a BTreeMap<usize, u32>,
    pub truth_noisy: &'a [usize],
    pub config: &'a ExperimentConfig,
}

impl<'a> From<&'a RunReport> for Summary<'a> {
    fn from(r: &'a RunReport) -> Self {
        Summary {
            mode: if r.clipfl { "clipfl" } else { "vanilla" },
            seed: r.seed,
            final_accuracy: r.final_accuracy,
            identification_accuracy: OrNa(r.identification_accuracy),
            total_comm_units: r.total_comm_units,
            rounds: r.per_round.len(),
            pruned_ids: &r.pruned_ids,
            ncs: &r.ncs,
            truth_noisy: &r.truth_noisy,
            config: &r.config,
        }
    }
}

pub fn summary_json(report: &RunReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&Summary::from(report))?;
    s.push('\n');
    Ok(s)
}

/// `round, vanilla_acc, clipfl_acc`, tab separated. A missing run leaves its
/// column empty.
pub fn curve_tsv(vanilla: Option<&RunReport>, clipfl: Option<&RunReport>) -> String {
    let rounds = vanilla
        .map(|r| r.per_round.len())
        .max(clipfl.map(|r| r.per_round.len()))
        .unwrap_or(0);
    let cell = |r: Option<&RunReport>, i: usize| {
        r.and_then(|r| r.per_round.get(i))
            .map(|m| m.test_accuracy.to_string())
            .unwrap_or_default()
    };
    let mut out = String::from("round\tvanilla_acc\tclipfl_acc\n");
    for i in 0..rounds {
        let _ = writeln!(out, "{i}\t{}\t{}", cell(vanilla, i), cell(clipfl, i));
    }
    out
}

/// Writes `rounds.csv` and `summary.json` for `report` under `dir`, with an
/// optional file-name prefix.
pub fn write_run(dir: &Path, prefix: &str, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{prefix}rounds.csv")), rounds_csv(report))?;
    fs::write(dir.join(format!("{prefix}summary.json")), summary_json(report)?)?;
    Ok(())
}

pub fn write_curve(dir: &Path, vanilla: Option<&RunReport>, clipfl: Option<&RunReport>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("curve.tsv"), curve_tsv(vanilla, clipfl))?;
    Ok(())
}

/// Side-by-side comparison of a vanilla and a pruning run.
pub fn comparison_table(vanilla: &RunReport, clipfl: &RunReport) -> String {
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let id = clipfl
        .identification_accuracy
        .map(pct)
        .unwrap_or_else(|| "n/a".into());
    let delta = clipfl.final_accuracy - vanilla.final_accuracy;
    let comm = 1.0 - clipfl.total_comm_units as f64 / vanilla.total_comm_units as f64;
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>12} {:>16} {:>12}", "run", "final_acc%", "noisy_id_acc%", "comm_units");
    let _ = writeln!(
        out,
        "{:<10} {:>12} {:>16} {:>12}",
        "vanilla",
        pct(vanilla.final_accuracy),
        "n/a",
        vanilla.total_comm_units
    );
    let _ = writeln!(
        out,
        "{:<10} {:>12} {:>16} {:>12}",
        "clipfl",
        pct(clipfl.final_accuracy),
        id,
        clipfl.total_comm_units
    );
    let _ = writeln!(out, "Δ = clipfl_final − vanilla_final = {:+.2} pp", 100.0 * delta);
    let _ = writeln!(out, "communication reduction = {:.1}%", 100.0 * comm);
    out
}
