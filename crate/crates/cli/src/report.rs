//! CSV tables and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cliptta::demo::DirectionReport;
use cliptta::engine::{EvalSummary, RunResult};
use cliptta::metrics::{mean_half_width, MetricRecord, METRIC_COLUMNS};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub const EVAL_COLUMNS: [&str; 6] =
    ["accuracy", "prediction_entropy", "unique_predicted_classes", "auroc", "fpr95", "mu_id_minus_mu_ood"];

fn eval_values(e: &EvalSummary) -> [Option<f64>; 6] {
    [
        Some(e.accuracy),
        Some(e.prediction_entropy),
        Some(e.unique_predicted_classes as f64),
        e.auroc,
        e.fpr95,
        e.mu_id_minus_mu_ood,
    ]
}

/// `phase,<eval columns>` with the zero-shot and final rows.
pub fn eval_csv(result: &RunResult) -> String {
    let mut out = format!("phase,{}\n", EVAL_COLUMNS.join(","));
    for (phase, e) in [("zero_shot", &result.zero_shot_eval), ("final", &result.final_eval)] {
        if let Some(e) = e {
            let vals: Vec<String> = eval_values(e).into_iter().map(opt).collect();
            out.push_str(&format!("{phase},{}\n", vals.join(",")));
        }
    }
    out
}

fn mean_hw_cells(values: &[f64]) -> (String, String) {
    match mean_half_width(values) {
        Some((m, h)) => (m.to_string(), h.to_string()),
        None => (String::new(), String::new()),
    }
}

/// Per-batch `<column>_mean,<column>_half_width` over several seeds.
pub fn multiseed_metrics_csv(histories: &[Vec<MetricRecord>]) -> String {
    let cols = &METRIC_COLUMNS[1..];
    let mut out = String::from("batch_index");
    for c in cols {
        out.push_str(&format!(",{c}_mean,{c}_half_width"));
    }
    out.push('\n');
    let n = histories.iter().map(Vec::len).min().unwrap_or(0);
    for b in 0..n {
        out.push_str(&b.to_string());
        for c in cols {
            let vals: Vec<f64> = histories.iter().filter_map(|h| h[b].column(c)).collect();
            let (m, h) = mean_hw_cells(&vals);
            out.push_str(&format!(",{m},{h}"));
        }
        out.push('\n');
    }
    out
}

/// `phase,metric,mean,half_width,n` over several seeds.
pub fn multiseed_eval_csv(results: &[RunResult]) -> String {
    let mut out = String::from("phase,metric,mean,half_width,n\n");
    for phase in ["zero_shot", "final"] {
        for (j, name) in EVAL_COLUMNS.iter().enumerate() {
            let vals: Vec<f64> = results
                .iter()
                .filter_map(|r| if phase == "final" { r.final_eval.as_ref() } else { r.zero_shot_eval.as_ref() })
                .filter_map(|e| eval_values(e)[j])
                .collect();
            if vals.is_empty() {
                continue;
            }
            let (m, h) = mean_hw_cells(&vals);
            out.push_str(&format!("{phase},{name},{m},{h},{}\n", vals.len()));
        }
    }
    out
}

/// Side-by-side TENT and CLIPTTA traces for the collapse demo.
pub fn collapse_csv(tent: &[MetricRecord], cliptta: &[MetricRecord]) -> String {
    let mut out = String::from(
        "batch_index,tent_entropy,cliptta_entropy,tent_entropy_ratio,cliptta_entropy_ratio,\
         tent_accuracy,cliptta_accuracy,tent_deterioration,cliptta_deterioration,tent_unique,cliptta_unique\n",
    );
    let (t0, c0) = match (tent.first(), cliptta.first()) {
        (Some(t), Some(c)) => (t.mean_prediction_entropy, c.mean_prediction_entropy),
        _ => return out,
    };
    let ratio = |v: f64, base: f64| if base > 0.0 { Some(v / base) } else { None };
    for (t, c) in tent.iter().zip(cliptta) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            t.batch_index,
            t.mean_prediction_entropy,
            c.mean_prediction_entropy,
            opt(ratio(t.mean_prediction_entropy, t0)),
            opt(ratio(c.mean_prediction_entropy, c0)),
            t.accuracy,
            c.accuracy,
            opt(t.deterioration_ratio),
            opt(c.deterioration_ratio),
            t.unique_predicted_classes,
            c.unique_predicted_classes,
        ));
    }
    out
}

/// One row per class: probability and the inner product of each loss's
/// descent direction with that class prototype.
pub fn direction_csv(r: &DirectionReport) -> String {
    let mut out = String::from("class,role,q,tent,scont,cliptta\n");
    for k in 0..r.q.len() {
        let role = if k == r.predicted {
            "predicted"
        } else if k == r.runner_up {
            "runner_up"
        } else {
            "other"
        };
        out.push_str(&format!("{k},{role},{},{},{},{}\n", r.q[k], r.tent[k], r.scont[k], r.cliptta[k]));
    }
    out
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    /// Feed this back through `--config` to reproduce the run.
    pub config_text: String,
    pub imported_stream: Option<String>,
    pub outputs: Vec<String>,
    pub status: String,
    pub duration_seconds: Option<f64>,
}

/// Writes `manifest.json` before any result, then again with the wall
/// clock duration once the outputs exist.
pub struct ManifestWriter {
    dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl ManifestWriter {
    pub fn start(dir: &Path, command: &str, rc: &RunConfig, seeds: Vec<u64>, imported: Option<&Path>) -> Result<Self, CliError> {
        ensure_dir(dir)?;
        let manifest = RunManifest {
            command: command.to_string(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: rc.engine.seed,
            seeds,
            config: rc.clone(),
            config_text: rc.to_text(),
            imported_stream: imported.map(|p| p.display().to_string()),
            outputs: Vec::new(),
            status: "running".into(),
            duration_seconds: None,
        };
        let w = Self { dir: dir.to_path_buf(), manifest, started: Instant::now() };
        w.flush()?;
        Ok(w)
    }

    fn flush(&self) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Io(e.to_string()))?;
        write(&self.dir, "manifest.json", &(json + "\n")).map(|_| ())
    }

    /// Writes an output file and records it.
    pub fn output(&mut self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let p = write(&self.dir, name, contents)?;
        self.manifest.outputs.push(name.to_string());
        Ok(p)
    }

    pub fn finish(mut self) -> Result<f64, CliError> {
        let secs = self.started.elapsed().as_secs_f64();
        self.manifest.status = "complete".into();
        self.manifest.duration_seconds = Some(secs);
        self.flush()?;
        Ok(secs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(b: usize, acc: f64, det: Option<f64>) -> MetricRecord {
        MetricRecord { batch_index: b, accuracy: acc, mean_prediction_entropy: 1.0, deterioration_ratio: det, ..Default::default() }
    }

    #[test]
    fn multiseed_columns_pair_mean_and_half_width() {
        let csv = multiseed_metrics_csv(&[vec![rec(0, 0.5, None)], vec![rec(0, 0.7, Some(0.1))]]);
        let mut lines = csv.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header.len(), 1 + 2 * (METRIC_COLUMNS.len() - 1));
        assert_eq!(&header[1..3], &["accuracy_mean", "accuracy_half_width"]);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert!((row[1].parse::<f64>().unwrap() - 0.6).abs() < 1e-12);
        // deterioration present in one seed only
        let i = header.iter().position(|h| *h == "deterioration_ratio_half_width").unwrap();
        assert_eq!(row[i], "0");
    }

    #[test]
    fn collapse_csv_has_both_methods() {
        let csv = collapse_csv(&[rec(0, 0.4, Some(0.2))], &[rec(0, 0.5, Some(0.1))]);
        let header = csv.lines().next().unwrap();
        assert!(header.contains("tent_entropy") && header.contains("cliptta_entropy"));
        assert_eq!(csv.lines().nth(1).unwrap(), "0,1,1,1,1,0.4,0.5,0.2,0.1,0,0");
    }

    #[test]
    fn manifest_is_written_first_and_completed() {
        let dir = tempfile::tempdir().unwrap();
        let rc = RunConfig::default();
        let mut w = ManifestWriter::start(dir.path(), "simulate", &rc, vec![0], None).unwrap();
        let early = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(early.contains("\"running\""));
        w.output("metrics.csv", "x\n").unwrap();
        w.finish().unwrap();
        let done: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(done["status"], "complete");
        assert_eq!(done["outputs"][0], "metrics.csv");
        assert!(done["duration_seconds"].as_f64().is_some());
        assert_eq!(RunConfig::parse(done["config_text"].as_str().unwrap()).unwrap(), rc);
    }
}
