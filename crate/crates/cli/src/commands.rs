//! The four subcommands. Each writes its artifacts and returns the summary
//! line for stdout.

use std::path::PathBuf;

use cliptta::datagen::stream_to_csv;
use cliptta::demo::{gradient_directions, ToyBatch};
use cliptta::engine::{Method, RunResult};
use cliptta::gradcheck::{run_suite, Fault, SuiteOptions, SuiteReport};
use cliptta::metrics::records_to_csv;

use crate::config::{ConfigError, RunConfig};
use crate::report::{
    collapse_csv, direction_csv, ensure_dir, eval_csv, multiseed_eval_csv, multiseed_metrics_csv, write, ManifestWriter,
};
use crate::run::World;
use crate::CliError;

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub config: RunConfig,
    pub out: PathBuf,
    pub dump_memory: bool,
    /// Number of consecutive seeds starting at the config seed.
    pub seeds: usize,
    pub export_stream: Option<PathBuf>,
    pub import_stream: Option<PathBuf>,
}

fn world_for(a: &SimulateArgs, rc: &RunConfig) -> Result<World, CliError> {
    match &a.import_stream {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            Ok(World::with_imported_stream(rc, &text)?)
        }
        None => Ok(World::build(rc)?),
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<String, CliError> {
    let rc = &a.config;
    if a.seeds == 0 {
        return Err(CliError::Config(ConfigError { line: None, key: None, message: "--seeds must be >= 1".into() }));
    }
    if a.seeds > 1 && a.import_stream.is_some() {
        return Err(CliError::Config(ConfigError {
            line: None,
            key: None,
            message: "--import-stream fixes the data, so it cannot be combined with --seeds".into(),
        }));
    }
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| rc.engine.seed.wrapping_add(i)).collect();
    let mut manifest = ManifestWriter::start(&a.out, "simulate", rc, seeds.clone(), a.import_stream.as_deref())?;

    if a.seeds == 1 {
        let world = world_for(a, rc)?;
        if let Some(p) = &a.export_stream {
            write_stream(p, &world)?;
        }
        let result = world.run(rc)?;
        manifest.output("metrics.csv", &records_to_csv(&result.history))?;
        manifest.output("eval.csv", &eval_csv(&result))?;
        if a.dump_memory {
            manifest.output("memory.csv", &result.state.memory.to_csv())?;
        }
        let secs = manifest.finish()?;
        let (zs, fin) = (result.zero_shot_eval.as_ref(), result.final_eval.as_ref());
        return Ok(format!(
            "simulate method={} seed={} batches={} zero_shot_acc={} final_acc={} final_auroc={} out={} ({secs:.2}s)",
            rc.engine.method,
            rc.engine.seed,
            result.history.len(),
            fmt_opt(zs.map(|e| e.accuracy)),
            fmt_opt(fin.map(|e| e.accuracy)),
            fmt_opt(fin.and_then(|e| e.auroc)),
            a.out.display(),
        ));
    }

    let mut results = Vec::with_capacity(seeds.len());
    for &s in &seeds {
        let mut rc_s = rc.clone();
        rc_s.set_seed(s);
        let world = World::build(&rc_s)?;
        if let Some(p) = &a.export_stream {
            let name = p.with_extension(format!("seed{s}.csv"));
            write_stream(&name, &world)?;
        }
        let r = world.run(&rc_s)?;
        manifest.output(&format!("metrics_seed{s}.csv"), &records_to_csv(&r.history))?;
        if a.dump_memory {
            manifest.output(&format!("memory_seed{s}.csv"), &r.state.memory.to_csv())?;
        }
        results.push(r);
    }
    let histories: Vec<_> = results.iter().map(|r| r.history.clone()).collect();
    manifest.output("metrics.csv", &multiseed_metrics_csv(&histories))?;
    let ev = multiseed_eval_csv(&results);
    manifest.output("eval.csv", &ev)?;
    let secs = manifest.finish()?;
    let final_acc: Vec<f64> = results.iter().filter_map(|r| r.final_eval.as_ref().map(|e| e.accuracy)).collect();
    let summary = cliptta::metrics::mean_half_width(&final_acc)
        .map_or_else(|| "-".into(), |(m, h)| format!("{m:.4} ± {h:.4}"));
    Ok(format!(
        "simulate method={} seeds={}..={} final_acc={summary} out={} ({secs:.2}s)",
        rc.engine.method,
        seeds[0],
        seeds[seeds.len() - 1],
        a.out.display()
    ))
}

fn write_stream(path: &std::path::Path, world: &World) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    std::fs::write(path, stream_to_csv(&world.stream)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// TENT and CLIPTTA on the same stream.
pub fn collapse_pair(rc: &RunConfig) -> Result<(RunResult, RunResult), CliError> {
    let world = World::build(rc)?;
    let mut tent = rc.clone();
    tent.engine.method = Method::Tent;
    let mut clip = rc.clone();
    clip.engine.method = Method::Cliptta;
    Ok((world.run(&tent)?, world.run(&clip)?))
}

pub fn collapse_demo(rc: &RunConfig, out: &std::path::Path) -> Result<String, CliError> {
    let mut manifest = ManifestWriter::start(out, "collapse-demo", rc, vec![rc.engine.seed], None)?;
    let (tent, clip) = collapse_pair(rc)?;
    manifest.output("collapse_comparison.csv", &collapse_csv(&tent.history, &clip.history))?;
    manifest.output("metrics_tent.csv", &records_to_csv(&tent.history))?;
    manifest.output("metrics_cliptta.csv", &records_to_csv(&clip.history))?;
    let dirs = gradient_directions(&ToyBatch::reference(), rc.engine.lambda_reg)?;
    manifest.output("gradient_direction.csv", &direction_csv(&dirs))?;
    let secs = manifest.finish()?;

    let ratio = |h: &[cliptta::metrics::MetricRecord]| {
        let e0 = h[0].mean_prediction_entropy;
        h.iter().map(|r| r.mean_prediction_entropy / e0).fold(f64::INFINITY, f64::min)
    };
    Ok(format!(
        "collapse-demo seed={} min_entropy_ratio tent={:.3} cliptta={:.3} final_unique tent={} cliptta={} \
         toy: tent pushes toward class {} ({:+.3}), cliptta toward runner-up {} ({:+.3}) out={} ({secs:.2}s)",
        rc.engine.seed,
        ratio(&tent.history),
        ratio(&clip.history),
        tent.history.last().map_or(0, |r| r.unique_predicted_classes),
        clip.history.last().map_or(0, |r| r.unique_predicted_classes),
        dirs.predicted,
        dirs.tent[dirs.predicted],
        dirs.runner_up,
        dirs.cliptta[dirs.runner_up],
        out.display(),
    ))
}

/// Open-set runs with `lambda_oce = 1` and `lambda_oce = 0`, in that order.
pub fn openset_pair(rc: &RunConfig) -> Result<(RunResult, RunResult), CliError> {
    if rc.stream.ood_fraction <= 0.0 {
        return Err(CliError::Config(ConfigError {
            line: None,
            key: Some("ood_fraction".into()),
            message: "openset needs OOD contamination (ood_fraction > 0)".into(),
        }));
    }
    let mut base = rc.clone();
    base.engine.open_set = true;
    let world = World::build(&base)?;
    let mut with = base.clone();
    with.engine.lambda_oce = 1.0;
    let mut without = base;
    without.engine.lambda_oce = 0.0;
    Ok((world.run(&with)?, world.run(&without)?))
}

pub fn openset(rc: &RunConfig, out: &std::path::Path) -> Result<String, CliError> {
    let mut manifest = ManifestWriter::start(out, "openset", rc, vec![rc.engine.seed], None)?;
    let (with, without) = openset_pair(rc)?;
    manifest.output("metrics_oce.csv", &records_to_csv(&with.history))?;
    manifest.output("metrics_plain.csv", &records_to_csv(&without.history))?;
    let mut summary = String::from("run,lambda_oce,accuracy,auroc,fpr95,mu_id_minus_mu_ood,alpha\n");
    let zs = with.zero_shot_eval.as_ref();
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    summary.push_str(&format!(
        "zero_shot,,{},{},{},{},{}\n",
        cell(zs.map(|e| e.accuracy)),
        cell(zs.and_then(|e| e.auroc)),
        cell(zs.and_then(|e| e.fpr95)),
        cell(zs.and_then(|e| e.mu_id_minus_mu_ood)),
        rc.engine.alpha_init
    ));
    for (name, lam, r) in [("oce", 1.0, &with), ("plain", 0.0, &without)] {
        let f = r.final_eval.as_ref();
        summary.push_str(&format!(
            "{name},{lam},{},{},{},{},{}\n",
            cell(f.map(|e| e.accuracy)),
            cell(f.and_then(|e| e.auroc)),
            cell(f.and_then(|e| e.fpr95)),
            cell(f.and_then(|e| e.mu_id_minus_mu_ood)),
            r.state.alpha
        ));
    }
    manifest.output("openset_summary.csv", &summary)?;
    let secs = manifest.finish()?;
    let (fw, fo) = (with.final_eval.as_ref(), without.final_eval.as_ref());
    Ok(format!(
        "openset seed={} auroc oce={} plain={} gap oce={} plain={} out={} ({secs:.2}s)",
        rc.engine.seed,
        fmt_opt(fw.and_then(|e| e.auroc)),
        fmt_opt(fo.and_then(|e| e.auroc)),
        fmt_opt(fw.and_then(|e| e.mu_id_minus_mu_ood)),
        fmt_opt(fo.and_then(|e| e.mu_id_minus_mu_ood)),
        out.display(),
    ))
}

#[derive(Debug, Clone)]
pub struct GradcheckArgs {
    pub configs: usize,
    pub seed: u64,
    pub max_n: usize,
    pub max_c: usize,
    pub fault: Option<Fault>,
    pub out: Option<PathBuf>,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        let d = SuiteOptions::default();
        Self { configs: d.n_configs, seed: d.seed, max_n: d.n_range.1, max_c: d.c_range.1, fault: None, out: None }
    }
}

/// Runs the suite; the report's table goes to stdout. Failing losses
/// become an `Acceptance` error naming each loss and its worst config.
pub fn gradcheck(a: &GradcheckArgs) -> Result<(String, SuiteReport), CliError> {
    let bad = |m: String| CliError::Config(ConfigError { line: None, key: None, message: m });
    if a.configs == 0 {
        return Err(bad("--configs must be >= 1".into()));
    }
    if a.max_n < 2 || a.max_c < 2 {
        return Err(bad("--max-n and --max-c must be >= 2".into()));
    }
    let opts = SuiteOptions { n_configs: a.configs, seed: a.seed, n_range: (2, a.max_n), c_range: (2, a.max_c), fault: a.fault };
    let report = run_suite(&opts)?;
    let mut text = report.table();
    text.push_str(&format!("{} configurations in {:.2}s\n", report.configs.len(), report.elapsed.as_secs_f64()));
    if let Some(dir) = &a.out {
        ensure_dir(dir)?;
        let mut csv = String::from("loss,configs,max_rel_error,passed,worst_config,worst_seed\n");
        for l in &report.losses {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.loss,
                l.configs,
                l.max_rel_error,
                l.passed(),
                l.worst.map_or(String::new(), |w| w.index.to_string()),
                l.worst.map_or(String::new(), |w| w.seed.to_string()),
            ));
        }
        write(dir, "gradcheck.csv", &csv)?;
    }
    Ok((text, report))
}

/// `Err` listing every failing loss with the seed of its worst config.
pub fn gradcheck_verdict(report: &SuiteReport) -> Result<(), CliError> {
    let failing: Vec<String> = report
        .failures()
        .map(|l| match l.worst {
            Some(w) => format!("{} (max rel error {:.3e} at config {} seed {})", l.loss, l.max_rel_error, w.index, w.seed),
            None => format!("{} (max rel error {:.3e})", l.loss, l.max_rel_error),
        })
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!("gradient check exceeded tolerance: {}", failing.join("; "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut rc = RunConfig::default();
        rc.apply_overrides(&["batch_size=16".into(), "n_batches=3".into(), "eval_samples=40".into(), "inner_iterations=2".into()])
            .unwrap();
        rc
    }

    #[test]
    fn simulate_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = SimulateArgs {
            config: tiny(),
            out: dir.path().to_path_buf(),
            dump_memory: true,
            seeds: 1,
            export_stream: Some(dir.path().join("stream.csv")),
            import_stream: None,
        };
        let line = simulate(&a).unwrap();
        assert!(line.starts_with("simulate method=cliptta"));
        for f in ["metrics.csv", "eval.csv", "memory.csv", "manifest.json", "stream.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let first = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        let again = SimulateArgs { import_stream: Some(dir.path().join("stream.csv")), export_stream: None, ..a };
        simulate(&again).unwrap();
        assert_eq!(std::fs::read(dir.path().join("metrics.csv")).unwrap(), first);
    }

    #[test]
    fn multiseed_rejects_imported_stream() {
        let a = SimulateArgs {
            config: tiny(),
            out: tempfile::tempdir().unwrap().path().to_path_buf(),
            dump_memory: false,
            seeds: 2,
            export_stream: None,
            import_stream: Some("x.csv".into()),
        };
        assert_eq!(simulate(&a).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn openset_requires_contamination() {
        assert_eq!(openset_pair(&tiny()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn collapse_demo_outputs() {
        let dir = tempfile::tempdir().unwrap();
        collapse_demo(&tiny(), dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("gradient_direction.csv")).unwrap();
        assert!(csv.contains("predicted") && csv.contains("runner_up"));
        assert!(dir.path().join("collapse_comparison.csv").exists());
    }

    #[test]
    fn gradcheck_fault_is_reported() {
        let a = GradcheckArgs { configs: 3, fault: Some(Fault::FlipRegSign), ..Default::default() };
        let (_, report) = gradcheck(&a).unwrap();
        let err = gradcheck_verdict(&report).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("reg") && err.to_string().contains("seed"));
    }
}
