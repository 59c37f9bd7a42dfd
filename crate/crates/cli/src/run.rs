//! Builds the surrogate world for a config and runs the engine on it.

use std::path::Path;

use cliptta::datagen::{stream_from_csv, LabeledBatch, Surrogate};
use cliptta::engine::{run_stream, RunResult};
use cliptta::model::{EncoderParams, DEFAULT_EPS_NORM};
use cliptta::{Error, Result};

use crate::config::RunConfig;

/// Prototypes, zero-shot encoder, stream and held-out set of one config.
#[derive(Debug, Clone)]
pub struct World {
    pub surrogate: Surrogate,
    pub params: EncoderParams,
    pub stream: Vec<LabeledBatch>,
    pub eval: Option<LabeledBatch>,
}

impl World {
    pub fn build(rc: &RunConfig) -> Result<Self> {
        let surrogate = Surrogate::build(&rc.stream)?;
        let stream = surrogate.stream()?;
        Self::assemble(rc, surrogate, stream)
    }

    /// Same prototypes and encoder, but the stream comes from a CSV export.
    pub fn with_imported_stream(rc: &RunConfig, csv: &str) -> Result<Self> {
        let surrogate = Surrogate::build(&rc.stream)?;
        let stream = stream_from_csv(csv)?;
        for (b, batch) in stream.iter().enumerate() {
            if batch.x_raw.cols() != rc.stream.d_in {
                return Err(Error::Shape(format!("imported batch {b} has {} features, d_in is {}", batch.x_raw.cols(), rc.stream.d_in)));
            }
            if let Some(&c) = batch.labels.iter().flatten().find(|&&c| c >= rc.stream.n_classes) {
                return Err(Error::ClassIndex { index: c, classes: rc.stream.n_classes });
            }
        }
        Self::assemble(rc, surrogate, stream)
    }

    fn assemble(rc: &RunConfig, surrogate: Surrogate, stream: Vec<LabeledBatch>) -> Result<Self> {
        let params = EncoderParams::new(surrogate.w_proj.clone(), rc.engine.tau, DEFAULT_EPS_NORM)?;
        let eval = if rc.eval_samples > 0 { Some(surrogate.eval_set(rc.eval_samples)?) } else { None };
        Ok(Self { surrogate, params, stream, eval })
    }

    pub fn run(&self, rc: &RunConfig) -> Result<RunResult> {
        run_stream(&rc.engine, &self.surrogate.protos, &self.params, &self.stream, self.eval.as_ref())
    }
}

/// Builds the world and runs it in one go.
pub fn run_config(rc: &RunConfig) -> Result<RunResult> {
    World::build(rc)?.run(rc)
}

/// Reads a config file; `seed` and `overrides` are applied on top.
pub fn load_config(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> std::result::Result<RunConfig, crate::CliError> {
    let mut rc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| crate::CliError::Io(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    rc.apply_overrides(overrides)?;
    if let Some(s) = seed {
        rc.set_seed(s);
    }
    Ok(rc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cliptta::datagen::stream_to_csv;

    fn tiny() -> RunConfig {
        let mut rc = RunConfig::default();
        rc.apply_overrides(&["batch_size=16".into(), "n_batches=3".into(), "eval_samples=50".into(), "inner_iterations=2".into()])
            .unwrap();
        rc
    }

    #[test]
    fn imported_stream_reproduces_generated_run() {
        let rc = tiny();
        let w = World::build(&rc).unwrap();
        let a = w.run(&rc).unwrap();
        let w2 = World::with_imported_stream(&rc, &stream_to_csv(&w.stream)).unwrap();
        let b = w2.run(&rc).unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn imported_stream_dimension_mismatch_is_rejected() {
        let rc = tiny();
        let mut other = tiny();
        other.apply_overrides(&["d_in=20".into()]).unwrap();
        let csv = stream_to_csv(&World::build(&other).unwrap().stream);
        assert!(matches!(World::with_imported_stream(&rc, &csv), Err(Error::Shape(_))));
    }
}
