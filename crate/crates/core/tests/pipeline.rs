//! End-to-end runs through the public API: surrogate world, stream, engine.

use cliptta::datagen::{Shift, StreamSpec, Surrogate};
use cliptta::engine::{run_stream, EngineConfig, Method, RunResult};
use cliptta::model::{EncoderParams, DEFAULT_EPS_NORM};

fn spec(seed: u64) -> StreamSpec {
    StreamSpec {
        samples_per_batch: 32,
        n_batches: 6,
        cluster_spread: 0.3,
        shift: Shift::AdditiveBias(1.5),
        seed,
        ..StreamSpec::default()
    }
}

fn run(spec: &StreamSpec, method: Method, learning_rate: f64) -> RunResult {
    let world = Surrogate::build(spec).unwrap();
    let stream = world.stream().unwrap();
    let eval = world.eval_set(300).unwrap();
    let cfg = EngineConfig { method, learning_rate, batch_size: spec.samples_per_batch, seed: spec.seed, ..EngineConfig::default() };
    let params = EncoderParams::new(world.w_proj.clone(), cfg.tau, DEFAULT_EPS_NORM).unwrap();
    run_stream(&cfg, &world.protos, &params, &stream, Some(&eval)).unwrap()
}

#[test]
fn every_method_produces_one_record_per_batch() {
    let s = spec(0);
    for method in [Method::Cliptta, Method::Tent, Method::HardContrastive, Method::ZeroShot] {
        let r = run(&s, method, 3e-3);
        assert_eq!(r.history.len(), s.n_batches, "{method:?}");
        assert_eq!(r.loss_traces.len(), s.n_batches);
        let fin = r.final_eval.expect("eval requested");
        assert!((0.0..=1.0).contains(&fin.accuracy));
        assert!(r.history.iter().all(|h| h.mean_prediction_entropy.is_finite()));
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = run(&spec(4), Method::Cliptta, 3e-3);
    let b = run(&spec(4), Method::Cliptta, 3e-3);
    assert_eq!(a.state.param_hash(), b.state.param_hash());
    let c = run(&spec(5), Method::Cliptta, 3e-3);
    assert_ne!(a.state.param_hash(), c.state.param_hash());
}

#[test]
fn adaptation_moves_parameters_and_zero_shot_does_not() {
    let s = spec(1);
    let zs = run(&s, Method::ZeroShot, 3e-3);
    let frozen = run(&s, Method::Cliptta, 0.0);
    let adapted = run(&s, Method::Cliptta, 3e-3);
    assert_eq!(zs.state.param_hash(), frozen.state.param_hash());
    assert_ne!(zs.state.param_hash(), adapted.state.param_hash());
    assert_eq!(zs.zero_shot_eval.unwrap().accuracy, zs.final_eval.unwrap().accuracy);
}
