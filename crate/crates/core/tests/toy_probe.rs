use msrh::corpus::{generate_parallel, pooled_labels, CorpusSpec};
use msrh::model::{ModelConfig, MsrModel};
use msrh::probe::{run_probe, ProbeConfig, ProbeMode};
use msrh::trainer::{TrainConfig, TrainSet, Trainer};

#[test]
fn trained_model_matched_probe_beats_chance_by_20_points() {
    let rates = [16_000u32, 48_000];
    let spec = CorpusSpec { count: 40, ..CorpusSpec::default() };
    let utts = generate_parallel(&spec, &rates).unwrap();
    let (_, _, labels) = pooled_labels(&utts, 16, 50, spec.seed).unwrap();
    let data = TrainSet::from_corpus(&utts, &labels, &rates).unwrap();
    let cfg = TrainConfig { total_steps: 60, rates: TrainConfig::uniform(&rates), ..TrainConfig::default() };
    let mut tr = Trainer::new(MsrModel::<f32>::new(&ModelConfig::desk(&rates).unwrap(), 1).unwrap(), cfg).unwrap();
    tr.run(&data, |_, _| Ok(())).unwrap();

    let held = generate_parallel(&CorpusSpec { count: 40, seed: 11, ..spec }, &rates).unwrap();
    let before = tr.model.clone();
    let chance = 1.0 / spec.num_classes as f64;
    for r in rates {
        let res = run_probe(&tr.model, &held, r, ProbeMode::Matched, spec.num_classes, &ProbeConfig::default()).unwrap();
        assert!(res.accuracy >= chance + 0.20, "{r} Hz matched accuracy {:.3}", res.accuracy);
        assert!((res.layer_weights.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(tr.model, before);
}
