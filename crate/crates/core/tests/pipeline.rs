use std::collections::BTreeSet;

use rshd::eval::SweepGrid;
use rshd::pipeline::{train_all, PipelineConfig};
use rshd::sanitizer::SelectionMode;
use rshd::synth::SynthConfig;

fn tiny(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        synth: SynthConfig {
            n_speakers: 8,
            utterances_per_speaker: 12,
            t_range: (6, 10),
            ..SynthConfig::default()
        },
        n_trials: 300,
        k_list: vec![0.0, 20.0, 50.0],
        eps_list: vec![1.0, 4.0],
        ..PipelineConfig::default()
    };
    cfg.pse_train.epochs = 2;
    cfg.pse_train.lr = 1e-3;
    cfg.embedder.epochs = 5;
    cfg.with_seed(seed)
}

fn run(cfg: &PipelineConfig) -> SweepGrid {
    let trained = train_all(cfg).unwrap();
    let sid: BTreeSet<usize> = trained.partitions.sid.speakers();
    assert!(sid.is_disjoint(&trained.partitions.asv_eval.speakers()));
    assert!(sid.is_disjoint(&trained.partitions.asv_train.speakers()));
    trained
        .eval_set()
        .unwrap()
        .sweep(cfg, &[SelectionMode::Pse, SelectionMode::Random])
        .unwrap()
}

#[test]
fn sweep_is_reproducible_and_round_trips() {
    let cfg = tiny(3);
    let grid = run(&cfg);
    assert_eq!(grid.rows.len(), 3 * 2 * 2);
    assert_eq!(grid, run(&cfg));

    // k = 0 leaves every utterance untouched, whatever the mode and epsilon
    let clean: Vec<_> = grid.rows.iter().filter(|r| r.k_percent == 0.0).collect();
    assert!(clean
        .iter()
        .all(|r| r.eer == clean[0].eer && r.task_acc == clean[0].task_acc));

    let prov: Vec<&str> = grid.provenance.iter().map(|(k, _)| k.as_str()).collect();
    assert!(prov.contains(&"seed") && prov.contains(&"config_digest"));
    let back = SweepGrid::from_csv(&grid.to_csv()).unwrap();
    assert_eq!(back.to_csv(), grid.to_csv());
}

#[test]
fn config_digest_tracks_the_seed() {
    assert_eq!(tiny(1).digest(), tiny(1).digest());
    assert_ne!(tiny(1).digest(), tiny(2).digest());
    assert!(tiny(1).validate().is_ok());
    let mut bad = tiny(1);
    bad.sid_fraction = 1.5;
    assert!(bad.validate().is_err());
}
