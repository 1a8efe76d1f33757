use rydberggpt::dataset::generate;
use rydberggpt::model::init_params;
use rydberggpt::training::{evaluate_loss, train, TrainConfig};
use rydberggpt::ExperimentalSettings;

#[test]
fn ground_state_data_reaches_entropy_floor() {
    let s = ExperimentalSettings::new(1.1, 1.15, 16.0).unwrap();
    let (data, gs) = generate(2, &s, 10_000, 21, false).unwrap();
    let entropy = gs.entropy_per_site();
    let cfg = TrainConfig {
        epochs: 50,
        seed: 4,
        ..TrainConfig::default()
    };
    let data = vec![data];
    let mut eval = Vec::new();
    train(&data, init_params(&cfg.model, 4).unwrap(), &cfg, |m, ck| {
        eval.push((m.epoch, evaluate_loss(ck, &data)?));
        Ok(())
    })
    .unwrap();
    let reached = eval.iter().find(|(_, l)| *l < entropy + 0.01);
    assert!(reached.is_some(), "entropy {entropy}, eval losses {eval:?}");
    let last = eval.last().unwrap().1;
    assert!(last > entropy - 0.01, "loss {last} far below the entropy {entropy}");
}
