use proptest::prelude::*;

use super::*;
use crate::dataset::{DatasetHeader, Generator};
use crate::lattice::{square_graph, ExperimentalSettings};
use crate::model::init_params;

fn cfg() -> TrainConfig {
    TrainConfig::default()
}

/// Restart schedule evaluated by walking the periods one at a time.
fn walk_schedule(t: f64, c: &TrainConfig) -> f64 {
    let (mut start, mut period) = (0.0, c.t0);
    while t >= start + period {
        start += period;
        period *= c.t_mult;
    }
    let frac = (t - start) / period;
    c.eta_min + (c.learning_rate - c.eta_min) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[test]
fn schedule_examples() {
    let c = cfg();
    assert_eq!(lr_schedule(0.0, &c), 0.001);
    assert!((lr_schedule(0.5, &c) - 5.05e-4).abs() < 1e-15);
    assert!((cosine_lr(1.0, 1.0, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
    assert!((lr_schedule(1.0 - 1e-9, &c) - 1e-5).abs() < 1e-12);
    // restarts at 1, 3, 7, 15 epochs
    for r in [1.0, 3.0, 7.0, 15.0] {
        assert_eq!(lr_schedule(r, &c), 0.001, "restart at {r}");
        assert!((lr_schedule(r - 1e-9, &c) - 1e-5).abs() < 1e-12);
    }
    assert!((lr_schedule(2.0, &c) - 5.05e-4).abs() < 1e-15);
    let flat = TrainConfig { t_mult: 1.0, ..cfg() };
    assert_eq!(lr_schedule(4.0, &flat), 0.001);
    assert!((lr_schedule(4.5, &flat) - 5.05e-4).abs() < 1e-15);
}

proptest! {
    #[test]
    fn schedule_matches_period_walk(t in 0.0f64..200.0, mult in prop::sample::select(vec![1.0, 2.0, 3.0])) {
        let c = TrainConfig { t_mult: mult, ..cfg() };
        prop_assert!((lr_schedule(t, &c) - walk_schedule(t, &c)).abs() < 1e-12);
        let lr = lr_schedule(t, &c);
        prop_assert!(lr >= c.eta_min && lr <= c.learning_rate);
    }
}

fn one_block(theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
    let c = TrainConfig {
        weight_decay: wd,
        ..cfg()
    };
    let mut opt = AdamW::new(&c, &[1]);
    let mut p = [theta];
    opt.step(&mut [&mut p[..]], &[&[g]], &["x".into()], lr).unwrap();
    p[0]
}

#[test]
fn adamw_examples() {
    let v = one_block(1.0, 1.0, 0.001, 0.01);
    assert!((v - 0.99899).abs() < 1e-8, "{v}");
    assert_eq!(v, 1.0 - 0.001 * 1.0 / (1.0 + 1e-8) - 0.001 * 0.01);
    assert_eq!(one_block(0.7, 0.0, 0.001, 0.0), 0.7);
    assert_eq!(one_block(0.7, 3.0, 0.0, 0.01), 0.7);

    let mut opt = AdamW::new(&cfg(), &[2]);
    let mut p = [0.3, 0.3];
    for g in [0.5, -1.0, 2.0] {
        opt.step(&mut [&mut p[..]], &[&[g, g]], &["x".into()], 1e-3).unwrap();
    }
    assert_eq!(p[0], p[1]);
    assert_eq!(opt.steps_taken(), 3);
}

#[test]
fn adamw_rejects_nan_without_modifying() {
    let mut opt = AdamW::new(&cfg(), &[2, 1]);
    let mut a = [1.0, 2.0];
    let mut b = [3.0];
    let err = opt
        .step(
            &mut [&mut a[..], &mut b[..]],
            &[&[0.1, 0.1], &[f64::NAN]],
            &["a".into(), "b".into()],
            1e-3,
        )
        .unwrap_err();
    assert!(matches!(err, Error::NumericalFailure(_)));
    assert!(err.to_string().contains("b[0]"));
    assert_eq!((a, b), ([1.0, 2.0], [3.0]));
    assert_eq!(opt.steps_taken(), 0);
}

#[test]
fn config_json_and_validation() {
    let c: TrainConfig = serde_json::from_str(r#"{"T0": 2, "T_mult": 1, "epochs": 3, "datasets": ["a.txt"]}"#).unwrap();
    assert_eq!((c.t0, c.t_mult, c.epochs), (2.0, 1.0, 3));
    assert!(c.validate().is_ok());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    for bad in [
        TrainConfig { eta_min: 0.0, ..cfg() },
        TrainConfig { eta_min: 0.01, ..cfg() },
        TrainConfig { t0: 0.5, ..cfg() },
        TrainConfig { t_mult: 0.5, ..cfg() },
        TrainConfig { batch_size: 0, ..cfg() },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn graph2() -> InteractionGraph {
    square_graph(2, &ExperimentalSettings::new(1.1, 1.15, 16.0).unwrap()).unwrap()
}

fn cfgs(s: &[&str]) -> Vec<SpinConfiguration> {
    s.iter().map(|x| x.parse().unwrap()).collect()
}

fn eval_loss(ck: &ModelCheckpoint, batch: &[SpinConfiguration]) -> f64 {
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, &ck.config, &ck.params, false);
    let l = nll_loss(&mut tape, &b, &graph2(), batch, ForwardMode::EVAL).unwrap();
    tape.value(l)[0]
}

#[test]
fn zeroed_head_loss_is_ln2() {
    let mut ck = init_params(&ModelConfig::default(), 1).unwrap();
    ck.params.get_mut("head.weight").unwrap().values_mut().fill(0.0);
    let v = eval_loss(&ck, &cfgs(&["0101", "1111", "0101"]));
    assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn batch_loss_is_mean_of_singles() {
    let ck = init_params(&ModelConfig::default(), 2).unwrap();
    let batch = cfgs(&["0101", "1111", "0101", "0000", "1001"]);
    let mean: f64 = batch
        .iter()
        .map(|c| eval_loss(&ck, std::slice::from_ref(c)))
        .sum::<f64>()
        / 5.0;
    assert!((eval_loss(&ck, &batch) - mean).abs() < 1e-12);
}

#[test]
fn mixed_sizes_rejected() {
    let ck = init_params(&ModelConfig::default(), 2).unwrap();
    let mut tape = Tape::new();
    let b = Bound::bind(&mut tape, &ck.config, &ck.params, false);
    let batch = cfgs(&["0101", "010101010"]);
    let err = nll_loss(&mut tape, &b, &graph2(), &batch, ForwardMode::EVAL).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    assert!(nll_loss(&mut tape, &b, &graph2(), &[], ForwardMode::EVAL).is_err());
}

#[test]
fn dedup_counts() {
    let d = dedup(&cfgs(&["01", "10", "01", "01"]));
    assert_eq!(d, vec![("01".parse().unwrap(), 3), ("10".parse().unwrap(), 1)]);
}

fn dataset(records: Vec<SpinConfiguration>) -> Dataset {
    let s = ExperimentalSettings::new(1.1, 1.15, 16.0).unwrap();
    let gen = Generator {
        kind: "ed_ground".into(),
        seed: 0,
    };
    Dataset::new(DatasetHeader::new(2, &s, records.len(), gen), records).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 2,
        seed: 5,
        ..cfg()
    }
}

#[test]
fn memorizes_a_single_configuration() {
    let data = dataset(cfgs(&["1001"; 256]));
    let c = TrainConfig {
        epochs: 20,
        ..small_config()
    };
    let ck = init_params(&c.model, 3).unwrap();
    let out = train(std::slice::from_ref(&data), ck, &c, |_, _| Ok(())).unwrap();
    let last = out.metrics.last().unwrap();
    assert!(last.loss_per_token < 0.01, "{:?}", out.metrics);
    assert!(evaluate_loss(&out.checkpoint, &[data]).unwrap() < 0.01);
}

#[test]
fn fixed_seed_is_reproducible_and_resumable() {
    let data = vec![dataset(cfgs(&["1001", "0110", "0000", "1000", "0001"].repeat(8)))];
    let c = small_config();
    let init = init_params(&c.model, 4).unwrap();
    let mut seen = Vec::new();
    let a = train(&data, init.clone(), &c, |m, ck| {
        seen.push((m.epoch, ck.meta.step));
        Ok(())
    })
    .unwrap();
    let b = train(&data, init, &c, |_, _| Ok(())).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(
            (x.epoch, x.step, x.loss_per_token, x.lr),
            (y.epoch, y.step, y.loss_per_token, y.lr)
        );
    }
    assert_eq!(seen, vec![(1, 3), (2, 6)]);
    assert_eq!(a.checkpoint.meta.dataset_digest, combined_digest(&data).unwrap());

    let resumed = train(&data, a.checkpoint.clone(), &c, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.metrics[0].step, 9);
    assert_eq!(resumed.checkpoint.meta.epoch, 4);
}

#[test]
fn nan_parameters_abort_before_reporting() {
    let data = vec![dataset(cfgs(&["1001"; 16]))];
    let c = small_config();
    let mut ck = init_params(&c.model, 4).unwrap();
    ck.params.get_mut("head.bias").unwrap().values_mut()[0] = f64::NAN;
    let mut reported = false;
    let err = train(&data, ck, &c, |_, _| {
        reported = true;
        Ok(())
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(!reported);
}
