mod common;

use dva::ica::{AdapterConfig, AdapterSet};
use dva::losses::{LossConfig, ProxyBank};
use dva::manifest::{Manifest, Split};
use dva::ntw;
use dva::opa::{self, OpaConfig};
use dva::synth::{self, GenConfig};
use dva::train::{self, Objective, TrainConfig, TrainData, TrainReport};
use dva::vit::{EncoderConfig, EncoderWeights};
use dva::Tape;
use tempfile::TempDir;

struct Setup {
    _tmp: TempDir,
    enc: EncoderConfig,
    weights: EncoderWeights,
    data: TrainData,
    cfg: TrainConfig,
    loss: LossConfig,
}

/// 4 classes x 16 training images at 40 px through the real data path.
fn setup() -> Setup {
    let tmp = tempfile::tempdir().unwrap();
    let g = synth::gen_dataset(
        &GenConfig {
            seed: 3,
            n_classes: 4,
            n_per_class: 32,
            image_size: 40,
            ..Default::default()
        },
        &tmp.path().join("data"),
    )
    .unwrap();
    let train_rows = g.manifest.filter(|r| r.split == Split::Train);
    assert_eq!(train_rows.len(), 64);
    let opa_cfg = OpaConfig {
        output_size: 36,
        ..Default::default()
    };
    let dets = opa::load_detections(&tmp.path().join("data/detections.jsonl"), &opa_cfg).unwrap();
    let o =
        opa::build_opa_dataset(&train_rows, &dets, 4, &opa_cfg, &tmp.path().join("opa")).unwrap();
    let data = TrainData::load(&train_rows, Some(&o.manifest), 4, 36).unwrap();
    let enc = EncoderConfig::toy();
    Setup {
        weights: EncoderWeights::init(&enc, 3).unwrap(),
        enc,
        data,
        cfg: TrainConfig {
            lr0: 1e-2,
            epochs: 3,
            batch_size: 8,
            resize: 36,
            crop: 32,
            ..Default::default()
        },
        loss: LossConfig::default(),
        _tmp: tmp,
    }
}

fn adapter_cfg() -> AdapterConfig {
    AdapterConfig {
        d: 4,
        ..Default::default()
    }
}

fn run(
    s: &Setup,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> dva::Result<(TrainReport, Vec<u8>, Vec<u8>)> {
    let mut ad = AdapterSet::attach(&adapter_cfg(), &s.enc, 1)?;
    let mut bank = ProxyBank::init(4, s.enc.dim, 1)?;
    let report = train::train(
        cfg, loss, &s.enc, &s.weights, &mut ad, &mut bank, &s.data, 1,
    )?;
    Ok((
        report,
        ntw::encode(&ad.to_named())?,
        ntw::encode(&bank.to_named())?,
    ))
}

#[test]
fn loss_decreases_over_training() {
    let s = setup();
    let (report, _, _) = run(&s, &s.cfg, &s.loss).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert_eq!(report.steps.len(), 24);
    let first = &report.epochs[0];
    let last = report.epochs.last().unwrap();
    assert!(last.mean_loss_proxy < first.mean_loss_proxy, "{report:?}");
    assert!(last.mean_loss_dpt.unwrap() < first.mean_loss_dpt.unwrap());
    assert!(report.steps.iter().all(|st| st.loss_total.is_finite()));
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("epoch,mean_loss_proxy,mean_loss_dpt,lr\n"));
}

#[test]
fn backbone_is_untouched_after_100_steps() {
    let s = setup();
    let before = ntw::encode(&s.weights.to_named()).unwrap();
    let mut ad = AdapterSet::attach(&adapter_cfg(), &s.enc, 1).unwrap();
    let mut bank = ProxyBank::init(4, s.enc.dim, 1).unwrap();
    let (ad0, bank0) = (ad.clone(), bank.clone());
    let cfg = TrainConfig {
        epochs: 13,
        max_steps: Some(100),
        ..s.cfg.clone()
    };
    let r = train::train(
        &cfg, &s.loss, &s.enc, &s.weights, &mut ad, &mut bank, &s.data, 1,
    )
    .unwrap();
    assert_eq!(r.steps.len(), 100);
    assert_eq!(ntw::encode(&s.weights.to_named()).unwrap(), before);
    for ((name, a), (_, b)) in ad.to_named().iter().zip(ad0.to_named()) {
        assert_ne!(a, &b, "{name} never moved");
    }
    assert_ne!(bank.tensor(), bank0.tensor());
}

#[test]
fn trainable_tensors_are_exactly_the_ones_with_gradient() {
    let p = common::ToyProblem::new(4);
    let mut tape = Tape::new();
    let (t, ad, b) = p.eval(&mut tape, &p.adapters, &p.bank, true);
    tape.backward(t.total).unwrap();
    for v in ad.vars() {
        assert!(tape.grad(v).unwrap().data().iter().any(|&g| g != 0.0));
    }
    assert!(tape.grad(b).unwrap().data().iter().any(|&g| g != 0.0));
    // backbone weights enter the tape as constants
    let mut expected = ad.vars();
    expected.push(b);
    expected.sort();
    assert_eq!(tape.trainable_leaves(), expected);
}

#[test]
fn zero_beta_equals_ablated_transfer() {
    let s = setup();
    let cfg = TrainConfig {
        max_steps: Some(6),
        ..s.cfg.clone()
    };
    let zero = LossConfig {
        beta: 0.0,
        ..s.loss.clone()
    };
    let (ra, aa, ba) = run(&s, &cfg, &zero).unwrap();
    let ablated = TrainConfig {
        ablate_dpt: true,
        ..cfg.clone()
    };
    let (rb, ab, bb) = run(&s, &ablated, &s.loss).unwrap();
    assert_eq!(aa, ab);
    assert_eq!(ba, bb);
    // the transfer term is still logged with beta = 0
    assert!(ra.epochs[0].mean_loss_dpt.is_some());
    assert!(rb.epochs[0].mean_loss_dpt.is_none());
    let proxy = |r: &TrainReport| {
        r.steps
            .iter()
            .map(|s| s.loss_proxy.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(proxy(&ra), proxy(&rb));
}

#[test]
fn training_replays_bitwise() {
    let s = setup();
    let cfg = TrainConfig {
        max_steps: Some(10),
        ..s.cfg.clone()
    };
    let a = run(&s, &cfg, &s.loss).unwrap();
    let b = run(&s, &cfg, &s.loss).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn ica_objective_uses_originals_only() {
    let s = setup();
    let cfg = TrainConfig {
        objective: Objective::Ica,
        max_steps: Some(4),
        ..s.cfg.clone()
    };
    let (r, _, bank) = run(&s, &cfg, &s.loss).unwrap();
    assert!(r
        .steps
        .iter()
        .all(|st| st.loss_dpt.is_none() && st.loss_total == st.loss_proxy));
    // the background proxy receives no gradient, only weight decay
    let b = ProxyBank::from_named(&ntw::decode(&bank).unwrap()).unwrap();
    let b0 = ProxyBank::init(4, s.enc.dim, 1).unwrap();
    let bg = b.background_id();
    let d = s.enc.dim;
    for (x, y) in b.tensor().data()[bg * d..]
        .iter()
        .zip(&b0.tensor().data()[bg * d..])
    {
        assert!((x - y).abs() <= y.abs() * 1e-4 + 1e-9);
    }
}

#[test]
fn non_finite_loss_aborts() {
    let s = setup();
    let mut ad = AdapterSet::attach(&adapter_cfg(), &s.enc, 1).unwrap();
    let mut bank = ProxyBank::init(4, s.enc.dim, 1).unwrap();
    bank.tensor_mut().data_mut()[5] = f32::NAN;
    let r = train::train(
        &s.cfg, &s.loss, &s.enc, &s.weights, &mut ad, &mut bank, &s.data, 1,
    );
    assert!(matches!(r, Err(dva::Error::NonFinite(_))), "{r:?}");
}

#[test]
fn empty_training_set_is_a_contract_error() {
    let empty = Manifest::new("/nowhere", vec![]);
    assert!(matches!(
        TrainData::load(&empty, None, 4, 36),
        Err(dva::Error::Contract(_))
    ));
}

#[test]
fn bank_must_match_the_class_count() {
    let s = setup();
    let mut ad = AdapterSet::attach(&adapter_cfg(), &s.enc, 1).unwrap();
    let mut bank = ProxyBank::init(5, s.enc.dim, 1).unwrap();
    let r = train::train(
        &s.cfg, &s.loss, &s.enc, &s.weights, &mut ad, &mut bank, &s.data, 1,
    );
    assert!(matches!(r, Err(dva::Error::Contract(_))));
}

#[test]
fn cosine_schedule_endpoints_are_exact() {
    for (t, lr0) in [(100usize, 0.1f64), (24, 0.01), (1000, 3.0)] {
        assert_eq!(train::cosine_lr(0, t, lr0).unwrap(), lr0);
        assert_eq!(train::cosine_lr(t, t, lr0).unwrap(), 0.0);
        assert_eq!(train::cosine_lr(t / 2, t, lr0).unwrap(), lr0 / 2.0);
    }
    assert!(matches!(
        train::cosine_lr(11, 10, 0.1),
        Err(dva::Error::Contract(_))
    ));
}
