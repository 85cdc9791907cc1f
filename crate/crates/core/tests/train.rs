use cvseq::autodiff::{grad_check, Graph, DEFAULT_EPS};
use cvseq::dataset::{generate_synthetic, SequenceTensors, SyntheticConfig};
use cvseq::eval::evaluate;
use cvseq::geo::{GeoPoint, SatPatchGeo};
use cvseq::model::{ExtractorKind, Localizer, ModelConfig, Recurrence};
use cvseq::params::{ParamGroup, ParamStore};
use cvseq::train::{
    clip_grad_norm, loss_cls, loss_mse, loss_seq, train_baseline, train_sequential, AdamW, AdamWConfig, LossWeights,
    LrSchedule, TrainConfig,
};
use cvseq::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cls(logits: &[f64], target: usize) -> cvseq::Result<f64> {
    let mut g = Graph::new();
    let l = g.input(Tensor::from_vec(logits.to_vec()));
    let loss = loss_cls(&mut g, l, target)?;
    Ok(g.value(loss).data()[0])
}

fn mse(pred: (f64, f64), gt: (f64, f64)) -> f64 {
    let mut g = Graph::new();
    let p = g.input(Tensor::from_vec(vec![pred.0, pred.1]));
    let loss = loss_mse(&mut g, p, gt).unwrap();
    g.value(loss).data()[0]
}

#[test]
fn classification_loss_fixtures() {
    assert!((cls(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
    assert!((cls(&[1.0, 0.0], 0).unwrap() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
    assert!((cls(&[1.0, 0.0], 0).unwrap() - 0.31326).abs() < 1e-5);
    assert!(cls(&[800.0, 0.0, 0.0], 0).unwrap() < 1e-300);
    assert!(matches!(cls(&[0.0; 4], 4), Err(Error::Target(_))));
}

#[test]
fn classification_loss_gradient() {
    let x = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.1]);
    let r = grad_check(|g, x| loss_cls(g, x, 1), &x, DEFAULT_EPS).unwrap();
    assert!(r.max_relative_error < 1e-6);
    // softmax minus one-hot
    let e: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    for (i, a) in r.analytic.iter().enumerate() {
        let expect = e[i] / z - if i == 1 { 1.0 } else { 0.0 };
        assert!((a - expect).abs() < 1e-14);
    }
}

#[test]
fn regression_loss_fixtures() {
    assert_eq!(mse((0.3, 0.7), (0.3, 0.7)), 0.0);
    assert_eq!(mse((1.0, 1.0), (0.0, 0.0)), 1.0);
    assert_eq!(mse((0.5, 0.0), (0.0, 0.0)), 0.125);
}

#[test]
fn sequence_loss_fixtures() {
    let ones = LossWeights {
        lambda_cls: 1.0,
        lambda_mse: 1.0,
    };
    assert_eq!(loss_seq(&[(1.0, 1.0), (3.0, 3.0)], &ones).unwrap(), 4.0);
    let w = LossWeights::default();
    assert_eq!(loss_seq(&[(0.7, 0.02)], &w).unwrap(), 0.7 + 10.0 * 0.02);
    let cls_only = LossWeights {
        lambda_cls: 1.0,
        lambda_mse: 0.0,
    };
    assert_eq!(loss_seq(&[(1.0, 5.0), (2.0, 7.0)], &cls_only).unwrap(), 1.5);
    assert!(matches!(loss_seq(&[], &w), Err(Error::Empty(_))));
    assert!(LossWeights {
        lambda_cls: 0.0,
        lambda_mse: 0.0
    }
    .validate()
    .is_err());
}

proptest! {
    #[test]
    fn sequence_loss_is_the_weighted_mean(
        steps in prop::collection::vec((0.0f64..10.0, 0.0f64..1.0), 1..=10),
        lc in 0.0f64..5.0,
        lm in 0.1f64..20.0,
    ) {
        let w = LossWeights { lambda_cls: lc, lambda_mse: lm };
        let oracle = steps.iter().map(|&(c, m)| lc * c + lm * m).sum::<f64>() / steps.len() as f64;
        prop_assert!((loss_seq(&steps, &w).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn classification_loss_is_nonnegative(logits in prop::collection::vec(-30.0f64..30.0, 1..20), t in 0usize..20) {
        let t = t % logits.len();
        prop_assert!(cls(&logits, t).unwrap() >= 0.0);
    }

    #[test]
    fn adamw_is_odd_without_decay(theta in prop::collection::vec(-3.0f64..3.0, 1..6), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads: Vec<Vec<f64>> = (0..3).map(|_| theta.iter().map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let cfg = AdamWConfig { weight_decay: 0.0, lr_other: 0.05, ..Default::default() };
        let run = |sign: f64| {
            let mut store = ParamStore::new();
            let id = store.add("w", Tensor::from_vec(theta.iter().map(|x| sign * x).collect()), ParamGroup::Other).unwrap();
            let mut opt = AdamW::new(cfg);
            for g in &grads {
                let g = Tensor::from_vec(g.iter().map(|x| sign * x).collect());
                opt.step(&mut store, &[(id, g)]).unwrap();
            }
            store.value(id).data().to_vec()
        };
        let (pos, neg) = (run(1.0), run(-1.0));
        for (a, b) in pos.iter().zip(&neg) {
            prop_assert_eq!(*a, -*b);
        }
    }
}

fn scalar_store(theta: f64) -> (ParamStore, cvseq::params::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::from_vec(vec![theta]), ParamGroup::Other).unwrap();
    (store, id)
}

#[test]
fn adamw_first_step_fixture() {
    let (mut store, id) = scalar_store(1.0);
    let mut opt = AdamW::new(AdamWConfig {
        lr_other: 0.1,
        weight_decay: 0.01,
        ..Default::default()
    });
    opt.step(&mut store, &[(id, Tensor::from_vec(vec![1.0]))]).unwrap();
    // m̂ = v̂ = 1, so θ' = 1 - 0.1·1/(1 + 1e-8) - 0.1·0.01·1
    let theta = store.value(id).data()[0];
    assert!((theta - 0.899).abs() < 1e-8, "{theta}");
    assert_eq!(opt.steps(), 1);
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_no_op() {
    let (mut store, id) = scalar_store(0.37);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    for _ in 0..5 {
        opt.step(&mut store, &[(id, Tensor::from_vec(vec![0.0]))]).unwrap();
    }
    assert_eq!(store.value(id).data()[0], 0.37);
}

#[test]
fn adamw_without_decay_matches_adam() {
    let (mut store, id) = scalar_store(0.5);
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        lr_other: 0.01,
        ..Default::default()
    };
    let mut opt = AdamW::new(cfg);
    let grads = [0.3, -0.1, 0.7];
    let (mut m, mut v, mut theta) = (0.0, 0.0, 0.5f64);
    for (t, &g) in grads.iter().enumerate() {
        opt.step(&mut store, &[(id, Tensor::from_vec(vec![g]))]).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
        let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
        theta -= 0.01 * mh / (vh.sqrt() + 1e-8);
    }
    assert!((store.value(id).data()[0] - theta).abs() < 1e-15);
}

#[test]
fn adamw_rejects_bad_gradients_atomically() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::from_vec(vec![1.0]), ParamGroup::Other).unwrap();
    let b = store.add("b", Tensor::from_vec(vec![2.0]), ParamGroup::Other).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let grads = [(a, Tensor::from_vec(vec![1.0])), (b, Tensor::from_vec(vec![f64::NAN]))];
    assert!(matches!(opt.step(&mut store, &grads), Err(Error::Numerical(_))));
    assert_eq!(store.value(a).data()[0], 1.0);
    assert_eq!(opt.steps(), 0);
    let wrong = [(a, Tensor::from_vec(vec![1.0, 2.0]))];
    assert!(matches!(opt.step(&mut store, &wrong), Err(Error::Shape(_))));
}

#[test]
fn clipping_bounds_the_global_norm() {
    let (mut store, _) = scalar_store(0.0);
    let id = store.add("v", Tensor::zeros(&[2]), ParamGroup::Other).unwrap();
    let first = store.id_of("theta").unwrap();
    let mut grads = vec![(first, Tensor::from_vec(vec![3.0])), (id, Tensor::from_vec(vec![0.0, 4.0]))];
    assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
    assert!((grads[0].1.data()[0] - 0.6).abs() < 1e-15);
    assert!((grads[1].1.data()[1] - 0.8).abs() < 1e-15);
    let mut small = vec![(first, Tensor::from_vec(vec![0.5]))];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small[0].1.data()[0], 0.5);
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        dim: 8,
        channels: 4,
        grid: 4,
        fusion_rounds: 1,
        heads: 2,
        ffn_hidden: 16,
        seq_len: 3,
        sat_px: 32,
        ground_px: [8, 8],
        ground_downsample: 8,
        extractor: ExtractorKind::Identity,
        fusion_pe: true,
    }
}

fn tiny_data(count: usize, seed: u64) -> Vec<SequenceTensors> {
    let cfg = SyntheticConfig {
        grid: 4,
        seq_len: 3,
        count,
        channels: 4,
        sat_px: 32,
        step_px: 8.0,
        min_distractor_cells: 2.0,
        seed,
        ..Default::default()
    };
    generate_synthetic(&cfg).unwrap().into_iter().map(Into::into).collect()
}

fn train_cfg(steps: usize) -> TrainConfig {
    let mut c = TrainConfig {
        steps,
        seq_len: 3,
        seed: 5,
        ..Default::default()
    };
    c.optim.lr_other = 1e-2;
    c
}

#[test]
fn baseline_loss_decreases_on_a_fixed_batch() {
    let data = tiny_data(1, 1);
    let mut model = Localizer::new(tiny_model(), 2).unwrap();
    let mut losses = Vec::new();
    let summary = train_baseline(&mut model, &data, &train_cfg(50), &mut |r| losses.push(r.loss)).unwrap();
    assert_eq!(summary.steps, 50);
    let head: f64 = losses[..5].iter().sum();
    let tail: f64 = losses[45..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn cosine_schedule_decays_to_zero() {
    let s = LrSchedule::Cosine;
    assert_eq!(s.factor(0, 10), 1.0);
    assert!((s.factor(5, 10) - 0.5).abs() < 1e-15);
    assert!(s.factor(9, 10) > 0.0 && s.factor(9, 10) < 0.03);
    assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);

    let data = tiny_data(2, 1);
    let mut model = Localizer::new(tiny_model(), 2).unwrap();
    let mut cfg = train_cfg(4);
    cfg.lr_schedule = LrSchedule::Cosine;
    let mut lrs = Vec::new();
    train_baseline(&mut model, &data, &cfg, &mut |r| lrs.push(r.lr)).unwrap();
    assert_eq!(lrs[0], 1e-2);
    assert!(lrs.windows(2).all(|w| w[1] < w[0]), "{lrs:?}");
}

#[test]
fn training_lowers_synthetic_error() {
    let data = tiny_data(20, 3);
    let mut model = Localizer::new(tiny_model(), 4).unwrap();
    let before = evaluate(&model, &data, Recurrence::Independent).unwrap().mean_error_m;
    train_baseline(&mut model, &data, &train_cfg(150), &mut |_| {}).unwrap();
    let after = evaluate(&model, &data, Recurrence::Independent).unwrap().mean_error_m;
    assert!(after < before, "{before} -> {after}");
}

fn image_data(rng: &mut ChaCha8Rng, cfg: &ModelConfig, frames: usize) -> SequenceTensors {
    let mut img = |h: usize, w: usize| {
        Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    };
    let satellite = img(cfg.sat_px, cfg.sat_px);
    let frames = (0..frames).map(|_| img(cfg.ground_px[0], cfg.ground_px[1])).collect();
    SequenceTensors {
        seq_id: "img".into(),
        satellite,
        frames,
        gt_pixels: vec![(3.0, 5.0), (9.0, 12.0), (20.0, 30.0)],
        patch: SatPatchGeo::new(GeoPoint::new(49.0, 8.4).unwrap(), 0.2, 80.0).unwrap(),
        model_scale: 2.5,
    }
}

#[test]
fn sequential_phase_freezes_the_extractor() {
    let cfg = ModelConfig {
        channels: 8,
        extractor: ExtractorKind::Conv,
        ground_px: [16, 16],
        ..tiny_model()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data = vec![image_data(&mut rng, &cfg, 3)];
    let mut model = Localizer::new(cfg, 7).unwrap();
    let before = model.params.clone();
    train_sequential(&mut model, &data, &train_cfg(3), Recurrence::Temporal, &mut |_| {}).unwrap();
    let mut extractor = 0;
    let mut moved = 0;
    for (id, p) in before.iter() {
        let same = p.value == *model.params.value(id);
        if p.group == ParamGroup::Extractor {
            extractor += 1;
            assert!(same, "{} changed", p.name);
        } else if !same {
            moved += 1;
        }
    }
    assert!(extractor > 0 && moved > 0);
}

#[test]
fn short_sequences_are_skipped() {
    let mut data = tiny_data(3, 8);
    data[1].frames.truncate(2);
    data[1].gt_pixels.truncate(2);
    let mut model = Localizer::new(tiny_model(), 9).unwrap();
    let s = train_sequential(&mut model, &data, &train_cfg(2), Recurrence::Temporal, &mut |_| {}).unwrap();
    assert_eq!(s.skipped, 1);
    let mut only_short = vec![data[1].clone()];
    only_short[0].seq_id = "short".into();
    assert!(matches!(
        train_sequential(&mut model, &only_short, &train_cfg(2), Recurrence::Temporal, &mut |_| {}),
        Err(Error::Empty(_))
    ));
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(4, 10);
    let run = |name: &str| {
        let mut model = Localizer::new(tiny_model(), 11).unwrap();
        train_baseline(&mut model, &data, &train_cfg(5), &mut |_| {}).unwrap();
        train_sequential(&mut model, &data, &train_cfg(5), Recurrence::Temporal, &mut |_| {}).unwrap();
        let path = dir.path().join(name);
        model.save(&path).unwrap();
        std::fs::read(path).unwrap()
    };
    assert_eq!(run("a.ckpt"), run("b.ckpt"));
}
