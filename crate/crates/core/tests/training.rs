use ctmamba_core::data::{make_dataset, NoiseModel};
use ctmamba_core::loss::Objective;
use ctmamba_core::train::{
    batch_gradients, check_pair, grad_check, is_loss_param, randomize_for_check, sample_gradients, toy_configs,
    train_loop, train_step, AdamW, GradCheckOptions, GradObjective, GradReport, PatchPair, RunConfig, TrainConfig,
};
use ctmamba_core::Error;

fn toy_run(epochs: usize) -> RunConfig {
    let (mut net, loss) = toy_configs();
    net.channels = 2;
    RunConfig {
        net,
        loss,
        train: TrainConfig {
            epochs,
            batch_size: 4,
            patches_per_image: 1,
            patch_size: 16,
            seed: 11,
            ..TrainConfig::default()
        },
    }
}

fn check(objective: GradObjective, seed: u64) -> GradReport {
    let (net, loss) = toy_configs();
    let opts = GradCheckOptions {
        objective,
        ..GradCheckOptions::default()
    };
    let r = grad_check(&net, &loss, seed, &opts).unwrap();
    assert!(r.params <= 5000, "toy net has {} parameters", r.params);
    assert!(r.checked >= 200);
    assert!(r.entries.iter().all(|e| e.checked >= 1 && e.max_rel_err >= 0.0));
    r
}

#[test]
fn grad_check_l1_and_smooth_terms() {
    for obj in [GradObjective::L1Only, GradObjective::Smooth] {
        let r = check(obj, 1);
        assert!(r.overall_max <= 1e-3, "{obj:?}: {}", r.overall_max);
    }
}

#[test]
fn grad_check_nps_chain() {
    for obj in [GradObjective::NpsOnly, GradObjective::Full] {
        let r = check(obj, 1);
        assert!(r.overall_max <= 5e-3, "{obj:?}: {}", r.overall_max);
    }
}

#[test]
fn nps_gradients_vanish_at_zero_loss_point() {
    let mut cfg = toy_run(0);
    cfg.loss.weights.lambda1 = 0.0;
    cfg.loss.weights.lambda3 = 0.0;
    let store = cfg.init_store().unwrap();
    let obj = Objective::new(cfg.loss.clone()).unwrap();
    let p = check_pair(16, 4).unwrap();
    let same = PatchPair {
        ndct: p.ldct.clone(),
        ..p
    };
    let (terms, grads) = sample_gradients(&store, &cfg.net, &obj, &same, 50, false).unwrap();
    assert_eq!(terms.nps, 0.0);
    assert!(grads.iter().all(|g| g.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn every_tensor_receives_gradient() {
    let cfg = toy_run(0);
    let mut store = cfg.init_store().unwrap();
    randomize_for_check(&mut store, 2);
    let obj = Objective::new(cfg.loss.clone()).unwrap();
    let mut seen = vec![false; store.len()];
    for seed in 0..3 {
        let p = check_pair(16, seed).unwrap();
        let (_, grads) = sample_gradients(&store, &cfg.net, &obj, &p, 50, false).unwrap();
        for (i, g) in grads.iter().enumerate() {
            seen[i] |= g.data().iter().any(|v| *v != 0.0);
        }
    }
    let dead: Vec<&str> = (0..store.len()).filter(|&i| !seen[i]).map(|i| store.name(i)).collect();
    assert!(dead.is_empty(), "no gradient reaches {dead:?}");
}

#[test]
fn warmup_gates_the_nps_term() {
    let cfg = toy_run(0);
    let mut store = cfg.init_store().unwrap();
    randomize_for_check(&mut store, 3);
    let obj = Objective::new(cfg.loss.clone()).unwrap();
    let p = check_pair(16, 5).unwrap();
    let warm = cfg.loss.weights.nps_warmup_epochs;
    let (before, g0) = sample_gradients(&store, &cfg.net, &obj, &p, warm - 1, false).unwrap();
    assert_eq!(before.nps, 0.0);
    for (i, g) in g0.iter().enumerate() {
        if is_loss_param(store.name(i)) {
            assert!(g.data().iter().all(|v| *v == 0.0));
        }
    }
    let (after, g1) = sample_gradients(&store, &cfg.net, &obj, &p, warm, false).unwrap();
    assert!(after.nps > 0.0);
    assert!((0..store.len()).any(|i| is_loss_param(store.name(i)) && g1[i].data().iter().any(|v| *v != 0.0)));
}

#[test]
fn batch_reduction_is_permutation_invariant() {
    let cfg = toy_run(0);
    let mut store = cfg.init_store().unwrap();
    randomize_for_check(&mut store, 4);
    let obj = Objective::new(cfg.loss.clone()).unwrap();
    let batch: Vec<PatchPair> = (0..4).map(|s| check_pair(16, 20 + s).unwrap()).collect();
    let mut rev = batch.clone();
    rev.reverse();
    rev.swap(0, 2);
    let (ta, ga) = batch_gradients(&store, &cfg.net, &obj, &batch, 12).unwrap();
    let (tb, gb) = batch_gradients(&store, &cfg.net, &obj, &rev, 12).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(ga, gb);
}

#[test]
fn overfits_one_batch() {
    let mut cfg = toy_run(0);
    cfg.train.weight_decay = 0.0;
    let mut store = cfg.init_store().unwrap();
    let obj = Objective::new(cfg.loss.clone()).unwrap();
    let mut opt = AdamW::new(&cfg.train, &store);
    let batch: Vec<PatchPair> = (0..2).map(|s| check_pair(16, 40 + s).unwrap()).collect();
    let first = train_step(&mut store, &mut opt, &cfg.net, &obj, &batch, 0, 3e-3).unwrap().total;
    let mut last = first;
    for _ in 1..200 {
        last = train_step(&mut store, &mut opt, &cfg.net, &obj, &batch, 0, 3e-3).unwrap().total;
    }
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let pairs = make_dataset(6, 16, 0.25, 9, &NoiseModel::default()).unwrap();
    let (train, val) = pairs.split_at(4);
    let mut cfg = toy_run(2);
    cfg.loss.weights.nps_warmup_epochs = 1;
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = train_loop(train, val, &cfg, Some(d1.path())).unwrap();
    let b = train_loop(train, val, &cfg, Some(d2.path())).unwrap();
    assert_eq!(a.store, b.store);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 2);
    assert_eq!(a.log[0].nps, 0.0);
    assert!(a.log[1].nps > 0.0);
    for f in ["model.ckpt", "metrics.csv"] {
        let x = std::fs::read(d1.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(d2.path().join(f)).unwrap(), "{f} differs");
    }
    assert_ne!(a.store, cfg.init_store().unwrap());
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let cfg = toy_run(0);
    let out = train_loop(&[], &[], &cfg, None).unwrap();
    assert_eq!(out.store, cfg.init_store().unwrap());
    assert!(out.log.is_empty());
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let cfg = toy_run(0);
    let mut store = cfg.init_store().unwrap();
    let id = store.id("pffn.out.b").unwrap();
    store.get_mut(id).data_mut()[0] = f64::NAN;
    let obj = Objective::new(cfg.loss.clone()).unwrap();
    let mut opt = AdamW::new(&cfg.train, &store);
    let before_step = opt.step;
    let p = check_pair(16, 1).unwrap();
    let err = train_step(&mut store, &mut opt, &cfg.net, &obj, &[p], 0, 1e-3).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(opt.step, before_step);
}
