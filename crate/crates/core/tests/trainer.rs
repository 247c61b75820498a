use std::fs;

use saim::checkpoint::Checkpoint;
use saim::imageio::{generate_synthetic, normalize, AugmentConfig, ImageBatch};
use saim::model::{param_group, ModelConfig, ParamGroup};
use saim::numerics::Tensor;
use saim::objective::{target, LossConfig, LossKind, Smoothing};
use saim::patching::patchify;
use saim::permutation::sample_plan;
use saim::rng::seeded;
use saim::trainer::{
    lr_at, pretrain, train_step, AdamW, RunPaths, TrainConfig, TrainError, TrainState,
};

fn small() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            image_size: 16,
            embed_dim: 16,
            n_heads: 2,
            head_hidden_dim: 16,
            ..ModelConfig::toy()
        },
        loss: LossConfig {
            kind: LossKind::MseNormPixel,
            smoothing: Some(Smoothing {
                kernel_size: 3,
                sigma: 1.0,
            }),
        },
        batch_size: 2,
        warmup_steps: 2,
        total_steps: 10,
        dataset_size: 8,
        checkpoint_every: 5,
        seed: 21,
        ..TrainConfig::toy()
    }
}

fn data(cfg: &TrainConfig) -> ImageBatch {
    generate_synthetic(cfg.dataset_size, cfg.model.image_size, cfg.seed)
        .unwrap()
        .0
}

#[test]
fn ten_step_runs_are_identical() {
    let cfg = small();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = pretrain(&cfg, &data(&cfg), a.path(), None).unwrap();
    let sb = pretrain(&cfg, &data(&cfg), b.path(), None).unwrap();
    assert_eq!(sa.history, sb.history);
    assert_eq!(sa.history.len(), 10);
    let (pa, pb) = (
        RunPaths {
            dir: a.path().into(),
        },
        RunPaths {
            dir: b.path().into(),
        },
    );
    assert_eq!(
        fs::read(pa.metrics()).unwrap(),
        fs::read(pb.metrics()).unwrap()
    );
    assert_eq!(fs::read(pa.last()).unwrap(), fs::read(pb.last()).unwrap());
    assert_eq!(
        fs::read_to_string(pa.metrics()).unwrap().lines().count(),
        10
    );
    assert!(pa.step(5).exists() && pa.step(10).exists());
    assert_eq!(TrainConfig::load(pa.config()).unwrap(), cfg);
}

#[test]
fn resume_at_step_five_matches_uninterrupted() {
    let cfg = small();
    let full = tempfile::tempdir().unwrap();
    let s = pretrain(&cfg, &data(&cfg), full.path(), None).unwrap();
    let resumed_dir = tempfile::tempdir().unwrap();
    let ckpt = RunPaths {
        dir: full.path().into(),
    }
    .step(5);
    let r = pretrain(&cfg, &data(&cfg), resumed_dir.path(), Some(&ckpt)).unwrap();
    assert_eq!(r.history, s.history[5..]);
    assert_eq!(r.params, s.params);
    assert_eq!(r.m, s.m);
    assert_eq!(r.v, s.v);

    let mut mid = TrainState::from_checkpoint(&Checkpoint::load(&ckpt).unwrap()).unwrap();
    assert_eq!(mid.step, 5);
    let rec = train_step(&mut mid, &cfg, &data(&cfg)).unwrap();
    assert_eq!(rec.loss.to_bits(), s.history[5].loss.to_bits());
}

#[test]
fn resume_in_same_directory_keeps_earlier_metrics() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    pretrain(&cfg, &data(&cfg), dir.path(), None).unwrap();
    let paths = RunPaths {
        dir: dir.path().into(),
    };
    let before = fs::read(paths.metrics()).unwrap();
    let ckpt = dir.path().join("resume_from.ckpt");
    fs::copy(paths.step(5), &ckpt).unwrap();
    pretrain(&cfg, &data(&cfg), dir.path(), Some(&ckpt)).unwrap();
    assert_eq!(fs::read(paths.metrics()).unwrap(), before);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let cfg = small();
    let mut state = TrainState::new(&cfg).unwrap();
    train_step(&mut state, &cfg, &data(&cfg)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    state.to_checkpoint().save(&p1).unwrap();
    TrainState::from_checkpoint(&Checkpoint::load(&p1).unwrap())
        .unwrap()
        .to_checkpoint()
        .save(&p2)
        .unwrap();
    assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
}

#[test]
fn a_step_leaves_positions_fixed_and_moves_every_group() {
    let cfg = small();
    let mut state = TrainState::new(&cfg).unwrap();
    let before = state.params.clone();
    train_step(&mut state, &cfg, &data(&cfg)).unwrap();
    train_step(&mut state, &cfg, &data(&cfg)).unwrap();
    assert_eq!(state.params.pos_embed, before.pos_embed);
    for ((name, a), (_, b)) in state.params.named().into_iter().zip(before.named()) {
        assert_ne!(a, b, "{name} did not move");
    }
}

#[test]
fn frozen_batch_loss_strictly_decreases() {
    let cfg = TrainConfig {
        warmup_steps: 0,
        ..TrainConfig::toy()
    };
    let (imgs, _) = generate_synthetic(cfg.batch_size, cfg.model.image_size, 4).unwrap();
    let normed = normalize(&imgs, &AugmentConfig::default());
    let xs = patchify(&normed, cfg.model.patch_size).unwrap();
    let ts: Vec<Tensor<f32>> = target(&normed, &cfg.loss, cfg.model.patch_size)
        .unwrap()
        .iter()
        .map(|t| t.to_tensor())
        .collect();
    let mut rng = seeded(5);
    let plans: Vec<_> = xs
        .iter()
        .map(|_| sample_plan(cfg.model.n_tokens(), &mut rng).unwrap())
        .collect();
    let mut state = TrainState::new(&cfg).unwrap();
    let opt = AdamW::from_config(&cfg);
    let mut last = f64::INFINITY;
    for step in 0..20u64 {
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor<f32>>> = None;
        for ((x, p), t) in xs.iter().zip(&plans).zip(&ts) {
            let (l, g) = state.params.loss_and_grads(x, p, t, cfg.loss.kind).unwrap();
            total += l as f64;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.iter_mut().zip(&g).for_each(|(u, v)| u.add_assign(v)),
            }
        }
        let grads = acc.unwrap();
        if step == 0 {
            let names = state.params.named();
            for group in [ParamGroup::Encoder, ParamGroup::Decoder] {
                let mass: f32 = names
                    .iter()
                    .zip(&grads)
                    .filter(|((n, _), _)| param_group(n) == Some(group))
                    .map(|(_, g)| g.data().iter().map(|v| v.abs()).sum::<f32>())
                    .sum();
                assert!(mass > 0.0, "{group:?} receives no gradient");
            }
        }
        let loss = total / xs.len() as f64;
        assert!(loss < last, "step {step}: {loss} >= {last}");
        last = loss;
        let lr = lr_at(step, &cfg);
        let mut i = 0;
        let b = xs.len() as f32;
        let (m, v) = (&mut state.m, &mut state.v);
        state.params.visit_mut(&mut |name, p| {
            opt.update(
                p,
                &grads[i].scale(1.0 / b),
                &mut m[i],
                &mut v[i],
                lr,
                step + 1,
                saim::trainer::decays(name, p),
            );
            i += 1;
        });
    }
}

#[test]
fn schedule_is_continuous_and_ends_at_zero() {
    let cfg = TrainConfig::toy();
    let w = cfg.warmup_steps;
    assert_eq!(lr_at(w, &cfg), cfg.base_lr);
    assert!((lr_at(w - 1, &cfg) - lr_at(w, &cfg)).abs() <= cfg.base_lr / w as f64 + 1e-15);
    assert!((lr_at(w + 1, &cfg) - lr_at(w, &cfg)).abs() < 1e-6);
    assert!(lr_at(cfg.total_steps, &cfg).abs() < 1e-18);
    let mid = w + (cfg.total_steps - w) / 2;
    assert!((lr_at(mid, &cfg) - cfg.base_lr / 2.0).abs() < 1e-12);
}

#[test]
fn decoupled_decay_shrinks_by_lr_times_wd() {
    let opt = AdamW {
        beta1: 0.9,
        beta2: 0.95,
        eps: 1e-8,
        weight_decay: 0.05,
    };
    let mut w = Tensor::full(&[2, 2], 1.0f32);
    let (mut m, mut v) = (Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]));
    opt.update(
        &mut w,
        &Tensor::zeros(&[2, 2]),
        &mut m,
        &mut v,
        0.1,
        1,
        true,
    );
    assert!(w.data().iter().all(|&x| (x - 0.995).abs() < 1e-7));
}

#[test]
fn config_file_errors() {
    assert!(matches!(
        TrainConfig::parse("lr = 1e-3\nbogus = 4\n"),
        Err(TrainError::UnknownKey { line: 2, .. })
    ));
    assert!(matches!(
        TrainConfig::parse("batch_size = many\n"),
        Err(TrainError::Parse { line: 1, .. })
    ));
    assert!(TrainConfig::parse("warmup_steps = 400\ntotal_steps = 300\n").is_err());
    let cfg = TrainConfig::parse("# comment\n\nseed = 9\nloss = l1\nkernel_size = 0\n").unwrap();
    assert_eq!(
        (cfg.seed, cfg.loss.kind, cfg.loss.smoothing),
        (9, LossKind::L1, None)
    );
    assert_eq!(
        TrainConfig::parse(&TrainConfig::paper().to_text()).unwrap(),
        TrainConfig::paper()
    );
}

#[test]
fn non_finite_parameters_abort_the_step() {
    let cfg = small();
    let mut state = TrainState::new(&cfg).unwrap();
    state.params.weights.head = {
        let mut h = state.params.weights.head.clone();
        if let saim::model::Head::Mlp { fc2, .. } = &mut h {
            fc2.weight.data_mut()[0] = f32::NAN;
        }
        h
    };
    let err = train_step(&mut state, &cfg, &data(&cfg)).unwrap_err();
    assert!(err.to_string().contains("non-finite"), "{err}");
    assert_eq!(state.step, 0);
}
