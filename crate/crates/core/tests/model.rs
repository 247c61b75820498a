mod common;

use common::{grid_config, max_diff, random_patches, reference_encoder, reference_forward};
use proptest::prelude::*;
use saim::checkpoint::{encoder_from_checkpoint, encoder_to_checkpoint, Checkpoint};
use saim::model::{
    forward_on_tape, init_params, HeadKind, MaskCorruption, ModelConfig, ModelParams,
};
use saim::numerics::{Mask, Tape, Tensor};
use saim::permutation::{raster_plan, sample_plan, PermutationPlan};
use saim::rng::seeded;

fn params64(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = init_params(cfg, &mut seeded(seed)).unwrap().cast::<f64>();
    // larger weights than init so that attention patterns are far from uniform
    p.visit_mut(&mut |name, t| {
        if !name.contains("norm") {
            let mut rng = seeded(seed ^ name.len() as u64);
            use rand::Rng;
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    });
    p
}

fn check_against_reference(cfg: &ModelConfig, plan: &PermutationPlan, seed: u64) -> f64 {
    let p = params64(cfg, seed);
    let x = random_patches(cfg, seed + 1);
    let pred = p.forward(&x, plan).unwrap();
    let want = reference_forward(
        &p,
        &x.to_tensor::<f64>(),
        &|i, j| plan.content_mask.get(i, j),
        &|i, j| plan.query_mask.get(i, j),
    );
    max_diff(&pred, &want)
}

#[test]
fn raster_plan_matches_causal_reference() {
    for head in [HeadKind::Linear, HeadKind::Mlp, HeadKind::Transformer] {
        let cfg = ModelConfig {
            head,
            ..grid_config(4, 16, 2, 4)
        };
        let plan = raster_plan(16).unwrap();
        let p = params64(&cfg, 5);
        let x = random_patches(&cfg, 6);
        let pred = p.forward(&x, &plan).unwrap();
        let want = reference_forward(&p, &x.to_tensor::<f64>(), &|i, j| j <= i, &|i, j| j < i);
        assert!(max_diff(&pred, &want) < 1e-10, "{head:?}");
        let pred32 = p.cast::<f32>().forward(&x, &plan).unwrap().cast::<f64>();
        assert!(max_diff(&pred32, &want) < 1e-5, "{head:?} in 32-bit");
    }
}

#[test]
fn random_plans_match_reference_for_all_variants() {
    let mut rng = seeded(9);
    let base = grid_config(3, 8, 3, 2);
    let variants = [
        base.clone(),
        ModelConfig {
            share_weights: true,
            ..base.clone()
        },
        ModelConfig {
            decoder_reads_previous_layer: true,
            ..base.clone()
        },
        ModelConfig {
            decoder_depth: 1,
            ..base.clone()
        },
        ModelConfig {
            head: HeadKind::Transformer,
            ..base.clone()
        },
    ];
    for (k, cfg) in variants.iter().enumerate() {
        let plan = sample_plan(9, &mut rng).unwrap();
        assert!(
            check_against_reference(cfg, &plan, k as u64) < 1e-10,
            "{cfg:?}"
        );
    }
}

fn protected_delta(
    p: &ModelParams<f32>,
    plan: &PermutationPlan,
    j: usize,
    seed: u64,
) -> (f32, f32) {
    let x = random_patches(&p.config, seed);
    let mut x2 = x.clone();
    x2.patch_mut(j).iter_mut().for_each(|v| *v = -*v + 0.5);
    let a = p.forward(&x, plan).unwrap();
    let b = p.forward(&x2, plan).unwrap();
    let (mut prot, mut free) = (0.0f32, 0.0f32);
    for t in 0..plan.n() {
        let d = a
            .row(t)
            .iter()
            .zip(b.row(t))
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f32::max);
        if plan.rank[t] <= plan.rank[j] {
            prot = prot.max(d);
        } else {
            free = free.max(d);
        }
    }
    (prot, free)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn perturbing_a_token_never_moves_earlier_predictions(
        grid in 2usize..=4, depth in 1usize..=3, heads in prop::sample::select(vec![1usize, 2, 4]),
        head in prop::sample::select(vec![HeadKind::Linear, HeadKind::Mlp, HeadKind::Transformer]),
        seed in any::<u64>(), pick in any::<prop::sample::Index>(),
    ) {
        let cfg = ModelConfig { head, ..grid_config(grid, 8, depth, heads) };
        let p = init_params(&cfg, &mut seeded(seed)).unwrap();
        let plan = sample_plan(cfg.n_tokens(), &mut seeded(seed ^ 1)).unwrap();
        let j = pick.index(cfg.n_tokens());
        let (prot, _) = protected_delta(&p, &plan, j, seed ^ 2);
        prop_assert_eq!(prot, 0.0);
    }
}

#[test]
fn maximum_noise_token_only_affects_itself_nowhere() {
    let cfg = grid_config(4, 16, 2, 4);
    let p = init_params(&cfg, &mut seeded(1)).unwrap();
    let plan = sample_plan(16, &mut seeded(2)).unwrap();
    let (prot, free) = protected_delta(&p, &plan, plan.last_token(), 3);
    assert_eq!((prot, free), (0.0, 0.0));
    let (prot, free) = protected_delta(&p, &plan, plan.first_token(), 3);
    assert_eq!(prot, 0.0);
    assert!(free > 0.0);
}

#[test]
fn input_gradients_follow_the_plan() {
    let cfg = grid_config(3, 8, 2, 2);
    let p = params64(&cfg, 4);
    let plan = sample_plan(9, &mut seeded(4)).unwrap();
    let x = random_patches(&cfg, 5).to_tensor::<f64>();
    for t in 0..9 {
        let mut tape = Tape::new();
        let w = p.weights.map(&mut |_, v| tape.constant(v.clone()));
        let pos = tape.constant(p.pos_embed.clone());
        let xv = tape.param(x.clone());
        let out = forward_on_tape(&mut tape, &cfg, &w, pos, xv, &plan).unwrap();
        let pick = tape.constant(Tensor::from_fn(&[9, cfg.patch_dim()], |i| {
            if i / cfg.patch_dim() == t {
                1.0
            } else {
                0.0
            }
        }));
        let sel = tape.mul(out.pred, pick).unwrap();
        let l = tape.sum(sel).unwrap();
        let g = tape
            .backward(l)
            .unwrap()
            .take_or_zeros(xv, &[9, cfg.patch_dim()]);
        for j in 0..9 {
            let mass: f64 = g.row(j).iter().map(|v| v.abs()).sum();
            if plan.rank[j] < plan.rank[t] {
                assert!(mass > 0.0, "target {t} ignores earlier token {j}");
            } else {
                assert_eq!(mass, 0.0, "target {t} reads token {j}");
            }
        }
    }
}

#[test]
fn encoder_layer_examples() {
    let cfg = grid_config(2, 8, 1, 2);
    let p = params64(&cfg, 7);
    let h = Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.61).sin());
    let full = p.encoder_layer(0, &h, &Mask::ones(4, 4)).unwrap();
    let x0 = Tensor::<f64>::zeros(&[4, cfg.patch_dim()]);
    // reference encoder of a zero image starts from bias + pos; compare the block alone instead
    let mut q = p.clone();
    q.weights.patch_embed.weight = Tensor::zeros(q.weights.patch_embed.weight.shape());
    q.weights.patch_embed.bias = Tensor::zeros(q.weights.patch_embed.bias.shape());
    q.pos_embed = h.clone();
    assert!(max_diff(&full, &reference_encoder(&q, &x0)) < 1e-12);

    let causal = Mask::causal(4);
    let a = p.encoder_layer(0, &h, &causal).unwrap();
    let mut h2 = h.clone();
    h2.data_mut()[8..].iter_mut().for_each(|v| *v += 1.0);
    let b = p.encoder_layer(0, &h2, &causal).unwrap();
    assert_eq!(a.row(0), b.row(0));

    let mut z = p.clone();
    z.weights.encoder[0].proj.weight = Tensor::zeros(&[8, 8]);
    z.weights.encoder[0].proj.bias = Tensor::zeros(&[8]);
    z.weights.encoder[0].fc2.weight = Tensor::zeros(z.weights.encoder[0].fc2.weight.shape());
    z.weights.encoder[0].fc2.bias = Tensor::zeros(&[8]);
    assert_eq!(z.encoder_layer(0, &h, &causal).unwrap(), h);
    assert!(p.encoder_layer(3, &h, &causal).is_err());
}

#[test]
fn decoder_layer_examples() {
    let cfg = grid_config(2, 8, 1, 2);
    let p = params64(&cfg, 8);
    let plan = PermutationPlan::from_noise(vec![0.2, 0.9, 0.5, 0.7]).unwrap();
    let g = p.pos_embed.clone();
    let h1 = Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.3).cos());
    let h2 = Tensor::from_fn(&[4, 8], |i| (i as f64 * 1.7).sin() * 3.0);
    let a = p.decoder_layer(0, &g, &h1, &plan.query_mask).unwrap();
    let b = p.decoder_layer(0, &g, &h2, &plan.query_mask).unwrap();
    // token 0 has the smallest noise: no visible keys
    assert_eq!(a.row(0), b.row(0));
    let mut z = p.clone();
    z.weights.decoder[0].qkv = Tensor::zeros(&[8, 24]);
    let mlp_only = z.decoder_layer(0, &g, &h1, &Mask::zeros(4, 4)).unwrap();
    assert!(a
        .row(0)
        .iter()
        .zip(mlp_only.row(0))
        .all(|(u, v)| (u - v).abs() < 1e-15));

    let none = Mask::zeros(4, 4);
    assert_eq!(
        p.decoder_layer(0, &g, &h1, &none).unwrap(),
        p.decoder_layer(0, &g, &h2, &none).unwrap()
    );

    for j in 0..4 {
        let mut hp = h1.clone();
        hp.data_mut()[j * 8..(j + 1) * 8]
            .iter_mut()
            .for_each(|v| *v += 0.5);
        let c = p.decoder_layer(0, &g, &hp, &plan.query_mask).unwrap();
        for t in 0..4 {
            let moved = a.row(t) != c.row(t);
            assert_eq!(moved, plan.query_mask.get(t, j), "t={t} j={j}");
        }
    }
    assert!(p
        .decoder_layer(0, &g, &Tensor::zeros(&[3, 8]), &none)
        .is_err());
}

#[test]
fn features_equal_final_content_stream_when_unmasked() {
    let cfg = ModelConfig {
        mask_corruption: MaskCorruption::ContentFull,
        ..grid_config(3, 8, 2, 2)
    };
    let p = init_params(&cfg, &mut seeded(3)).unwrap();
    let x = random_patches(&cfg, 4);
    let plan = sample_plan(9, &mut seeded(5)).unwrap();
    let (_, state) = p.forward_with_state(&x, &plan).unwrap();
    assert_eq!(
        state.content.last().unwrap(),
        &p.encoder_features(&x).unwrap()
    );
    assert_eq!(
        p.encoder_features(&x).unwrap(),
        p.encoder_features(&x).unwrap()
    );
    let p64 = p.cast::<f64>();
    assert!(
        max_diff(
            &p64.encoder_features(&x).unwrap(),
            &reference_encoder(&p64, &x.to_tensor::<f64>())
        ) < 1e-12
    );
}

#[test]
fn features_are_permutation_equivariant() {
    let cfg = grid_config(3, 8, 2, 2);
    let enc = init_params(&cfg, &mut seeded(6))
        .unwrap()
        .cast::<f64>()
        .export_encoder();
    let x = random_patches(&cfg, 7);
    let perm = [4usize, 0, 8, 2, 1, 7, 3, 6, 5];
    let mut px = x.clone();
    let mut pe = enc.clone();
    for (new, &old) in perm.iter().enumerate() {
        px.patch_mut(new).copy_from_slice(x.patch(old));
        let d = cfg.embed_dim;
        pe.pos_embed.data_mut()[new * d..(new + 1) * d].copy_from_slice(enc.pos_embed.row(old));
    }
    let a = enc.features(&x).unwrap();
    let b = pe.features(&px).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        let d = a
            .row(old)
            .iter()
            .zip(b.row(new))
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-12);
    }
}

#[test]
fn exported_encoder_round_trip() {
    let cfg = grid_config(3, 8, 2, 2);
    let p = init_params(&cfg, &mut seeded(8)).unwrap();
    let enc = p.export_encoder();
    let x = random_patches(&cfg, 9);
    assert_eq!(enc.features(&x).unwrap(), p.encoder_features(&x).unwrap());
    let bytes = encoder_to_checkpoint(&enc).encode();
    let back = encoder_from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(back.features(&x).unwrap(), enc.features(&x).unwrap());
    assert!(enc.param_count() < p.param_count());
    let enc_side: usize = p
        .named()
        .iter()
        .filter(|(n, _)| n.starts_with("enc.") || n.starts_with("patch_embed"))
        .map(|(_, t)| t.len())
        .sum();
    assert_eq!(enc.param_count(), enc_side);
}

#[test]
fn mismatched_inputs_rejected() {
    let cfg = grid_config(2, 8, 1, 2);
    let p = init_params(&cfg, &mut seeded(1)).unwrap();
    let x = random_patches(&cfg, 1);
    assert!(p.forward(&x, &raster_plan(5).unwrap()).is_err());
    let other = random_patches(&grid_config(3, 8, 1, 2), 1);
    assert!(p.forward(&other, &raster_plan(9).unwrap()).is_err());
}
