use proptest::prelude::*;
use saim::imageio::ImageBatch;
use saim::patching::{
    gaussian_kernel, normalize_patch, patchify, sincos_table, smooth, unpatchify, PatchSequence,
};

proptest! {
    #[test]
    fn unpatchify_inverts_patchify(
        p in prop::sample::select(vec![2usize, 4, 8]),
        gh in 1usize..4, gw in 1usize..4, c in 1usize..4, n in 1usize..3, seed in any::<u64>(),
    ) {
        let (h, w) = (gh * p, gw * p);
        let pixels = (0..n * c * h * w).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 / 999.0).collect();
        let img = ImageBatch::new(n, c, h, w, pixels).unwrap();
        let seqs = patchify(&img, p).unwrap();
        prop_assert_eq!(seqs.len(), n);
        prop_assert_eq!(seqs[0].n_tokens(), gh * gw);
        prop_assert_eq!(seqs[0].patch_dim(), p * p * c);
        prop_assert_eq!(unpatchify(&seqs).unwrap(), img);
    }

    #[test]
    fn normalized_patches_have_zero_mean(values in prop::collection::vec(-3.0f32..3.0, 32)) {
        let seq = PatchSequence { grid_h: 1, grid_w: 2, patch_size: 2, channels: 4, values };
        let out = normalize_patch(&seq);
        for i in 0..2 {
            let m: f64 = out.patch(i).iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            prop_assert!(m.abs() < 1e-6);
        }
    }
}

#[test]
fn whole_image_patch() {
    let img = ImageBatch::new(1, 2, 4, 4, (0..32).map(|v| v as f32).collect()).unwrap();
    let seq = &patchify(&img, 4).unwrap()[0];
    assert_eq!(seq.n_tokens(), 1);
    // channels innermost: (y, x, c)
    let want: Vec<f32> = (0..16)
        .flat_map(|yx| [yx as f32, (16 + yx) as f32])
        .collect();
    assert_eq!(seq.patch(0), &want[..]);
}

#[test]
fn indivisible_image_rejected() {
    assert!(patchify(&ImageBatch::zeros(1, 1, 6, 6), 4).is_err());
}

#[test]
fn sincos_examples() {
    let t = sincos_table(1, 1, 8).unwrap();
    assert_eq!(t.row(0), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    assert!(sincos_table(2, 2, 6).is_err());
    let t = sincos_table(4, 3, 16).unwrap();
    assert!((0..12).all(|k| t.row(k).iter().all(|v| (-1.0..=1.0).contains(v))));
}

#[test]
fn sincos_transpose_symmetry() {
    let t = sincos_table(2, 2, 8).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            let (a, b) = (t.row(r * 2 + c), t.row(c * 2 + r));
            assert_eq!(&a[..4], &b[4..]);
            assert_eq!(&a[4..], &b[..4]);
        }
    }
}

#[test]
fn sincos_rows_distinct() {
    for g in 1..=16 {
        let t = sincos_table(g, g, 16).unwrap();
        for i in 0..g * g {
            for j in 0..i {
                assert_ne!(t.row(i), t.row(j), "grid {g}: rows {i} and {j}");
            }
        }
    }
}

#[test]
fn kernel_center_value() {
    // separable: center = (1D center)^2, 1D center = 1 / (1 + 2 e^{-1/2})
    let c1 = 1.0 / (1.0 + 2.0 * (-0.5f64).exp());
    let k = gaussian_kernel(3, 1.0).unwrap();
    assert!((k.weight(1, 1) - c1 * c1).abs() < 1e-12);
    assert!((k.weight(1, 1) - 0.2042).abs() < 1e-4);
    assert_eq!(gaussian_kernel(1, 0.5).unwrap().weights, vec![1.0]);
    assert!(gaussian_kernel(4, 1.0).is_err());
    assert!(gaussian_kernel(3, 0.0).is_err());
}

#[test]
fn kernel_sum_symmetry_monotone() {
    for (size, sigma) in [(9, 1.0), (5, 0.7), (7, 2.5)] {
        let k = gaussian_kernel(size, sigma).unwrap();
        assert!((k.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let c = size / 2;
        for i in 0..size {
            for j in 0..size {
                let w = k.weight(i, j);
                assert_eq!(w, k.weight(size - 1 - i, j));
                assert_eq!(w, k.weight(i, size - 1 - j));
                assert_eq!(w, k.weight(j, i));
                for (i2, j2) in [(i + 1, j), (i, j + 1)] {
                    if i2 < size && j2 < size {
                        let d = |a: usize, b: usize| {
                            (a as f64 - c as f64).powi(2) + (b as f64 - c as f64).powi(2)
                        };
                        if d(i2, j2) > d(i, j) {
                            assert!(k.weight(i2, j2) <= w);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn smoothing_examples() {
    let k = gaussian_kernel(3, 1.0).unwrap();
    let flat = ImageBatch::new(1, 2, 8, 8, vec![0.4; 128]).unwrap();
    let s = smooth(&flat, &k).unwrap();
    assert!(s.pixels.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    let mut imp = ImageBatch::zeros(1, 1, 7, 7);
    imp.pixels[3 * 7 + 3] = 1.0;
    let s = smooth(&imp, &k).unwrap();
    for dy in 0..3 {
        for dx in 0..3 {
            assert!((s.get(0, 0, 2 + dy, 2 + dx) as f64 - k.weight(dy, dx)).abs() < 1e-7);
        }
    }
    assert_eq!(s.pixels.iter().filter(|&&v| v != 0.0).count(), 9);
    assert!(smooth(
        &ImageBatch::zeros(1, 1, 4, 4),
        &gaussian_kernel(9, 1.0).unwrap()
    )
    .is_err());
}

#[test]
fn smoothing_commutes_with_flip() {
    let img = ImageBatch::new(
        1,
        3,
        12,
        10,
        (0..360).map(|i| ((i * 37) % 101) as f32 / 100.0).collect(),
    )
    .unwrap();
    let k = gaussian_kernel(5, 1.3).unwrap();
    let a = smooth(&img.hflip(), &k).unwrap();
    let b = smooth(&img, &k).unwrap().hflip();
    assert!(a
        .pixels
        .iter()
        .zip(&b.pixels)
        .all(|(x, y)| (x - y).abs() < 1e-6));
}
