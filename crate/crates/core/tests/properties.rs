use proptest::prelude::*;

use reconnet::datapipe::{decode_pgm, encode_pgm, extract_patches, patch_positions, split_train_val, GrayImage, Split};
use reconnet::evalkit::{psnr, stitch_blocks, tile_blocks, TileGeometry};
use reconnet::fft::{circular_convolve_direct, circular_convolve_fft};
use reconnet::layers::{circulant_forward, circulant_matrix, fc_forward};
use reconnet::models::{Checkpoint, FcInit, FirstStage, ReconNet, ReconNetSpec};
use reconnet::rng::{mix_seed, Prng};
use reconnet::sensing::{gen_gaussian_orthonormal, quantization_step, quantize_matrix, sense};
use reconnet::tensor::{conv2d_same, matmul};
use reconnet::Tensor;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn gaussian_vec(n: usize, rng: &mut Prng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn image(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut rng = Prng::new(seed);
    GrayImage::new(h, w, (0..h * w).map(|_| rng.uniform()).collect()).unwrap()
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn circulant_paths_agree(n in 1usize..70, seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let (c, x) = (gaussian_vec(n, &mut rng), gaussian_vec(n, &mut rng));
        let direct = circular_convolve_direct(&c, &x).unwrap();
        let fast = circular_convolve_fft(&c, &x).unwrap();
        let dense = matmul(&circulant_matrix(&c), &Tensor::from_vec(&[n, 1], x).unwrap()).unwrap();
        for i in 0..n {
            prop_assert!((direct[i] - fast[i]).abs() < 1e-9);
            prop_assert!((direct[i] - dense.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn circulant_layer_is_fc_on_padded_input(n in 1usize..60, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let m = 1 + ((n - 1) as f64 * frac) as usize;
        let mut rng = Prng::new(seed);
        let c = Tensor::vector(&gaussian_vec(n, &mut rng));
        let x = Tensor::vector(&gaussian_vec(m, &mut rng));
        let y = circulant_forward(&c, &x).unwrap();
        let full = circulant_matrix(c.data());
        let w: Vec<f64> = (0..n).flat_map(|i| full.data()[i * n..i * n + m].to_vec()).collect();
        let fc = fc_forward(&Tensor::from_vec(&[n, m], w).unwrap(), &Tensor::zeros(&[n]), &x).unwrap();
        prop_assert!(y.max_abs_diff(&fc) < 1e-9);
    }

    #[test]
    fn same_convolution_preserves_extent(
        h in 1usize..12, w in 1usize..12, half in 0usize..4, cin in 1usize..4, cout in 1usize..4, seed in any::<u64>()
    ) {
        let k = 2 * half + 1;
        let mut rng = Prng::new(seed);
        let x = Tensor::gaussian(&[h, w, cin], 0.0, 1.0, &mut rng).unwrap();
        let ker = Tensor::gaussian(&[k, k, cin, cout], 0.0, 1.0, &mut rng).unwrap();
        let y = conv2d_same(&x, &ker, &Tensor::zeros(&[cout])).unwrap();
        prop_assert_eq!(y.shape(), &[h, w, cout][..]);
    }

    #[test]
    fn patch_count_matches_enumeration(h in 1usize..120, w in 1usize..120, stride in 1usize..40) {
        let brute = |len: usize| (0..len).filter(|p| p % stride == 0 && p + 33 <= len).count();
        prop_assert_eq!(patch_positions(h, 33, stride), brute(h));
        match extract_patches(&image(h, w, 1), "p", 33, stride) {
            Ok(ds) => prop_assert_eq!(ds.len(), brute(h) * brute(w)),
            Err(_) => prop_assert!(h < 33 || w < 33),
        }
    }

    #[test]
    fn tile_stitch_round_trip(h in 1usize..100, w in 1usize..100, seed in any::<u64>()) {
        let img = image(h, w, seed);
        let (blocks, geom) = tile_blocks(&img);
        prop_assert_eq!(geom, TileGeometry::of(h, w));
        prop_assert_eq!(blocks.len(), h.div_ceil(33) * w.div_ceil(33));
        prop_assert_eq!(stitch_blocks(&blocks, &geom).unwrap(), img);
    }

    #[test]
    fn psnr_symmetric_and_shift_invariant(seed in any::<u64>(), shift in -0.2f64..0.2) {
        let a = image(20, 17, seed);
        let b = image(20, 17, seed ^ 1);
        let squeeze = |g: &GrayImage| {
            GrayImage::new(20, 17, g.pixels().iter().map(|v| 0.3 + 0.4 * v + shift).collect()).unwrap()
        };
        let (sa, sb) = (squeeze(&a), squeeze(&b));
        let base = psnr(&sa, &sb).unwrap();
        prop_assert!((base - psnr(&sb, &sa).unwrap()).abs() < 1e-12);
        let unshifted = |g: &GrayImage| {
            GrayImage::new(20, 17, g.pixels().iter().map(|v| v - shift).collect()).unwrap()
        };
        prop_assert!((base - psnr(&unshifted(&sa), &unshifted(&sb)).unwrap()).abs() < 1e-9);
        prop_assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn pgm_round_trip(h in 1usize..30, w in 1usize..30, seed in any::<u64>()) {
        let img = image(h, w, seed).quantized_8bit();
        prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn split_is_a_partition(n_side in 34usize..90, frac in 0.0f64..0.9, seed in any::<u64>()) {
        let ds = extract_patches(&image(n_side, 40, 5), "s", 33, 3).unwrap();
        let split = split_train_val(&ds, frac, seed).unwrap();
        let val = (frac * ds.len() as f64).floor() as usize;
        prop_assert_eq!(split.count(Split::Val), val);
        prop_assert_eq!(split.count(Split::Train), ds.len() - val);
        prop_assert_eq!(split_train_val(&ds, frac, seed).unwrap(), split);
    }

    #[test]
    fn mix_seed_separates_salts(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assume!(a != b);
        prop_assert_ne!(mix_seed(seed, a), mix_seed(seed, b));
        let (mut x, mut y) = (Prng::new(seed), Prng::new(seed));
        prop_assert_eq!(x.next_u64(), y.next_u64());
    }
}

proptest! {
    #![proptest_config(config(8))]

    #[test]
    fn sensing_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let phi = gen_gaussian_orthonormal(1089, 0.04, seed).unwrap();
        prop_assert!(phi.orthonormality_error() < 1e-10);
        let mut rng = Prng::new(seed);
        let (x, z) = (gaussian_vec(1089, &mut rng), gaussian_vec(1089, &mut rng));
        let mix: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
        let (yx, yz, ym) = (sense(&phi, &x).unwrap(), sense(&phi, &z).unwrap(), sense(&phi, &mix).unwrap());
        for i in 0..phi.m() {
            prop_assert!((ym[i] - (a * yx[i] + b * yz[i])).abs() < 1e-12 * (1.0 + ym[i].abs()) * 100.0);
        }
    }

    #[test]
    fn quantization_error_within_half_step(seed in any::<u64>(), bits in 2u32..12) {
        let phi = gen_gaussian_orthonormal(1089, 0.01, seed).unwrap();
        let q = quantize_matrix(&phi, bits).unwrap();
        let half = quantization_step(&phi, bits) / 2.0;
        prop_assert!(phi.phi.max_abs_diff(&q.phi) <= half * (1.0 + 1e-12));
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), gamma in 1usize..3, circulant in any::<bool>()) {
        let fs = if circulant { FirstStage::CirculantBank { gamma } } else { FirstStage::Fc };
        let phi = gen_gaussian_orthonormal(1089, 0.01, seed).unwrap();
        let spec = ReconNetSpec::new(0.01, 1 + (seed % 2) as usize, fs).unwrap();
        let net = ReconNet::build(&spec, FcInit::default_gaussian(11), &mut Prng::new(seed)).unwrap();
        let ckpt = Checkpoint::new(net, Some(phi)).with_meta("variant", "euc");
        let back = Checkpoint::from_container(&ckpt.to_container()).unwrap();
        prop_assert_eq!(back.model.spec(), ckpt.model.spec());
        for (a, b) in back.model.params().values().iter().zip(ckpt.model.params().values()) {
            prop_assert!(a.bitwise_eq(b));
        }
        prop_assert!(back.phi.unwrap().phi.bitwise_eq(&ckpt.phi.unwrap().phi));
        prop_assert_eq!(&back.metadata["variant"], "euc");
    }
}
