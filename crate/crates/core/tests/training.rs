use reconnet::datapipe::{extract_patches, Split};
use reconnet::gradcheck::relative_error;
use reconnet::models::{Encoder, FcInit, FirstStage, GradMask, ReconNet, ReconNetSpec};
use reconnet::sensing::gen_gaussian_orthonormal;
use reconnet::synth::natural_image;
use reconnet::training::{
    euclidean_gradients, mean_loss, train_autoencoder, train_euclidean, AdamParams, OptimizerKind, TrainConfig,
    TrainPairs,
};
use reconnet::Prng;

fn blocks(count: usize, seed: u64) -> Vec<Vec<f64>> {
    let img = natural_image(120, 120, seed).unwrap();
    let mut b = extract_patches(&img, "t", 33, 9).unwrap().blocks(Split::Train);
    Prng::new(seed).shuffle(&mut b);
    b.truncate(count);
    b
}

fn adam(iterations: usize, lr: f64, batch: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        iterations,
        learning_rate: lr,
        optimizer: OptimizerKind::Adam(AdamParams::default()),
        seed: 11,
        validation_fraction: 0.0,
    }
}

/// Central differences of the batch loss against analytic gradients at a
/// few sampled entries of every parameter tensor.
fn worst_sampled_error(net: &mut ReconNet, data: &TrainPairs, batch: &[usize], per_tensor: usize) -> f64 {
    let eps = 1e-6;
    euclidean_gradients(net, data, batch, GradMask::ALL, 1.0).unwrap();
    let analytic: Vec<_> = net.params().grads().to_vec();
    let ids: Vec<_> = net.params().ids().collect();
    let mut rng = Prng::new(5);
    let mut worst = 0.0f64;
    for (t, id) in ids.into_iter().enumerate() {
        let len = net.params().value(id).len();
        for _ in 0..per_tensor.min(len) {
            let i = rng.below(len as u64) as usize;
            let base = net.params().value(id).data()[i];
            net.params_mut().value_mut(id).data_mut()[i] = base + eps;
            let plus = mean_loss(net, &subset(data, batch)).unwrap();
            net.params_mut().value_mut(id).data_mut()[i] = base - eps;
            let minus = mean_loss(net, &subset(data, batch)).unwrap();
            net.params_mut().value_mut(id).data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[t].data()[i], numeric));
        }
    }
    worst
}

fn subset(data: &TrainPairs, batch: &[usize]) -> TrainPairs {
    TrainPairs {
        inputs: batch.iter().map(|&i| data.inputs[i].clone()).collect(),
        targets: batch.iter().map(|&i| data.targets[i].clone()).collect(),
    }
}

#[test]
fn composed_network_gradients() {
    let phi = gen_gaussian_orthonormal(1089, 0.04, 3).unwrap();
    let data = TrainPairs::measure(&phi, &blocks(3, 1)).unwrap();
    for (units, fs) in [(2, FirstStage::Fc), (1, FirstStage::CirculantBank { gamma: 2 })] {
        let spec = ReconNetSpec::new(0.04, units, fs).unwrap();
        let mut net = ReconNet::build(&spec, FcInit::default_gaussian(43), &mut Prng::new(4)).unwrap();
        let worst = worst_sampled_error(&mut net, &data, &[0, 2], 6);
        assert!(worst < 1e-4, "{units} units {fs:?}: {worst}");
    }
}

#[test]
fn full_batch_loss_is_non_increasing() {
    let phi = gen_gaussian_orthonormal(1089, 0.1, 2).unwrap();
    let data = TrainPairs::measure(&phi, &blocks(4, 2)).unwrap();
    let spec = ReconNetSpec::new(0.1, 1, FirstStage::Fc).unwrap();
    let mut net = ReconNet::build(&spec, FcInit::FromPhi(&phi), &mut Prng::new(1)).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        iterations: 11,
        learning_rate: 1e-7,
        optimizer: OptimizerKind::Sgd { momentum: 0.0 },
        ..TrainConfig::default()
    };
    let h = train_euclidean(&mut net, &data, &cfg).unwrap();
    for w in h.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{h:?}");
    }
    assert!(h[10] < h[0]);
}

#[test]
fn overfits_a_single_block() {
    let phi = gen_gaussian_orthonormal(1089, 0.25, 6).unwrap();
    let data = TrainPairs::measure(&phi, &blocks(1, 3)).unwrap();
    let spec = ReconNetSpec::new(0.25, 1, FirstStage::Fc).unwrap();
    let mut net = ReconNet::build(&spec, FcInit::FromPhi(&phi), &mut Prng::new(2)).unwrap();
    let start = mean_loss(&net, &data).unwrap();
    train_euclidean(&mut net, &data, &adam(300, 1e-3, 1)).unwrap();
    let end = mean_loss(&net, &data).unwrap();
    assert!(end < 0.01 * start, "{start} -> {end}");
}

#[test]
fn full_rate_autoencoder_learns() {
    let train = blocks(16, 4);
    let spec = ReconNetSpec::new(1.0, 1, FirstStage::Fc).unwrap();
    let mut dec = ReconNet::build(&spec, FcInit::default_gaussian(1089), &mut Prng::new(1)).unwrap();
    let mut enc = Encoder::build(1089, &mut Prng::new(2)).unwrap();
    let (phi, h) = train_autoencoder(&mut enc, &mut dec, &train, &adam(150, 1e-3, 4)).unwrap();
    assert_eq!((phi.m(), phi.n()), (1089, 1089));
    let data = TrainPairs::measure(&phi, &train).unwrap();
    let end = mean_loss(&dec, &data).unwrap();
    assert!(end < 0.5 * h[0], "{} -> {end}", h[0]);
}

#[test]
fn training_is_bitwise_reproducible() {
    let phi = gen_gaussian_orthonormal(1089, 0.04, 9).unwrap();
    let data = TrainPairs::measure(&phi, &blocks(10, 5)).unwrap();
    let spec = ReconNetSpec::new(0.04, 1, FirstStage::Fc).unwrap();
    let run = || {
        let mut net = ReconNet::build(&spec, FcInit::default_gaussian(43), &mut Prng::new(3)).unwrap();
        let h = train_euclidean(&mut net, &data, &adam(6, 1e-3, 3)).unwrap();
        (net, h)
    };
    let ((a, ha), (b, hb)) = (run(), run());
    assert_eq!(
        ha.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        hb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    for (x, y) in a.params().values().iter().zip(b.params().values()) {
        assert!(x.bitwise_eq(y));
    }
}
