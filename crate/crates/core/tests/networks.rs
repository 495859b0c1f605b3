mod common;

use common::*;
use dpenet_core::error::CheckpointError;
use dpenet_core::networks::{
    dpenet_forward, init_params, load_checkpoint, load_checkpoint_expecting, save_checkpoint, Architecture,
    DpeNetParams, NetworkConfig,
};
use dpenet_core::ops::{Eager, Ops};
use dpenet_core::{Error, Tensor};

fn forward(p: &DpeNetParams<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut ops = Eager;
    let v = ops.input(x.clone());
    dpenet_forward(&mut ops, &v, p).unwrap()
}

#[test]
fn full_network_matches_composed_oracle() {
    let cfg = NetworkConfig::new(2, 2, 4);
    let p = DpeNetParams::build(&cfg, &mut random_layers(21, 0.2));
    let x = random_tensor(&[1, 3, 14, 14], 0.0, 1.0, 22);
    let (s_c, s) = forward(&p, &x);
    let (oc, os) = dpenet(&x, &p, true);
    assert!(max_abs_diff(&s_c, &oc) < 1e-11);
    assert!(max_abs_diff(&s, &os) < 1e-11);
}

#[test]
fn every_architecture_matches_oracle() {
    for arch in Architecture::ALL {
        let cfg = NetworkConfig { architecture: arch, ..NetworkConfig::new(1, 1, 4) };
        let p = DpeNetParams::build(&cfg, &mut random_layers(23, 0.2));
        let x = random_tensor(&[1, 3, 12, 12], 0.0, 1.0, 24);
        let (s_c, s) = forward(&p, &x);
        let dense = arch != Architecture::Rb;
        let (oc, os) = dpenet(&x, &p, dense);
        assert!(max_abs_diff(&s_c, &oc) < 1e-11, "{arch:?}");
        assert!(max_abs_diff(&s, &os) < 1e-11, "{arch:?}");
        assert_eq!(p.drnet.is_some(), arch.has_detail_stage());
    }
}

#[test]
fn zero_parameters_give_identity_on_both_outputs() {
    for seed in 0..5 {
        let p = DpeNetParams::<f64>::zeros(&NetworkConfig::new(3, 2, 8));
        let x = random_tensor(&[2, 3, 9, 9], 0.0, 1.0, seed);
        let (s_c, s) = forward(&p, &x);
        assert_eq!(s_c, x);
        assert_eq!(s, x);
    }
}

#[test]
fn init_is_seeded_and_sized() {
    let cfg = NetworkConfig::default();
    let a = init_params::<f32>(&cfg, 3);
    assert_eq!(a, init_params::<f32>(&cfg, 3));
    assert_ne!(a, init_params::<f32>(&cfg, 4));
    assert_eq!(a.named_tensors().len(), 2 * (2 + 10 * 6) + 2 * (2 + 3 * 6));
}

#[test]
fn wrong_input_channels_is_reported() {
    let p = DpeNetParams::<f64>::zeros(&NetworkConfig::new(1, 1, 4));
    let mut ops = Eager;
    let x = ops.input(Tensor::zeros(&[1, 4, 5, 5]));
    assert!(matches!(dpenet_forward(&mut ops, &x, &p), Err(Error::Config { .. })));
}

#[test]
fn config_validation_and_toml() {
    assert!(NetworkConfig::new(0, 3, 32).validate().is_err());
    assert!(NetworkConfig::new(10, 3, 0).validate().is_err());
    let cfg = NetworkConfig { architecture: Architecture::DdrbPab, ..NetworkConfig::new(4, 2, 16) };
    assert_eq!(NetworkConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(NetworkConfig::from_toml("lambda_ddrb = 3\nbogus = 1\n").is_err());
}

#[test]
fn checkpoint_round_trip_is_bitwise_in_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetworkConfig::new(2, 1, 8);
    let p32 = init_params::<f32>(&cfg, 5);
    save_checkpoint(&p32, &cfg, &dir.path().join("a.ckpt")).unwrap();
    let (back, back_cfg) = load_checkpoint::<f32>(&dir.path().join("a.ckpt")).unwrap();
    assert_eq!(back_cfg, cfg);
    for ((na, a), (nb, b)) in p32.named_tensors().into_iter().zip(back.named_tensors()) {
        assert_eq!(na, nb);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let p64 = init_params::<f64>(&cfg, 5);
    save_checkpoint(&p64, &cfg, &dir.path().join("b.ckpt")).unwrap();
    assert_eq!(load_checkpoint::<f64>(&dir.path().join("b.ckpt")).unwrap().0, p64);
}

#[test]
fn checkpoint_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    assert!(matches!(
        load_checkpoint::<f32>(&missing),
        Err(Error::Checkpoint(CheckpointError::NotFound(_)))
    ));
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"definitely not a checkpoint").unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&junk),
        Err(Error::Checkpoint(CheckpointError::BadMagic(_)))
    ));
    let cfg = NetworkConfig::new(1, 1, 4);
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&init_params::<f32>(&cfg, 0), &cfg, &path).unwrap();
    assert!(matches!(
        load_checkpoint_expecting::<f32>(&path, &NetworkConfig::new(2, 1, 4)),
        Err(Error::Checkpoint(CheckpointError::ConfigMismatch(_)))
    ));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(_))));
}
