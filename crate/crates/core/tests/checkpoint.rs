use drq_core::checkpoint::{decode, encode, load_checkpoint, store_checkpoint, CheckpointMode};
use drq_core::data::gaussian_blobs;
use drq_core::numerics::{mlp_specs, Network, ParamId, Slot};
use drq_core::quantizer::{double_round_low, quantize_weight_high, BitWidthSet};
use drq_core::trainer::{evaluate_network, MultiPrecTrainer, TrainConfig, TrainMode};
use drq_core::Error;

fn set() -> BitWidthSet {
    BitWidthSet::new(vec![8, 6, 4, 2]).unwrap()
}

fn trained(shared: bool) -> (Network, drq_core::data::Split) {
    let split = gaussian_blobs(4, 8, 600, 1.0, 1.0, 3).unwrap();
    let net = Network::new(&[8], &mlp_specs(8, &[16, 16, 16], 4), 1).unwrap();
    let mut cfg = TrainConfig::desk(set(), TrainMode::Conventional);
    cfg.epochs = 2;
    cfg.shared_weight_scale = shared;
    let mut t = MultiPrecTrainer::new(&net, &split.train.head(256).unwrap().x, cfg).unwrap();
    t.fit(&split).unwrap();
    (t.into_network(), split)
}

fn low_codes(net: &Network, li: usize, l: u8) -> Vec<i32> {
    let lin = net.linear(li).unwrap();
    let qp = lin.quant.as_ref().unwrap();
    let wh = quantize_weight_high(&lin.weight, qp).unwrap();
    double_round_low(&wh, l).unwrap().values
}

#[test]
fn shared_round_trip_is_byte_exact() {
    let (net, _) = trained(true);
    let bytes = encode(&net).unwrap();
    assert_eq!(&bytes[..4], b"DRQ1");
    assert_eq!(bytes[4], CheckpointMode::Shared as u8);
    let back = decode(&bytes).unwrap();
    assert_eq!(encode(&back).unwrap(), bytes);
}

#[test]
fn unshared_round_trip_restores_identical_layers() {
    let (net, _) = trained(false);
    let bytes = encode(&net).unwrap();
    assert_eq!(bytes[4], CheckpointMode::Unshared as u8);
    let back = decode(&bytes).unwrap();
    assert_eq!(back.layers(), net.layers());
    assert_eq!(encode(&back).unwrap(), bytes);
}

#[test]
fn shared_reload_preserves_low_precision_codes_and_accuracy() {
    let (net, split) = trained(true);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.drq");
    store_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for li in net.quantized_layers() {
        for l in [8u8, 6, 4, 2] {
            assert_eq!(low_codes(&back, li, l), low_codes(&net, li, l), "layer {li} bits {l}");
        }
    }
    for b in set().iter() {
        let before = evaluate_network(&net, &set(), b, &split.eval).unwrap();
        let after = evaluate_network(&back, &set(), b, &split.eval).unwrap();
        assert_eq!(before, after, "bits {b}");
    }
}

#[test]
fn shared_weights_take_one_byte_each() {
    let (shared, _) = trained(true);
    let (unshared, _) = trained(false);
    let a = encode(&shared).unwrap().len();
    let b = encode(&unshared).unwrap().len();
    let q_weights: usize = shared
        .quantized_layers()
        .iter()
        .map(|&li| shared.param(&ParamId::new(li, Slot::Weight)).unwrap().len())
        .sum();
    assert_eq!(b - a, 3 * q_weights + unshared_scale_bytes(&unshared));
}

/// Sharing flag, scale count and one (bit, scale) pair per precision.
fn unshared_scale_bytes(net: &Network) -> usize {
    net.quantized_layers()
        .iter()
        .map(|&li| {
            let qp = net.linear(li).unwrap().quant.as_ref().unwrap();
            2 + 5 * qp.unshared_scales.len()
        })
        .sum()
}

#[test]
fn corrupt_files_report_errors() {
    let (net, _) = trained(true);
    let bytes = encode(&net).unwrap();
    let cut = bytes.len() / 2;
    match decode(&bytes[..cut]) {
        Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut),
        other => panic!("expected a truncation error, got {other:?}"),
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode(&extra), Err(Error::Checkpoint { .. })));
    let mut magic = bytes;
    magic[3] = b'9';
    assert!(matches!(decode(&magic), Err(Error::Checkpoint { offset: 0, .. })));
}
