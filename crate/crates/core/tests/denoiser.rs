use patchdiff::denoiser::{forward, init_params, DenoiserConfig};
use patchdiff::param::PredictionKind;
use patchdiff::patching::{from_patches, to_patches};
use patchdiff::rng::RngStream;

// A patched network is the unpatched network run on the patch grid.
#[test]
fn patching_is_transparent_to_the_network() {
    let patched = DenoiserConfig {
        channels: 2,
        patch: 2,
        width: 8,
        classes: Some(2),
        kind: PredictionKind::Eps,
        ..Default::default()
    };
    let flat = DenoiserConfig {
        channels: 8,
        patch: 1,
        ..patched.clone()
    };
    assert_eq!(patched.param_shapes(), flat.param_shapes());
    let mut rng = RngStream::named(9, "transparency");
    let params = init_params(&patched, &mut rng).unwrap();
    let z = rng.gaussian(&[3, 8, 6, 2]);
    let ts = [1, 400, 1000];
    let classes = [0, 1, 2];
    let (a, _) = forward(&patched, &params, &z, &ts, Some(&classes)).unwrap();
    let (b, _) = forward(&flat, &params, &to_patches(&z, 2).unwrap(), &ts, Some(&classes)).unwrap();
    let b = from_patches(&b, 2).unwrap();
    assert_eq!(a.shape(), z.shape());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn rejects_indivisible_images() {
    let cfg = DenoiserConfig {
        patch: 4,
        ..Default::default()
    };
    let params = init_params(&cfg, &mut RngStream::new(0, 0)).unwrap();
    let z = RngStream::new(0, 1).gaussian(&[1, 6, 8, 1]);
    assert!(forward(&cfg, &params, &z, &[1], None).is_err());
}
