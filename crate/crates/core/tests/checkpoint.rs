use std::fs;

use tms_autograd::Tensor;
use tmsnet_core::checkpoint::{load_checkpoint, load_checkpoint_as, read_manifest, save_checkpoint, MANIFEST_FILE, PAYLOAD_FILE};
use tmsnet_core::model::{ModelConfig, TmsNet, Variant};
use tmsnet_core::ViewAxis;

fn net(variant: Variant) -> TmsNet<f32> {
    TmsNet::new(ModelConfig {
        channels: 2,
        variant,
        standard_view: ViewAxis::Coronal,
        seed: 9,
    })
    .unwrap()
}

fn values(n: &TmsNet<f32>) -> Vec<(String, Vec<f32>)> {
    n.store().iter().map(|(_, p)| (p.name.clone(), p.value.data().to_vec())).collect()
}

#[test]
fn round_trip_preserves_every_parameter_and_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut original = net(Variant::Independent3);
    // move away from the seeded initialization so loading cannot just re-init
    for id in original.store().ids().collect::<Vec<_>>() {
        let p = original.store_mut().get_mut(id);
        p.value = p.value.map(|v| v * 1.5 + 0.01);
    }
    save_checkpoint(&original, dir.path()).unwrap();
    let loaded: TmsNet<f32> = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.config(), original.config());
    assert_eq!(values(&loaded), values(&original));
    let x = Tensor::full(vec![1, 1, 16, 32], 0.3f32);
    assert_eq!(
        loaded.predict(ViewAxis::Sagittal, x.clone()).unwrap(),
        original.predict(ViewAxis::Sagittal, x).unwrap()
    );
    let m = read_manifest(dir.path()).unwrap();
    assert_eq!(m.precision, "f32");
    assert_eq!(m.params.len(), original.store().len());
}

#[test]
fn variant_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&net(Variant::Shared), dir.path()).unwrap();
    assert!(load_checkpoint_as::<f32>(dir.path(), Variant::Independent3).is_err());
    assert!(load_checkpoint_as::<f32>(dir.path(), Variant::Shared).is_ok());
    assert!(load_checkpoint::<f64>(dir.path()).is_err());
}

#[test]
fn tampered_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&net(Variant::Shared), dir.path()).unwrap();
    let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let payload = fs::read(dir.path().join(PAYLOAD_FILE)).unwrap();

    fs::write(dir.path().join(PAYLOAD_FILE), &payload[..payload.len() - 4]).unwrap();
    assert!(load_checkpoint::<f32>(dir.path()).is_err());
    let mut longer = payload.clone();
    longer.extend([0u8; 4]);
    fs::write(dir.path().join(PAYLOAD_FILE), &longer).unwrap();
    assert!(load_checkpoint::<f32>(dir.path()).is_err());
    fs::write(dir.path().join(PAYLOAD_FILE), &payload).unwrap();

    let tampered = [
        manifest.replace("tmsnet-checkpoint/1", "tmsnet-checkpoint/0"),
        manifest.replacen("\"variant\": \"shared\"", "\"variant\": \"independent3\"", 1),
        manifest.replacen("encoder/r0/conv0/weight", "encoder/r9/conv0/weight", 1),
        manifest.replacen("\"channels\": 2", "\"channels\": 3", 1),
        "{ not json".to_string(),
    ];
    for text in tampered {
        assert_ne!(text, manifest);
        fs::write(dir.path().join(MANIFEST_FILE), &text).unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err(), "accepted {}", &text[..80.min(text.len())]);
    }
    fs::write(dir.path().join(MANIFEST_FILE), &manifest).unwrap();
    assert!(load_checkpoint::<f32>(dir.path()).is_ok());
    assert!(load_checkpoint::<f32>(&dir.path().join("missing")).is_err());
}
