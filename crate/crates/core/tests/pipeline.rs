use terraseg::data::{load_field, synth_field, write_field};
use terraseg::train::{load_checkpoint, save_checkpoint, Checkpoint, OptimState};
use terraseg::{ModelConfig, Segmenter, Segmenter32, Tensor};

#[test]
fn field_survives_a_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let field = synth_field(40, 52, 3).unwrap();
    write_field(dir.path(), &field).unwrap();
    let back = load_field(dir.path()).unwrap();
    assert_eq!(back.mask, field.mask);
    assert_eq!(back.attributes.shape(), &[15, 40, 52]);
    assert!(back.attributes.max_abs_diff(&field.attributes) < 1e-6);
}

#[test]
fn tiny_model_predicts_probabilities_at_input_resolution() {
    let model = Segmenter32::new(ModelConfig::tiny(), 0).unwrap();
    let x = Tensor::from_fn(&[15, 64, 64], |i| (i % 17) as f32 / 17.0);
    let p = model.predict(&x).unwrap();
    assert_eq!(p.shape(), &[1, 64, 64]);
    assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn checkpoint_restores_an_identical_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sseg");
    let a = Segmenter32::new(ModelConfig::tiny(), 1).unwrap();
    save_checkpoint(&path, &a, &OptimState::for_store(a.params()), 7).unwrap();

    let mut b = Segmenter32::new(ModelConfig::tiny(), 2).unwrap();
    let mut optim = OptimState::for_store(b.params());
    assert_eq!(load_checkpoint(&path, &mut b, &mut optim).unwrap(), 7);
    let x = Tensor::from_fn(&[15, 32, 32], |i| (i % 5) as f32 / 5.0);
    assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let a = Segmenter32::new(ModelConfig::tiny(), 1).unwrap();
    let mut bytes = terraseg::train::snapshot(&a, &OptimState::for_store(a.params()), 0).encode().unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(Checkpoint::decode(&bytes).is_err());
}
