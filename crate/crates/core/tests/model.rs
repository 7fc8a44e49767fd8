use promptseg_core::model::{checkpoint, decode, encode, forward, DecoderKind, ModelConfig, ModelParams, PromptInjection};
use promptseg_core::{Error, Tensor};

fn image(h: usize, w: usize, seed: usize) -> Tensor<f32> {
    let n = 3 * h * w;
    Tensor::from_vec(&[3, h, w], (0..n).map(|i| ((i * 7919 + seed * 104_729) % 1013) as f32 / 1013.0).collect())
}

fn model(seed: u64) -> ModelParams<f32> {
    ModelParams::init(&ModelConfig::default(), seed).unwrap()
}

fn open_gates(m: &mut ModelParams<f32>, value: f32) {
    let ids: Vec<_> = m.params.iter().filter(|(_, n, _)| n.ends_with(".alpha")).map(|(id, _, _)| id).collect();
    for id in ids {
        m.params.get_mut(id).data_mut()[0] = value;
    }
}

#[test]
fn feature_pyramid_shapes() {
    let m = model(0);
    let f = encode(&m, &image(224, 224, 0)).unwrap();
    let spatial: Vec<_> = f.dims().iter().map(|d| (d.0, d.1)).collect();
    assert_eq!(spatial, [(56, 56), (28, 28), (14, 14), (7, 7)]);
    assert_eq!(f.dims().map(|d| d.2), [32, 64, 128, 256]);
    let f = encode(&m, &image(64, 96, 0)).unwrap();
    let spatial: Vec<_> = f.dims().iter().map(|d| (d.0, d.1)).collect();
    assert_eq!(spatial, [(16, 24), (8, 12), (4, 6), (2, 3)]);
    assert!(f.all_finite());
}

#[test]
fn sizes_not_divisible_by_32_are_rejected() {
    let m = model(0);
    assert!(matches!(encode(&m, &image(100, 100, 0)), Err(Error::Shape(_) | Error::Config(_))));
    let gray = Tensor::from_vec(&[1, 64, 64], vec![0.0f32; 64 * 64]);
    assert!(encode(&m, &gray).is_err());
}

#[test]
fn forward_gives_probabilities_at_input_resolution() {
    let m = model(1);
    for which in [DecoderKind::Sd, DecoderKind::Pd] {
        let p = forward(&m, &image(64, 64, 1), "segment the bright ellipse", which, true).unwrap();
        assert_eq!(p.shape(), &[64, 64]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn the_two_decoders_are_independent() {
    let m = model(2);
    let img = image(64, 64, 2);
    let sd = forward(&m, &img, "segment the dark blob", DecoderKind::Sd, true).unwrap();
    let pd = forward(&m, &img, "segment the dark blob", DecoderKind::Pd, true).unwrap();
    assert!(sd.max_abs_diff(&pd) > 1e-4);
}

#[test]
fn checkpoint_reload_reproduces_forward_bit_exactly() {
    let mut m = model(3);
    open_gates(&mut m, 0.3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &m, &serde_json::json!({"epoch": 1})).unwrap();
    let (back, meta) = checkpoint::load(&path).unwrap();
    assert_eq!(meta["epoch"], 1);
    let img = image(64, 64, 3);
    for which in [DecoderKind::Sd, DecoderKind::Pd] {
        let a = forward(&m, &img, "segment the bright ellipse", which, true).unwrap();
        let b = forward(&back, &img, "segment the bright ellipse", which, true).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn prompt_changes_output_only_through_open_gates() {
    let mut m = model(4);
    let img = image(64, 64, 4);
    let feats = encode(&m, &img).unwrap();
    let (a, b) = (m.encode_prompt("segment the bright ellipse").unwrap(), m.encode_prompt("segment the dark blob").unwrap());
    let closed_a = decode(&m, &feats, &a, DecoderKind::Sd, PromptInjection::Full).unwrap();
    let closed_b = decode(&m, &feats, &b, DecoderKind::Sd, PromptInjection::Full).unwrap();
    assert_eq!(closed_a, closed_b);
    open_gates(&mut m, 0.5);
    let open_a = decode(&m, &feats, &a, DecoderKind::Sd, PromptInjection::Full).unwrap();
    let open_b = decode(&m, &feats, &b, DecoderKind::Sd, PromptInjection::Full).unwrap();
    assert!(open_a.max_abs_diff(&open_b) > 1e-4);
    let off_a = decode(&m, &feats, &a, DecoderKind::Sd, PromptInjection::Off).unwrap();
    let off_b = decode(&m, &feats, &b, DecoderKind::Sd, PromptInjection::Off).unwrap();
    assert_eq!(off_a, off_b);
}

#[test]
fn same_seed_same_parameters() {
    let (a, b, c) = (model(5), model(5), model(6));
    let eq = |x: &ModelParams<f32>, y: &ModelParams<f32>| x.params.iter().zip(y.params.iter()).all(|(p, q)| p.2 == q.2);
    assert!(eq(&a, &b));
    assert!(!eq(&a, &c));
}
