use commonkv::budget::{compress_after_prefill, estimate_fisher, MergeStrategy, ScoreVariant};
use commonkv::container::{TensorFile, MAGIC};
use commonkv::corpus::Corpus;
use commonkv::factorization::{transform_model, FactorizedModel};
use commonkv::latent_cache::LatentSession;
use commonkv::model::{forward_baseline, gen_toy_model, KvCache, Mode, ModelConfig, ModelWeights};
use commonkv::Matrix;

#[test]
fn container_bytes_follow_the_documented_layout() {
    let mut f = TensorFile::new();
    f.set_meta("kind", "demo");
    f.insert("a", Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap()).unwrap();
    f.insert("b", Matrix::from_vec(1, 1, vec![0.5]).unwrap()).unwrap();
    let bytes = f.to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
    assert_eq!(header["metadata"]["kind"], "demo");
    assert_eq!(header["tensors"][1]["offset"], 8);
    assert_eq!(header["tensors"][1]["shape"], serde_json::json!([1, 1]));
    let payload = &bytes[16 + n..];
    assert_eq!(payload.len(), 12);
    let floats: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(floats, vec![1.0, -2.0, 0.5]);
}

#[test]
fn saved_models_reproduce_logits() {
    let dir = tempfile::tempdir().unwrap();
    let weights = gen_toy_model(&ModelConfig::toy(), 11).unwrap();
    weights.save(dir.path().join("m.ckv"), Some(11)).unwrap();
    let loaded = ModelWeights::load(dir.path().join("m.ckv")).unwrap();
    let model = transform_model(&loaded, 4, 0.7).unwrap();
    model.save(dir.path().join("f.ckv")).unwrap();
    let reloaded = FactorizedModel::load(dir.path().join("f.ckv")).unwrap();
    assert_eq!(model, reloaded);

    let tokens = b"shared factors, shared cache";
    let mut cache = KvCache::new(&weights.config);
    let a = forward_baseline(&weights, tokens, Mode::Prefill, &mut cache).unwrap();
    let mut cache = KvCache::new(&loaded.config);
    let b = forward_baseline(&loaded, tokens, Mode::Prefill, &mut cache).unwrap();
    assert_eq!(a, b);
    let x = LatentSession::new(&model).prefill(tokens).unwrap();
    let y = LatentSession::new(&reloaded).prefill(tokens).unwrap();
    assert_eq!(x, y);
}

#[test]
fn compressed_session_matches_its_accounting() {
    let weights = gen_toy_model(&ModelConfig::toy(), 12).unwrap();
    let model = transform_model(&weights, 4, 0.7).unwrap();
    let fisher = estimate_fisher(&weights, &Corpus::markov(3, 4, 24)).unwrap();
    let tokens = &Corpus::markov(4, 1, 40).sequences[0];
    for strategy in MergeStrategy::ALL {
        let mut session = LatentSession::new(&model);
        session.prefill(&tokens[..32]).unwrap();
        let (plan, warnings) =
            compress_after_prefill(session.store_mut(), 32, 0.5, strategy, ScoreVariant::Full, Some(&fisher), 8).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(plan.merged, session.store().merged_groups());
        for &t in &tokens[32..] {
            let logits = session.decode(t).unwrap();
            assert!(logits.is_finite());
        }
        assert_eq!(session.store().audit().total(), plan.predicted_elements);
        assert!(plan.predicted_ratio >= 0.5);
    }
}
