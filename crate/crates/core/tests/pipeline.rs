use molkv_core::expertstore::{self, ExpertSource, StoreDType, StoreReader};
use molkv_core::runtime::{Decoder, Sampler};
use molkv_core::train::{synthetic_corpus, Corpus, TrainConfig, Trainer};
use molkv_core::{InferenceModel, ModelConfig, ModelKind};

fn trained(kind: ModelKind) -> Trainer {
    let corpus = Corpus::from_bytes(&synthetic_corpus(40_000, 2), 0.1).unwrap();
    let cfg = TrainConfig { seq_length: 24, batch_size: 2, grad_accum: 1, steps: 5, warmup_steps: 1, lr: 1e-2, ..TrainConfig::default() };
    let mut t = Trainer::new(ModelConfig::tiny(kind), cfg).unwrap();
    t.run(&corpus, 5, |_, _| Ok(())).unwrap();
    t
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn exported_store_reproduces_training_logits() {
    let tokens: Vec<usize> = b"The cat sat on the mat, twice over.".iter().map(|&b| b as usize).collect();
    for kind in [ModelKind::Mole, ModelKind::GatedMole, ModelKind::Molkv] {
        let t = trained(kind);
        let dir = tempfile::tempdir().unwrap();
        let tables = expertstore::reparameterize(&t.model).unwrap();
        let inf = InferenceModel::from_model(&t.model);
        let reference = t.model.logits(&tokens).unwrap();
        let reference: Vec<Vec<f64>> = reference.data().chunks(256).map(<[f64]>::to_vec).collect();

        let mut worst = Vec::new();
        for (dtype, tol) in [(StoreDType::Fp64, 1e-10), (StoreDType::Fp32, 1e-4), (StoreDType::Fp16, 5e-2)] {
            let path = dir.path().join(format!("{dtype:?}.mlkv"));
            let header = expertstore::write_store(&tables, &path, dtype).unwrap();
            let store = StoreReader::open(&path).unwrap();
            assert_eq!(store.header(), &header);
            let got = Decoder::new(&inf, Some(&store)).unwrap().logits_for(&tokens).unwrap();
            let diff = max_diff(&got, &reference);
            assert!(diff <= tol, "{kind:?} {dtype:?}: {diff}");
            worst.push(diff);
        }
        assert!(worst[0] <= worst[1] && worst[1] <= worst[2], "{kind:?}: {worst:?}");
    }
}

#[test]
fn decoding_reads_one_record_per_expert_layer_per_token() {
    let t = trained(ModelKind::Molkv);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.mlkv");
    let tables = expertstore::reparameterize(&t.model).unwrap();
    let header = expertstore::write_store(&tables, &path, StoreDType::Fp32).unwrap();
    let store = StoreReader::open(&path).unwrap();
    let inf = InferenceModel::from_model(&t.model);
    let dec = Decoder::new(&inf, Some(&store)).unwrap();
    let g = dec.generate(&mut dec.new_state(), &[84, 104, 101, 32], 12, &Sampler::Greedy).unwrap();
    assert_eq!(g.tokens.len(), 12);
    assert_eq!(g.costs.len(), 16 * 2);
    let fetched = 16 * 2;
    assert_eq!(store.reads(), fetched as u64);
    assert_eq!(store.bytes_read(), (fetched * header.record_bytes()) as u64);
    assert_eq!(g.total.bytes_loaded, (fetched * header.record_bytes()) as u64);
}

#[test]
fn sampling_is_reproducible_per_seed() {
    let inf = InferenceModel::random(ModelConfig::tiny(ModelKind::Molkv), 5, 0.3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.mlkv");
    let model = molkv_core::Model::init(ModelConfig::tiny(ModelKind::Molkv), 5, 0.3).unwrap();
    expertstore::write_store(&expertstore::reparameterize(&model).unwrap(), &path, StoreDType::Fp32).unwrap();
    let store = StoreReader::open(&path).unwrap();
    let dec = Decoder::new(&inf, Some(&store)).unwrap();
    let run = |seed| {
        let s = Sampler::Temperature { temperature: 1.0, seed };
        dec.generate(&mut dec.new_state(), &[1, 2, 3], 20, &s).unwrap().tokens
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}
