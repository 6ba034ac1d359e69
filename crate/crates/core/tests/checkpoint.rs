use dna_core::checkpoint::{load, read_manifest, save, BLOB, FORMAT, MANIFEST};
use dna_core::model::{Batch, DnaConfig, DnaModel, PoolSpec, Task};
use dna_core::DnaError;

fn config() -> DnaConfig {
    DnaConfig {
        task: Task::CausalLm { vocab: 12, context: 6 },
        d_embed: 8,
        d_mlp: 16,
        n_head: 2,
        n_backbone: 1,
        s_max: 3,
        k: 2,
        pool: PoolSpec::blocks(3, 2),
        skip: None,
        stochastic_routing: false,
    }
}

#[test]
fn round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = DnaModel::<f64>::new(config(), 11).unwrap();
    save(&model, dir.path()).unwrap();
    let back = load::<f64>(dir.path()).unwrap();
    assert!(back.params == model.params);
    assert_eq!(back.config, model.config);
    let batch = Batch::Tokens {
        ids: (0..12).map(|i| i % 12).collect(),
        targets: (1..13).map(|i| i % 12).collect(),
        batch: 2,
    };
    let (a, ta) = model.forward(&batch).unwrap();
    let (b, tb) = back.forward(&batch).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(ta, tb);

    let m = read_manifest(dir.path()).unwrap();
    assert_eq!(m.format, FORMAT);
    assert_eq!(m.blob_bytes, 8 * model.params.iter().map(|(_, p)| p.tensor.data().len()).sum::<usize>());
    assert!(m.tensors.windows(2).all(|w| w[0].offset < w[1].offset));
}

#[test]
fn precision_converts_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let model = DnaModel::<f32>::new(config(), 2).unwrap();
    save(&model, dir.path()).unwrap();
    let wide = load::<f64>(dir.path()).unwrap();
    for ((_, p), (_, q)) in model.params.iter().zip(wide.params.iter()) {
        assert!(p.tensor.data().iter().zip(q.tensor.data()).all(|(&a, &b)| a as f64 == b));
    }
}

#[test]
fn corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    save(&DnaModel::<f32>::new(config(), 1).unwrap(), dir.path()).unwrap();
    let blob = dir.path().join(BLOB);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[17] ^= 1;
    std::fs::write(&blob, &bytes).unwrap();
    assert!(matches!(load::<f32>(dir.path()), Err(DnaError::Checksum { .. })));

    bytes[17] ^= 1;
    std::fs::write(&blob, &bytes).unwrap();
    assert!(load::<f32>(dir.path()).is_ok());

    let manifest = dir.path().join(MANIFEST);
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replace("\"n_backbone\": 1", "\"n_backbone\": 2")).unwrap();
    assert!(matches!(load::<f32>(dir.path()), Err(DnaError::Checkpoint { .. })));
    std::fs::write(&manifest, "{").unwrap();
    assert!(matches!(load::<f32>(dir.path()), Err(DnaError::Checkpoint { .. })));
}
