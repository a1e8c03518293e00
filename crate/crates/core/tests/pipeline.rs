use spike_nvpt::backbone::{BackboneCheckpoint, BackboneConfig};
use spike_nvpt::corruption::CorruptionSpec;
use spike_nvpt::pipeline::{
    evaluate, gen_dataset, pretrain_backbone, tune, Dataset, DatasetSpec, Method, PretrainConfig, ShapeKind, Split,
    TuneConfig, TunedModel,
};
use spike_nvpt::Error;

fn tiny_backbone() -> BackboneCheckpoint {
    let source = gen_dataset(&DatasetSpec::new(ShapeKind::Source, 4, 16, 0, Split::Train)).unwrap();
    let cfg = PretrainConfig {
        backbone: BackboneConfig {
            embed_dim: 16,
            layer_count: 2,
            head_count: 2,
            mlp_ratio: 2,
            ..BackboneConfig::default()
        },
        epochs: 1,
        batch_size: 8,
        ..PretrainConfig::default()
    };
    pretrain_backbone(&source, &cfg).unwrap().0
}

#[test]
fn saved_artifacts_reproduce_the_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_backbone();
    let train = gen_dataset(&DatasetSpec::new(ShapeKind::Target, 4, 16, 1, Split::Train)).unwrap();
    let test = gen_dataset(&DatasetSpec::new(ShapeKind::Target, 4, 8, 1, Split::Test)).unwrap();
    let cfg = TuneConfig {
        epochs: 2,
        prompt_len: 2,
        ..TuneConfig::desk(Method::SpikeNvpt)
    };
    let model = tune(&ckpt, &train, &cfg).unwrap();
    let grid = CorruptionSpec::default_grid(4);
    let report = evaluate(&model, &ckpt, &test, &grid).unwrap();

    ckpt.save(dir.path().join("b.ckpt")).unwrap();
    model.save(dir.path().join("m.model")).unwrap();
    test.save(dir.path().join("t.dat")).unwrap();
    let ckpt2 = BackboneCheckpoint::load(dir.path().join("b.ckpt")).unwrap();
    let model2 = TunedModel::load(dir.path().join("m.model")).unwrap();
    let test2 = Dataset::load(dir.path().join("t.dat")).unwrap();
    assert_eq!(ckpt2.weights_fingerprint(), ckpt.weights_fingerprint());
    assert_eq!(test2.content_hash().unwrap(), test.content_hash().unwrap());
    assert_eq!(evaluate(&model2, &ckpt2, &test2, &grid).unwrap(), report);
}

#[test]
fn a_model_refuses_a_different_backbone() {
    let ckpt = tiny_backbone();
    let train = gen_dataset(&DatasetSpec::new(ShapeKind::Target, 4, 8, 1, Split::Train)).unwrap();
    let cfg = TuneConfig {
        epochs: 1,
        prompt_len: 2,
        ..TuneConfig::desk(Method::Vpt)
    };
    let model = tune(&ckpt, &train, &cfg).unwrap();
    let other = BackboneCheckpoint::init_random(ckpt.config, 99).unwrap();
    assert!(matches!(evaluate(&model, &other, &train, &[]), Err(Error::Contract(_))));
}
