use attrib_core::classifiers::{self, checkpoint, Architecture, Precision, SmallConvNetConfig, TrainConfig};
use attrib_core::dataset::{make_split, ClassKey, SplitSpec};
use attrib_core::synthgen::{self, CorpusSpec, GeneratorSignature};
use attrib_core::transforms::TransformSpec;

fn two_palettes() -> Vec<GeneratorSignature> {
    let base = synthgen::palette_only_signatures(2).unwrap();
    let warm = vec![[0.85, 0.35, 0.2], [0.95, 0.6, 0.3], [0.7, 0.2, 0.1]];
    let cold = vec![[0.15, 0.35, 0.8], [0.3, 0.6, 0.9], [0.1, 0.2, 0.6]];
    vec![
        GeneratorSignature { palette: warm, ..base[0].clone() },
        GeneratorSignature { palette: cold, ..base[1].clone() },
    ]
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn gross_palette_classes_are_learned() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        domains: 2,
        languages: 1,
        per_cell: 125,
        size: 32,
        seed: 1,
    };
    let rows = synthgen::generate_corpus(&two_palettes(), &spec, dir.path()).unwrap();
    let split = make_split(
        &rows,
        &SplitSpec {
            train_per_class: 200,
            test_per_class: 50,
            class_key: ClassKey::Model,
            filter: Default::default(),
            seed: 2,
        },
    )
    .unwrap();
    let arch = Architecture::ConvNet(SmallConvNetConfig::with_side(32));
    let tc = small_train(10);
    let none = TransformSpec::none();
    let t0 = std::time::Instant::now();
    let ckpt = classifiers::train(dir.path(), &split.train, ClassKey::Model, &none, &tc, &arch).unwrap();
    eprintln!("train {:?}", t0.elapsed());
    let labels = classifiers::label_indices(&split.test, ClassKey::Model, &ckpt.labels).unwrap();
    let preds = classifiers::predict(&ckpt, dir.path(), &split.test, &none).unwrap();
    let acc = preds.accuracy(&labels);
    assert!(acc >= 0.95, "accuracy {acc}");
    for row in &preds.posteriors {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    // learning-rate trace: zero at the first step, full lr at the end of warmup
    let steps = 400usize.div_ceil(32);
    assert_eq!(ckpt.meta.lr_trace.len(), 10 * steps);
    assert_eq!(ckpt.meta.lr_trace[0], 0.0);
    assert!((ckpt.meta.lr_trace[steps] - 5e-4).abs() < 1e-12);
    assert_eq!(ckpt.meta.lr_trace[2 * steps], 1e-3);
    assert!((ckpt.meta.lr_trace.last().unwrap() - 1e-5).abs() < 1e-12);

    let bytes = checkpoint::to_bytes(&ckpt).unwrap();
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);

    // bit-identical retraining, and independence from the worker count
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let again = pool.install(|| classifiers::train(dir.path(), &split.train, ClassKey::Model, &none, &small_train(2), &arch).unwrap());
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let once = single.install(|| classifiers::train(dir.path(), &split.train, ClassKey::Model, &none, &small_train(2), &arch).unwrap());
    assert_eq!(checkpoint::to_bytes(&again).unwrap(), checkpoint::to_bytes(&once).unwrap());

    // the histogram baseline keeps working once spatial structure is destroyed
    let shuffle = TransformSpec::pixel_shuffle();
    let hist = classifiers::train(dir.path(), &split.train, ClassKey::Model, &shuffle, &tc, &Architecture::hist()).unwrap();
    let preds = classifiers::predict(&hist, dir.path(), &split.test, &shuffle).unwrap();
    assert!(preds.accuracy(&labels) >= 0.9);
    for w in hist.meta.loss_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-9);
    }
}

#[test]
fn single_class_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        domains: 1,
        languages: 1,
        per_cell: 4,
        size: 32,
        seed: 1,
    };
    let rows = synthgen::generate_corpus(&two_palettes()[..1], &spec, dir.path()).unwrap();
    let arch = Architecture::ConvNet(SmallConvNetConfig::with_side(32));
    let err = classifiers::train(dir.path(), &rows, ClassKey::Model, &TransformSpec::none(), &small_train(1), &arch);
    assert!(matches!(err, Err(attrib_core::error::Error::SingleClass(1))));
}

#[test]
fn double_precision_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        domains: 1,
        languages: 1,
        per_cell: 8,
        size: 32,
        seed: 4,
    };
    let rows = synthgen::generate_corpus(&two_palettes(), &spec, dir.path()).unwrap();
    let arch = Architecture::ConvNet(SmallConvNetConfig {
        input_side: 16,
        stage_channels: vec![4, 8],
    });
    let tc = TrainConfig {
        precision: Precision::Double,
        batch_size: 8,
        allow_any_batch_size: true,
        ..small_train(1)
    };
    let ckpt = classifiers::train(dir.path(), &rows, ClassKey::Model, &TransformSpec::none(), &tc, &arch).unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&ckpt, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(checkpoint::from_bytes(&bytes).is_err());
}
