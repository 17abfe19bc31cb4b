mod common;

use common::{tiny_config, tiny_corpus};
use haed::checkpoint::Checkpoint;
use haed::corpus::build_dataset;
use haed::model::{HaedModel, Variant};
use haed::nn::Precision;
use haed::train::{TrainConfig, Trainer};

fn setup(dir: &std::path::Path) -> (Vec<haed::corpus::Utterance>, haed::corpus::Tokenizer) {
    let layout = build_dataset(&tiny_corpus(), &dir.join("data"), 5).unwrap();
    let train = layout.manifest("general", "train").unwrap().load_utterances().unwrap();
    (train, layout.tokenizer().unwrap())
}

fn train_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        log_every: 0,
        ..TrainConfig::default()
    }
}

fn all_values(m: &HaedModel) -> Vec<(String, Vec<f64>)> {
    m.store().names().map(|n| (n.clone(), m.store().values(n).unwrap())).collect()
}

#[test]
fn resumed_training_matches_uninterrupted() {
    for precision in [Precision::F64, Precision::F32] {
        let dir = tempfile::tempdir().unwrap();
        let (train, tok) = setup(dir.path());
        let cfg = tiny_config(Variant::Haed, precision);

        let mut straight = Trainer::new(train_cfg(6), HaedModel::for_tokenizer(&cfg, &tok, 1).unwrap()).unwrap();
        straight.run(&train).unwrap();

        // same schedule length; stop halfway
        let mut first = Trainer::new(train_cfg(6), HaedModel::for_tokenizer(&cfg, &tok, 1).unwrap()).unwrap();
        for _ in 0..3 {
            first.train_step(&train).unwrap();
        }
        let ck_dir = dir.path().join("ck");
        first.checkpoint().unwrap().save(&ck_dir).unwrap();
        let loaded = Checkpoint::load(&ck_dir).unwrap();
        assert_eq!(loaded.meta.step, 3);
        let mut second = Trainer::resume(train_cfg(6), loaded).unwrap();
        second.run(&train).unwrap();

        assert_eq!(all_values(&straight.model), all_values(&second.model), "{precision:?}");
    }
}

#[test]
fn round_trip_preserves_parameters_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let (train, tok) = setup(dir.path());
    let cfg = tiny_config(Variant::Haed, Precision::F32);
    let mut t = Trainer::new(train_cfg(2), HaedModel::for_tokenizer(&cfg, &tok, 1).unwrap())
        .unwrap()
        .checkpoint_to(&dir.path().join("unused"), Some(tok.clone()));
    t.run(&train).unwrap();
    let ck = t.checkpoint().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ck.save(&a).unwrap();
    let back = Checkpoint::load(&a).unwrap();
    assert_eq!(all_values(&back.model), all_values(&ck.model));
    assert_eq!((back.meta.step, &back.meta.config, back.meta.vocab), (2, &ck.meta.config, ck.meta.vocab));
    assert_eq!(back.optim.as_ref().unwrap().m, ck.optim.as_ref().unwrap().m);
    assert_eq!(back.tokenizer.as_ref().map(|t| t.symbols().to_vec()), Some(tok.symbols().to_vec()));
    back.save(&b).unwrap();
    for entry in walk(&a) {
        let rel = entry.strip_prefix(&a).unwrap();
        assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{}", rel.display());
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn precision_mismatch_and_truncation_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, tok) = setup(dir.path());
    let model = HaedModel::for_tokenizer(&tiny_config(Variant::Haed, Precision::F64), &tok, 1).unwrap();
    let ck = Checkpoint::new(model, 0, 1).unwrap();
    let p = dir.path().join("ck");
    ck.save(&p).unwrap();
    let meta = p.join("metadata.json");
    let text = std::fs::read_to_string(&meta).unwrap().replace("\"f64\"", "\"f32\"");
    std::fs::write(&meta, text).unwrap();
    assert!(Checkpoint::load(&p).is_err());

    ck.save(&p).unwrap();
    let param = walk(&p.join("params")).remove(0);
    let bytes = std::fs::read(&param).unwrap();
    std::fs::write(&param, &bytes[..bytes.len() - 4]).unwrap();
    assert!(Checkpoint::load(&p).is_err());
}
