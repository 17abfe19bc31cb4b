mod common;

use common::{random_features, tiny_model};
use haed::decoding::{DecodeConfig, Decoder, FusionConfig, FusionLms};
use haed::lm_decoder::LanguageModel;
use haed::model::Variant;
use haed::ngram::NGramLm;

fn cfg(beam: usize) -> DecodeConfig {
    DecodeConfig {
        beam,
        ..DecodeConfig::default()
    }
}

#[test]
fn hypotheses_are_well_formed() {
    for variant in [Variant::Haed, Variant::NoDecoder, Variant::Aed] {
        let model = tiny_model(variant, 1);
        let eos = model.vocab().eos;
        let dec = Decoder::new(&model, cfg(3)).unwrap();
        for i in 0..4 {
            let f = random_features(&format!("u{i}"), 10 + 3 * i, 4, i as u64);
            let res = dec.beam_search(&f).unwrap();
            for h in &res.nbest {
                assert!(h.ended);
                assert!(h.tokens.iter().all(|&t| t < eos), "{:?}", h.tokens);
                assert!(h.tokens.len() <= res.frames);
                assert!((h.total(dec.beta(), &dec.cfg.fusion) - h.score).abs() < 1e-9);
            }
            let norm: Vec<f64> = res.nbest.iter().map(|h| h.normalized(true)).collect();
            assert!(norm.windows(2).all(|w| w[0] >= w[1]));
            assert!(res.shared_frame_fraction.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}

#[test]
fn beam_one_is_greedy() {
    let model = tiny_model(Variant::Haed, 2);
    let dec = Decoder::new(&model, cfg(1)).unwrap();
    for i in 0..5 {
        let f = random_features(&format!("g{i}"), 12, 4, 10 + i);
        assert_eq!(dec.beam_search(&f).unwrap().tokens(), dec.greedy_search(&f).unwrap().tokens());
    }
}

#[test]
fn zero_weight_fusion_changes_nothing() {
    let model = tiny_model(Variant::Haed, 3);
    let lm = NGramLm::train(&[vec![0, 1, 2], vec![2, 2, 3]], 2, 5, 4, 6, 0.1).unwrap();
    let plain = Decoder::new(&model, cfg(3)).unwrap();
    let fused = Decoder::new(
        &model,
        DecodeConfig {
            fusion: FusionConfig::density_ratio(0.0, 0.0),
            ..cfg(3)
        },
    )
    .unwrap()
    .with_lms(FusionLms {
        target: Some(&lm as &dyn LanguageModel),
        source: Some(&lm as &dyn LanguageModel),
    })
    .unwrap();
    for i in 0..4 {
        let f = random_features(&format!("z{i}"), 11, 4, 20 + i);
        let a = plain.beam_search(&f).unwrap();
        let b = fused.beam_search(&f).unwrap();
        assert_eq!(a.tokens(), b.tokens());
        assert_eq!(a.best().map(|h| h.score), b.best().map(|h| h.score));
    }
}

#[test]
fn fusion_needs_its_lms() {
    let model = tiny_model(Variant::Haed, 3);
    let d = Decoder::new(&model, DecodeConfig { fusion: FusionConfig::shallow(0.1), ..cfg(2) }).unwrap();
    assert!(d.with_lms(FusionLms::default()).is_err());
}

#[test]
fn swapping_the_decoder_lm() {
    let model = tiny_model(Variant::Haed, 4);
    let own = model.lm().unwrap().clone();
    let base = Decoder::new(&model, cfg(3)).unwrap();
    let same = Decoder::new(&model, cfg(3)).unwrap().with_lm_override(&own).unwrap();
    let ngram = NGramLm::train(&[vec![3, 3, 3, 3]], 2, 5, 4, 6, 0.1).unwrap();
    let other = Decoder::new(&model, cfg(3)).unwrap().with_lm_override(&ngram).unwrap();
    let mut differs = false;
    for i in 0..6 {
        let f = random_features(&format!("s{i}"), 14, 4, 30 + i);
        let a = base.beam_search(&f).unwrap();
        assert_eq!(a.nbest, same.beam_search(&f).unwrap().nbest);
        differs |= a.nbest != other.beam_search(&f).unwrap().nbest;
    }
    assert!(differs, "an unrelated LM never changed the search");

    let wrong = NGramLm::train(&[vec![0]], 2, 7, 4, 6, 0.1).unwrap();
    assert!(Decoder::new(&model, cfg(3)).unwrap().with_lm_override(&wrong).is_err());
    let aed = tiny_model(Variant::Aed, 4);
    assert!(Decoder::new(&aed, cfg(3)).unwrap().with_lm_override(&ngram).is_err());
}

#[test]
fn unit_threshold_keeps_every_frame() {
    let model = tiny_model(Variant::Haed, 5);
    let all = Decoder::new(&model, DecodeConfig { prune_threshold: None, ..cfg(2) }).unwrap();
    let unit = Decoder::new(&model, DecodeConfig { prune_threshold: Some(1.0), ..cfg(2) }).unwrap();
    for i in 0..3 {
        let f = random_features(&format!("p{i}"), 12, 4, 40 + i);
        let a = all.beam_search(&f).unwrap();
        assert_eq!(a.kept_frames, a.frames);
        assert_eq!(a.nbest, unit.beam_search(&f).unwrap().nbest);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let model = tiny_model(Variant::Haed, 6);
    assert!(Decoder::new(&model, cfg(0)).is_err());
    assert!(Decoder::new(&model, DecodeConfig { beta: Some(1.5), ..cfg(2) }).is_err());
    assert!(Decoder::new(&model, DecodeConfig { fusion: FusionConfig::shallow(-1.0), ..cfg(2) }).is_err());
}
