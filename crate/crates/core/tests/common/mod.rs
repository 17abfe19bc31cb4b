//! Oracles and fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use haed::acoustic::AcousticConfig;
use haed::corpus::{FeatureSequence, Tokenizer};
use haed::ctc::CtcPosteriors;
use haed::encoder::EncoderConfig;
use haed::lm_decoder::LmConfig;
use haed::model::{HaedModel, ModelConfig, Variant};
use haed::nn::{ParamStore, Precision};
use haed::util::rng_for;

/// Brute-force CTC quantities from every length-T path.
pub struct Enumerated {
    pub prob: f64,
    /// `state[t][s]`: posterior mass of lattice state `s` (blank-interleaved) at frame `t`.
    pub state: Vec<Vec<f64>>,
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if k != blank && Some(k) != prev {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Lattice state of every frame on a path that collapses to the target.
fn states(path: &[usize], blank: usize) -> Vec<usize> {
    let mut labels_seen = 0usize;
    let mut prev = None;
    path.iter()
        .map(|&k| {
            if k == blank {
                prev = Some(k);
                2 * labels_seen
            } else {
                if Some(k) != prev {
                    labels_seen += 1;
                }
                prev = Some(k);
                2 * labels_seen - 1
            }
        })
        .collect()
}

pub fn enumerate_ctc(probs: &[Vec<f64>], blank: usize, labels: &[u32]) -> Enumerated {
    let t_len = probs.len();
    let classes = probs[0].len();
    let target: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let s_len = 2 * labels.len() + 1;
    let mut state = vec![vec![0.0; s_len]; t_len];
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    let count = classes.pow(t_len as u32);
    for code in 0..count {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % classes;
            c /= classes;
        }
        if collapse(&path, blank) != target {
            continue;
        }
        let p: f64 = path.iter().enumerate().map(|(t, &k)| probs[t][k]).product();
        total += p;
        for (t, s) in states(&path, blank).into_iter().enumerate() {
            state[t][s] += p;
        }
    }
    if total > 0.0 {
        for row in &mut state {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    Enumerated { prob: total, state }
}

/// Random softmax rows with a random concentration, blank last.
pub fn random_instance(rng: &mut ChaCha8Rng, max_t: usize, max_u: usize, max_v: usize) -> (Vec<Vec<f64>>, Vec<u32>) {
    let v = rng.gen_range(1..=max_v);
    let classes = v + 1;
    let t = rng.gen_range(1..=max_t);
    let u = rng.gen_range(1..=max_u);
    let scale = rng.gen_range(0.5..4.0);
    let probs = (0..t)
        .map(|_| {
            let logits: Vec<f64> = (0..classes).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
            haed::util::softmax(&logits)
        })
        .collect();
    let labels = (0..u).map(|_| rng.gen_range(0..v as u32)).collect();
    (probs, labels)
}

pub fn posteriors(probs: &[Vec<f64>]) -> CtcPosteriors {
    let blank = probs[0].len() - 1;
    CtcPosteriors::from_probs(probs, blank).unwrap()
}

pub fn tiny_tokenizer() -> Tokenizer {
    Tokenizer::build(&["ab c"]).unwrap()
}

pub fn tiny_config(variant: Variant, precision: Precision) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            feature_dim: 4,
            layers: 1,
            model_dim: 8,
            heads: 2,
            feedforward_dim: 12,
            subsampling_factor: 2,
            dropout: 0.0,
        },
        lm: LmConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            feedforward_dim: 12,
            dropout: 0.0,
            ..LmConfig::default()
        },
        acoustic: AcousticConfig {
            layers: 1,
            heads: 2,
            feedforward_dim: 12,
            dropout: 0.0,
            sos_frame: 0,
        },
        variant,
        lambda: 0.8,
        beta: 0.3,
        precision,
    }
}

pub fn tiny_model(variant: Variant, seed: u64) -> HaedModel {
    HaedModel::for_tokenizer(&tiny_config(variant, Precision::F64), &tiny_tokenizer(), seed).unwrap()
}

pub fn random_features(id: &str, frames: usize, dim: usize, seed: u64) -> FeatureSequence {
    let mut rng = rng_for(seed, &[frames as u64]);
    let data = (0..frames * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    FeatureSequence::new(id, "test", dim, data).unwrap()
}

/// Worst relative error between the autograd gradient of `objective` and
/// central differences of `value`, over up to `per_param` random entries of
/// every parameter of `store`. Entries where both are below `floor` in
/// magnitude are compared absolutely.
pub fn check_gradients(
    store: &ParamStore,
    objective: impl Fn() -> Tensor,
    value: impl Fn() -> f64,
    per_param: usize,
    seed: u64,
) -> (f64, String) {
    let grads = objective().backward().unwrap();
    let eps = 1e-5;
    let floor = 1e-7;
    let mut worst = (0.0f64, String::new());
    let mut rng = rng_for(seed, &[7]);
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let var = store.var(&name).unwrap();
        let base = store.values(&name).unwrap();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => haed::nn::tensor_to_f64(g).unwrap(),
            None => vec![0.0; base.len()],
        };
        let picks: Vec<usize> = if base.len() <= per_param {
            (0..base.len()).collect()
        } else {
            (0..per_param).map(|_| rng.gen_range(0..base.len())).collect()
        };
        for i in picks {
            let mut v = base.clone();
            v[i] = base[i] + eps;
            store.set(&name, &v).unwrap();
            let up = value();
            v[i] = base[i] - eps;
            store.set(&name, &v).unwrap();
            let down = value();
            store.set(&name, &base).unwrap();
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < floor { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]: autograd {a:.6e} numeric {numeric:.6e}"));
            }
        }
    }
    worst
}

/// A corpus small enough to build and train on in a test.
pub fn tiny_corpus() -> haed::corpus::CorpusConfig {
    use haed::corpus::{CorpusConfig, DomainConfig, RenderSpec};
    let domain = |name: &str, train, text| DomainConfig {
        name: name.into(),
        mean_length: 4,
        train,
        dev: 4,
        test: 4,
        text,
        ..DomainConfig::default()
    };
    CorpusConfig {
        symbols: "ab c".into(),
        render: RenderSpec {
            feature_dim: 4,
            frames_per_token: [3, 4],
            ..RenderSpec::default()
        },
        domains: vec![domain("general", 24, 0), domain("other", 0, 24)],
        ..CorpusConfig::default()
    }
}
