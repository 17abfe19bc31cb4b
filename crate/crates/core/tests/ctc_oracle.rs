mod common;

use common::{enumerate_ctc, posteriors, random_instance};
use haed::ctc::{ctc_loss, forced_alignment, prune_blank_frames, repeats, CtcLattice, CtcPosteriors, PrefixState};
use haed::util::rng_for;
use haed::Error;
use proptest::prelude::*;

#[test]
fn worked_losses() {
    let p = posteriors(&[vec![0.5, 0.5]]);
    assert!((ctc_loss(&p, &[0]).unwrap() - 2f64.ln()).abs() < 1e-12);

    let p = posteriors(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
    let l = ctc_loss(&p, &[0]).unwrap();
    assert!((l - (-(0.75f64).ln())).abs() < 1e-12);
    assert!((l - 0.2877).abs() < 1e-4);

    let third = vec![1.0 / 3.0; 3];
    let p = posteriors(&[third.clone(), third.clone(), third]);
    let l = ctc_loss(&p, &[0, 1]).unwrap();
    assert!((l - (27.0f64 / 5.0).ln()).abs() < 1e-12);
    assert!((l - 1.6864).abs() < 1e-4);
}

#[test]
fn loss_matches_enumeration_on_random_instances() {
    let mut rng = rng_for(2024, &[1]);
    let mut checked = 0;
    while checked < 500 {
        let (probs, labels) = random_instance(&mut rng, 6, 3, 4);
        let post = posteriors(&probs);
        let needed = labels.len() + repeats(&labels);
        if probs.len() < needed {
            assert!(matches!(ctc_loss(&post, &labels), Err(Error::SequenceTooLong { .. })));
            continue;
        }
        let oracle = enumerate_ctc(&probs, post.blank(), &labels);
        let loss = ctc_loss(&post, &labels).unwrap();
        assert!(
            (loss - (-oracle.prob.ln())).abs() < 1e-6,
            "labels {labels:?} T={}: {loss} vs {}",
            probs.len(),
            -oracle.prob.ln()
        );
        checked += 1;
    }
}

#[test]
fn occupancy_and_alignment_match_enumeration() {
    let mut rng = rng_for(2024, &[2]);
    let mut checked = 0;
    while checked < 500 {
        let (probs, labels) = random_instance(&mut rng, 6, 3, 4);
        let post = posteriors(&probs);
        if probs.len() < labels.len() + repeats(&labels) {
            continue;
        }
        let oracle = enumerate_ctc(&probs, post.blank(), &labels);
        let lattice = CtcLattice::new(&post, &labels).unwrap();
        let occ = lattice.state_occupancy();
        for (t, (a, b)) in occ.iter().zip(&oracle.state).enumerate() {
            for (s, (x, y)) in a.iter().zip(b).enumerate() {
                assert!((x - y).abs() < 1e-9, "state {s} frame {t}: {x} vs {y}");
            }
            let total: f64 = a.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        let frames = forced_alignment(&post, &labels).unwrap().frames;
        for (u, &f) in frames.iter().enumerate() {
            let column: Vec<f64> = oracle.state.iter().map(|row| row[2 * u + 1]).collect();
            let best = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // argmax with earliest-frame tie break, up to rounding
            let expect = column.iter().position(|&g| g >= best - 1e-12).unwrap();
            assert_eq!(f, expect, "label {u} occupancy {column:?}");
        }
        assert!(frames.windows(2).all(|w| w[0] <= w[1]), "non-monotone alignment {frames:?}");
        checked += 1;
    }
}

#[test]
fn worked_alignment() {
    let post = posteriors(&[vec![0.1, 0.9], vec![0.9, 0.1]]);
    let g = CtcLattice::new(&post, &[0]).unwrap().label_occupancy();
    assert!((g[0][0] - 0.10 / 0.91).abs() < 1e-12);
    assert!((g[0][1] - 0.90 / 0.91).abs() < 1e-12);
    assert_eq!(forced_alignment(&post, &[0]).unwrap().frames, vec![1]);

    let one_hot = posteriors(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(forced_alignment(&one_hot, &[0]).unwrap().frames, vec![1]);
}

#[test]
fn too_long_is_a_defined_error() {
    let post = posteriors(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
    match ctc_loss(&post, &[0, 0]) {
        Err(Error::SequenceTooLong { needed, frames, .. }) => assert_eq!((needed, frames), (3, 2)),
        other => panic!("expected SequenceTooLong, got {other:?}"),
    }
}

#[test]
fn pruning_examples() {
    let post = posteriors(&[vec![0.01, 0.99], vec![0.5, 0.5], vec![0.01, 0.99]]);
    assert_eq!(prune_blank_frames(&post, 0.95).unwrap(), vec![1]);
    assert_eq!(prune_blank_frames(&post, 1.0).unwrap(), vec![0, 1, 2]);
    assert!(prune_blank_frames(&post, 0.0).is_err());
    assert!(prune_blank_frames(&post, 1.5).is_err());
}

fn prefix_state(post: &CtcPosteriors, labels: &[u32]) -> PrefixState {
    labels
        .iter()
        .fold(PrefixState::initial(post), |s, &l| s.extend(l, post))
}

/// Total mass of all paths whose collapse starts with `prefix` (any continuation).
fn prefix_mass(probs: &[Vec<f64>], blank: usize, prefix: &[u32]) -> f64 {
    let classes = probs[0].len();
    let t_len = probs.len();
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    for code in 0..classes.pow(t_len as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % classes;
            c /= classes;
        }
        let mut out = Vec::new();
        let mut prev = None;
        for &k in &path {
            if k != blank && Some(k) != prev {
                out.push(k as u32);
            }
            prev = Some(k);
        }
        if out.starts_with(prefix) {
            total += path.iter().enumerate().map(|(t, &k)| probs[t][k]).product::<f64>();
        }
    }
    total
}

#[test]
fn prefix_scores_match_enumeration() {
    let mut rng = rng_for(2024, &[3]);
    for _ in 0..200 {
        let (probs, labels) = random_instance(&mut rng, 5, 3, 3);
        let post = posteriors(&probs);
        let blank = post.blank();
        let state = prefix_state(&post, &labels);
        let full = enumerate_ctc(&probs, blank, &labels).prob;
        if full > 0.0 {
            assert!((state.full_score() - full.ln()).abs() < 1e-9);
        } else {
            assert_eq!(state.full_score(), f64::NEG_INFINITY);
        }
        let mass = prefix_mass(&probs, blank, &labels);
        if mass > 0.0 {
            assert!((state.score - mass.ln()).abs() < 1e-9, "prefix {labels:?}: {} vs {}", state.score, mass.ln());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prefix_extension_never_increases_score(seed in 0u64..10_000, token in 0u32..3) {
        let mut rng = rng_for(seed, &[4]);
        let (probs, labels) = random_instance(&mut rng, 6, 3, 3);
        let post = posteriors(&probs);
        let token = token.min(post.classes() as u32 - 2);
        let s = prefix_state(&post, &labels);
        let next = s.extend(token, &post);
        prop_assert!(next.score <= s.score + 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_and_alignment_monotone(seed in 0u64..10_000) {
        let mut rng = rng_for(seed, &[5]);
        let (probs, labels) = random_instance(&mut rng, 6, 3, 4);
        let post = posteriors(&probs);
        if probs.len() >= labels.len() + repeats(&labels) {
            prop_assert!(ctc_loss(&post, &labels).unwrap() >= 0.0);
            let f = forced_alignment(&post, &labels).unwrap().frames;
            prop_assert!(f.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(f.iter().all(|&t| t < probs.len()));
        }
    }
}
