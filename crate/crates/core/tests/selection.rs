use mugcat_core::selection::{argmax_cosine, build_query, cosine, select, SelectionError};
use mugcat_core::stubs;
use mugcat_core::{CandidatePair, Caption, Embedding, GeneratedImage, KeywordSequence};
use mugcat_testkit::{argmax_exact, random_selection_instance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn as_f64(v: &[i64]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[test]
fn argmax_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1ec7);
    let mut tied = 0;
    for case in 0..2000 {
        let (cands, q) = random_selection_instance(&mut rng, 16, 64);
        let vecs: Vec<Vec<f64>> = cands.iter().map(|c| as_f64(c)).collect();
        let got = argmax_cosine(&vecs, &as_f64(&q)).unwrap();
        let want = argmax_exact(&cands, &q);
        assert_eq!(got.index, want, "case {case}: {cands:?} vs {q:?}");
        if got.scores.iter().filter(|&&s| s == got.scores[want]).count() > 1 {
            tied += 1;
        }
    }
    // the generator plants duplicates; make sure ties were actually exercised
    assert!(tied > 200, "only {tied} tied instances");
}

#[test]
fn argmax_in_f32_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..500 {
        let (cands, q) = random_selection_instance(&mut rng, 8, 8);
        let vecs: Vec<Vec<f32>> = cands.iter().map(|c| c.iter().map(|&x| x as f32).collect()).collect();
        let qf: Vec<f32> = q.iter().map(|&x| x as f32).collect();
        assert_eq!(argmax_cosine(&vecs, &qf).unwrap().index, argmax_exact(&cands, &q));
    }
}

#[test]
fn positive_scaling_keeps_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let k = rng.random_range(1..=16);
        let dim = rng.random_range(1..=64);
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cands: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let scaled: Vec<Vec<f64>> = cands
            .iter()
            .map(|c| {
                let a = rng.random_range(1e-3..1e3);
                c.iter().map(|x| x * a).collect()
            })
            .collect();
        let b = rng.random_range(1e-3..1e3);
        let qs: Vec<f64> = q.iter().map(|x| x * b).collect();
        let base = argmax_cosine(&cands, &q).unwrap();
        let moved = argmax_cosine(&scaled, &qs).unwrap();
        assert_eq!(base.index, moved.index);
    }
}

#[test]
fn cosine_analytic_cases() {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    assert!(close(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0));
    assert!(close(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0));
    assert!(close(cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), std::f64::consts::FRAC_1_SQRT_2));
    assert!(close(cosine(&[3.0, 4.0], &[-3.0, -4.0]).unwrap(), -1.0));
}

#[test]
fn cosine_clamps_adversarial_near_parallel_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xadd);
    let mut overshoot_seen = false;
    for _ in 0..20_000 {
        let dim = rng.random_range(1..=64);
        let scale = 10f64.powi(rng.random_range(-100..100));
        let u: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        // v is u nudged by a few ulps, or u itself, or -u
        let v: Vec<f64> = match rng.random_range(0..3) {
            0 => u.clone(),
            1 => u.iter().map(|x| -x).collect(),
            _ => u.iter().map(|x| x * (1.0 + rng.random_range(-4.0..4.0) * f64::EPSILON)).collect(),
        };
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let raw = dot / (u.iter().map(|a| a * a).sum::<f64>().sqrt() * v.iter().map(|b| b * b).sum::<f64>().sqrt());
        overshoot_seen |= raw.abs() > 1.0;
        let c = cosine(&u, &v).unwrap();
        assert!((-1.0..=1.0).contains(&c), "{c}");
        let c32 = cosine(&u.iter().map(|&x| (x / scale) as f32).collect::<Vec<_>>(), &v.iter().map(|&x| (x / scale) as f32).collect::<Vec<_>>()).unwrap();
        assert!((-1.0..=1.0).contains(&c32), "{c32}");
    }
    assert!(overshoot_seen, "no input produced an unclamped value outside [-1, 1]");
}

#[test]
fn cosine_errors() {
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(SelectionError::ZeroVector));
    assert_eq!(cosine(&[1.0], &[1.0, 0.0]), Err(SelectionError::DimMismatch { left: 1, right: 2 }));
    assert_eq!(argmax_cosine::<f64, Vec<f64>>(&[], &[1.0]), Err(SelectionError::NoCandidates));
}

#[test]
fn query_is_lowercased_and_space_joined() {
    let kw = KeywordSequence::from_words(["Book", "READ"]).unwrap();
    assert_eq!(build_query(&kw).unwrap(), "book read");
    assert_eq!(build_query(&KeywordSequence::new()), Err(SelectionError::EmptyKeywords));
}

#[test]
fn stub_caption_with_exact_prompt_wins() {
    // captions that contain the prompt verbatim should beat unrelated ones
    let img = |i: u32| {
        let rgb = mugcat_core::codec::RgbImage::new(16, 16, vec![0; 768]).unwrap();
        GeneratedImage::from_rgb(format!("img{i}"), "r", i, &rgb).unwrap()
    };
    let texts = ["a dog on a boat", "a photo of book read", "a photo of book read [variant 2]"];
    let cands: Vec<CandidatePair> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let cap = Caption::new(format!("img{i}"), *t).unwrap();
            CandidatePair::new(img(i as u32), cap, stubs::stub_embed(t).unwrap()).unwrap()
        })
        .collect();
    let q: Embedding = stubs::stub_embed("book read").unwrap();
    let sel = select(&cands, &q).unwrap();
    assert_eq!(sel.selected_index(), 1);
    assert_eq!(sel.selected_caption(), "a photo of book read");
}
