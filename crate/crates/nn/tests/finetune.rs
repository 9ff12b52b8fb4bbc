use hitpix_core::image::{stitch_pairs, AddressImage};
use hitpix_core::presets::{matches_template, sample_template};
use hitpix_core::Address;
use hitpix_nn::pixelgen::{FineTuneOptions, PixelConfig, PixelModel, TrainOptions, TrainSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const A: &str = "20010db800010000000000000000**01";
const B: &str = "20010db8000100000000000000b0**01";

fn rate(m: &PixelModel, template: &str, seed: u64) -> f64 {
    let s = m.sample_addresses(400, &mut ChaCha8Rng::seed_from_u64(seed));
    s.iter().filter(|a| matches_template(**a, template)).count() as f64 / s.len() as f64
}

fn corpus(addrs: &[Address]) -> TrainSet {
    let mut v = addrs.to_vec();
    v.sort_unstable();
    v.dedup();
    let imgs: Vec<AddressImage> = v.iter().map(|&a| AddressImage::encode(a)).collect();
    TrainSet::stitched(&stitch_pairs(&imgs, 1).unwrap())
}

#[test]
fn feedback_from_a_new_subpattern_shifts_generation() {
    let seeds = sample_template(A, 100, 1);
    let replay = corpus(&seeds);
    let mut m = PixelModel::<f32>::new(PixelConfig::default(), 0, 2);
    m.train(&replay, &TrainOptions { seed: 3, ..TrainOptions::default() }).unwrap();
    let (a_pre, b_pre) = (rate(&m, A, 10), rate(&m, B, 10));

    let actives = sample_template(B, 60, 4);
    let losses = m.fine_tune(&actives, &replay, &FineTuneOptions { seed: 5, ..FineTuneOptions::default() }).unwrap();
    assert_eq!(losses.len(), 10);
    let (a_post, b_post) = (rate(&m, A, 11), rate(&m, B, 11));
    eprintln!("A {a_pre:.3} -> {a_post:.3}, B {b_pre:.3} -> {b_post:.3}");
    assert!(b_post > b_pre);
    assert!(a_post >= 0.5 * a_pre, "A {a_pre} -> {a_post}");
}

#[test]
fn empty_feedback_leaves_the_model_alone() {
    let seeds = sample_template(A, 20, 1);
    let replay = corpus(&seeds);
    let mut m = PixelModel::<f32>::new(PixelConfig { hidden: 8, blocks: 2, ..PixelConfig::default() }, 0, 2);
    m.train(&replay, &TrainOptions { epochs: 1, batch: 8, seed: 0 }).unwrap();
    let before = m.clone();
    assert!(m.fine_tune(&[], &replay, &FineTuneOptions::default()).unwrap().is_empty());
    assert_eq!(m, before);
}

#[test]
fn singleton_feedback_self_pairs() {
    let seeds = sample_template(A, 20, 1);
    let replay = corpus(&seeds);
    let mut m = PixelModel::<f32>::new(PixelConfig { hidden: 8, blocks: 2, ..PixelConfig::default() }, 0, 2);
    let opts = FineTuneOptions { epochs: 2, replay_ratio: 0.0, ..FineTuneOptions::default() };
    let losses = m.fine_tune(&sample_template(B, 1, 9), &replay, &opts).unwrap();
    assert_eq!(losses.len(), 2);
}
