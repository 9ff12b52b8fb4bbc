use hitpix_core::image::{set_entropy, AddressImage, EntropyMode};
use hitpix_core::presets::three_family_corpus;
use hitpix_core::Address;
use hitpix_nn::vaecluster::{kmeans, purity, train_vae, VaeConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

#[test]
fn vae_memorizes_a_degenerate_corpus() {
    let img = AddressImage::encode("2804:30d0:200:200:100:116:0:b".parse().unwrap());
    let (m, elbo) = train_vae(&vec![img; 200], &VaeConfig::default(), 3).unwrap();
    let probs = m.reconstruct(&img).unwrap();
    let target = img.to_f32();
    let worst = probs.iter().zip(target).map(|(p, t)| if t > 0.5 { *p } else { 1.0 - p }).fold(1.0f32, f32::min);
    assert!(worst > 0.9, "worst per-pixel probability {worst}");
    assert!(elbo.last() > elbo.first());
}

#[test]
fn vae_is_deterministic_and_reports_mu() {
    let corpus: Vec<AddressImage> =
        three_family_corpus(10, 1).into_iter().map(|(a, _)| AddressImage::encode(a)).collect();
    let cfg = VaeConfig { epochs: 3, ..VaeConfig::default() };
    let (a, ea) = train_vae(&corpus, &cfg, 7).unwrap();
    let (b, eb) = train_vae(&corpus, &cfg, 7).unwrap();
    assert_eq!(ea, eb);
    assert_eq!(a, b);
    let z = a.latent_of(&corpus[0]).unwrap();
    assert_eq!(z.len(), 16);
    assert_eq!(z, a.latent_of(&corpus[0]).unwrap());
    assert_eq!(a.latents(&corpus[..2]).unwrap()[0], z);
}

#[test]
fn three_families_are_recovered() {
    let corpus = three_family_corpus(100, 11);
    let images: Vec<AddressImage> = corpus.iter().map(|(a, _)| AddressImage::encode(*a)).collect();
    let labels: Vec<usize> = corpus.iter().map(|(_, f)| *f).collect();
    let (m, elbo) = train_vae(&images, &VaeConfig::default(), 1).unwrap();
    assert!(elbo.last() > elbo.first());
    let z = m.latents(&images).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut same, mut cross) = (0.0, 0.0);
    for _ in 0..100 {
        let i = rng.gen_range(0..z.len());
        let j = loop {
            let j = rng.gen_range(0..z.len());
            if j != i && labels[j] == labels[i] {
                break j;
            }
        };
        let k = loop {
            let k = rng.gen_range(0..z.len());
            if labels[k] != labels[i] {
                break k;
            }
        };
        same += cosine(&z[i], &z[j]);
        cross += cosine(&z[i], &z[k]);
    }
    assert!(cross < same, "cross {cross} vs same {same}");

    let c = kmeans(&z, 3, 1).unwrap();
    let p = purity(&c.assignments, &labels);
    assert!(p >= 0.9, "purity {p}");

    let addrs: Vec<Address> = corpus.iter().map(|(a, _)| *a).collect();
    let union = set_entropy(&addrs, EntropyMode::Standard).unwrap().ce;
    let mean_sub: f64 = (0..3)
        .map(|s| {
            let members: Vec<Address> = c.members(s).into_iter().map(|i| addrs[i]).collect();
            set_entropy(&members, EntropyMode::Standard).unwrap().ce
        })
        .sum::<f64>()
        / 3.0;
    assert!(mean_sub < union, "{mean_sub} vs {union}");
}

#[test]
fn separated_blobs_are_recovered_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centres = [[0.0, 0.0, 0.0], [50.0, 0.0, 10.0], [0.0, 60.0, -40.0], [-70.0, -20.0, 5.0]];
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (l, c) in centres.iter().enumerate() {
        for _ in 0..40 {
            pts.push(c.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
            labels.push(l);
        }
    }
    for seed in 0..5 {
        let c = kmeans(&pts, 4, seed).unwrap();
        assert_eq!(purity(&c.assignments, &labels), 1.0);
    }
}

fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..4).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), 1..60))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lloyd_objective_never_increases(pts in points(), k in 1usize..7, seed in any::<u64>()) {
        prop_assume!(pts.len() >= k);
        let c = kmeans(&pts, k, seed).unwrap();
        for w in c.objective.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "{:?}", c.objective);
        }
    }

    #[test]
    fn clustering_is_a_partition_with_no_empty_subclass(pts in points(), k in 1usize..7, seed in any::<u64>()) {
        prop_assume!(pts.len() >= k);
        let c = kmeans(&pts, k, seed).unwrap();
        prop_assert_eq!(c.assignments.len(), pts.len());
        prop_assert_eq!(c.sizes().iter().sum::<usize>(), pts.len());
        prop_assert!(c.sizes().iter().all(|&s| s > 0));
        prop_assert!(c.assignments.iter().all(|&a| a < k));
    }
}
