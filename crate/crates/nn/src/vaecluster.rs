//! Variational autoencoder features and K-means subclasses.

use hitpix_core::image::{AddressImage, COLS, PIXELS, ROWS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    Adam, AdamConfig, Checkpoint, Graph, MaskKind, MaskedConvSpec, ParamId, ParamStore, Tensor, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("VAE training needs at least 2 images, got {0}")]
    InsufficientData(usize),
    #[error("K-means needs at least k={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub channels: [usize; 2],
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { latent_dim: 16, channels: [8, 16], epochs: 200, batch: 64, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct VaeIds {
    enc1: (ParamId, ParamId),
    enc2: (ParamId, ParamId),
    enc_fc: (ParamId, ParamId),
    dec_fc: (ParamId, ParamId),
    dec1: (ParamId, ParamId),
    dec2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub config: VaeConfig,
    params: ParamStore<f32>,
    ids: VaeIds,
}

struct Heads {
    mu: Var,
    logvar: Var,
}

impl VaeModel {
    pub fn new(config: VaeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2] = config.channels;
        let flat = c2 * PIXELS;
        let mut params = ParamStore::new();
        let mut add = |name: &str, wshape: &[usize], fan_in: usize, out: usize| {
            let w = params.add(format!("{name}.w"), Tensor::randn(wshape, (2.0 / fan_in as f64).sqrt(), &mut rng));
            let b = params.add(format!("{name}.b"), Tensor::zeros(&[out]));
            (w, b)
        };
        let ids = VaeIds {
            enc1: add("enc1", &[c1, 1, 3, 3], 9, c1),
            enc2: add("enc2", &[c2, c1, 3, 3], 9 * c1, c2),
            enc_fc: add("enc_fc", &[2 * config.latent_dim, flat], flat, 2 * config.latent_dim),
            dec_fc: add("dec_fc", &[flat, config.latent_dim], config.latent_dim, flat),
            dec1: add("dec1", &[c1, c2, 3, 3], 9 * c2, c1),
            dec2: add("dec2", &[1, c1, 3, 3], 9 * c1, 1),
        };
        VaeModel { config, params, ids }
    }

    fn spec(&self, cin: usize, cout: usize) -> MaskedConvSpec {
        MaskedConvSpec::new(3, MaskKind::None, cin, cout)
    }

    fn p(&self, g: &mut Graph<f32>, (w, b): (ParamId, ParamId)) -> (Var, Var) {
        (g.param(&self.params, w), g.param(&self.params, b))
    }

    fn encode(&self, g: &mut Graph<f32>, x: Var, n: usize) -> Result<Heads, TensorError> {
        let [c1, c2] = self.config.channels;
        let (w, b) = self.p(g, self.ids.enc1);
        let h = g.conv2d(x, w, b, &self.spec(1, c1))?;
        let h = g.relu(h);
        let (w, b) = self.p(g, self.ids.enc2);
        let h = g.conv2d(h, w, b, &self.spec(c1, c2))?;
        let h = g.relu(h);
        let h = g.reshape(h, &[n, c2 * PIXELS])?;
        let (w, b) = self.p(g, self.ids.enc_fc);
        let both = g.linear(h, w, b)?;
        let d = self.config.latent_dim;
        Ok(Heads { mu: g.slice(both, 0, d)?, logvar: g.slice(both, d, d)? })
    }

    fn decode(&self, g: &mut Graph<f32>, z: Var, n: usize) -> Result<Var, TensorError> {
        let [c1, c2] = self.config.channels;
        let (w, b) = self.p(g, self.ids.dec_fc);
        let h = g.linear(z, w, b)?;
        let h = g.relu(h);
        let h = g.reshape(h, &[n, c2, ROWS, COLS])?;
        let (w, b) = self.p(g, self.ids.dec1);
        let h = g.conv2d(h, w, b, &self.spec(c2, c1))?;
        let h = g.relu(h);
        let (w, b) = self.p(g, self.ids.dec2);
        g.conv2d(h, w, b, &self.spec(c1, 1))
    }

    fn batch_input(images: &[&AddressImage]) -> Result<(Tensor<f32>, Vec<f32>), TensorError> {
        let flat: Vec<f32> = images.iter().flat_map(|im| im.to_f32()).collect();
        Ok((Tensor::from_vec(&[images.len(), 1, ROWS, COLS], flat.clone())?, flat))
    }

    /// Posterior means, one vector per image.
    pub fn latents(&self, images: &[AddressImage]) -> Result<Vec<Vec<f64>>, TensorError> {
        let d = self.config.latent_dim;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let refs: Vec<&AddressImage> = chunk.iter().collect();
            let (x, _) = Self::batch_input(&refs)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let heads = self.encode(&mut g, xv, chunk.len())?;
            out.extend(g.value(heads.mu).data().chunks_exact(d).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }

    pub fn latent_of(&self, img: &AddressImage) -> Result<Vec<f64>, TensorError> {
        Ok(self.latents(std::slice::from_ref(img))?.remove(0))
    }

    /// Per-pixel probabilities decoded from the posterior mean.
    pub fn reconstruct(&self, img: &AddressImage) -> Result<Vec<f32>, TensorError> {
        let (x, _) = Self::batch_input(&[img])?;
        let mut g = Graph::new();
        let xv = g.input(x);
        let heads = self.encode(&mut g, xv, 1)?;
        let logits = self.decode(&mut g, heads.mu, 1)?;
        Ok(g.value(logits).data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.params.to_checkpoint(serde_json::json!({ "kind": "vae", "config": self.config }))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TensorError> {
        if ck.meta["kind"] != "vae" {
            return Err(TensorError::Checkpoint("not a VAE checkpoint".into()));
        }
        let config: VaeConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| TensorError::Checkpoint(format!("VAE config: {e}")))?;
        let mut m = Self::new(config, 0);
        m.params.load_values(ck)?;
        Ok(m)
    }
}

/// Trains a VAE; returns the model and the mean ELBO per image for each
/// epoch (Bernoulli log-likelihood minus KL, higher is better).
pub fn train_vae(images: &[AddressImage], config: &VaeConfig, seed: u64) -> Result<(VaeModel, Vec<f64>), ClusterError> {
    if images.len() < 2 {
        return Err(ClusterError::InsufficientData(images.len()));
    }
    let mut model = VaeModel::new(*config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &model.params);
    let mut elbos = Vec::with_capacity(config.epochs);
    let d = config.latent_dim;
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch.max(1)) {
            let n = chunk.len();
            let refs: Vec<&AddressImage> = chunk.iter().map(|&i| &images[i]).collect();
            let (x, targets) = VaeModel::batch_input(&refs)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let heads = model.encode(&mut g, xv, n)?;
            let eps = g.input(Tensor::randn(&[n, d], 1.0, &mut rng));
            let half = g.scale(heads.logvar, 0.5);
            let std = g.exp(half);
            let noise = g.mul(std, eps)?;
            let z = g.add(heads.mu, noise)?;
            let logits = model.decode(&mut g, z, n)?;
            let bce = g.bce_with_logits(logits, &targets)?;
            let rec = g.scale(bce, PIXELS as f32);
            let kl = g.kl_normal(heads.mu, heads.logvar)?;
            let loss = g.add(rec, kl)?;
            total += -(g.value(loss).item() as f64) * n as f64;
            let grads = g.backward(loss)?;
            adam.step(&mut model.params, &grads);
        }
        elbos.push(total / images.len() as f64);
    }
    Ok((model, elbos))
}

/// A partition of points into `k` subclasses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    /// Subclass of each input point, in input order.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after every iteration.
    pub objective: Vec<f64>,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == cluster).collect()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroids_of(points: &[Vec<f64>], assign: &[usize], k: usize, old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (s, n))| if n == 0 { old[c].clone() } else { s.into_iter().map(|v| v / n as f64).collect() })
        .collect()
}

fn objective(points: &[Vec<f64>], assign: &[usize], cents: &[Vec<f64>]) -> f64 {
    points.iter().zip(assign).map(|(p, &a)| dist2(p, &cents[a])).sum()
}

fn nearest(p: &[f64], cents: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, q) in cents.iter().enumerate() {
        let d = dist2(p, q);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Moves the point farthest from its centroid in the largest cluster into
/// each empty cluster.
fn repair_empty(points: &[Vec<f64>], assign: &mut [usize], cents: &mut Vec<Vec<f64>>, k: usize) -> bool {
    let mut changed = false;
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        if sizes[largest] < 2 {
            break;
        }
        let far = (0..points.len())
            .filter(|&i| assign[i] == largest)
            .max_by(|&i, &j| dist2(&points[i], &cents[largest]).total_cmp(&dist2(&points[j], &cents[largest])).then(j.cmp(&i)))
            .unwrap();
        assign[far] = empty;
        *cents = centroids_of(points, assign, k, cents);
        changed = true;
    }
    changed
}

/// Lloyd's algorithm from a farthest-point initialization whose first
/// centre is drawn with `seed`.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering, ClusterError> {
    if k == 0 || points.len() < k {
        return Err(ClusterError::TooFewPoints { n: points.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cents = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut closest: Vec<f64> = points.iter().map(|p| dist2(p, &cents[0])).collect();
    while cents.len() < k {
        let far = (0..points.len()).max_by(|&i, &j| closest[i].total_cmp(&closest[j]).then(j.cmp(&i))).unwrap();
        cents.push(points[far].clone());
        for (c, p) in closest.iter_mut().zip(points) {
            *c = c.min(dist2(p, &cents[cents.len() - 1]));
        }
    }
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &cents)).collect();
    let mut trace = Vec::new();
    for _ in 0..300 {
        cents = centroids_of(points, &assign, k, &cents);
        repair_empty(points, &mut assign, &mut cents, k);
        trace.push(objective(points, &assign, &cents));
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &cents)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    if repair_empty(points, &mut assign, &mut cents, k) {
        trace.push(objective(points, &assign, &cents));
    }
    Ok(Clustering { k, assignments: assign, centroids: cents, objective: trace })
}

/// Fraction of points whose cluster's majority label matches their own.
pub fn purity(assignments: &[usize], labels: &[usize]) -> f64 {
    let mut counts = std::collections::BTreeMap::<(usize, usize), usize>::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *counts.entry((a, l)).or_default() += 1;
    }
    let mut best = std::collections::BTreeMap::<usize, usize>::new();
    for ((a, _), n) in counts {
        let e = best.entry(a).or_default();
        *e = (*e).max(n);
    }
    best.values().sum::<usize>() as f64 / assignments.len().max(1) as f64
}
