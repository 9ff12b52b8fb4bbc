//! Gated pixel model over address images.
//!
//! A vertical stack sees only rows above the current pixel and a horizontal
//! stack sees pixels to its left in the same row, so the logit at raster
//! position `q` depends on pixels `< q` only. The network is fully
//! convolutional: it trains on stitched 16×16 images and samples 8×16 ones.

use hitpix_core::image::{stitch_pairs, AddressImage, StitchedImage, COLS, ROWS};
use hitpix_core::{Address, CandidateBatch, DedupLedger};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::conv::{ConvGeom, Tap};
use crate::tensor::{
    Adam, AdamConfig, Checkpoint, Graph, MaskKind, MaskedConvSpec, ParamId, ParamStore, Real, Tensor, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum PixelError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training images of height {0} cannot be mixed with height {1}")]
    MixedHeights(usize, usize),
    #[error("generation stalled: {emitted} of {requested} novel addresses after {attempts} draws")]
    GenerationStalled { emitted: usize, requested: usize, attempts: usize, partial: CandidateBatch },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PixelConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub temperature: f64,
    pub lr: f64,
    /// Raw draws allowed per requested candidate before giving up.
    pub attempt_factor: usize,
}

impl Default for PixelConfig {
    fn default() -> Self {
        PixelConfig { hidden: 16, blocks: 5, kernel: 3, temperature: 1.0, lr: 1e-3, attempt_factor: 20 }
    }
}

/// Training images of one height, flattened to 0/1 values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSet {
    height: usize,
    images: Vec<Vec<f32>>,
}

impl TrainSet {
    pub fn stitched(images: &[StitchedImage]) -> Self {
        TrainSet { height: StitchedImage::ROWS, images: images.iter().map(|s| s.to_f32()).collect() }
    }

    pub fn single(images: &[AddressImage]) -> Self {
        TrainSet { height: ROWS, images: images.iter().map(|i| i.to_f32().to_vec()).collect() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn extend(&mut self, other: TrainSet) -> Result<(), PixelError> {
        if other.is_empty() {
            return Ok(());
        }
        if self.is_empty() {
            self.height = other.height;
        } else if self.height != other.height {
            return Err(PixelError::MixedHeights(self.height, other.height));
        }
        self.images.extend(other.images);
        Ok(())
    }

    /// `n` images drawn without replacement while possible, then with.
    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> TrainSet {
        if self.is_empty() {
            return TrainSet { height: self.height, images: Vec::new() };
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let images = (0..n)
            .map(|k| {
                let i = if k < idx.len() { idx[k] } else { rng.gen_range(0..self.len()) };
                self.images[i].clone()
            })
            .collect();
        TrainSet { height: self.height, images }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 40, batch: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneOptions {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Replay images per feedback image.
    pub replay_ratio: f64,
    /// Stitch actives into 16×16 pairs; otherwise train on 8×16 images.
    pub stitch: bool,
    pub fanout: usize,
    /// Upper bound on feedback images per pass.
    pub max_examples: usize,
}

impl Default for FineTuneOptions {
    fn default() -> Self {
        FineTuneOptions { epochs: 10, batch: 64, seed: 0, replay_ratio: 1.0, stitch: true, fanout: 5, max_examples: 128 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    v: (ParamId, ParamId),
    h: (ParamId, ParamId),
    v2h: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
struct Ids {
    in_v: (ParamId, ParamId),
    in_h: (ParamId, ParamId),
    in_v2h: (ParamId, ParamId),
    pos_v: ParamId,
    pos_h: ParamId,
    blocks: Vec<BlockIds>,
    head1: (ParamId, ParamId),
    head2: (ParamId, ParamId),
}

struct Specs {
    in_v: MaskedConvSpec,
    in_h: MaskedConvSpec,
    v2h: MaskedConvSpec,
    v: MaskedConvSpec,
    h: MaskedConvSpec,
    out: MaskedConvSpec,
    head1: MaskedConvSpec,
    head2: MaskedConvSpec,
}

impl Specs {
    fn new(c: &PixelConfig) -> Self {
        let (k, h) = (c.kernel, c.hidden);
        Specs {
            in_v: MaskedConvSpec::new(k, MaskKind::Vertical, 1, 2 * h),
            in_h: MaskedConvSpec::new(k, MaskKind::HorizontalA, 1, 2 * h),
            v2h: MaskedConvSpec::pointwise(2 * h, 2 * h),
            v: MaskedConvSpec::new(k, MaskKind::Vertical, h, 2 * h),
            h: MaskedConvSpec::new(k, MaskKind::HorizontalB, h, 2 * h),
            out: MaskedConvSpec::pointwise(h, h),
            head1: MaskedConvSpec::pointwise(h, h),
            head2: MaskedConvSpec::pointwise(h, 1),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: PixelConfig,
    subclass_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelModel<T = f32> {
    pub config: PixelConfig,
    pub subclass_id: usize,
    params: ParamStore<T>,
    ids: Ids,
}

impl<T: Real> PixelModel<T> {
    pub fn new(config: PixelConfig, subclass_id: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = Specs::new(&config);
        let mut params = ParamStore::new();
        let conv = |params: &mut ParamStore<T>, name: &str, spec: &MaskedConvSpec, rng: &mut ChaCha8Rng| {
            let fan_in = (spec.taps_live() * spec.in_channels).max(1);
            let w = params.add(format!("{name}.w"), Tensor::randn(&spec.weight_shape(), (1.0 / fan_in as f64).sqrt(), rng));
            let b = params.add(format!("{name}.b"), Tensor::zeros(&[spec.out_channels]));
            (w, b)
        };
        let in_v = conv(&mut params, "in.v", &specs.in_v, &mut rng);
        let in_h = conv(&mut params, "in.h", &specs.in_h, &mut rng);
        let in_v2h = conv(&mut params, "in.v2h", &specs.v2h, &mut rng);
        let pos_v = params.add("in.pos_v", Tensor::zeros(&[2 * config.hidden, ROWS, COLS]));
        let pos_h = params.add("in.pos_h", Tensor::zeros(&[2 * config.hidden, ROWS, COLS]));
        let blocks = (0..config.blocks)
            .map(|l| BlockIds {
                v: conv(&mut params, &format!("b{l}.v"), &specs.v, &mut rng),
                h: conv(&mut params, &format!("b{l}.h"), &specs.h, &mut rng),
                v2h: conv(&mut params, &format!("b{l}.v2h"), &specs.v2h, &mut rng),
                out: conv(&mut params, &format!("b{l}.out"), &specs.out, &mut rng),
            })
            .collect();
        let head1 = conv(&mut params, "head.1", &specs.head1, &mut rng);
        let head2 = conv(&mut params, "head.2", &specs.head2, &mut rng);
        let ids = Ids { in_v, in_h, in_v2h, pos_v, pos_h, blocks, head1, head2 };
        PixelModel { config, subclass_id, params, ids }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> PixelModel<U> {
        PixelModel { config: self.config, subclass_id: self.subclass_id, params: self.params.cast(), ids: self.ids.clone() }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = Meta { kind: "pixel".into(), config: self.config, subclass_id: self.subclass_id };
        self.params.to_checkpoint(serde_json::to_value(meta).expect("meta"))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TensorError> {
        let meta: Meta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| TensorError::Checkpoint(format!("model meta: {e}")))?;
        if meta.kind != "pixel" {
            return Err(TensorError::Checkpoint(format!("expected a pixel model, found {}", meta.kind)));
        }
        let mut model = Self::new(meta.config, meta.subclass_id, 0);
        model.params.load_values(ck)?;
        Ok(model)
    }

    /// Records the forward pass for `x: [n, 1, h, 16]` and returns the logits.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let s = Specs::new(&self.config);
        let ids = &self.ids;
        let p = |g: &mut Graph<T>, (w, b): (ParamId, ParamId)| (g.param(&self.params, w), g.param(&self.params, b));
        let conv = |g: &mut Graph<T>, x: Var, wb: (Var, Var), spec: &MaskedConvSpec| g.conv2d(x, wb.0, wb.1, spec);

        let wb = p(g, ids.in_v);
        let vp = conv(g, x, wb, &s.in_v)?;
        let pos_v = g.param(&self.params, ids.pos_v);
        let vp = g.add_pos(vp, pos_v)?;
        let wb = p(g, ids.in_h);
        let hp = conv(g, x, wb, &s.in_h)?;
        let wb = p(g, ids.in_v2h);
        let link = conv(g, vp, wb, &s.v2h)?;
        let hp = g.add(hp, link)?;
        let pos_h = g.param(&self.params, ids.pos_h);
        let hp = g.add_pos(hp, pos_h)?;
        let mut v = g.gate(vp)?;
        let mut h = g.gate(hp)?;
        for b in &ids.blocks {
            let wb = p(g, b.v);
            let vp = conv(g, v, wb, &s.v)?;
            let wb = p(g, b.h);
            let hp = conv(g, h, wb, &s.h)?;
            let wb = p(g, b.v2h);
            let link = conv(g, vp, wb, &s.v2h)?;
            let hp = g.add(hp, link)?;
            let gated = g.gate(hp)?;
            let wb = p(g, b.out);
            let out = conv(g, gated, wb, &s.out)?;
            h = g.add(h, out)?;
            v = g.gate(vp)?;
        }
        let wb = p(g, ids.head1);
        let o = conv(g, h, wb, &s.head1)?;
        let o = g.relu(o);
        let wb = p(g, ids.head2);
        conv(g, o, wb, &s.head2)
    }

    /// Logits for a batch of flattened `h×16` images, in raster order.
    pub fn logits(&self, images: &[Vec<T>], height: usize) -> Result<Vec<T>, TensorError> {
        let mut flat = Vec::with_capacity(images.len() * height * COLS);
        for im in images {
            flat.extend_from_slice(im);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[images.len(), 1, height, COLS], flat)?);
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Minimizes mean per-pixel BCE; returns the mean loss of each epoch.
    pub fn train(&mut self, set: &TrainSet, opts: &TrainOptions) -> Result<Vec<f64>, PixelError> {
        if set.is_empty() {
            return Err(PixelError::EmptyCorpus);
        }
        let mut adam = Adam::new(AdamConfig { lr: self.config.lr, ..AdamConfig::default() }, &self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let batch = opts.batch.max(1);
        let pixels = set.height * COLS;
        let mut losses = Vec::with_capacity(opts.epochs);
        for _ in 0..opts.epochs {
            let mut order: Vec<usize> = (0..set.len()).collect();
            order.shuffle(&mut rng);
            let (mut total, mut seen) = (0.0, 0usize);
            for chunk in order.chunks(batch) {
                let mut flat = Vec::with_capacity(chunk.len() * pixels);
                for &i in chunk {
                    flat.extend(set.images[i].iter().map(|&v| T::of(v as f64)));
                }
                let mut g = Graph::new();
                let x = g.input(Tensor::from_vec(&[chunk.len(), 1, set.height, COLS], flat.clone())?);
                let y = self.forward(&mut g, x)?;
                let loss = g.bce_with_logits(y, &flat)?;
                total += g.value(loss).item().to_f64().unwrap() * chunk.len() as f64;
                seen += chunk.len();
                let grads = g.backward(loss)?;
                adam.step(&mut self.params, &grads);
            }
            losses.push(total / seen as f64);
        }
        Ok(losses)
    }

    /// Retrains on feedback actives mixed with replayed corpus images.
    pub fn fine_tune(
        &mut self,
        actives: &[Address],
        replay: &TrainSet,
        opts: &FineTuneOptions,
    ) -> Result<Vec<f64>, PixelError> {
        if actives.is_empty() {
            return Ok(Vec::new());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut addrs = actives.to_vec();
        addrs.sort_unstable();
        addrs.dedup();
        let images: Vec<AddressImage> = addrs.iter().map(|&a| AddressImage::encode(a)).collect();
        let mut set = if opts.stitch {
            let stitched = stitch_pairs(&images, opts.fanout.max(1)).expect("non-empty subclass, positive fanout");
            TrainSet::stitched(&stitched)
        } else {
            TrainSet::single(&images)
        };
        if set.len() > opts.max_examples {
            set = set.draw(opts.max_examples, &mut rng);
        }
        let n_replay = (set.len() as f64 * opts.replay_ratio).round() as usize;
        if n_replay > 0 && !replay.is_empty() {
            set.extend(replay.draw(n_replay, &mut rng))?;
        }
        let train = TrainOptions { epochs: opts.epochs, batch: opts.batch, seed: rng.gen() };
        self.train(&set, &train)
    }

    /// `count` fresh 8×16 images, decoded, excluding anything the ledger
    /// already holds. Accepted addresses are claimed in the ledger.
    pub fn sample(
        &self,
        count: usize,
        seed: u64,
        round: usize,
        ledger: &DedupLedger,
    ) -> Result<CandidateBatch, PixelError> {
        let mut batch = CandidateBatch::new(self.subclass_id, round);
        let cap = count.saturating_mul(self.config.attempt_factor.max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draws = 0usize;
        while batch.len() < count && draws < cap {
            let need = count - batch.len();
            let chunk = (need + need / 4 + 8).min(SAMPLE_CHUNK).min(cap - draws);
            draws += chunk;
            for a in self.sample_addresses(chunk, &mut rng) {
                if batch.len() < count && ledger.claim(a) {
                    batch.addresses.push(a);
                }
            }
        }
        if batch.len() < count {
            return Err(PixelError::GenerationStalled {
                emitted: batch.len(),
                requested: count,
                attempts: draws,
                partial: batch,
            });
        }
        Ok(batch)
    }

    /// Raw autoregressive draws with no novelty filtering.
    pub fn sample_addresses(&self, n: usize, rng: &mut impl Rng) -> Vec<Address> {
        let mut out = Vec::with_capacity(n);
        let mut left = n;
        while left > 0 {
            let b = left.min(SAMPLE_CHUNK);
            let (bits, _) = Sampler::new(self, b).run(rng, None);
            out.extend(bits.chunks_exact(ROWS * COLS).map(bits_to_address));
            left -= b;
        }
        out
    }

    /// Logits of the incremental sampler with every pixel forced to the
    /// given image; must agree with [`PixelModel::logits`] at height 8.
    pub fn teacher_forced_logits(&self, images: &[AddressImage]) -> Vec<T> {
        let forced: Vec<u8> = images.iter().flat_map(|im| im.to_f32().map(|v| v as u8)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Sampler::new(self, images.len()).run(&mut rng, Some(&forced)).1
    }
}

const SAMPLE_CHUNK: usize = 256;

fn bits_to_address(bits: &[u8]) -> Address {
    Address(bits.iter().fold(0u128, |acc, &b| (acc << 1) | b as u128))
}

/// Packed conv weights for the sampler: `[out][taps·in]`.
struct Packed<T> {
    out: usize,
    cin: usize,
    taps: Vec<Tap>,
    w: Vec<T>,
    b: Vec<T>,
}

impl<T: Real> Packed<T> {
    fn new(params: &ParamStore<T>, (w, b): (ParamId, ParamId), spec: MaskedConvSpec) -> Self {
        let geom = ConvGeom { spec, taps: spec.taps(), n: 1, h: 1, w: 1 };
        Packed {
            out: spec.out_channels,
            cin: spec.in_channels,
            w: geom.pack(params.get(w).data()),
            b: params.get(b).data().to_vec(),
            taps: geom.taps,
        }
    }

    fn k(&self) -> usize {
        self.taps.len() * self.cin
    }

    /// `out[o][m] = b[o] + Σ w[o][r]·col[r][m]`.
    fn apply(&self, col: &[T], m: usize, out: &mut [T]) {
        for o in 0..self.out {
            out[o * m..(o + 1) * m].fill(self.b[o]);
        }
        crate::tensor::matmul(self.out, self.k(), m, &self.w, false, col, false, out, true);
    }
}

/// Row- and pixel-incremental evaluation of the network on 8×16 images.
struct Sampler<'a, T> {
    model: &'a PixelModel<T>,
    n: usize,
    c: usize,
    in_v: Packed<T>,
    in_h: Packed<T>,
    in_v2h: Packed<T>,
    blocks: Vec<[Packed<T>; 4]>,
    head1: Packed<T>,
    head2: Packed<T>,
}

impl<'a, T: Real> Sampler<'a, T> {
    fn new(model: &'a PixelModel<T>, n: usize) -> Self {
        let s = Specs::new(&model.config);
        let p = &model.params;
        let ids = &model.ids;
        Sampler {
            model,
            n,
            c: model.config.hidden,
            in_v: Packed::new(p, ids.in_v, s.in_v),
            in_h: Packed::new(p, ids.in_h, s.in_h),
            in_v2h: Packed::new(p, ids.in_v2h, s.v2h),
            blocks: ids
                .blocks
                .iter()
                .map(|b| {
                    [Packed::new(p, b.v, s.v), Packed::new(p, b.h, s.h), Packed::new(p, b.v2h, s.v2h), Packed::new(p, b.out, s.out)]
                })
                .collect(),
            head1: Packed::new(p, ids.head1, s.head1),
            head2: Packed::new(p, ids.head2, s.head2),
        }
    }

    /// Returns the pixels (`[n][8·16]`) and the logit seen at every pixel.
    fn run(&self, rng: &mut impl Rng, forced: Option<&[u8]>) -> (Vec<u8>, Vec<T>) {
        let (n, c) = (self.n, self.c);
        let (h, w) = (ROWS, COLS);
        let layers = self.blocks.len() + 1;
        let temp = T::of(self.model.config.temperature);
        let pos_v = self.model.params.get(self.model.ids.pos_v).data();
        let pos_h = self.model.params.get(self.model.ids.pos_h).data();
        let nw = n * w;

        let mut x = vec![0u8; n * h * w];
        let mut logits = vec![T::zero(); n * h * w];
        // V planes per layer: [c][n][h][w]
        let mut vplanes: Vec<Vec<T>> = (0..layers).map(|_| vec![T::zero(); c * n * h * w]).collect();
        // current-row pre-activations of the vertical stacks: [2c][n][w]
        let mut vrow: Vec<Vec<T>> = (0..layers).map(|_| vec![T::zero(); 2 * c * nw]).collect();
        // current-row horizontal states: [c][n][w]
        let mut hrow: Vec<Vec<T>> = (0..layers).map(|_| vec![T::zero(); c * nw]).collect();

        let mut col = Vec::new();
        let mut pre = vec![T::zero(); 2 * c * nw];
        let mut hpre = vec![T::zero(); 2 * c * n];
        let mut link = vec![T::zero(); 2 * c * n];
        let mut gated = vec![T::zero(); c * n];
        let mut outv = vec![T::zero(); c * n];
        let mut lcol = vec![T::zero(); 2 * c * n];
        let mut head = vec![T::zero(); c * n];
        let mut logit = vec![T::zero(); n];

        for i in 0..h {
            // vertical stacks: whole row at once
            for l in 0..layers {
                let conv = if l == 0 { &self.in_v } else { &self.blocks[l - 1][0] };
                col.clear();
                col.resize(conv.k() * nw, T::zero());
                for (t, tap) in conv.taps.iter().enumerate() {
                    let si = i as isize + tap.dy;
                    if si < 0 {
                        continue;
                    }
                    let si = si as usize;
                    for ch in 0..conv.cin {
                        let row = &mut col[(t * conv.cin + ch) * nw..][..nw];
                        for b in 0..n {
                            for j in 0..w {
                                let sj = j as isize + tap.dx;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                let sj = sj as usize;
                                row[b * w + j] = if l == 0 {
                                    T::of(x[(b * h + si) * w + sj] as f64)
                                } else {
                                    vplanes[l - 1][((ch * n + b) * h + si) * w + sj]
                                };
                            }
                        }
                    }
                }
                conv.apply(&col, nw, &mut pre);
                if l == 0 {
                    for o in 0..2 * c {
                        for b in 0..n {
                            for j in 0..w {
                                pre[o * nw + b * w + j] += pos_v[(o * ROWS + i % ROWS) * COLS + j];
                            }
                        }
                    }
                }
                vrow[l].copy_from_slice(&pre);
                let plane = &mut vplanes[l];
                for ch in 0..c {
                    for b in 0..n {
                        for j in 0..w {
                            let f = pre[ch * nw + b * w + j];
                            let g = pre[(c + ch) * nw + b * w + j];
                            plane[((ch * n + b) * h + i) * w + j] = f.tanh_fast() * g.sigmoid();
                        }
                    }
                }
            }
            // horizontal stacks: pixel by pixel
            for j in 0..w {
                for l in 0..layers {
                    let (conv, v2h) =
                        if l == 0 { (&self.in_h, &self.in_v2h) } else { (&self.blocks[l - 1][1], &self.blocks[l - 1][2]) };
                    col.clear();
                    col.resize(conv.k() * n, T::zero());
                    for (t, tap) in conv.taps.iter().enumerate() {
                        debug_assert_eq!(tap.dy, 0);
                        let sj = j as isize + tap.dx;
                        if sj < 0 {
                            continue;
                        }
                        let sj = sj as usize;
                        for ch in 0..conv.cin {
                            for b in 0..n {
                                col[(t * conv.cin + ch) * n + b] = if l == 0 {
                                    T::of(x[(b * h + i) * w + sj] as f64)
                                } else {
                                    hrow[l - 1][(ch * n + b) * w + sj]
                                };
                            }
                        }
                    }
                    conv.apply(&col, n, &mut hpre);
                    for o in 0..2 * c {
                        for b in 0..n {
                            lcol[o * n + b] = vrow[l][o * nw + b * w + j];
                        }
                    }
                    v2h.apply(&lcol, n, &mut link);
                    for (hp, lk) in hpre.iter_mut().zip(&link) {
                        *hp += *lk;
                    }
                    if l == 0 {
                        for o in 0..2 * c {
                            let pb = pos_h[(o * ROWS + i % ROWS) * COLS + j];
                            for b in 0..n {
                                hpre[o * n + b] += pb;
                            }
                        }
                    }
                    for k in 0..c * n {
                        gated[k] = hpre[k].tanh_fast() * hpre[c * n + k].sigmoid();
                    }
                    if l == 0 {
                        for ch in 0..c {
                            for b in 0..n {
                                hrow[0][(ch * n + b) * w + j] = gated[ch * n + b];
                            }
                        }
                    } else {
                        self.blocks[l - 1][3].apply(&gated, n, &mut outv);
                        let (prev, cur) = hrow.split_at_mut(l);
                        for ch in 0..c {
                            for b in 0..n {
                                let k = (ch * n + b) * w + j;
                                cur[0][k] = prev[l - 1][k] + outv[ch * n + b];
                            }
                        }
                    }
                }
                for ch in 0..c {
                    for b in 0..n {
                        lcol[ch * n + b] = hrow[layers - 1][(ch * n + b) * w + j];
                    }
                }
                self.head1.apply(&lcol[..c * n], n, &mut head);
                for v in head.iter_mut() {
                    *v = v.max(T::zero());
                }
                self.head2.apply(&head, n, &mut logit);
                for b in 0..n {
                    let k = (b * h + i) * w + j;
                    logits[k] = logit[b];
                    x[k] = match forced {
                        Some(f) => f[k],
                        None => {
                            let p = (logit[b] / temp).sigmoid().to_f64().unwrap();
                            (rng.gen::<f64>() < p) as u8
                        }
                    };
                }
            }
        }
        (x, logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PixelConfig {
        PixelConfig { hidden: 4, blocks: 2, ..PixelConfig::default() }
    }

    #[test]
    fn incremental_logits_match_full_forward() {
        let model = PixelModel::<f64>::new(tiny(), 0, 3);
        let mut model = model;
        // non-zero positional terms so the tiling is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in [model.ids.pos_v, model.ids.pos_h] {
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
        }
        let imgs: Vec<AddressImage> =
            (0..3u128).map(|k| AddressImage::encode(Address(0x2001_0db8_u128 << 96 | k * 0x1234_5678_9abc))).collect();
        let inc = model.teacher_forced_logits(&imgs);
        let flat: Vec<Vec<f64>> = imgs.iter().map(|im| im.to_f32().iter().map(|&v| v as f64).collect()).collect();
        let full = model.logits(&flat, ROWS).unwrap();
        assert_eq!(inc.len(), full.len());
        for (a, b) in inc.iter().zip(&full) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_count_is_empty() {
        let model = PixelModel::<f32>::new(tiny(), 1, 0);
        let b = model.sample(0, 1, 0, &DedupLedger::new()).unwrap();
        assert!(b.is_empty());
        assert_eq!(b.origin, 1);
    }

    #[test]
    fn empty_corpus_rejected() {
        let mut model = PixelModel::<f32>::new(tiny(), 0, 0);
        assert!(matches!(model.train(&TrainSet::default(), &TrainOptions::default()), Err(PixelError::EmptyCorpus)));
    }

    #[test]
    fn mixed_heights_rejected() {
        let a = AddressImage::encode(Address(1));
        let mut s = TrainSet::single(&[a]);
        let st = TrainSet::stitched(&stitch_pairs(&[a], 1).unwrap());
        assert!(matches!(s.extend(st), Err(PixelError::MixedHeights(8, 16))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = PixelModel::<f32>::new(tiny(), 5, 9);
        let back = PixelModel::<f32>::from_checkpoint(&Checkpoint::from_json(&model.to_checkpoint().to_json()).unwrap())
            .unwrap();
        assert_eq!(back, model);
    }
}
