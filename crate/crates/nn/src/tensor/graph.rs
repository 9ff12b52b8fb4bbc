use super::conv::ConvGeom;
use super::{matmul, mismatch, MaskedConvSpec, ParamId, ParamStore, Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom, col: Option<Vec<T>> },
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Gate { x: Var, t: Vec<T>, s: Vec<T> },
    AddPos { x: Var, pos: Var },
    Slice { x: Var, start: usize },
    Reshape(Var),
    Bce { logits: Var, targets: Vec<T> },
    Kl { mu: Var, logvar: Var },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    by_param: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, zeros if the loss never touched it.
    pub fn dense(&self, id: ParamId, params: &ParamStore<T>) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
    }
}

/// A recorded forward computation. Each graph supports one backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite value in forward pass");
        let needs_grad = match op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// A constant with no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, &[])
    }

    pub fn param(&mut self, params: &ParamStore<T>, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Param(id), &[])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: &MaskedConvSpec) -> Result<Var, TensorError> {
        let geom = ConvGeom::new(*spec, self.shape(x), self.shape(w), self.shape(b))?;
        let col = geom.im2col(self.data(x));
        let y = geom.forward(self.data(x), col.as_deref(), self.data(w), self.data(b));
        let t = Tensor::from_vec(&[geom.n, spec.out_channels, geom.h, geom.w], y)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom, col }, &[x, w, b]))
    }

    /// `x·wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(mismatch(format!("linear {:?} · {:?}ᵀ + {:?}", xs, ws, bs)));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut y = Vec::with_capacity(n * m);
        for _ in 0..n {
            y.extend_from_slice(self.data(b));
        }
        matmul(n, k, m, self.data(x), false, self.data(w), true, &mut y, true);
        let t = Tensor::from_vec(&[n, m], y)?;
        Ok(self.push(t, Op::Linear { x, w, b }, &[x, w, b]))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| p + q).collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| p * q).collect();
        let t = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh_fast());
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.sigmoid());
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.exp());
        self.push(t, Op::Exp(x), &[x])
    }

    /// `tanh(first half of channels) ⊙ σ(second half)`.
    pub fn gate(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(mismatch(format!("gate needs a channel axis, got {:?}", shape)));
        }
        if shape[1] % 2 != 0 {
            return Err(TensorError::OddChannelCount(shape[1]));
        }
        let half = shape[1] / 2;
        let inner: usize = shape[2..].iter().product();
        let src = self.data(x);
        let m = half * inner;
        let mut tv = Vec::with_capacity(src.len() / 2);
        let mut sv = Vec::with_capacity(src.len() / 2);
        for n in 0..shape[0] {
            let base = n * 2 * m;
            tv.extend(src[base..base + m].iter().map(|v| v.tanh_fast()));
            sv.extend(src[base + m..base + 2 * m].iter().map(|v| v.sigmoid()));
        }
        let out = tv.iter().zip(&sv).map(|(&a, &b)| a * b).collect();
        let mut oshape = shape;
        oshape[1] = half;
        let t = Tensor::from_vec(&oshape, out)?;
        Ok(self.push(t, Op::Gate { x, t: tv, s: sv }, &[x]))
    }

    /// Adds `pos: [c, p, w]` to `x: [n, c, h, w]`, row `i` taking `pos` row `i mod p`.
    pub fn add_pos(&mut self, x: Var, pos: Var) -> Result<Var, TensorError> {
        let (xs, ps) = (self.shape(x).to_vec(), self.shape(pos).to_vec());
        if xs.len() != 4 || ps.len() != 3 || xs[1] != ps[0] || xs[3] != ps[2] || ps[1] == 0 {
            return Err(mismatch(format!("positional bias {:?} onto {:?}", ps, xs)));
        }
        let (c, h, w, p) = (xs[1], xs[2], xs[3], ps[1]);
        let mut out = self.data(x).to_vec();
        let pd = self.data(pos);
        for n in 0..xs[0] {
            for ch in 0..c {
                for i in 0..h {
                    let o = ((n * c + ch) * h + i) * w;
                    let q = (ch * p + i % p) * w;
                    for j in 0..w {
                        out[o + j] += pd[q + j];
                    }
                }
            }
        }
        let t = Tensor::from_vec(&xs, out)?;
        Ok(self.push(t, Op::AddPos { x, pos }, &[x, pos]))
    }

    /// Channels `start..start+len` along axis 1.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || start + len > shape[1] {
            return Err(mismatch(format!("slice {}..{} of {:?}", start, start + len, shape)));
        }
        let inner: usize = shape[2..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(shape[0] * len * inner);
        for n in 0..shape[0] {
            out.extend_from_slice(&src[(n * shape[1] + start) * inner..][..len * inner]);
        }
        let mut oshape = shape;
        oshape[1] = len;
        let t = Tensor::from_vec(&oshape, out)?;
        Ok(self.push(t, Op::Slice { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var, TensorError> {
        let z = self.data(logits);
        if z.len() != targets.len() || z.is_empty() {
            return Err(mismatch(format!("{} logits vs {} targets", z.len(), targets.len())));
        }
        let total: T = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let loss = total / T::of(z.len() as f64);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// KL divergence from N(mu, exp(logvar)) to N(0, I): summed over the
    /// latent axis, averaged over the batch.
    pub fn kl_normal(&mut self, mu: Var, logvar: Var) -> Result<Var, TensorError> {
        self.same_shape(mu, logvar)?;
        let n = self.shape(mu).first().copied().unwrap_or(1).max(1);
        let half = T::of(0.5);
        let total: T = self
            .data(mu)
            .iter()
            .zip(self.data(logvar))
            .map(|(&m, &lv)| -half * (T::one() + lv - m * m - lv.exp()))
            .sum();
        let loss = total / T::of(n as f64);
        Ok(self.push(Tensor::scalar(loss), Op::Kl { mu, logvar }, &[mu, logvar]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().copied().sum::<T>() / T::of(d.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut by_param: Vec<Option<Tensor<T>>> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            let mut send = |v: Var, delta: Vec<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(delta),
                }
            };
            let val = |v: Var| self.nodes[v.0].value.data();
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    if by_param.len() <= id.index() {
                        by_param.resize(id.index() + 1, None);
                    }
                    let shape = node.value.shape();
                    match &mut by_param[id.index()] {
                        Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, d)| *a += d),
                        slot => *slot = Some(Tensor::from_vec(shape, g)?),
                    }
                }
                Op::Conv { x, w, b, geom, col } => {
                    let mut dw = vec![T::zero(); self.nodes[w.0].value.numel()];
                    let mut db = vec![T::zero(); self.nodes[b.0].value.numel()];
                    let dx = geom.backward(val(*x), col.as_deref(), val(*w), &g, &mut dw, &mut db, wants(*x));
                    send(*w, dw);
                    send(*b, db);
                    if let Some(dx) = dx {
                        send(*x, dx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let m = self.shape(*w)[0];
                    if wants(*x) {
                        let mut dx = vec![T::zero(); n * k];
                        matmul(n, m, k, &g, false, val(*w), false, &mut dx, false);
                        send(*x, dx);
                    }
                    let mut dw = vec![T::zero(); m * k];
                    matmul(m, n, k, &g, true, val(*x), false, &mut dw, false);
                    send(*w, dw);
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(a, &d)| *a += d);
                    }
                    send(*b, db);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(val(*b)).map(|(&d, &v)| d * v).collect();
                    let gb = g.iter().zip(val(*a)).map(|(&d, &v)| d * v).collect();
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Scale(x, s) => send(*x, g.iter().map(|&d| d * *s).collect()),
                Op::Tanh(x) => {
                    let y = node.value.data();
                    send(*x, g.iter().zip(y).map(|(&d, &y)| d * (T::one() - y * y)).collect());
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    send(*x, g.iter().zip(y).map(|(&d, &y)| d * y * (T::one() - y)).collect());
                }
                Op::Relu(x) => {
                    let y = node.value.data();
                    send(*x, g.iter().zip(y).map(|(&d, &y)| if y > T::zero() { d } else { T::zero() }).collect());
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    send(*x, g.iter().zip(y).map(|(&d, &y)| d * y).collect());
                }
                Op::Gate { x, t, s } => {
                    let shape = self.shape(*x);
                    let m = shape[1] / 2 * shape[2..].iter().product::<usize>();
                    let mut dx = vec![T::zero(); 2 * t.len()];
                    for n in 0..shape[0] {
                        for i in 0..m {
                            let (d, t, s) = (g[n * m + i], t[n * m + i], s[n * m + i]);
                            dx[n * 2 * m + i] = d * s * (T::one() - t * t);
                            dx[n * 2 * m + m + i] = d * t * s * (T::one() - s);
                        }
                    }
                    send(*x, dx);
                }
                Op::AddPos { x, pos } => {
                    let xs = self.shape(*x);
                    let (c, h, w, p) = (xs[1], xs[2], xs[3], self.shape(*pos)[1]);
                    let mut dp = vec![T::zero(); c * p * w];
                    for n in 0..xs[0] {
                        for ch in 0..c {
                            for i in 0..h {
                                let o = ((n * c + ch) * h + i) * w;
                                let q = (ch * p + i % p) * w;
                                for j in 0..w {
                                    dp[q + j] += g[o + j];
                                }
                            }
                        }
                    }
                    send(*pos, dp);
                    send(*x, g);
                }
                Op::Slice { x, start } => {
                    let xs = self.shape(*x);
                    let len = node.value.shape()[1];
                    let inner: usize = xs[2..].iter().product();
                    let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                    for n in 0..xs[0] {
                        dx[(n * xs[1] + start) * inner..][..len * inner]
                            .copy_from_slice(&g[n * len * inner..][..len * inner]);
                    }
                    send(*x, dx);
                }
                Op::Reshape(x) => send(*x, g),
                Op::Bce { logits, targets } => {
                    let scale = g[0] / T::of(targets.len() as f64);
                    let dz = val(*logits).iter().zip(targets).map(|(&z, &t)| (z.sigmoid() - t) * scale).collect();
                    send(*logits, dz);
                }
                Op::Kl { mu, logvar } => {
                    let n = self.shape(*mu).first().copied().unwrap_or(1).max(1);
                    let scale = g[0] / T::of(n as f64);
                    let half = T::of(0.5);
                    send(*mu, val(*mu).iter().map(|&m| m * scale).collect());
                    send(*logvar, val(*logvar).iter().map(|&lv| half * (lv.exp() - T::one()) * scale).collect());
                }
                Op::Sum(x) => send(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.numel();
                    send(*x, vec![g[0] / T::of(n.max(1) as f64); n]);
                }
            }
        }
        for t in by_param.iter().flatten() {
            debug_assert!(t.is_finite(), "non-finite gradient");
        }
        Ok(Gradients { by_param })
    }
}
