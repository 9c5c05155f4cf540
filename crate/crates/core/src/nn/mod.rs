//! Dense actor-critic network with exact reverse-mode gradients.
//!
//! Architecture: `obs -> tanh(W1 x + b1) -> tanh(W2 h1 + b2)`, then
//! `logits = W_pi h2 + b_pi` and `value = W_v h2 + b_v`. With a separate
//! critic the value head reads its own two-layer tanh trunk instead.
//!
//! Flattening order (row-major matrices):
//! `W1, b1, W2, b2, W_pi, b_pi, W_v, b_v` and, for a separate critic,
//! `Wc1, bc1, Wc2, bc2` appended at the end.

mod checkpoint;
mod optim;
mod scalar;

use rand::Rng;
use rand_distr::StandardNormal;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use optim::{adam_step, clip_grad_norm, sgd_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use scalar::{Dual, Scalar};

use crate::config::CriticMode;
use crate::error::{Error, Result};
use crate::sim::{Observation, NUM_ACTIONS, OBS_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkShape {
    pub input: usize,
    pub hidden: usize,
    pub actions: usize,
    pub critic: CriticMode,
}

/// Named parameter block in flattening order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wpi: usize,
    bpi: usize,
    wv: usize,
    bv: usize,
    critic: Option<[usize; 4]>,
}

impl NetworkShape {
    pub fn policy(hidden: usize, critic: CriticMode) -> Self {
        Self {
            input: OBS_DIM,
            hidden,
            actions: NUM_ACTIONS,
            critic,
        }
    }

    pub fn blocks(&self) -> Vec<Block> {
        let (i, h, a) = (self.input, self.hidden, self.actions);
        let mut blocks = vec![
            Block {
                name: "W1",
                rows: h,
                cols: i,
            },
            Block {
                name: "b1",
                rows: h,
                cols: 1,
            },
            Block {
                name: "W2",
                rows: h,
                cols: h,
            },
            Block {
                name: "b2",
                rows: h,
                cols: 1,
            },
            Block {
                name: "W_pi",
                rows: a,
                cols: h,
            },
            Block {
                name: "b_pi",
                rows: a,
                cols: 1,
            },
            Block {
                name: "W_v",
                rows: 1,
                cols: h,
            },
            Block {
                name: "b_v",
                rows: 1,
                cols: 1,
            },
        ];
        if self.critic == CriticMode::Separate {
            blocks.extend([
                Block {
                    name: "Wc1",
                    rows: h,
                    cols: i,
                },
                Block {
                    name: "bc1",
                    rows: h,
                    cols: 1,
                },
                Block {
                    name: "Wc2",
                    rows: h,
                    cols: h,
                },
                Block {
                    name: "bc2",
                    rows: h,
                    cols: 1,
                },
            ]);
        }
        blocks
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(Block::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of the named block in the flat vector.
    pub fn offset(&self, name: &str) -> Option<usize> {
        let mut off = 0;
        for b in self.blocks() {
            if b.name == name {
                return Some(off);
            }
            off += b.len();
        }
        None
    }

    fn layout(&self) -> Layout {
        let (i, h, a) = (self.input, self.hidden, self.actions);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let wpi = b2 + h;
        let bpi = wpi + a * h;
        let wv = bpi + a;
        let bv = wv + h;
        let critic = (self.critic == CriticMode::Separate).then(|| {
            let wc1 = bv + 1;
            let bc1 = wc1 + h * i;
            let wc2 = bc1 + h;
            [wc1, bc1, wc2, wc2 + h * h]
        });
        Layout {
            w1,
            b1,
            w2,
            b2,
            wpi,
            bpi,
            wv,
            bv,
            critic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: NetworkShape,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub value: f64,
}

impl PolicyParams {
    pub fn zeros(shape: NetworkShape) -> Self {
        Self {
            data: vec![0.0; shape.len()],
            shape,
        }
    }

    pub fn from_flat(shape: NetworkShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Orthogonal initialisation: gain sqrt(2) for hidden layers, 0.01 for
    /// the actor head, 1 for the value head; zero biases.
    pub fn init<R: Rng>(shape: NetworkShape, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let l = shape.layout();
        let (i, h, a) = (shape.input, shape.hidden, shape.actions);
        let hidden_gain = 2f64.sqrt();
        let mut fill = |off: usize, rows: usize, cols: usize, gain: f64| {
            let m = orthogonal(rows, cols, gain, rng);
            p.data[off..off + rows * cols].copy_from_slice(&m);
        };
        fill(l.w1, h, i, hidden_gain);
        fill(l.w2, h, h, hidden_gain);
        fill(l.wpi, a, h, 0.01);
        fill(l.wv, 1, h, 1.0);
        if let Some([wc1, _, wc2, _]) = l.critic {
            fill(wc1, h, i, hidden_gain);
            fill(wc2, h, h, hidden_gain);
        }
        p
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        let off = self.shape.offset(name)?;
        let b = self.shape.blocks().into_iter().find(|b| b.name == name)?;
        Some(&self.data[off..off + b.len()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let off = self.shape.offset(name)?;
        let b = self.shape.blocks().into_iter().find(|b| b.name == name)?;
        Some(&mut self.data[off..off + b.len()])
    }

    pub fn forward(&self, obs: &Observation) -> PolicyOutput {
        let mut ws = Workspace::new(&self.shape);
        forward_into(&self.shape, &self.data, obs.as_slice(), &mut ws);
        PolicyOutput {
            logits: ws.logits,
            value: ws.value,
        }
    }

    pub fn forward_slice(&self, obs: &[f64]) -> Result<PolicyOutput> {
        if obs.len() != self.shape.input {
            return Err(Error::Shape(format!(
                "observation has {} entries, network expects {}",
                obs.len(),
                self.shape.input
            )));
        }
        let mut ws = Workspace::new(&self.shape);
        forward_into(&self.shape, &self.data, obs, &mut ws);
        Ok(PolicyOutput {
            logits: ws.logits,
            value: ws.value,
        })
    }
}

fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    // Gram-Schmidt on the longer side, then transpose if needed.
    let (n, k) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
    while q.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let x = if rows >= cols { q[c][r] } else { q[r][c] };
            out[r * cols + c] = gain * x;
        }
    }
    out
}

/// Numerically stable log-softmax and entropy.
pub fn log_prob_and_entropy(logits: &[f64]) -> (Vec<f64>, f64) {
    let mut logp = vec![0.0; logits.len()];
    let h = log_softmax(logits, &mut logp);
    (logp, h)
}

/// Writes log-probabilities into `out` and returns the entropy.
pub fn log_softmax<S: Scalar>(logits: &[S], out: &mut [S]) -> S {
    let max = logits.iter().map(|z| z.val()).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = S::cst(0.0);
    for &z in logits {
        sum += (z - S::cst(max)).exp();
    }
    let log_z = sum.ln() + S::cst(max);
    let mut entropy = S::cst(0.0);
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - log_z;
        entropy += -(o.exp() * *o);
    }
    entropy
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Workspace<S> {
    h1: Vec<S>,
    h2: Vec<S>,
    c1: Vec<S>,
    c2: Vec<S>,
    pub(crate) logits: Vec<S>,
    pub(crate) value: S,
    dlogits: Vec<S>,
    dh1: Vec<S>,
    dh2: Vec<S>,
    dc1: Vec<S>,
    dc2: Vec<S>,
}

impl<S: Scalar> Workspace<S> {
    pub(crate) fn new(shape: &NetworkShape) -> Self {
        let h = shape.hidden;
        let critic = if shape.critic == CriticMode::Separate { h } else { 0 };
        Self {
            h1: vec![S::default(); h],
            h2: vec![S::default(); h],
            c1: vec![S::default(); critic],
            c2: vec![S::default(); critic],
            logits: vec![S::default(); shape.actions],
            value: S::default(),
            dlogits: vec![S::default(); shape.actions],
            dh1: vec![S::default(); h],
            dh2: vec![S::default(); h],
            dc1: vec![S::default(); critic],
            dc2: vec![S::default(); critic],
        }
    }
}

/// Dot product with four interleaved accumulators (fixed order).
#[inline(always)]
fn dot<S: Scalar>(w: &[S], x: &[S]) -> S {
    let mut acc = [S::default(); 4];
    let chunks = w.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += w[k] * x[k];
        acc[1] += w[k + 1] * x[k + 1];
        acc[2] += w[k + 2] * x[k + 2];
        acc[3] += w[k + 3] * x[k + 3];
    }
    let mut tail = S::default();
    for k in chunks * 4..w.len() {
        tail += w[k] * x[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline(always)]
fn dot_const<S: Scalar>(w: &[S], x: &[f64]) -> S {
    let mut acc = S::default();
    for (a, &b) in w.iter().zip(x) {
        acc += a.scale(b);
    }
    acc
}

#[inline(always)]
fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[allow(clippy::too_many_arguments)]
fn trunk<S: Scalar>(
    p: &[S],
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    n_in: usize,
    x: &[f64],
    h1: &mut [S],
    h2: &mut [S],
) {
    let h = h1.len();
    for r in 0..h {
        h1[r] = (p[b1 + r] + dot_const(&p[w1 + r * n_in..w1 + (r + 1) * n_in], x)).tanh();
    }
    for r in 0..h {
        h2[r] = (p[b2 + r] + dot(&p[w2 + r * h..w2 + (r + 1) * h], h1)).tanh();
    }
}

pub(crate) fn forward_into<S: Scalar>(shape: &NetworkShape, p: &[S], x: &[f64], ws: &mut Workspace<S>) {
    let l = shape.layout();
    let h = shape.hidden;
    trunk(p, l.w1, l.b1, l.w2, l.b2, shape.input, x, &mut ws.h1, &mut ws.h2);
    for a in 0..shape.actions {
        ws.logits[a] = p[l.bpi + a] + dot(&p[l.wpi + a * h..l.wpi + (a + 1) * h], &ws.h2);
    }
    let value_input = match l.critic {
        Some([wc1, bc1, wc2, bc2]) => {
            trunk(p, wc1, bc1, wc2, bc2, shape.input, x, &mut ws.c1, &mut ws.c2);
            &ws.c2
        }
        None => &ws.h2,
    };
    ws.value = p[l.bv] + dot(&p[l.wv..l.wv + h], value_input);
}

#[allow(clippy::too_many_arguments)]
fn trunk_backward<S: Scalar>(
    p: &[S],
    g: &mut [S],
    (w1, b1, w2, b2): (usize, usize, usize, usize),
    n_in: usize,
    x: &[f64],
    h1: &[S],
    h2: &[S],
    dh2: &mut [S],
    dh1: &mut [S],
) {
    let h = h1.len();
    let one = S::cst(1.0);
    for r in 0..h {
        dh2[r] = dh2[r] * (one - h2[r] * h2[r]);
    }
    dh1.iter_mut().for_each(|d| *d = S::default());
    for r in 0..h {
        let dz = dh2[r];
        g[b2 + r] += dz;
        axpy(&mut g[w2 + r * h..w2 + (r + 1) * h], dz, h1);
        axpy(dh1, dz, &p[w2 + r * h..w2 + (r + 1) * h]);
    }
    for r in 0..h {
        let dz = dh1[r] * (one - h1[r] * h1[r]);
        g[b1 + r] += dz;
        for (gi, &xi) in g[w1 + r * n_in..w1 + (r + 1) * n_in].iter_mut().zip(x) {
            *gi += dz.scale(xi);
        }
    }
}

/// Accumulate `dL/dparams` given `dL/dlogits` and `dL/dvalue` for the
/// sample whose forward pass is cached in `ws`.
pub(crate) fn backward_into<S: Scalar>(
    shape: &NetworkShape,
    p: &[S],
    x: &[f64],
    ws: &mut Workspace<S>,
    dvalue: S,
    g: &mut [S],
) {
    let l = shape.layout();
    let h = shape.hidden;
    ws.dh2.iter_mut().for_each(|d| *d = S::default());
    for a in 0..shape.actions {
        let d = ws.dlogits[a];
        g[l.bpi + a] += d;
        axpy(&mut g[l.wpi + a * h..l.wpi + (a + 1) * h], d, &ws.h2);
        axpy(&mut ws.dh2, d, &p[l.wpi + a * h..l.wpi + (a + 1) * h]);
    }
    g[l.bv] += dvalue;
    match l.critic {
        Some([wc1, bc1, wc2, bc2]) => {
            axpy(&mut g[l.wv..l.wv + h], dvalue, &ws.c2);
            ws.dc2.iter_mut().for_each(|d| *d = S::default());
            axpy(&mut ws.dc2, dvalue, &p[l.wv..l.wv + h]);
            trunk_backward(
                p,
                g,
                (wc1, bc1, wc2, bc2),
                shape.input,
                x,
                &ws.c1,
                &ws.c2,
                &mut ws.dc2,
                &mut ws.dc1,
            );
        }
        None => {
            axpy(&mut g[l.wv..l.wv + h], dvalue, &ws.h2);
            axpy(&mut ws.dh2, dvalue, &p[l.wv..l.wv + h]);
        }
    }
    trunk_backward(
        p,
        g,
        (l.w1, l.b1, l.w2, l.b2),
        shape.input,
        x,
        &ws.h1,
        &ws.h2,
        &mut ws.dh2,
        &mut ws.dh1,
    );
}

/// A scalar loss defined on the network heads, averaged over samples.
pub trait HeadLoss {
    fn observation(&self, sample: usize) -> &[f64];

    /// Loss of one sample. Writes `dL/dlogits` into `dlogits` and returns
    /// `(loss, dL/dvalue)`.
    fn sample<S: Scalar>(&self, sample: usize, logits: &[S], value: S, dlogits: &mut [S]) -> (S, S);
}

fn accumulate<S: Scalar, L: HeadLoss>(shape: &NetworkShape, p: &[S], loss: &L, indices: &[usize], g: &mut [S]) -> S {
    let mut ws = Workspace::<S>::new(shape);
    let inv = 1.0 / indices.len() as f64;
    let mut total = S::default();
    for &i in indices {
        let x = loss.observation(i);
        forward_into(shape, p, x, &mut ws);
        let mut dlogits = std::mem::take(&mut ws.dlogits);
        let (li, dv) = loss.sample(i, &ws.logits, ws.value, &mut dlogits);
        dlogits.iter_mut().for_each(|d| *d = d.scale(inv));
        ws.dlogits = dlogits;
        total += li;
        backward_into(shape, p, x, &mut ws, dv.scale(inv), g);
    }
    total.scale(inv)
}

/// Mean loss over `indices` and its exact gradient.
pub fn loss_and_grad<L: HeadLoss>(params: &PolicyParams, loss: &L, indices: &[usize]) -> Result<(f64, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::Shape("empty sample set".into()));
    }
    let mut g = vec![0.0; params.len()];
    let value = accumulate(&params.shape, &params.data, loss, indices, &mut g);
    if !value.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return Err(Error::Diverged(format!("loss {value}")));
    }
    Ok((value, g))
}

/// Exact Hessian-vector product `H v` of the mean loss (forward-over-reverse).
pub fn hessian_vector_product<L: HeadLoss>(
    params: &PolicyParams,
    loss: &L,
    indices: &[usize],
    v: &[f64],
) -> Result<Vec<f64>> {
    if v.len() != params.len() {
        return Err(Error::Shape(format!(
            "direction has {} entries, expected {}",
            v.len(),
            params.len()
        )));
    }
    let p: Vec<Dual> = params.data.iter().zip(v).map(|(&x, &d)| Dual::new(x, d)).collect();
    let mut g = vec![Dual::default(); params.len()];
    accumulate(&params.shape, &p, loss, indices, &mut g);
    let hv: Vec<f64> = g.iter().map(|d| d.eps).collect();
    if hv.iter().any(|x| !x.is_finite()) {
        return Err(Error::Diverged("non-finite Hessian-vector product".into()));
    }
    Ok(hv)
}

#[cfg(test)]
mod tests;
