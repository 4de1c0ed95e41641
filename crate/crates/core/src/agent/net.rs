//! Dueling Q-network: 3D conv blocks (conv, rectifier, max-pool) over the
//! stacked voxel state, then separate value and advantage streams.
//!
//! Activations are stored channel-last (`[voxel][channel]`). Conv weights are
//! laid out `[c_in][27][c_out]`, dense weights `[out][in]`.

use super::AgentError;
use crate::mdp::{Observation, N_ACTIONS, STATE_CHANNELS};
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub trait Scalar: Float + AddAssign + SubAssign + MulAssign + Sum + Debug + Default + Send + Sync + 'static {
    fn of(x: f64) -> Self;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
}

/// Anything the network can read: a sparse list of non-zero input voxels.
pub trait NetInput {
    fn dims(&self) -> [usize; 3];
    fn mode(&self) -> f64;
    /// Calls `f(channel, flat, value)` for each non-zero input entry.
    fn for_each_active(&self, f: &mut dyn FnMut(usize, usize, f64));
}

impl NetInput for Observation {
    fn dims(&self) -> [usize; 3] {
        Observation::dims(self)
    }

    fn mode(&self) -> f64 {
        self.adj as u8 as f64
    }

    fn for_each_active(&self, f: &mut dyn FnMut(usize, usize, f64)) {
        Observation::for_each_active(self, |c, v| f(c, v, 1.0));
    }
}

/// Dense real-valued input, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseInput {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
    pub mode: f64,
}

impl DenseInput {
    pub fn zeros(dims: [usize; 3]) -> Self {
        DenseInput { dims, data: vec![0.0; STATE_CHANNELS * dims[0] * dims[1] * dims[2]], mode: 0.0 }
    }

    pub fn random(dims: [usize; 3], rng: &mut impl Rng) -> Self {
        let mut x = Self::zeros(dims);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        x.mode = rng.gen_range(0..2) as f64;
        x
    }
}

impl NetInput for DenseInput {
    fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn mode(&self) -> f64 {
        self.mode
    }

    fn for_each_active(&self, f: &mut dyn FnMut(usize, usize, f64)) {
        let n = self.dims[0] * self.dims[1] * self.dims[2];
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0.0 {
                f(i / n, i % n, v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    /// Max-pool size after each conv block.
    pub pools: Vec<usize>,
    /// Hidden width of the value and advantage streams.
    pub fc: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { channels: vec![16, 32, 64], pools: vec![2, 2, 2], fc: 256 }
    }
}

impl NetConfig {
    /// Small network for desk-scale runs on a 30³ grid.
    pub fn reduced() -> Self {
        NetConfig { channels: vec![8, 16], pools: vec![5, 2], fc: 64 }
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::InvalidConfig(m));
        if self.channels.is_empty() || self.channels.len() != self.pools.len() {
            return bad("channels and pools must be non-empty and of equal length".into());
        }
        if self.channels.iter().chain(&self.pools).any(|&c| c == 0) || self.fc == 0 {
            return bad("layer sizes must be positive".into());
        }
        let mut d = dims;
        for &p in &self.pools {
            d = d.map(|x| x / p);
            if d.contains(&0) {
                return bad(format!("pooling {:?} collapses the {:?} input", self.pools, dims));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    cin: usize,
    cout: usize,
    pool: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork<T> {
    cfg: NetConfig,
    dims: [usize; 3],
    blocks: Vec<Block>,
    v1: Dense,
    v2: Dense,
    a1: Dense,
    a2: Dense,
    layers: Vec<LayerInfo>,
    pub params: Vec<T>,
}

fn vol(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

const OFFSETS: [[isize; 3]; 27] = {
    let mut o = [[0isize; 3]; 27];
    let mut d = 0;
    while d < 27 {
        o[d] = [(d / 9) as isize - 1, ((d / 3) % 3) as isize - 1, (d % 3) as isize - 1];
        d += 1;
    }
    o
};

#[inline]
fn shifted(d: [usize; 3], c: [usize; 3], off: [isize; 3]) -> Option<usize> {
    let i = c[0] as isize + off[0];
    let j = c[1] as isize + off[1];
    let k = c[2] as isize + off[2];
    if i < 0 || j < 0 || k < 0 || i >= d[0] as isize || j >= d[1] as isize || k >= d[2] as isize {
        return None;
    }
    Some((i as usize * d[1] + j as usize) * d[2] + k as usize)
}

#[inline]
fn unflat(d: [usize; 3], f: usize) -> [usize; 3] {
    [f / (d[1] * d[2]), (f / d[2]) % d[1], f % d[2]]
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace<T> {
    /// Dense channel-last copy of the input and the entries set in it.
    input: Vec<T>,
    input_set: Vec<usize>,
    /// Per block: rectified conv output, pooled output, pooling argmax.
    y: Vec<Vec<T>>,
    pooled: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
    features: Vec<T>,
    hv: Vec<T>,
    ha: Vec<T>,
    pub value: T,
    pub advantage: Vec<T>,
    pub q: Vec<T>,
}

impl<T: Scalar> Trace<T> {
    /// True when both passes took the same rectifier and pooling branches.
    pub fn same_pattern(&self, other: &Trace<T>) -> bool {
        let signs = |a: &[T], b: &[T]| a.iter().zip(b).all(|(x, y)| (*x > T::zero()) == (*y > T::zero()));
        self.argmax == other.argmax
            && self.y.iter().zip(&other.y).all(|(a, b)| signs(a, b))
            && signs(&self.hv, &other.hv)
            && signs(&self.ha, &other.ha)
    }
}

impl<T: Scalar> QNetwork<T> {
    /// All-zero network.
    pub fn zeros(cfg: &NetConfig, dims: [usize; 3]) -> Result<Self, AgentError> {
        cfg.validate(dims)?;
        let mut layers = Vec::new();
        let mut total = 0;
        let mut alloc = |name: String, len: usize| {
            let off = total;
            layers.push(LayerInfo { name, offset: off, len });
            total += len;
            off
        };
        let mut blocks = Vec::new();
        let mut d = dims;
        let mut cin = STATE_CHANNELS;
        for (i, (&cout, &pool)) in cfg.channels.iter().zip(&cfg.pools).enumerate() {
            let w = alloc(format!("conv{i}.w"), cin * 27 * cout);
            let b = alloc(format!("conv{i}.b"), cout);
            let out = d.map(|x| x / pool);
            blocks.push(Block { in_dims: d, out_dims: out, cin, cout, pool, w, b });
            d = out;
            cin = cout;
        }
        let n_feat = vol(d) * cin + 1;
        let mut dense = |name: &str, n_in: usize, n_out: usize| Dense {
            n_in,
            n_out,
            w: alloc(format!("{name}.w"), n_in * n_out),
            b: alloc(format!("{name}.b"), n_out),
        };
        let v1 = dense("value.fc", n_feat, cfg.fc);
        let v2 = dense("value.out", cfg.fc, 1);
        let a1 = dense("advantage.fc", n_feat, cfg.fc);
        let a2 = dense("advantage.out", cfg.fc, N_ACTIONS);
        Ok(QNetwork { cfg: cfg.clone(), dims, blocks, v1, v2, a1, a2, layers, params: vec![T::zero(); total] })
    }

    /// Uniform fan-in initialization, zero biases.
    pub fn new(cfg: &NetConfig, dims: [usize; 3], rng: &mut impl Rng) -> Result<Self, AgentError> {
        let mut net = Self::zeros(cfg, dims)?;
        let mut fill = |p: &mut [T], off: usize, len: usize, fan_in: usize, gain: f64| {
            let bound = gain / (fan_in as f64).sqrt();
            for w in &mut p[off..off + len] {
                *w = T::of(rng.gen_range(-bound..bound));
            }
        };
        let relu_gain = 6f64.sqrt();
        for b in &net.blocks {
            fill(&mut net.params, b.w, b.cin * 27 * b.cout, b.cin * 27, relu_gain);
        }
        for (d, gain) in [(net.v1, relu_gain), (net.a1, relu_gain), (net.v2, 1.0), (net.a2, 1.0)] {
            fill(&mut net.params, d.w, d.n_in * d.n_out, d.n_in, gain);
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerInfo> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let l = self.layer(name)?.clone();
        Some(&mut self.params[l.offset..l.offset + l.len])
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn same_architecture(&self, other: &QNetwork<T>) -> bool {
        self.cfg == other.cfg && self.dims == other.dims
    }

    pub fn cast<U: Scalar>(&self) -> QNetwork<U> {
        QNetwork {
            cfg: self.cfg.clone(),
            dims: self.dims,
            blocks: self.blocks.clone(),
            v1: self.v1,
            v2: self.v2,
            a1: self.a1,
            a2: self.a2,
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| U::of(p.to_f64().unwrap())).collect(),
        }
    }

    pub fn forward(&self, x: &impl NetInput) -> Result<[T; N_ACTIONS], AgentError> {
        let mut t = Trace::default();
        self.forward_traced(x, &mut t)
    }

    /// Forward pass recording what the backward pass needs. `trace` can be
    /// reused across calls.
    pub fn forward_traced(&self, x: &impl NetInput, t: &mut Trace<T>) -> Result<[T; N_ACTIONS], AgentError> {
        if x.dims() != self.dims {
            return Err(AgentError::ShapeMismatch { expected: self.dims, got: x.dims() });
        }
        let n = vol(self.dims);
        let nb = self.blocks.len();
        t.y.resize_with(nb, Vec::new);
        t.pooled.resize_with(nb, Vec::new);
        t.argmax.resize_with(nb, Vec::new);
        let p = &self.params;

        // the input, dense and channel-last, cleared entry by entry
        if t.input.len() != n * STATE_CHANNELS {
            t.input = vec![T::zero(); n * STATE_CHANNELS];
            t.input_set.clear();
        }
        for &i in &t.input_set {
            t.input[i] = T::zero();
        }
        t.input_set.clear();
        let mut bad = false;
        {
            let (input, set) = (&mut t.input, &mut t.input_set);
            x.for_each_active(&mut |c, f, v| {
                if c >= STATE_CHANNELS || f >= n {
                    bad = true;
                    return;
                }
                let i = f * STATE_CHANNELS + c;
                if input[i] == T::zero() {
                    set.push(i);
                }
                input[i] += T::of(v);
            });
        }
        if bad {
            return Err(AgentError::ShapeMismatch { expected: self.dims, got: x.dims() });
        }

        for (bi, b) in self.blocks.iter().enumerate() {
            let vin = vol(b.in_dims);
            let mut z = std::mem::take(&mut t.y[bi]);
            z.clear();
            z.reserve(vin * b.cout);
            let bias = &p[b.b..b.b + b.cout];
            for _ in 0..vin {
                z.extend_from_slice(bias);
            }
            let w = &p[b.w..b.w + b.cin * 27 * b.cout];
            if bi == 0 {
                // scatter from the non-zero inputs
                for &i in &t.input_set {
                    let (u, ci) = (i / STATE_CHANNELS, i % STATE_CHANNELS);
                    let xv = t.input[i];
                    let cu = unflat(b.in_dims, u);
                    for (d, off) in OFFSETS.iter().enumerate() {
                        let neg = [-off[0], -off[1], -off[2]];
                        if let Some(v) = shifted(b.in_dims, cu, neg) {
                            let wr = &w[(ci * 27 + d) * b.cout..][..b.cout];
                            for (zo, &wo) in z[v * b.cout..][..b.cout].iter_mut().zip(wr) {
                                *zo += xv * wo;
                            }
                        }
                    }
                }
            } else {
                let xin = &t.pooled[bi - 1];
                for v in 0..vin {
                    let cv = unflat(b.in_dims, v);
                    let (zl, _) = z[v * b.cout..].split_at_mut(b.cout);
                    for (d, off) in OFFSETS.iter().enumerate() {
                        let Some(u) = shifted(b.in_dims, cv, *off) else { continue };
                        for (ci, &xv) in xin[u * b.cin..][..b.cin].iter().enumerate() {
                            if xv == T::zero() {
                                continue;
                            }
                            let wr = &w[(ci * 27 + d) * b.cout..][..b.cout];
                            for (zo, &wo) in zl.iter_mut().zip(wr) {
                                *zo += xv * wo;
                            }
                        }
                    }
                }
            }
            for zv in z.iter_mut() {
                if !(*zv > T::zero()) {
                    *zv = T::zero();
                }
            }
            // max-pool
            let vout = vol(b.out_dims);
            let pooled = &mut t.pooled[bi];
            let argmax = &mut t.argmax[bi];
            pooled.clear();
            pooled.resize(vout * b.cout, T::neg_infinity());
            argmax.clear();
            argmax.resize(vout * b.cout, 0);
            for o in 0..vout {
                let co3 = unflat(b.out_dims, o);
                for di in 0..b.pool {
                    for dj in 0..b.pool {
                        for dk in 0..b.pool {
                            let c = [co3[0] * b.pool + di, co3[1] * b.pool + dj, co3[2] * b.pool + dk];
                            let u = (c[0] * b.in_dims[1] + c[1]) * b.in_dims[2] + c[2];
                            for co in 0..b.cout {
                                let val = z[u * b.cout + co];
                                if val > pooled[o * b.cout + co] {
                                    pooled[o * b.cout + co] = val;
                                    argmax[o * b.cout + co] = u as u32;
                                }
                            }
                        }
                    }
                }
            }
            t.y[bi] = z;
        }

        t.features.clear();
        t.features.extend_from_slice(&t.pooled[nb - 1]);
        t.features.push(T::of(x.mode()));
        dense_relu(p, &self.v1, &t.features, &mut t.hv);
        dense_relu(p, &self.a1, &t.features, &mut t.ha);
        let mut v = Vec::new();
        dense_linear(p, &self.v2, &t.hv, &mut v);
        dense_linear(p, &self.a2, &t.ha, &mut t.advantage);
        t.value = v[0];
        let mean = t.advantage.iter().copied().sum::<T>() / T::of(N_ACTIONS as f64);
        let mut q = [T::zero(); N_ACTIONS];
        for (qa, &a) in q.iter_mut().zip(&t.advantage) {
            *qa = t.value + (a - mean);
        }
        t.q.clear();
        t.q.extend_from_slice(&q);
        Ok(q)
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/dQ` for the
    /// pass recorded in `t`.
    pub fn backward(&self, t: &Trace<T>, dq: &[T; N_ACTIONS], grad: &mut [T]) {
        let p = &self.params;
        let dv: T = dq.iter().copied().sum();
        let mean = dv / T::of(N_ACTIONS as f64);
        let da: Vec<T> = dq.iter().map(|&g| g - mean).collect();

        let mut dfeat = vec![T::zero(); t.features.len()];
        for (stream, out, h, dout) in [(&self.v1, &self.v2, &t.hv, vec![dv]), (&self.a1, &self.a2, &t.ha, da)] {
            let mut dh = vec![T::zero(); h.len()];
            dense_backward(p, out, h, &dout, grad, &mut dh);
            for (g, &hv) in dh.iter_mut().zip(h.iter()) {
                if !(hv > T::zero()) {
                    *g = T::zero();
                }
            }
            dense_backward(p, stream, &t.features, &dh, grad, &mut dfeat);
        }
        dfeat.pop();

        let mut dpooled = dfeat;
        for (bi, b) in self.blocks.iter().enumerate().rev() {
            let w = &p[b.w..b.w + b.cin * 27 * b.cout];
            let mut dx = if bi > 0 { vec![T::zero(); vol(b.in_dims) * b.cin] } else { Vec::new() };
            let y = &t.y[bi];
            for (oc, &g) in dpooled.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let co = oc % b.cout;
                let u = t.argmax[bi][oc] as usize;
                if !(y[u * b.cout + co] > T::zero()) {
                    continue;
                }
                grad[b.b + co] += g;
                let cu = unflat(b.in_dims, u);
                for (d, off) in OFFSETS.iter().enumerate() {
                    let Some(s) = shifted(b.in_dims, cu, *off) else { continue };
                    let xin: &[T] = if bi == 0 {
                        &t.input[s * STATE_CHANNELS..][..STATE_CHANNELS]
                    } else {
                        &t.pooled[bi - 1][s * b.cin..][..b.cin]
                    };
                    for ci in 0..b.cin {
                        let wi = b.w + (ci * 27 + d) * b.cout + co;
                        grad[wi] += xin[ci] * g;
                        if bi > 0 {
                            dx[s * b.cin + ci] += w[(ci * 27 + d) * b.cout + co] * g;
                        }
                    }
                }
            }
            dpooled = dx;
        }
    }
}

fn dense_linear<T: Scalar>(p: &[T], d: &Dense, x: &[T], out: &mut Vec<T>) {
    out.clear();
    for o in 0..d.n_out {
        let row = &p[d.w + o * d.n_in..][..d.n_in];
        let mut s = p[d.b + o];
        for (&w, &xv) in row.iter().zip(x) {
            s += w * xv;
        }
        out.push(s);
    }
}

fn dense_relu<T: Scalar>(p: &[T], d: &Dense, x: &[T], out: &mut Vec<T>) {
    dense_linear(p, d, x, out);
    for v in out.iter_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Given `dL/dout`, accumulates weight and bias gradients and adds `dL/dx`.
fn dense_backward<T: Scalar>(p: &[T], d: &Dense, x: &[T], dout: &[T], grad: &mut [T], dx: &mut [T]) {
    for (o, &g) in dout.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        grad[d.b + o] += g;
        let row = d.w + o * d.n_in;
        for i in 0..d.n_in {
            grad[row + i] += g * x[i];
            dx[i] += g * p[row + i];
        }
    }
}
