//! Toy differentiable encoder producing global/up/down embeddings.
//!
//! Input vectors go through a two-layer perceptron whose output is reshaped
//! into a `rows x cols x channels` feature map. The map is pooled three ways
//! (whole map, top half, bottom half) with generalized-mean pooling, then
//! each pooled vector is batch-normalized and L2-normalized.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, GEM_EPS, NORM_EPS};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_GEM_P: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Global,
    Up,
    Down,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Global, Branch::Up, Branch::Down];

    pub fn index(self) -> usize {
        match self {
            Branch::Global => 0,
            Branch::Up => 1,
            Branch::Down => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Global => "global",
            Branch::Up => "up",
            Branch::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            input: 32,
            hidden: 64,
            rows: 4,
            cols: 4,
            channels: 32,
        }
    }
}

impl EncoderDims {
    pub fn map_len(&self) -> usize {
        self.rows * self.cols * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.rows == 0 || self.cols == 0 || self.channels == 0
        {
            return Err(Error::InvalidParameter(format!("zero encoder dimension in {self:?}")));
        }
        if self.rows % 2 != 0 {
            return Err(Error::OddRowCount(self.rows));
        }
        Ok(())
    }
}

/// Index ranges of each trainable tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub bn_scale: [Range<usize>; 3],
    pub bn_shift: [Range<usize>; 3],
    pub len: usize,
}

impl ParamLayout {
    pub fn new(d: &EncoderDims) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let w1 = take(d.hidden * d.input);
        let b1 = take(d.hidden);
        let w2 = take(d.map_len() * d.hidden);
        let b2 = take(d.map_len());
        let bn_scale = [take(d.channels), take(d.channels), take(d.channels)];
        let bn_shift = [take(d.channels), take(d.channels), take(d.channels)];
        Self {
            w1,
            b1,
            w2,
            b2,
            bn_scale,
            bn_shift,
            len: at,
        }
    }
}

/// Encoder weights plus the non-trainable batch-norm statistics.
///
/// Trainable tensors live in one flat vector (`theta`) in the order
/// W1, b1, W2, b2, bn scale (global, up, down), bn shift (global, up, down).
/// W1 is `hidden x input` and W2 is `map_len x hidden`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dims: EncoderDims,
    layout: ParamLayout,
    theta: Vec<f64>,
    pub running_mean: [Vec<f64>; 3],
    pub running_var: [Vec<f64>; 3],
    pub gem_p: f64,
    /// When false, batch norm is replaced by the identity.
    pub batch_norm: bool,
}

impl EncoderParams {
    /// All-zero weights, unit bn scale, zero shift, unit running variance.
    pub fn zeros(dims: EncoderDims) -> Result<Self> {
        dims.validate()?;
        let layout = ParamLayout::new(&dims);
        let mut theta = vec![0.0; layout.len];
        for r in &layout.bn_scale {
            theta[r.clone()].fill(1.0);
        }
        Ok(Self {
            dims,
            theta,
            layout,
            running_mean: std::array::from_fn(|_| vec![0.0; dims.channels]),
            running_var: std::array::from_fn(|_| vec![1.0; dims.channels]),
            gem_p: DEFAULT_GEM_P,
            batch_norm: true,
        })
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let n1 = Normal::new(0.0, (2.0 / dims.input as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, (2.0 / dims.hidden as f64).sqrt()).expect("valid std");
        for w in &mut p.theta[p.layout.w1.clone()] {
            *w = n1.sample(rng);
        }
        for w in &mut p.theta[p.layout.w2.clone()] {
            *w = n2.sample(rng);
        }
        Ok(p)
    }

    pub fn from_parts(
        dims: EncoderDims,
        theta: Vec<f64>,
        running_mean: [Vec<f64>; 3],
        running_var: [Vec<f64>; 3],
        gem_p: f64,
    ) -> Result<Self> {
        dims.validate()?;
        let layout = ParamLayout::new(&dims);
        if theta.len() != layout.len {
            return Err(Error::DimensionMismatch {
                expected: layout.len,
                got: theta.len(),
            });
        }
        for v in running_mean.iter().chain(&running_var) {
            if v.len() != dims.channels {
                return Err(Error::DimensionMismatch {
                    expected: dims.channels,
                    got: v.len(),
                });
            }
        }
        if running_var.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter("running variance must be positive".into()));
        }
        if !(gem_p >= 1.0) {
            return Err(Error::InvalidParameter(format!("gem exponent {gem_p} < 1")));
        }
        Ok(Self {
            dims,
            layout,
            theta,
            running_mean,
            running_var,
            gem_p,
            batch_norm: true,
        })
    }

    pub fn dims(&self) -> &EncoderDims {
        &self.dims
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_trainable(&self) -> usize {
        self.theta.len()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
            && self.running_mean.iter().flatten().all(|v| v.is_finite())
            && self.running_var.iter().flatten().all(|v| v.is_finite() && *v > 0.0)
    }

    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for v in &self.theta {
            mix(v.to_bits());
        }
        for v in self.running_mean.iter().chain(&self.running_var).flatten() {
            mix(v.to_bits());
        }
        mix(self.gem_p.to_bits());
        mix(self.batch_norm as u64);
        h
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// statistics with momentum [`BN_MOMENTUM`].
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let Some(stats) = cache.batch_stats() else {
            return;
        };
        for (b, (mean, var)) in stats.iter().enumerate() {
            for c in 0..self.dims.channels {
                self.running_mean[b][c] =
                    (1.0 - BN_MOMENTUM) * self.running_mean[b][c] + BN_MOMENTUM * mean[c];
                self.running_var[b][c] =
                    (1.0 - BN_MOMENTUM) * self.running_var[b][c] + BN_MOMENTUM * var[c];
            }
        }
    }

    /// Sets the running statistics to the pooled-feature statistics of `inputs`.
    pub fn calibrate_batch_norm(&mut self, inputs: &[&[f64]]) -> Result<()> {
        if !self.batch_norm || inputs.len() < 2 {
            return Ok(());
        }
        let pooled = pool_all(self, inputs)?;
        for b in 0..3 {
            let (mean, var) = column_stats(&pooled[b], self.dims.channels, true);
            self.running_mean[b] = mean;
            self.running_var[b] = var.into_iter().map(|v| v.max(BN_EPS)).collect();
        }
        Ok(())
    }
}

/// Gradients in the same flat layout as [`EncoderParams::theta`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub flat: Vec<f64>,
}

/// Post-activation spatial grid of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * channels {
            return Err(Error::DimensionMismatch {
                expected: rows * cols * channels,
                got: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            channels,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let start = (r * self.cols + c) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Channel vectors of every cell in the given row range, row-major.
    pub fn region(&self, rows: Range<usize>) -> Vec<&[f64]> {
        rows.flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| self.cell(r, c))
            .collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Row ranges of the top and bottom halves of a map with `rows` rows.
pub fn split_rows(rows: usize) -> Result<(Range<usize>, Range<usize>)> {
    if rows % 2 != 0 {
        return Err(Error::OddRowCount(rows));
    }
    Ok((0..rows / 2, rows / 2..rows))
}

/// Splits a feature map horizontally into its up and down halves.
pub fn split_feature_map(map: &FeatureMap) -> Result<(Vec<&[f64]>, Vec<&[f64]>)> {
    let (up, down) = split_rows(map.rows)?;
    Ok((map.region(up), map.region(down)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleEmbedding {
    pub global: Vec<f64>,
    pub up: Vec<f64>,
    pub down: Vec<f64>,
}

impl MultiScaleEmbedding {
    pub fn branch(&self, b: Branch) -> &[f64] {
        match b {
            Branch::Global => &self.global,
            Branch::Up => &self.up,
            Branch::Down => &self.down,
        }
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut Vec<f64> {
        match b {
            Branch::Global => &mut self.global,
            Branch::Up => &mut self.up,
            Branch::Down => &mut self.down,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            global: vec![0.0; dim],
            up: vec![0.0; dim],
            down: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone)]
struct InstanceCache {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    map: FeatureMap,
    /// GEM outputs per branch.
    pooled: [Vec<f64>; 3],
    /// Batch-norm outputs per branch (pre-normalization).
    bn_out: [Vec<f64>; 3],
    /// L2 norms of `bn_out`.
    bn_norm: [f64; 3],
    embedding: MultiScaleEmbedding,
}

#[derive(Debug, Clone)]
struct BranchNorm {
    /// Normalized activations, `batch x channels` row-major.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    /// Unbiased batch variance, used for running statistics.
    batch_var: Vec<f64>,
}

/// Everything `backward` needs from a `forward_batch` call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    dims: EncoderDims,
    mode: Mode,
    batch_norm: bool,
    instances: Vec<InstanceCache>,
    norms: Option<[BranchNorm; 3]>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn feature_map(&self, i: usize) -> &FeatureMap {
        &self.instances[i].map
    }

    pub fn pooled(&self, i: usize, b: Branch) -> &[f64] {
        &self.instances[i].pooled[b.index()]
    }

    pub fn embedding(&self, i: usize) -> &MultiScaleEmbedding {
        &self.instances[i].embedding
    }

    fn batch_stats(&self) -> Option<[(&[f64], &[f64]); 3]> {
        if self.mode != Mode::Train || !self.batch_norm || self.instances.len() < 2 {
            return None;
        }
        self.norms
            .as_ref()
            .map(|n| std::array::from_fn(|b| (n[b].batch_mean.as_slice(), n[b].batch_var.as_slice())))
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn check_input(p: &EncoderParams, x: &[f64]) -> Result<()> {
    if x.len() != p.dims.input {
        return Err(Error::DimensionMismatch {
            expected: p.dims.input,
            got: x.len(),
        });
    }
    Ok(())
}

/// Perceptron + reshape. Returns `(hidden_pre, hidden, map)`.
fn trunk(p: &EncoderParams, x: &[f64]) -> (Vec<f64>, Vec<f64>, FeatureMap) {
    let d = &p.dims;
    let w1 = &p.theta[p.layout.w1.clone()];
    let b1 = &p.theta[p.layout.b1.clone()];
    let w2 = &p.theta[p.layout.w2.clone()];
    let b2 = &p.theta[p.layout.b2.clone()];
    let hidden_pre: Vec<f64> = (0..d.hidden)
        .map(|h| dot(&w1[h * d.input..(h + 1) * d.input], x) + b1[h])
        .collect();
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| relu(v)).collect();
    let out: Vec<f64> = (0..d.map_len())
        .map(|o| relu(dot(&w2[o * d.hidden..(o + 1) * d.hidden], &hidden) + b2[o]))
        .collect();
    let map = FeatureMap {
        rows: d.rows,
        cols: d.cols,
        channels: d.channels,
        data: out,
    };
    (hidden_pre, hidden, map)
}

fn branch_rows(d: &EncoderDims, b: Branch) -> Range<usize> {
    let half = d.rows / 2;
    match b {
        Branch::Global => 0..d.rows,
        Branch::Up => 0..half,
        Branch::Down => half..d.rows,
    }
}

/// GEM pooling of the three branch regions.
fn pool_branches(p: &EncoderParams, map: &FeatureMap) -> Result<[Vec<f64>; 3]> {
    let mut out: [Vec<f64>; 3] = Default::default();
    for b in Branch::ALL {
        let region = map.region(branch_rows(&p.dims, b));
        // A region with every activation at the clamp floor carries no direction.
        if region.iter().all(|cell| cell.iter().all(|&x| x < GEM_EPS)) {
            return Err(Error::DegenerateVector);
        }
        out[b.index()] = crate::numerics::gem_pool(&region, p.gem_p)?;
    }
    Ok(out)
}

/// Pooled features of every input, per branch, flattened `n x channels`.
fn pool_all(p: &EncoderParams, inputs: &[&[f64]]) -> Result<[Vec<f64>; 3]> {
    let mut out: [Vec<f64>; 3] = Default::default();
    for x in inputs {
        check_input(p, x)?;
        let (_, _, map) = trunk(p, x);
        let pooled = pool_branches(p, &map)?;
        for b in 0..3 {
            out[b].extend_from_slice(&pooled[b]);
        }
    }
    Ok(out)
}

/// Per-column mean and variance of an `n x c` row-major block.
fn column_stats(data: &[f64], c: usize, unbiased: bool) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() / c;
    let mut mean = vec![0.0; c];
    for row in data.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for row in data.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let denom = if unbiased && n > 1 { n - 1 } else { n } as f64;
    var.iter_mut().for_each(|s| *s /= denom);
    (mean, var)
}

/// Forward pass over a batch.
///
/// In [`Mode::Train`] batch norm uses the statistics of this batch (a batch
/// of one therefore normalizes every channel to the shift and usually
/// fails with a degenerate vector); in [`Mode::Eval`] it uses the running
/// statistics and instances are independent.
pub fn forward_batch(
    p: &EncoderParams,
    inputs: &[&[f64]],
    mode: Mode,
) -> Result<(Vec<MultiScaleEmbedding>, ForwardCache)> {
    let d = p.dims;
    d.validate()?;
    let mut instances = Vec::with_capacity(inputs.len());
    for x in inputs {
        check_input(p, x)?;
        let (hidden_pre, hidden, map) = trunk(p, x);
        let pooled = pool_branches(p, &map)?;
        instances.push(InstanceCache {
            input: x.to_vec(),
            hidden_pre,
            hidden,
            map,
            bn_out: pooled.clone(),
            pooled,
            bn_norm: [0.0; 3],
            embedding: MultiScaleEmbedding::zeros(d.channels),
        });
    }
    let n = instances.len();
    let c = d.channels;

    let mut norms = None;
    if p.batch_norm {
        let mut per_branch: Vec<BranchNorm> = Vec::with_capacity(3);
        for b in 0..3 {
            let scale = &p.theta[p.layout.bn_scale[b].clone()];
            let shift = &p.theta[p.layout.bn_shift[b].clone()];
            let (mean, var, batch_var) = match mode {
                Mode::Train => {
                    let block: Vec<f64> =
                        instances.iter().flat_map(|i| i.pooled[b].iter().copied()).collect();
                    let (mean, var) = column_stats(&block, c, false);
                    let (_, unbiased) = column_stats(&block, c, true);
                    (mean, var, unbiased)
                }
                Mode::Eval => (
                    p.running_mean[b].clone(),
                    p.running_var[b].clone(),
                    p.running_var[b].clone(),
                ),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = vec![0.0; n * c];
            for (i, inst) in instances.iter_mut().enumerate() {
                for ch in 0..c {
                    let xh = (inst.pooled[b][ch] - mean[ch]) * inv_std[ch];
                    xhat[i * c + ch] = xh;
                    inst.bn_out[b][ch] = scale[ch] * xh + shift[ch];
                }
            }
            per_branch.push(BranchNorm {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var,
            });
        }
        norms = Some(per_branch.try_into().expect("three branches"));
    }

    let mut out = Vec::with_capacity(n);
    for inst in &mut instances {
        for b in Branch::ALL {
            let v = &inst.bn_out[b.index()];
            let nv = norm(v);
            if !(nv > NORM_EPS) {
                return Err(Error::DegenerateVector);
            }
            inst.bn_norm[b.index()] = nv;
            *inst.embedding.branch_mut(b) = v.iter().map(|x| x / nv).collect();
        }
        out.push(inst.embedding.clone());
    }

    let cache = ForwardCache {
        fingerprint: p.fingerprint(),
        dims: d,
        mode,
        batch_norm: p.batch_norm,
        instances,
        norms,
    };
    Ok((out, cache))
}

/// Single-instance forward. See [`forward_batch`] for the train-mode caveat.
pub fn forward(
    p: &EncoderParams,
    input: &[f64],
    mode: Mode,
) -> Result<(MultiScaleEmbedding, ForwardCache)> {
    let (mut e, cache) = forward_batch(p, &[input], mode)?;
    Ok((e.pop().expect("one instance"), cache))
}

/// Eval-mode embeddings of many inputs.
pub fn embed_all(p: &EncoderParams, inputs: &[&[f64]]) -> Result<Vec<MultiScaleEmbedding>> {
    inputs
        .iter()
        .map(|x| forward(p, x, Mode::Eval).map(|(e, _)| e))
        .collect()
}

/// Reverse-mode gradients of a scalar loss given its gradients with respect
/// to every embedding produced by the forward call that built `cache`.
pub fn backward(
    p: &EncoderParams,
    cache: &ForwardCache,
    grad_embeddings: &[MultiScaleEmbedding],
) -> Result<EncoderGrads> {
    if cache.fingerprint != p.fingerprint() || cache.dims != p.dims || cache.batch_norm != p.batch_norm
    {
        return Err(Error::StaleCache);
    }
    if grad_embeddings.len() != cache.instances.len() {
        return Err(Error::DimensionMismatch {
            expected: cache.instances.len(),
            got: grad_embeddings.len(),
        });
    }
    let d = p.dims;
    let c = d.channels;
    let n = cache.instances.len();
    let lay = &p.layout;
    let mut g = vec![0.0; lay.len];

    // Through L2 normalization: d(bn_out) = (dz - z (z.dz)) / |bn_out|
    let mut d_bn_out = vec![[vec![0.0; c], vec![0.0; c], vec![0.0; c]]; n];
    for (i, inst) in cache.instances.iter().enumerate() {
        for b in Branch::ALL {
            let gz = grad_embeddings[i].branch(b);
            if gz.len() != c {
                return Err(Error::DimensionMismatch {
                    expected: c,
                    got: gz.len(),
                });
            }
            let z = inst.embedding.branch(b);
            let zg = dot(z, gz);
            let inv = 1.0 / inst.bn_norm[b.index()];
            for ch in 0..c {
                d_bn_out[i][b.index()][ch] = (gz[ch] - z[ch] * zg) * inv;
            }
        }
    }

    // Through batch norm.
    let mut d_pooled = d_bn_out.clone();
    if let Some(norms) = &cache.norms {
        for b in 0..3 {
            let bn = &norms[b];
            let scale = &p.theta[lay.bn_scale[b].clone()];
            let (s0, h0) = (lay.bn_scale[b].start, lay.bn_shift[b].start);
            for i in 0..n {
                for ch in 0..c {
                    let dy = d_bn_out[i][b][ch];
                    g[s0 + ch] += dy * bn.xhat[i * c + ch];
                    g[h0 + ch] += dy;
                }
            }
            match cache.mode {
                Mode::Eval => {
                    for i in 0..n {
                        for ch in 0..c {
                            d_pooled[i][b][ch] = d_bn_out[i][b][ch] * scale[ch] * bn.inv_std[ch];
                        }
                    }
                }
                Mode::Train => {
                    let nf = n as f64;
                    for ch in 0..c {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in 0..n {
                            let dxhat = d_bn_out[i][b][ch] * scale[ch];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * bn.xhat[i * c + ch];
                        }
                        for i in 0..n {
                            let dxhat = d_bn_out[i][b][ch] * scale[ch];
                            d_pooled[i][b][ch] = bn.inv_std[ch] / nf
                                * (nf * dxhat - sum_dxhat - bn.xhat[i * c + ch] * sum_dxhat_xhat);
                        }
                    }
                }
            }
        }
    }

    let w2 = &p.theta[lay.w2.clone()];
    let pexp = p.gem_p;
    let mut d_map = vec![0.0; d.map_len()];
    let mut d_hidden = vec![0.0; d.hidden];
    for (i, inst) in cache.instances.iter().enumerate() {
        // Through GEM: d out_c / d x_sc = out_c^(1-p) x_sc^(p-1) / |S|, zero where clamped.
        d_map.fill(0.0);
        for b in Branch::ALL {
            let rows = branch_rows(&d, b);
            let cells = (rows.len() * d.cols) as f64;
            let pooled = &inst.pooled[b.index()];
            let upstream = &d_pooled[i][b.index()];
            for r in rows {
                for col in 0..d.cols {
                    let base = (r * d.cols + col) * c;
                    for ch in 0..c {
                        let x = inst.map.data[base + ch];
                        if x < GEM_EPS {
                            continue;
                        }
                        let local = pooled[ch].powf(1.0 - pexp) * x.powf(pexp - 1.0) / cells;
                        d_map[base + ch] += upstream[ch] * local;
                    }
                }
            }
        }
        // Output relu and second affine layer.
        d_hidden.fill(0.0);
        for o in 0..d.map_len() {
            if inst.map.data[o] <= 0.0 {
                continue;
            }
            let dpre = d_map[o];
            if dpre == 0.0 {
                continue;
            }
            g[lay.b2.start + o] += dpre;
            let row = lay.w2.start + o * d.hidden;
            for h in 0..d.hidden {
                g[row + h] += dpre * inst.hidden[h];
                d_hidden[h] += dpre * w2[o * d.hidden + h];
            }
        }
        // Hidden relu and first affine layer.
        for h in 0..d.hidden {
            if inst.hidden_pre[h] <= 0.0 {
                continue;
            }
            let dpre = d_hidden[h];
            g[lay.b1.start + h] += dpre;
            let row = lay.w1.start + h * d.input;
            for k in 0..d.input {
                g[row + k] += dpre * inst.input[k];
            }
        }
    }
    Ok(EncoderGrads { flat: g })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> EncoderDims {
        EncoderDims {
            input: 5,
            hidden: 7,
            rows: 4,
            cols: 2,
            channels: 4,
        }
    }

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| (0..dim).map(|_| normal.sample(rng)).collect()).collect()
    }

    fn perturb_bn(p: &mut EncoderParams, rng: &mut ChaCha8Rng) {
        let lay = p.layout.clone();
        for b in 0..3 {
            for v in &mut p.theta[lay.bn_scale[b].clone()] {
                *v = rng.random_range(0.5..1.5);
            }
            for v in &mut p.theta[lay.bn_shift[b].clone()] {
                *v = rng.random_range(-0.5..0.5);
            }
            for v in &mut p.running_mean[b] {
                *v = rng.random_range(0.0..1.0);
            }
            for v in &mut p.running_var[b] {
                *v = rng.random_range(0.2..2.0);
            }
        }
        for v in &mut p.theta[lay.b2.clone()] {
            *v = rng.random_range(0.0..0.3);
        }
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn split_examples() {
        let map = FeatureMap::new(4, 1, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (up, down) = split_feature_map(&map).unwrap();
        assert_eq!(up, vec![&[0.0][..], &[1.0][..]]);
        assert_eq!(down, vec![&[2.0][..], &[3.0][..]]);
        let map = FeatureMap::new(2, 1, 1, vec![5.0, 6.0]).unwrap();
        let (up, down) = split_feature_map(&map).unwrap();
        assert_eq!((up, down), (vec![&[5.0][..]], vec![&[6.0][..]]));
        let map = FeatureMap::new(3, 1, 1, vec![0.0; 3]).unwrap();
        assert_eq!(split_feature_map(&map).unwrap_err().to_string(), "odd row count (3)");
    }

    #[test]
    fn odd_rows_rejected_at_construction() {
        let dims = EncoderDims {
            rows: 3,
            ..small_dims()
        };
        assert!(matches!(EncoderParams::zeros(dims), Err(Error::OddRowCount(3))));
    }

    #[test]
    fn zero_params_degenerate() {
        let mut p = EncoderParams::zeros(small_dims()).unwrap();
        p.batch_norm = false;
        let err = forward(&p, &[1.0; 5], Mode::Eval).unwrap_err();
        assert_eq!(err.to_string(), "degenerate vector");
    }

    #[test]
    fn constant_map_gives_equal_branches() {
        let mut p = EncoderParams::zeros(small_dims()).unwrap();
        p.batch_norm = false;
        let lay = p.layout.clone();
        // hidden unit 0 = relu(x0); every output cell copies it.
        p.theta[lay.w1.start] = 1.0;
        let h = p.dims.hidden;
        for o in 0..p.dims.map_len() {
            p.theta[lay.w2.start + o * h] = 1.0;
        }
        let (e, _) = forward(&p, &[2.0, 0.0, 0.0, 0.0, 0.0], Mode::Eval).unwrap();
        assert_eq!(e.global, e.up);
        assert_eq!(e.global, e.down);
        assert!((norm(&e.global) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pooling_regions_match_row_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = EncoderParams::init(small_dims(), &mut rng).unwrap();
        perturb_bn(&mut p, &mut rng);
        let x = random_inputs(&mut rng, 1, 5).pop().unwrap();
        let (_, cache) = forward(&p, &x, Mode::Eval).unwrap();
        let map = cache.feature_map(0);
        let d = p.dims;
        // Brute-force: enumerate cells by explicit row membership.
        let pool = |keep: &dyn Fn(usize) -> bool| -> Vec<f64> {
            let mut acc = vec![0.0; d.channels];
            let mut count = 0.0;
            for r in 0..d.rows {
                if !keep(r) {
                    continue;
                }
                for c in 0..d.cols {
                    count += 1.0;
                    for ch in 0..d.channels {
                        let v = map.as_slice()[(r * d.cols + c) * d.channels + ch].max(GEM_EPS);
                        acc[ch] += v.powf(p.gem_p);
                    }
                }
            }
            acc.iter().map(|a| (a / count).powf(1.0 / p.gem_p)).collect()
        };
        let up = pool(&|r| r < d.rows / 2);
        let down = pool(&|r| r >= d.rows / 2);
        let global = pool(&|_| true);
        for (a, b) in cache.pooled(0, Branch::Up).iter().zip(&up) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in cache.pooled(0, Branch::Down).iter().zip(&down) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in cache.pooled(0, Branch::Global).iter().zip(&global) {
            assert!((a - b).abs() < 1e-12);
        }
        // The two halves together are the global region.
        let (u, dn) = split_feature_map(map).unwrap();
        let joined: Vec<&[f64]> = u.into_iter().chain(dn).collect();
        assert_eq!(joined, map.region(0..d.rows));
    }

    #[test]
    fn embeddings_unit_norm_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = EncoderParams::init(EncoderDims::default(), &mut rng).unwrap();
        let xs = random_inputs(&mut rng, 6, 32);
        let (a, _) = forward_batch(&p, &refs(&xs), Mode::Train).unwrap();
        let (b, _) = forward_batch(&p, &refs(&xs), Mode::Train).unwrap();
        assert_eq!(a, b);
        for e in &a {
            for br in Branch::ALL {
                assert!((norm(e.branch(br)) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn down_half_perturbation_leaves_up_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = EncoderParams::init(small_dims(), &mut rng).unwrap();
        perturb_bn(&mut p, &mut rng);
        let x = random_inputs(&mut rng, 1, 5).pop().unwrap();
        let (before, _) = forward(&p, &x, Mode::Eval).unwrap();
        // Bias of the down-half output cells only affects those rows.
        let d = p.dims;
        let half_start = d.rows / 2 * d.cols * d.channels;
        let b2 = p.layout.b2.clone();
        for o in half_start..d.map_len() {
            p.theta[b2.start + o] += 0.37;
        }
        let (after, _) = forward(&p, &x, Mode::Eval).unwrap();
        assert_eq!(before.up, after.up);
        assert_ne!(before.down, after.down);
        assert_ne!(before.global, after.global);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = EncoderParams::init(small_dims(), &mut rng).unwrap();
        let xs = random_inputs(&mut rng, 3, 5);
        let (_, cache) = forward_batch(&p, &refs(&xs), Mode::Train).unwrap();
        let zeros = vec![MultiScaleEmbedding::zeros(4); 3];
        let g = backward(&p, &cache, &zeros).unwrap();
        assert!(g.flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dead_second_layer_blocks_w1_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = EncoderParams::init(small_dims(), &mut rng).unwrap();
        let lay = p.layout.clone();
        p.theta[lay.w2.clone()].fill(0.0);
        p.theta[lay.b2.clone()].fill(0.5);
        p.batch_norm = false;
        let x = random_inputs(&mut rng, 1, 5).pop().unwrap();
        let (_, cache) = forward(&p, &x, Mode::Eval).unwrap();
        let mut up = MultiScaleEmbedding::zeros(4);
        up.global = vec![1.0, -2.0, 0.5, 0.3];
        up.down = vec![0.2, 0.1, -0.4, 1.0];
        let g = backward(&p, &cache, &[up]).unwrap();
        assert!(g.flat[lay.w1.clone()].iter().all(|&v| v == 0.0));
        assert!(g.flat[lay.b1.clone()].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = EncoderParams::init(small_dims(), &mut rng).unwrap();
        let xs = random_inputs(&mut rng, 2, 5);
        let (_, cache) = forward_batch(&p, &refs(&xs), Mode::Train).unwrap();
        p.theta_mut()[0] += 1.0;
        let zeros = vec![MultiScaleEmbedding::zeros(4); 2];
        assert!(matches!(backward(&p, &cache, &zeros), Err(Error::StaleCache)));
    }

    #[test]
    fn dimension_mismatch() {
        let p = EncoderParams::zeros(small_dims()).unwrap();
        assert!(matches!(
            forward(&p, &[1.0; 3], Mode::Eval),
            Err(Error::DimensionMismatch { expected: 5, got: 3 })
        ));
    }

    fn linear_probe_check(mode: Mode, batch_norm: bool, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EncoderParams::init(small_dims(), &mut rng).unwrap();
        perturb_bn(&mut p, &mut rng);
        p.batch_norm = batch_norm;
        let xs = random_inputs(&mut rng, 3, 5);
        let probes: Vec<MultiScaleEmbedding> = (0..3)
            .map(|_| {
                let mut e = MultiScaleEmbedding::zeros(4);
                for b in Branch::ALL {
                    *e.branch_mut(b) = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                }
                e
            })
            .collect();
        let loss = |params: &EncoderParams| -> f64 {
            let (es, _) = forward_batch(params, &refs(&xs), mode).unwrap();
            es.iter()
                .zip(&probes)
                .map(|(e, g)| Branch::ALL.iter().map(|&b| dot(e.branch(b), g.branch(b))).sum::<f64>())
                .sum()
        };
        let (_, cache) = forward_batch(&p, &refs(&xs), mode).unwrap();
        let analytic = backward(&p, &cache, &probes).unwrap().flat;
        let base = p.clone();
        let numeric = finite_diff_gradient(
            |theta| {
                let mut q = base.clone();
                q.theta_mut().copy_from_slice(theta);
                loss(&q)
            },
            p.theta(),
            1e-5,
        );
        max_relative_error(&analytic, &numeric)
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..4 {
            for (mode, bn) in [(Mode::Train, true), (Mode::Eval, true), (Mode::Eval, false)] {
                let err = linear_probe_check(mode, bn, seed);
                assert!(err < 1e-4, "seed {seed} {mode:?} bn={bn}: rel err {err}");
            }
        }
    }

    #[test]
    fn running_stats_update_and_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = EncoderParams::init(small_dims(), &mut rng).unwrap();
        let xs = random_inputs(&mut rng, 8, 5);
        p.calibrate_batch_norm(&refs(&xs)).unwrap();
        let calibrated = p.running_mean.clone();
        let (_, cache) = forward_batch(&p, &refs(&xs), Mode::Train).unwrap();
        p.update_running_stats(&cache);
        // Same batch: the mean is a fixed point.
        for b in 0..3 {
            for (a, c) in p.running_mean[b].iter().zip(&calibrated[b]) {
                assert!((a - c).abs() < 1e-12);
            }
        }
        assert!(p.is_finite());
    }
}
