//! Score-parametrized weights, the gradient of the log-likelihood, and
//! stochastic gradient ascent.
//!
//! Weights live in an unconstrained score space: `w = softmax(s)` over the
//! child state for every (kernel offset, parent state) pair, and over the
//! root states for the prior. Gradients are first taken with respect to the
//! linear weights during the reverse sweep, then pushed through the softmax
//! Jacobian once per batch (both steps are linear in the accumulated
//! gradient, so the order does not matter).
//!
//! Table layout, used everywhere: kernel `l` is a flat slice indexed
//! `(k * G + g) * F + f` with `k` the kernel offset, `g` the parent state,
//! `f` the child state; each `(k, g)` row is a contiguous distribution over
//! `f`. The root prior is a plain vector over root states.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{forward_pass, init_leaf_messages, log_likelihood, ObservationGrid};
use crate::seed::{stream_rng, substream_rng, STREAM_INIT, STREAM_SHUFFLE};
use crate::topology::ModelTopology;

fn kernel_table_len(topo: &ModelTopology, l: usize) -> usize {
    topo.kernel(l).offsets() * topo.layer(l).states * topo.layer(l + 1).states
}

/// Unconstrained scores; softmax of each row gives the probability tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    kernel_scores: Vec<Vec<f64>>,
    root_scores: Vec<f64>,
}

impl Parameters {
    /// All scores zero: every table uniform.
    pub fn zero_init(topo: &ModelTopology) -> Self {
        Parameters {
            kernel_scores: (0..topo.num_layers() - 1)
                .map(|l| vec![0.0; kernel_table_len(topo, l)])
                .collect(),
            root_scores: vec![0.0; topo.layer(topo.num_layers() - 1).states],
        }
    }

    /// Scores i.i.d. uniform on [-0.5, 0.5] from the init stream of
    /// `master_seed`. Fill order: kernels bottom-up, each in index order,
    /// then the root scores.
    pub fn random_init(topo: &ModelTopology, master_seed: u64) -> Self {
        let mut rng = stream_rng(master_seed, STREAM_INIT);
        let mut params = Parameters::zero_init(topo);
        for table in &mut params.kernel_scores {
            for s in table.iter_mut() {
                *s = rng.random_range(-0.5..0.5);
            }
        }
        for s in &mut params.root_scores {
            *s = rng.random_range(-0.5..0.5);
        }
        params
    }

    pub fn kernel_scores(&self, l: usize) -> &[f64] {
        &self.kernel_scores[l]
    }

    pub fn kernel_scores_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.kernel_scores[l]
    }

    pub fn root_scores(&self) -> &[f64] {
        &self.root_scores
    }

    pub fn root_scores_mut(&mut self) -> &mut [f64] {
        &mut self.root_scores
    }

    pub fn check_shapes(&self, topo: &ModelTopology) -> Result<()> {
        if self.kernel_scores.len() != topo.num_layers() - 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} kernel tables for a {}-layer topology",
                self.kernel_scores.len(),
                topo.num_layers()
            )));
        }
        for l in 0..self.kernel_scores.len() {
            if self.kernel_scores[l].len() != kernel_table_len(topo, l) {
                return Err(Error::ShapeMismatch(format!(
                    "kernel {} has {} scores, topology wants {}",
                    l,
                    self.kernel_scores[l].len(),
                    kernel_table_len(topo, l)
                )));
            }
        }
        if self.root_scores.len() != topo.layer(topo.num_layers() - 1).states {
            return Err(Error::ShapeMismatch(format!(
                "root has {} scores, topology wants {}",
                self.root_scores.len(),
                topo.layer(topo.num_layers() - 1).states
            )));
        }
        Ok(())
    }

    /// Total score count (kernels in order, then root).
    pub fn flat_len(&self) -> usize {
        self.kernel_scores.iter().map(Vec::len).sum::<usize>() + self.root_scores.len()
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        let mut i = i;
        for table in &self.kernel_scores {
            if i < table.len() {
                return table[i];
            }
            i -= table.len();
        }
        self.root_scores[i]
    }

    pub fn add_flat(&mut self, i: usize, delta: f64) {
        let mut i = i;
        for table in &mut self.kernel_scores {
            if i < table.len() {
                table[i] += delta;
                return;
            }
            i -= table.len();
        }
        self.root_scores[i] += delta;
    }

    fn all_finite(&self) -> bool {
        self.kernel_scores
            .iter()
            .all(|t| t.iter().all(|s| s.is_finite()))
            && self.root_scores.iter().all(|s| s.is_finite())
    }
}

/// Normalized probability tables derived from [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    kernel: Vec<Vec<f64>>,
    root: Vec<f64>,
}

fn softmax_rows(scores: &[f64], row_len: usize, out: &mut [f64], flat_base: usize) -> Result<()> {
    for (row_idx, (src, dst)) in scores
        .chunks_exact(row_len)
        .zip(out.chunks_exact_mut(row_len))
        .enumerate()
    {
        let mut max = f64::NEG_INFINITY;
        for (j, &s) in src.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFiniteScore(flat_base + row_idx * row_len + j));
            }
            max = max.max(s);
        }
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(())
}

impl Weights {
    /// Max-shifted softmax per (kernel offset, parent state) row, then the
    /// root row. Rejects non-finite scores with their flat index.
    pub fn from_scores(params: &Parameters, topo: &ModelTopology) -> Result<Self> {
        params.check_shapes(topo)?;
        let mut kernel = Vec::with_capacity(params.kernel_scores.len());
        let mut flat_base = 0;
        for (l, scores) in params.kernel_scores.iter().enumerate() {
            let f_states = topo.layer(l).states;
            let mut out = vec![0.0; scores.len()];
            softmax_rows(scores, f_states, &mut out, flat_base)?;
            flat_base += scores.len();
            kernel.push(out);
        }
        let mut root = vec![0.0; params.root_scores.len()];
        softmax_rows(
            &params.root_scores,
            params.root_scores.len(),
            &mut root,
            flat_base,
        )?;
        Ok(Weights { kernel, root })
    }

    /// Assemble weights directly, for sub-models with an explicit prior
    /// (the prior may contain exact zeros, unlike softmax output).
    pub(crate) fn for_subtree(kernel: Vec<Vec<f64>>, root: Vec<f64>) -> Self {
        Weights { kernel, root }
    }

    /// Kernel `l` table, flat `(k * G + g) * F + f`.
    pub fn kernel(&self, l: usize) -> &[f64] {
        &self.kernel[l]
    }

    /// Root prior over root states.
    pub fn root(&self) -> &[f64] {
        &self.root
    }

    pub fn check_shapes(&self, topo: &ModelTopology) -> Result<()> {
        if self.kernel.len() != topo.num_layers() - 1 {
            return Err(Error::ShapeMismatch("kernel table count".into()));
        }
        for l in 0..self.kernel.len() {
            if self.kernel[l].len() != kernel_table_len(topo, l) {
                return Err(Error::ShapeMismatch(format!("kernel {} table length", l)));
            }
        }
        if self.root.len() != topo.layer(topo.num_layers() - 1).states {
            return Err(Error::ShapeMismatch("root prior length".into()));
        }
        Ok(())
    }
}

/// Free-function form of [`Weights::from_scores`].
pub fn weights_from_scores(params: &Parameters, topo: &ModelTopology) -> Result<Weights> {
    Weights::from_scores(params, topo)
}

/// Partials of the log-likelihood with respect to scores; same shapes as
/// [`Parameters`]. Each (kernel offset, parent state) row sums to zero, as
/// does the root row.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    kernel: Vec<Vec<f64>>,
    root: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros(topo: &ModelTopology) -> Self {
        GradientBuffer {
            kernel: (0..topo.num_layers() - 1)
                .map(|l| vec![0.0; kernel_table_len(topo, l)])
                .collect(),
            root: vec![0.0; topo.layer(topo.num_layers() - 1).states],
        }
    }

    pub fn kernel(&self, l: usize) -> &[f64] {
        &self.kernel[l]
    }

    pub fn root(&self) -> &[f64] {
        &self.root
    }

    /// Rebuild from the flat layout of [`GradientBuffer::flatten`].
    pub fn from_flat(topo: &ModelTopology, flat: &[f64]) -> Result<Self> {
        let mut buf = GradientBuffer::zeros(topo);
        let expected = buf.kernel.iter().map(Vec::len).sum::<usize>() + buf.root.len();
        if flat.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for table in &mut buf.kernel {
            let len = table.len();
            table.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        buf.root.copy_from_slice(&flat[offset..]);
        Ok(buf)
    }

    /// Kernels in order, then root; matches `Parameters::get_flat` indexing.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(
            self.kernel.iter().map(Vec::len).sum::<usize>() + self.root.len(),
        );
        for t in &self.kernel {
            out.extend_from_slice(t);
        }
        out.extend_from_slice(&self.root);
        out
    }
}

/// Linear-domain gradient with respect to the weights themselves; batch
/// accumulator that precedes the softmax Jacobian.
struct WeightGrad {
    kernel: Vec<Vec<f64>>,
    root: Vec<f64>,
}

impl WeightGrad {
    fn zeros(topo: &ModelTopology) -> Self {
        WeightGrad {
            kernel: (0..topo.num_layers() - 1)
                .map(|l| vec![0.0; kernel_table_len(topo, l)])
                .collect(),
            root: vec![0.0; topo.layer(topo.num_layers() - 1).states],
        }
    }

    fn add(&mut self, other: &WeightGrad) {
        for (a, b) in self.kernel.iter_mut().zip(other.kernel.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
        for (x, y) in self.root.iter_mut().zip(other.root.iter()) {
            *x += *y;
        }
    }

    fn scale(&mut self, c: f64) {
        for t in &mut self.kernel {
            for x in t.iter_mut() {
                *x *= c;
            }
        }
        for x in &mut self.root {
            *x *= c;
        }
    }
}

/// One reverse sweep: run the forward pass, then push the root posterior
/// back down, accumulating `d logL / d w` into `wgrad`. Returns the
/// log-likelihood (same code path as the inference module, so the values
/// agree exactly).
///
/// Adjoint rules for one parent position with children `(c, k)`, derived
/// from `u_p[g] = sum over (c,k) of logsumexp_f(log w[k][g][f] + u_c[f])`
/// written with max-scaled child values `v` and row mixes
/// `a = sum_f w[k][g][f] v[f]`:
///   d u_p[g] / d w[k][g][f] = v[f] / a
///   d u_p[g] / d u_c[f]     = w[k][g][f] * v[f] / a
/// A zero parent adjoint is skipped outright; that also sidesteps 0/0 when
/// `a` itself is an exact zero (a zero `a` forces a zero adjoint).
fn accumulate_weight_grad(
    weights: &Weights,
    topo: &ModelTopology,
    obs: &ObservationGrid,
    wgrad: &mut WeightGrad,
) -> Result<f64> {
    let mut grid = init_leaf_messages(obs, topo)?;
    forward_pass(weights, topo, &mut grid)?;
    let top = topo.num_layers() - 1;
    let ll = log_likelihood(grid.log_message(top, 0), weights.root())?;

    let mut adj: Vec<Vec<f64>> = (0..=top)
        .map(|l| vec![0.0; topo.layer(l).positions() * topo.layer(l).states])
        .collect();

    let v_root = grid.scaled_message(top, 0);
    let w_root = weights.root();
    let s: f64 = w_root.iter().zip(v_root.iter()).map(|(w, v)| w * v).sum();
    if s <= 0.0 {
        return Err(Error::AllZeroPosterior {
            layer: top,
            position: 0,
        });
    }
    for f in 0..w_root.len() {
        adj[top][f] = w_root[f] * v_root[f] / s;
        wgrad.root[f] += v_root[f] / s;
    }

    let max_states = (0..topo.num_layers())
        .map(|l| topo.layer(l).states)
        .max()
        .unwrap();
    let mut r = vec![0.0; max_states];
    let mut tmp = vec![0.0; max_states];
    for l in (0..top).rev() {
        let f_states = topo.layer(l).states;
        let g_states = topo.layer(l + 1).states;
        let table = weights.kernel(l);
        let kgrad = &mut wgrad.kernel[l];
        let (adj_lo, adj_hi) = adj.split_at_mut(l + 1);
        let adj_child = &mut adj_lo[l];
        let adj_parent = &adj_hi[0];
        for p in 0..topo.layer(l + 1).positions() {
            let gbar = &adj_parent[p * g_states..(p + 1) * g_states];
            for &(c, k) in topo.children_of(l, p) {
                let v = grid.scaled_message(l, c);
                let mut any = false;
                for g in 0..g_states {
                    if gbar[g] == 0.0 {
                        r[g] = 0.0;
                        continue;
                    }
                    let row = &table[(k * g_states + g) * f_states..][..f_states];
                    let mut a = 0.0;
                    for (w, x) in row.iter().zip(v.iter()) {
                        a += w * x;
                    }
                    debug_assert!(a > 0.0, "zero mix under a nonzero adjoint");
                    r[g] = gbar[g] / a;
                    any = true;
                }
                if !any {
                    continue;
                }
                tmp[..f_states].fill(0.0);
                for g in 0..g_states {
                    let rg = r[g];
                    if rg == 0.0 {
                        continue;
                    }
                    let row = &table[(k * g_states + g) * f_states..][..f_states];
                    let grow = &mut kgrad[(k * g_states + g) * f_states..][..f_states];
                    for f in 0..f_states {
                        grow[f] += rg * v[f];
                        tmp[f] += rg * row[f];
                    }
                }
                if l > 0 {
                    let ac = &mut adj_child[c * f_states..(c + 1) * f_states];
                    for f in 0..f_states {
                        ac[f] += v[f] * tmp[f];
                    }
                }
            }
        }
    }
    Ok(ll)
}

/// Push a weight-space gradient through the softmax Jacobian:
/// `g_s[f] = w[f] * (g_w[f] - sum_f' g_w[f'] w[f'])` per row.
fn score_grad_from_weight_grad(
    weights: &Weights,
    topo: &ModelTopology,
    wgrad: &WeightGrad,
) -> GradientBuffer {
    let mut out = GradientBuffer::zeros(topo);
    for l in 0..weights.kernel.len() {
        let f_states = topo.layer(l).states;
        for ((gw, w), gs) in wgrad.kernel[l]
            .chunks_exact(f_states)
            .zip(weights.kernel[l].chunks_exact(f_states))
            .zip(out.kernel[l].chunks_exact_mut(f_states))
        {
            let dot: f64 = gw.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            for f in 0..f_states {
                gs[f] = w[f] * (gw[f] - dot);
            }
        }
    }
    let dot: f64 = wgrad
        .root
        .iter()
        .zip(weights.root.iter())
        .map(|(a, b)| a * b)
        .sum();
    for f in 0..weights.root.len() {
        out.root[f] = weights.root[f] * (wgrad.root[f] - dot);
    }
    out
}

/// Log-likelihood and its score-space gradient for one observation.
pub fn grad_log_likelihood(
    params: &Parameters,
    topo: &ModelTopology,
    obs: &ObservationGrid,
) -> Result<(f64, GradientBuffer)> {
    let weights = Weights::from_scores(params, topo)?;
    let mut wgrad = WeightGrad::zeros(topo);
    let ll = accumulate_weight_grad(&weights, topo, obs, &mut wgrad)?;
    Ok((ll, score_grad_from_weight_grad(&weights, topo, &wgrad)))
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Step size for the ascent update.
    pub lr: f64,
    /// Classical momentum on the score updates; 0 disables it.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Master seed; shuffling uses its shuffle stream with the epoch index
    /// as substream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.0,
            epochs: 100,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean negative log-likelihood (base e) over the epoch's batches,
    /// evaluated at the parameters each batch saw.
    pub mean_nll: f64,
    pub wall_seconds: f64,
}

/// Batch gradients are reduced over this many fixed chunks regardless of
/// thread count, so results do not depend on parallelism.
const REDUCTION_CHUNKS: usize = 16;

fn batch_gradient(
    weights: &Weights,
    topo: &ModelTopology,
    data: &[ObservationGrid],
    batch: &[usize],
) -> Result<(f64, WeightGrad)> {
    let n = batch.len();
    let chunks = REDUCTION_CHUNKS.min(n);
    let partials: Vec<(f64, WeightGrad)> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * n / chunks;
            let hi = (ci + 1) * n / chunks;
            let mut wg = WeightGrad::zeros(topo);
            let mut ll_sum = 0.0;
            for &idx in &batch[lo..hi] {
                ll_sum += accumulate_weight_grad(weights, topo, &data[idx], &mut wg)?;
            }
            Ok((ll_sum, wg))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ll_total = 0.0;
    let mut total = WeightGrad::zeros(topo);
    for (ll, wg) in &partials {
        ll_total += ll;
        total.add(wg);
    }
    total.scale(1.0 / n as f64);
    Ok((ll_total, total))
}

/// Stochastic gradient ascent on the mean log-likelihood, updating `params`
/// in place. `on_epoch` runs after every epoch (checkpointing hook).
pub fn sga_fit_with<F>(
    params: &mut Parameters,
    topo: &ModelTopology,
    data: &[ObservationGrid],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochStats>>
where
    F: FnMut(&Parameters, &EpochStats) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::Config("learning rate must be finite and >= 0".into()));
    }
    params.check_shapes(topo)?;

    let mut velocity = GradientBuffer::zeros(topo);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut rng = substream_rng(cfg.seed, STREAM_SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        let mut ll_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let weights = Weights::from_scores(params, topo)?;
            let (batch_ll, wgrad) = batch_gradient(&weights, topo, data, batch)?;
            ll_sum += batch_ll;
            let sgrad = score_grad_from_weight_grad(&weights, topo, &wgrad);
            for l in 0..params.kernel_scores.len() {
                for ((s, v), g) in params.kernel_scores[l]
                    .iter_mut()
                    .zip(velocity.kernel[l].iter_mut())
                    .zip(sgrad.kernel[l].iter())
                {
                    *v = cfg.momentum * *v + *g;
                    *s += cfg.lr * *v;
                }
            }
            for ((s, v), g) in params
                .root_scores
                .iter_mut()
                .zip(velocity.root.iter_mut())
                .zip(sgrad.root.iter())
            {
                *v = cfg.momentum * *v + *g;
                *s += cfg.lr * *v;
            }
            if !params.all_finite() {
                return Err(Error::DivergedToNonFinite {
                    epoch: epoch + 1,
                    batch: batch_idx + 1,
                });
            }
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_nll: -ll_sum / data.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(params, &stats)?;
        trace.push(stats);
    }
    Ok(trace)
}

/// [`sga_fit_with`] without a per-epoch hook.
pub fn sga_fit(
    params: &mut Parameters,
    topo: &ModelTopology,
    data: &[ObservationGrid],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    sga_fit_with(params, topo, data, cfg, |_, _| Ok(()))
}
