//! Slow, independent references for tiny instances.
//!
//! Four cross-checks, each computed by a route that shares no arithmetic
//! with the fast path: belief propagation on the fully materialized
//! duplicated tree (per-edge logsumexp, one message per duplicate), direct
//! enumeration of the joint over every tree node, the exact step-by-step
//! distribution of the constrained sampler, and central finite differences
//! for gradients. Everything here is guarded by hard instance-size limits
//! and stays in the shipped library so `selftest` can run in the field.

use rand::Rng;

use num_bigint::BigUint;
use num_traits::One;

use crate::error::{Error, Result};
use crate::inference::{
    forward_pass, init_leaf_messages, log_likelihood, log_likelihood_of, MessageGrid,
    ObservationGrid,
};
use crate::learning::{grad_log_likelihood, GradientBuffer, Parameters, Weights};
use crate::math::logsumexp;
use crate::sampling::{sample_conditional, SampleGrid};
use crate::seed::{stream_rng, substream_rng, STREAM_SAMPLE};
use crate::topology::{build_topology, KernelSpec, LayerShape, ModelTopology};

use num_traits::ToPrimitive;

/// Node cap for the materialized tree.
const MAX_TREE_NODES: usize = 10_000;
/// Configuration cap for joint enumeration.
const MAX_JOINT_CONFIGS: f64 = 1e7;
/// Assignment cap for the exact sampling-chain distribution.
const MAX_CHAIN_ASSIGNMENTS: f64 = 1e6;

/// One materialized duplicate.
#[derive(Debug, Clone)]
pub struct ExplicitNode {
    pub layer: usize,
    pub position: usize,
    /// Kernel offset under the parent; 0 at the root.
    pub kernel_offset: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// The duplicated tree with every copy materialized; every leaf duplicate
/// of position t reads the same observation.
#[derive(Debug, Clone)]
pub struct ExplicitTree {
    nodes: Vec<ExplicitNode>,
    root: usize,
}

impl ExplicitTree {
    pub fn build(topo: &ModelTopology) -> Result<Self> {
        let total = topo.total_nodes();
        let count = total.to_usize().filter(|&c| c <= MAX_TREE_NODES);
        if count.is_none() {
            return Err(Error::InstanceTooLarge(format!(
                "{} duplicated nodes exceed the {} cap",
                total, MAX_TREE_NODES
            )));
        }
        let mut nodes = Vec::with_capacity(count.unwrap());
        let top = topo.num_layers() - 1;
        let root = add_subtree(topo, &mut nodes, top, 0, 0, None);
        debug_assert_eq!(nodes.len(), count.unwrap());
        Ok(ExplicitTree { nodes, root })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[ExplicitNode] {
        &self.nodes
    }
}

fn add_subtree(
    topo: &ModelTopology,
    nodes: &mut Vec<ExplicitNode>,
    layer: usize,
    position: usize,
    kernel_offset: usize,
    parent: Option<usize>,
) -> usize {
    let idx = nodes.len();
    nodes.push(ExplicitNode {
        layer,
        position,
        kernel_offset,
        parent,
        children: Vec::new(),
    });
    if layer > 0 {
        let kids: Vec<usize> = topo
            .children_of(layer - 1, position)
            .to_vec()
            .into_iter()
            .map(|(c, k)| add_subtree(topo, nodes, layer - 1, c, k, Some(idx)))
            .collect();
        nodes[idx].children = kids;
    }
    idx
}

fn leaf_log_message(obs: &ObservationGrid, position: usize, states: usize) -> Result<Vec<f64>> {
    match obs.get(position) {
        None => Ok(vec![0.0; states]),
        Some(s) if (s as usize) < states => {
            let mut m = vec![f64::NEG_INFINITY; states];
            m[s as usize] = 0.0;
            Ok(m)
        }
        Some(s) => Err(Error::InvalidLayerOrState(format!(
            "observed state {} exceeds {} leaf states",
            s, states
        ))),
    }
}

fn tree_message(
    tree: &ExplicitTree,
    topo: &ModelTopology,
    weights: &Weights,
    obs: &ObservationGrid,
    node_idx: usize,
) -> Result<Vec<f64>> {
    let node = &tree.nodes[node_idx];
    if node.layer == 0 {
        return leaf_log_message(obs, node.position, topo.layer(0).states);
    }
    let g_states = topo.layer(node.layer).states;
    let mut msg = vec![0.0f64; g_states];
    for &child_idx in &node.children {
        let child = &tree.nodes[child_idx];
        let child_msg = tree_message(tree, topo, weights, obs, child_idx)?;
        let f_states = topo.layer(child.layer).states;
        let table = weights.kernel(child.layer);
        let k = child.kernel_offset;
        let mut terms = vec![0.0f64; f_states];
        for (g, out) in msg.iter_mut().enumerate() {
            let row = &table[(k * g_states + g) * f_states..][..f_states];
            for f in 0..f_states {
                terms[f] = row[f].ln() + child_msg[f];
            }
            *out += logsumexp(&terms);
        }
    }
    Ok(msg)
}

/// Sum-product on the materialized tree, one message per duplicate.
pub fn explicit_tree_bp(
    tree: &ExplicitTree,
    topo: &ModelTopology,
    weights: &Weights,
    obs: &ObservationGrid,
) -> Result<f64> {
    let root_msg = tree_message(tree, topo, weights, obs, tree.root)?;
    log_likelihood(&root_msg, weights.root())
}

/// Brute-force likelihood: sum the joint over every assignment of every
/// tree node, with observed leaves clamped and missing leaves enumerated.
pub fn enumerate_joint(
    topo: &ModelTopology,
    weights: &Weights,
    obs: &ObservationGrid,
) -> Result<f64> {
    let tree = ExplicitTree::build(topo)?;
    let n = tree.nodes.len();
    let mut radix = vec![0usize; n];
    let mut state = vec![0usize; n];
    let mut log_configs = 0.0f64;
    for (i, node) in tree.nodes.iter().enumerate() {
        let states = topo.layer(node.layer).states;
        if node.layer == 0 {
            match obs.get(node.position) {
                Some(s) if (s as usize) < states => {
                    radix[i] = 1;
                    state[i] = s as usize;
                }
                Some(s) => {
                    return Err(Error::InvalidLayerOrState(format!(
                        "observed state {} exceeds {} leaf states",
                        s, states
                    )))
                }
                None => radix[i] = states,
            }
        } else {
            radix[i] = states;
        }
        if radix[i] > 1 {
            log_configs += (radix[i] as f64).ln();
        }
    }
    if log_configs > MAX_JOINT_CONFIGS.ln() {
        return Err(Error::InstanceTooLarge(format!(
            "about exp({:.1}) joint configurations exceed the {:e} cap",
            log_configs, MAX_JOINT_CONFIGS
        )));
    }

    // Kahan-compensated sum: the agreement checks run at 1e-12.
    let mut total = 0.0f64;
    let mut comp = 0.0f64;
    loop {
        let mut prob = weights.root()[state[tree.root]];
        for (i, node) in tree.nodes.iter().enumerate() {
            let parent = match node.parent {
                Some(p) => p,
                None => continue,
            };
            let f_states = topo.layer(node.layer).states;
            let g_states = topo.layer(node.layer + 1).states;
            let table = weights.kernel(node.layer);
            prob *=
                table[(node.kernel_offset * g_states + state[parent]) * f_states + state[i]];
        }
        let y = prob - comp;
        let t = total + y;
        comp = (t - total) - y;
        total = t;

        // mixed-radix increment over the unclamped digits
        let mut done = true;
        for d in 0..n {
            if radix[d] <= 1 {
                continue;
            }
            state[d] += 1;
            if state[d] < radix[d] {
                done = false;
                break;
            }
            state[d] = 0;
        }
        if done {
            break;
        }
    }
    Ok(total.ln())
}

/// Normalized categorical from unnormalized log-weights; `None` if all zero.
fn normalize_log(logits: &[f64]) -> Option<Vec<f64>> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut probs: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    Some(probs)
}

/// Per-position sampling distributions for layer `l` given the states of
/// layer `l + 1`, straight from the constrained-sampling formula.
fn layer_step_probs(
    topo: &ModelTopology,
    weights: &Weights,
    grid: &MessageGrid,
    l: usize,
    z_above: &[u16],
) -> Result<Vec<Vec<f64>>> {
    let f_states = topo.layer(l).states;
    let g_states = topo.layer(l + 1).states;
    let table = weights.kernel(l);
    let mut out = Vec::with_capacity(topo.layer(l).positions());
    for t in 0..topo.layer(l).positions() {
        let u = grid.log_message(l, t);
        let d_own = topo.duplicate_f64(l, t);
        let mut logits: Vec<f64> = (0..f_states)
            .map(|f| if u[f] == 0.0 { 0.0 } else { d_own * u[f] })
            .collect();
        for &(p, k) in topo.parents_of(l, t) {
            let d_parent = topo.duplicate_f64(l + 1, p);
            let row = &table[(k * g_states + z_above[p] as usize) * f_states..][..f_states];
            for (slot, &w) in logits.iter_mut().zip(row.iter()) {
                let lw = w.ln();
                *slot += if lw == 0.0 { 0.0 } else { d_parent * lw };
            }
        }
        out.push(normalize_log(&logits).ok_or(Error::AllZeroPosterior {
            layer: l,
            position: t,
        })?);
    }
    Ok(out)
}

/// Flat index of a full state assignment: layers top to bottom, positions
/// row-major, most significant digit first.
pub fn assignment_index(topo: &ModelTopology, sample: &SampleGrid) -> usize {
    let mut idx = 0usize;
    for l in (0..topo.num_layers()).rev() {
        let states = topo.layer(l).states;
        for &z in sample.layer(l) {
            idx = idx * states + z as usize;
        }
    }
    idx
}

/// Number of full state assignments, if it fits the chain-oracle cap.
pub fn chain_assignment_count(topo: &ModelTopology) -> Result<usize> {
    let mut log_total = 0.0f64;
    for l in 0..topo.num_layers() {
        log_total += (topo.layer(l).states as f64).ln() * topo.layer(l).positions() as f64;
    }
    if log_total > MAX_CHAIN_ASSIGNMENTS.ln() {
        return Err(Error::InstanceTooLarge(format!(
            "about exp({:.1}) sampling assignments exceed the {:e} cap",
            log_total, MAX_CHAIN_ASSIGNMENTS
        )));
    }
    let mut total = 1usize;
    for l in 0..topo.num_layers() {
        total *= topo.layer(l).states.pow(topo.layer(l).positions() as u32);
    }
    Ok(total)
}

/// Exact distribution of the constrained sampler: probability of every full
/// assignment, indexed by [`assignment_index`]. Probabilities of assignments
/// the sampler can never produce are zero.
pub fn sample_chain_distribution(
    topo: &ModelTopology,
    weights: &Weights,
    obs: &ObservationGrid,
) -> Result<Vec<f64>> {
    let total = chain_assignment_count(topo)?;
    let mut grid = init_leaf_messages(obs, topo)?;
    forward_pass(weights, topo, &mut grid)?;
    let top = topo.num_layers() - 1;

    let root_logits: Vec<f64> = grid
        .log_message(top, 0)
        .iter()
        .zip(weights.root().iter())
        .map(|(&u, &w)| u + w.ln())
        .collect();
    let root_probs = normalize_log(&root_logits).ok_or(Error::AllZeroPosterior {
        layer: top,
        position: 0,
    })?;

    let mut out = vec![0.0f64; total];
    let mut layers: Vec<Vec<u16>> = vec![Vec::new(); topo.num_layers()];
    for (zr, &pr) in root_probs.iter().enumerate() {
        if pr == 0.0 {
            continue;
        }
        layers[top] = vec![zr as u16];
        descend(topo, weights, &grid, top, pr, &mut layers, &mut out)?;
    }
    Ok(out)
}

fn descend(
    topo: &ModelTopology,
    weights: &Weights,
    grid: &MessageGrid,
    level_above: usize,
    prob: f64,
    layers: &mut Vec<Vec<u16>>,
    out: &mut Vec<f64>,
) -> Result<()> {
    if level_above == 0 {
        let sample = SampleGrid::from_layers(layers.clone());
        out[assignment_index(topo, &sample)] += prob;
        return Ok(());
    }
    let l = level_above - 1;
    let z_above = layers[level_above].clone();
    let step = layer_step_probs(topo, weights, grid, l, &z_above)?;
    let positions = topo.layer(l).positions();
    let f_states = topo.layer(l).states;

    let mut combo = vec![0usize; positions];
    loop {
        let mut p = prob;
        for (t, &z) in combo.iter().enumerate() {
            p *= step[t][z];
        }
        if p > 0.0 {
            layers[l] = combo.iter().map(|&z| z as u16).collect();
            descend(topo, weights, grid, l, p, layers, out)?;
        }
        let mut done = true;
        for digit in combo.iter_mut() {
            *digit += 1;
            if *digit < f_states {
                done = false;
                break;
            }
            *digit = 0;
        }
        if done {
            return Ok(());
        }
    }
}

/// Central differences on the log-likelihood, one coordinate at a time.
pub fn finite_difference_grad(
    params: &Parameters,
    topo: &ModelTopology,
    obs: &ObservationGrid,
    h: f64,
) -> Result<GradientBuffer> {
    let mut flat = vec![0.0f64; params.flat_len()];
    for (i, slot) in flat.iter_mut().enumerate() {
        let mut plus = params.clone();
        plus.add_flat(i, h);
        let mut minus = params.clone();
        minus.add_flat(i, -h);
        let lp = log_likelihood_of(&Weights::from_scores(&plus, topo)?, topo, obs)?;
        let lm = log_likelihood_of(&Weights::from_scores(&minus, topo)?, topo, obs)?;
        *slot = (lp - lm) / (2.0 * h);
    }
    GradientBuffer::from_flat(topo, &flat)
}

/// Stream id for the tiny-instance generator.
const STREAM_ORACLE: u64 = 5;

/// A random small model and observation: at most 3 layers, at most 5 pixel
/// positions, at most 3 states per layer; each pixel missing with
/// probability 1/3.
pub fn random_tiny_instance(seed: u64) -> (ModelTopology, Parameters, ObservationGrid) {
    let mut rng = stream_rng(seed, STREAM_ORACLE);
    // (extents bottom-up, kernel sizes, kernel strides), all 1-D except the last
    let geometries: [(&[usize], &[usize], &[usize]); 8] = [
        (&[3, 1], &[3], &[1]),
        (&[5, 1], &[5], &[1]),
        (&[3, 2, 1], &[2, 2], &[1, 1]),
        (&[4, 2, 1], &[3, 2], &[1, 1]),
        (&[4, 2, 1], &[2, 2], &[2, 1]),
        (&[5, 2, 1], &[3, 2], &[2, 1]),
        (&[4, 3, 1], &[2, 3], &[1, 1]),
        (&[5, 3, 1], &[3, 3], &[1, 1]),
    ];
    let pick = rng.random_range(0..geometries.len() + 1);
    let topo = if pick == geometries.len() {
        // one 2-D shape for dimension coverage
        let states: Vec<usize> = (0..2).map(|_| rng.random_range(2..=3)).collect();
        build_topology(
            vec![
                LayerShape::new_2d(2, 2, states[0]),
                LayerShape::new_2d(1, 1, states[1]),
            ],
            vec![KernelSpec::new_2d((2, 2), (2, 2))],
        )
        .unwrap()
    } else {
        let (extents, sizes, strides) = geometries[pick];
        let layers: Vec<LayerShape> = extents
            .iter()
            .map(|&e| LayerShape::new_1d(e, rng.random_range(2..=3)))
            .collect();
        let kernels: Vec<KernelSpec> = sizes
            .iter()
            .zip(strides.iter())
            .map(|(&s, &t)| KernelSpec::new_1d(s, t))
            .collect();
        build_topology(layers, kernels).unwrap()
    };
    let leaf_states = topo.layer(0).states as u16;
    let mut obs = ObservationGrid::all_missing(topo.layer(0).extent.to_vec());
    for t in 0..obs.positions() {
        if rng.random_range(0..3) > 0 {
            obs.set_observed(t, rng.random_range(0..leaf_states));
        }
    }
    let params = Parameters::random_init(&topo, seed);
    (topo, params, obs)
}

/// Tiny stride-equals-size geometries: no overlap, no duplicates anywhere.
fn zero_overlap_geometries() -> Vec<(Vec<LayerShape>, Vec<KernelSpec>)> {
    vec![
        (
            vec![
                LayerShape::new_1d(4, 2),
                LayerShape::new_1d(2, 3),
                LayerShape::new_1d(1, 2),
            ],
            vec![KernelSpec::new_1d(2, 2), KernelSpec::new_1d(2, 2)],
        ),
        (
            vec![
                LayerShape::new_1d(6, 3),
                LayerShape::new_1d(3, 2),
                LayerShape::new_1d(1, 2),
            ],
            vec![KernelSpec::new_1d(2, 2), KernelSpec::new_1d(3, 3)],
        ),
        (
            vec![
                LayerShape::new_1d(8, 2),
                LayerShape::new_1d(4, 2),
                LayerShape::new_1d(2, 3),
                LayerShape::new_1d(1, 2),
            ],
            vec![
                KernelSpec::new_1d(2, 2),
                KernelSpec::new_1d(2, 2),
                KernelSpec::new_1d(2, 2),
            ],
        ),
        (
            vec![
                LayerShape::new_1d(9, 2),
                LayerShape::new_1d(3, 2),
                LayerShape::new_1d(1, 3),
            ],
            vec![KernelSpec::new_1d(3, 3), KernelSpec::new_1d(3, 3)],
        ),
        (
            vec![
                LayerShape::new_2d(4, 4, 2),
                LayerShape::new_2d(2, 2, 3),
                LayerShape::new_2d(1, 1, 2),
            ],
            vec![
                KernelSpec::new_2d((2, 2), (2, 2)),
                KernelSpec::new_2d((2, 2), (2, 2)),
            ],
        ),
    ]
}

/// 3-pixel model with one overlapped pixel: kernels of size 2 and stride 1,
/// all nodes binary. Leaf duplicate counts are [1, 2, 1].
fn topo_321() -> ModelTopology {
    build_topology(
        vec![
            LayerShape::new_1d(3, 2),
            LayerShape::new_1d(2, 2),
            LayerShape::new_1d(1, 2),
        ],
        vec![KernelSpec::new_1d(2, 1), KernelSpec::new_1d(2, 1)],
    )
    .unwrap()
}

/// Outcome of one selftest property.
#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn report(name: &'static str, passed: bool, detail: String) -> SelftestReport {
    SelftestReport {
        name,
        passed,
        detail,
    }
}

fn check_three_way_agreement() -> SelftestReport {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let (topo, params, obs) = random_tiny_instance(seed);
        let weights = Weights::from_scores(&params, &topo).unwrap();
        let fast = log_likelihood_of(&weights, &topo, &obs).unwrap();
        let tree = ExplicitTree::build(&topo).unwrap();
        let bp = explicit_tree_bp(&tree, &topo, &weights, &obs).unwrap();
        let joint = enumerate_joint(&topo, &weights, &obs).unwrap();
        worst = worst
            .max((fast - bp).abs())
            .max((fast - joint).abs())
            .max((bp - joint).abs());
    }
    report(
        "unique-message, explicit-tree and enumeration agree",
        worst <= 1e-12,
        format!("max pairwise |dlogL| = {:.2e} over 50 instances", worst),
    )
}

/// Sum of exp(log L) over every complete image.
fn total_image_mass(weights: &Weights, topo: &ModelTopology) -> f64 {
    let n = topo.layer(0).positions();
    let states = topo.layer(0).states as u16;
    let mut sum = 0.0f64;
    let mut assignment = vec![0u16; n];
    loop {
        let obs =
            ObservationGrid::from_states(topo.layer(0).extent.to_vec(), &assignment).unwrap();
        sum += log_likelihood_of(weights, topo, &obs).unwrap().exp();
        let mut done = true;
        for digit in assignment.iter_mut() {
            *digit += 1;
            if *digit < states {
                done = false;
                break;
            }
            *digit = 0;
        }
        if done {
            break;
        }
    }
    sum
}

fn check_complete_normalization() -> SelftestReport {
    // Without overlap every pixel has exactly one leaf node, so the
    // likelihood is an ordinary tree marginal and must sum to 1 over all
    // images. With overlap the clamped leaf duplicates are separate model
    // variables, so the image mass equals the probability that all
    // duplicates of a pixel agree, which is strictly below 1: for the
    // 3-pixel overlapped model under uniform weights the middle pixel has
    // two independent uniform duplicates, giving total mass exactly 1/2.
    let mut worst = 0.0f64;
    for (seed, (layers, kernels)) in zero_overlap_geometries().into_iter().enumerate() {
        let topo = build_topology(layers, kernels).unwrap();
        let params = Parameters::random_init(&topo, 1000 + seed as u64);
        let weights = Weights::from_scores(&params, &topo).unwrap();
        worst = worst.max((total_image_mass(&weights, &topo) - 1.0).abs());
    }
    let overlapped = topo_321();
    let uniform = Parameters::zero_init(&overlapped);
    let weights = Weights::from_scores(&uniform, &overlapped).unwrap();
    let overlap_gap = (total_image_mass(&weights, &overlapped) - 0.5).abs();
    report(
        "complete-image mass: 1 without overlap, duplicate-agreement mass with it",
        worst <= 1e-10 && overlap_gap <= 1e-12,
        format!(
            "max |sum - 1| = {:.2e} over {} loop-free instances, |sum - 1/2| = {:.2e} on the overlapped counterexample",
            worst,
            zero_overlap_geometries().len(),
            overlap_gap
        ),
    )
}

fn check_all_missing_unit() -> SelftestReport {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let (topo, params, _) = random_tiny_instance(seed);
        let weights = Weights::from_scores(&params, &topo).unwrap();
        let obs = ObservationGrid::all_missing(topo.layer(0).extent.to_vec());
        worst = worst.max(log_likelihood_of(&weights, &topo, &obs).unwrap().abs());
    }
    report(
        "all-missing observation has log-likelihood 0",
        worst <= 1e-12,
        format!("max |logL| = {:.2e} over 10 instances", worst),
    )
}

fn check_monotone_evidence() -> SelftestReport {
    // Completing a pixel can only remove probability mass. The completed
    // likelihoods sum exactly to the marginal when the pixel has a single
    // leaf node; an overlapped pixel has independent duplicates, so the
    // agreeing assignments carry less mass and the sum falls short.
    let mut worst_single_gap = 0.0f64;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut monotone = true;
    let mut checked = 0;
    let mut singles = 0;
    for seed in 0..50 {
        let (topo, params, obs) = random_tiny_instance(seed);
        let missing = (0..obs.positions()).find(|&t| obs.get(t).is_none());
        let t = match missing {
            Some(t) => t,
            None => continue,
        };
        let weights = Weights::from_scores(&params, &topo).unwrap();
        let marginal = log_likelihood_of(&weights, &topo, &obs).unwrap();
        let mut completions = Vec::new();
        for s in 0..topo.layer(0).states as u16 {
            let mut completed = obs.clone();
            completed.set_observed(t, s);
            let ll = log_likelihood_of(&weights, &topo, &completed).unwrap();
            monotone &= ll <= marginal + 1e-12;
            completions.push(ll);
        }
        let sum = logsumexp(&completions);
        worst_excess = worst_excess.max(sum - marginal);
        if topo.duplicates(0)[t] == BigUint::one() {
            worst_single_gap = worst_single_gap.max((sum - marginal).abs());
            singles += 1;
        }
        checked += 1;
        if checked == 20 {
            break;
        }
    }
    report(
        "completing a missing pixel never raises the likelihood",
        monotone && worst_excess <= 1e-12 && worst_single_gap <= 1e-12,
        format!(
            "max excess over marginal = {:.2e} over {} instances; max marginalization gap = {:.2e} over {} single-duplicate pixels",
            worst_excess, checked, worst_single_gap, singles
        ),
    )
}

fn check_gradient_fd() -> SelftestReport {
    let mut worst = 0.0f64;
    let mut worst_at = (0u64, 0usize, 0.0f64, 0.0f64);
    for seed in 0..20 {
        let (topo, params, obs) = random_tiny_instance(seed);
        let (_, grad) = grad_log_likelihood(&params, &topo, &obs).unwrap();
        let fd = finite_difference_grad(&params, &topo, &obs, 1e-5).unwrap();
        for (i, (a, b)) in grad.flatten().iter().zip(fd.flatten().iter()).enumerate() {
            // central differences carry ~ulp(logL)/2h = 1e-11 of noise, so
            // near-zero coordinates are compared with an absolute floor
            let rel = (a - b).abs() / (a.abs() + b.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
                worst_at = (seed, i, *a, *b);
            }
        }
    }
    report(
        "analytic gradient matches central differences",
        worst <= 1e-4,
        format!(
            "max relative error = {:.2e} over 20 instances (seed {} index {}: analytic {:.12e} vs fd {:.12e})",
            worst, worst_at.0, worst_at.1, worst_at.2, worst_at.3
        ),
    )
}

fn check_chain_normalization() -> SelftestReport {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let (topo, params, obs) = random_tiny_instance(seed);
        let weights = Weights::from_scores(&params, &topo).unwrap();
        let dist = sample_chain_distribution(&topo, &weights, &obs).unwrap();
        worst = worst.max((dist.iter().sum::<f64>() - 1.0).abs());
    }
    report(
        "exact sampling-chain probabilities sum to 1",
        worst <= 1e-10,
        format!("max |sum - 1| = {:.2e} over 10 instances", worst),
    )
}

fn check_sampler_tv() -> SelftestReport {
    // fixed small assignment space (16 free cells) so 20k draws resolve
    // the distribution well below the 0.05 gate
    let topo = build_topology(
        vec![
            LayerShape::new_1d(3, 2),
            LayerShape::new_1d(2, 2),
            LayerShape::new_1d(1, 2),
        ],
        vec![KernelSpec::new_1d(2, 1), KernelSpec::new_1d(2, 1)],
    )
    .unwrap();
    let params = Parameters::random_init(&topo, 1234);
    let mut obs = ObservationGrid::all_missing(vec![3]);
    obs.set_observed(0, 0);
    obs.set_observed(2, 1);
    let weights = Weights::from_scores(&params, &topo).unwrap();
    let exact = sample_chain_distribution(&topo, &weights, &obs).unwrap();
    let draws = 20_000usize;
    let mut counts = vec![0usize; exact.len()];
    for i in 0..draws {
        let mut rng = substream_rng(1234, STREAM_SAMPLE, i as u64);
        let sample = sample_conditional(&weights, &topo, &obs, &mut rng).unwrap();
        counts[assignment_index(&topo, &sample)] += 1;
    }
    let tv: f64 = exact
        .iter()
        .zip(counts.iter())
        .map(|(&p, &c)| (p - c as f64 / draws as f64).abs())
        .sum::<f64>()
        / 2.0;
    report(
        "empirical sampler matches the exact chain distribution",
        tv <= 0.05,
        format!("total variation = {:.4} at {} draws", tv, draws),
    )
}

fn check_observed_fidelity() -> SelftestReport {
    let (topo, params, mut obs) = random_tiny_instance(3);
    obs.set_observed(0, 1);
    let weights = Weights::from_scores(&params, &topo).unwrap();
    let mut violations = 0usize;
    for i in 0..1000 {
        let mut rng = substream_rng(4321, STREAM_SAMPLE, i as u64);
        let sample = sample_conditional(&weights, &topo, &obs, &mut rng).unwrap();
        for t in 0..obs.positions() {
            if let Some(s) = obs.get(t) {
                if sample.layer(0)[t] != s {
                    violations += 1;
                }
            }
        }
    }
    report(
        "observed pixels reproduced in every conditional sample",
        violations == 0,
        format!("{} violations over 1000 samples", violations),
    )
}

/// The full oracle agreement suite, one report per property.
pub fn run_selftest() -> Vec<SelftestReport> {
    vec![
        check_three_way_agreement(),
        check_complete_normalization(),
        check_all_missing_unit(),
        check_monotone_evidence(),
        check_gradient_fd(),
        check_chain_normalization(),
        check_sampler_tv(),
        check_observed_fidelity(),
    ]
}
