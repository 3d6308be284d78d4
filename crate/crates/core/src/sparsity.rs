//! Sparse connectivity: layer-wise density allocation, magnitude pruning,
//! gradient or random regrowth, and connectivity exploration.
//!
//! Every layer owns a fixed budget `k_l` of active weights. Pruning removes
//! the smallest-magnitude fraction of the active set and regrowth adds the same
//! number back, so `k_l` never changes after initialisation.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{Gradients, LayerShape, OptimizerState, SparseNetwork};
use crate::tensor::Rng;

/// Binary mask over one weight matrix (`rows = n_out`, `cols = n_in`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub rows: usize,
    pub cols: usize,
    pub active: Vec<bool>,
    pub budget: usize,
}

impl LayerMask {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            active: vec![true; rows * cols],
            budget: rows * cols,
        }
    }

    /// Mask whose budget is the number of listed positions.
    pub fn from_active(rows: usize, cols: usize, positions: &[usize]) -> Result<Self> {
        let mut active = vec![false; rows * cols];
        for &i in positions {
            if i >= active.len() {
                return Err(Error::InvalidArgument(format!(
                    "position {i} outside a {rows}x{cols} mask"
                )));
            }
            if active[i] {
                return Err(Error::InvalidArgument(format!("position {i} listed twice")));
            }
            active[i] = true;
        }
        Ok(Self {
            rows,
            cols,
            active,
            budget: positions.len(),
        })
    }

    pub fn params(&self) -> usize {
        self.active.len()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Active flat positions in ascending order.
    pub fn active_indices(&self) -> Vec<usize> {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    pub fn density(&self) -> f64 {
        if self.active.is_empty() {
            return 0.0;
        }
        self.active_count() as f64 / self.params() as f64
    }
}

/// Per-layer masks of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub layers: Vec<LayerMask>,
}

impl MaskSet {
    pub fn dense(shapes: &[LayerShape]) -> Self {
        Self {
            layers: shapes.iter().map(|s| LayerMask::dense(s.n_out, s.n_in)).collect(),
        }
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(LayerMask::params).sum()
    }

    pub fn total_budget(&self) -> usize {
        self.layers.iter().map(|l| l.budget).sum()
    }

    pub fn total_active(&self) -> usize {
        self.layers.iter().map(LayerMask::active_count).sum()
    }

    /// `1 − active / total` over all weight matrices.
    pub fn global_sparsity(&self) -> f64 {
        let total = self.total_params();
        if total == 0 {
            return 0.0;
        }
        1.0 - self.total_active() as f64 / total as f64
    }

    pub fn densities(&self) -> Vec<f64> {
        self.layers.iter().map(LayerMask::density).collect()
    }

    /// True when every layer holds exactly its budget.
    pub fn budgets_respected(&self) -> bool {
        self.layers.iter().all(|l| l.active_count() == l.budget)
    }

    /// Number of positions whose state differs between the two mask sets.
    pub fn hamming_distance(&self, other: &MaskSet) -> usize {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.active.iter().zip(&b.active).filter(|(x, y)| x != y).count())
            .sum::<usize>()
    }
}

/// Layer-wise density allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    Erk,
    Uniform,
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distribution::Erk => "erk",
            Distribution::Uniform => "uniform",
        })
    }
}

impl FromStr for Distribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erk" => Ok(Distribution::Erk),
            "uniform" => Ok(Distribution::Uniform),
            other => Err(Error::Config(format!("unknown distribution '{other}'"))),
        }
    }
}

/// Unnormalised ERK density of a layer.
///
/// Fully-connected layers use `(n_in + n_out) / (n_in · n_out)`; convolutional
/// layers add the kernel width and height to the numerator and the kernel
/// area to the denominator.
pub fn erk_score(shape: &LayerShape) -> f64 {
    let (n_in, n_out) = (shape.n_in as f64, shape.n_out as f64);
    if shape.is_conv() {
        let (w, h) = (shape.kernel_w as f64, shape.kernel_h as f64);
        (n_in + n_out + w + h) / (n_in * n_out * w * h)
    } else {
        (n_in + n_out) / (n_in * n_out)
    }
}

/// Result of the ERK water-filling solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ErkAllocation {
    /// Scale applied to the raw scores of the layers that are not dense.
    pub epsilon: f64,
    pub densities: Vec<f64>,
    /// Layers whose scaled density reached 1 and were frozen dense.
    pub dense_layers: Vec<bool>,
}

/// Solves `d_l = min(1, ε · raw_l)` so that the weighted mean density is `1 − S`.
///
/// `ε` has the closed form `(1−S)·Σ params − Σ_dense params` over
/// `Σ_rest raw_l · params_l`; whenever the largest scaled score exceeds 1 that
/// layer is frozen dense and `ε` is re-solved over the remaining layers.
pub fn erk_densities(shapes: &[LayerShape], sparsity: f64) -> Result<ErkAllocation> {
    validate_request(shapes, sparsity)?;
    let raw: Vec<f64> = shapes.iter().map(erk_score).collect();
    let params: Vec<f64> = shapes.iter().map(|s| s.params() as f64).collect();
    let target: f64 = (1.0 - sparsity) * params.iter().sum::<f64>();
    let mut dense = vec![false; shapes.len()];
    let mut epsilon;
    loop {
        let dense_params: f64 = (0..shapes.len()).filter(|&l| dense[l]).map(|l| params[l]).sum();
        let weighted: f64 = (0..shapes.len())
            .filter(|&l| !dense[l])
            .map(|l| raw[l] * params[l])
            .sum();
        if weighted == 0.0 {
            // every layer is dense
            epsilon = f64::INFINITY;
            break;
        }
        epsilon = (target - dense_params) / weighted;
        let worst = (0..shapes.len())
            .filter(|&l| !dense[l])
            .max_by(|&a, &b| raw[a].partial_cmp(&raw[b]).unwrap_or(Ordering::Equal));
        match worst {
            Some(l) if epsilon * raw[l] > 1.0 => {
                let top = raw[l];
                for (i, d) in dense.iter_mut().enumerate() {
                    if raw[i] == top {
                        *d = true;
                    }
                }
            }
            _ => break,
        }
    }
    let densities = (0..shapes.len())
        .map(|l| if dense[l] { 1.0 } else { epsilon * raw[l] })
        .collect();
    Ok(ErkAllocation {
        epsilon,
        densities,
        dense_layers: dense,
    })
}

fn validate_request(shapes: &[LayerShape], sparsity: f64) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::InvalidArgument("no layers to allocate".into()));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!(
            "sparsity {sparsity} must lie in [0, 1)"
        )));
    }
    shapes.iter().try_for_each(LayerShape::validate)
}

/// Active-weight budget per layer: `round(d_l · params_l)`, at least one.
pub fn budgets_from_densities(shapes: &[LayerShape], densities: &[f64]) -> Vec<usize> {
    shapes
        .iter()
        .zip(densities)
        .map(|(s, &d)| {
            let p = s.params();
            ((d * p as f64).round() as usize).clamp(1, p)
        })
        .collect()
}

fn sample_masks(shapes: &[LayerShape], budgets: &[usize], rng: &mut Rng) -> MaskSet {
    let layers = shapes
        .iter()
        .zip(budgets)
        .map(|(s, &k)| {
            let mut positions = rng.sample_without_replacement(s.params(), k);
            positions.sort_unstable();
            LayerMask::from_active(s.n_out, s.n_in * s.kernel_w * s.kernel_h, &positions)
                .expect("sampled positions are distinct and in range")
        })
        .collect();
    MaskSet { layers }
}

/// ERK-allocated random masks at global sparsity `S`.
pub fn erk_init(shapes: &[LayerShape], sparsity: f64, rng: &mut Rng) -> Result<MaskSet> {
    let alloc = erk_densities(shapes, sparsity)?;
    let budgets = budgets_from_densities(shapes, &alloc.densities);
    Ok(sample_masks(shapes, &budgets, rng))
}

/// Random masks with density `1 − S` in every layer.
pub fn uniform_init(shapes: &[LayerShape], sparsity: f64, rng: &mut Rng) -> Result<MaskSet> {
    validate_request(shapes, sparsity)?;
    let densities = vec![1.0 - sparsity; shapes.len()];
    let budgets = budgets_from_densities(shapes, &densities);
    Ok(sample_masks(shapes, &budgets, rng))
}

pub fn init_masks(distribution: Distribution, shapes: &[LayerShape], sparsity: f64, rng: &mut Rng) -> Result<MaskSet> {
    match distribution {
        Distribution::Erk => erk_init(shapes, sparsity, rng),
        Distribution::Uniform => uniform_init(shapes, sparsity, rng),
    }
}

/// Number of active weights kept when pruning a fraction `rate` of `k`:
/// `⌈(1 − rate)·k⌉`. A 1e-9 slack absorbs representation error such as
/// `(1 − 0.8)·10 = 2.0000000000000004`.
pub fn keep_count(k: usize, rate: f64) -> usize {
    let keep = ((1.0 - rate) * k as f64 - 1e-9).ceil();
    (keep.max(0.0) as usize).min(k)
}

/// Keeps the `⌈(1−rate)·k⌉` largest-magnitude active weights. Returns the new
/// mask (budget unchanged) and the pruned positions in ascending order.
/// Equal magnitudes are ranked by ascending flat index.
pub fn prune_magnitude(mask: &LayerMask, weights: &[f64], rate: f64) -> (LayerMask, Vec<usize>) {
    let mut active = mask.active_indices();
    let keep = keep_count(active.len(), rate);
    active.sort_by(|&a, &b| {
        weights[b]
            .abs()
            .partial_cmp(&weights[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut pruned = active.split_off(keep);
    pruned.sort_unstable();
    let mut out = mask.clone();
    for &i in &pruned {
        out.active[i] = false;
    }
    (out, pruned)
}

/// Regrowth criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Growth {
    Gradient,
    Random,
}

impl fmt::Display for Growth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Growth::Gradient => "gradient",
            Growth::Random => "random",
        })
    }
}

impl FromStr for Growth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(Growth::Gradient),
            "random" => Ok(Growth::Random),
            other => Err(Error::Config(format!("unknown growth criterion '{other}'"))),
        }
    }
}

/// Where regrowth scores come from.
pub enum GrowthSource<'a> {
    /// Dense gradient of the layer's weight matrix.
    Gradient(&'a [f64]),
    Random(&'a mut Rng),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrowOutcome {
    /// Newly activated positions, ascending.
    pub grown: Vec<usize>,
    /// How many positions had to be taken from `excluded` because too few
    /// other candidates were inactive.
    pub shortfall: usize,
}

/// Picks `count` of `candidates`: the largest `|g|` (ties by ascending index)
/// or a uniform random subset.
fn pick(mut candidates: Vec<usize>, count: usize, source: &mut GrowthSource<'_>) -> Vec<usize> {
    let take = count.min(candidates.len());
    match source {
        GrowthSource::Gradient(g) => {
            candidates.sort_by(|&a, &b| {
                g[b].abs()
                    .partial_cmp(&g[a].abs())
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            candidates.truncate(take);
            candidates
        }
        GrowthSource::Random(rng) => rng
            .sample_without_replacement(candidates.len(), take)
            .into_iter()
            .map(|i| candidates[i])
            .collect(),
    }
}

/// Activates `count` inactive positions, preferring those outside `excluded`.
/// Excluded positions are used only when nothing else is left, so the layer
/// budget is always restored.
pub fn grow(mask: &mut LayerMask, count: usize, mut source: GrowthSource<'_>, excluded: &[usize]) -> GrowOutcome {
    let mut skip = vec![false; mask.params()];
    for &i in excluded {
        skip[i] = true;
    }
    let (preferred, fallback): (Vec<usize>, Vec<usize>) =
        (0..mask.params()).filter(|&i| !mask.active[i]).partition(|&i| !skip[i]);
    let mut grown = pick(preferred, count, &mut source);
    let missing = count - grown.len();
    let shortfall = if missing > 0 {
        let extra = pick(fallback, missing, &mut source);
        let n = extra.len();
        grown.extend(extra);
        n
    } else {
        0
    };
    grown.sort_unstable();
    for &i in &grown {
        mask.active[i] = true;
    }
    GrowOutcome { grown, shortfall }
}

/// How the DST exploration rate evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateSchedule {
    Constant,
    /// `p(t) = p₀/2 · (1 + cos(π t / T_end))`.
    Cosine,
}

impl fmt::Display for RateSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RateSchedule::Constant => "constant",
            RateSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for RateSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(RateSchedule::Constant),
            "cosine" => Ok(RateSchedule::Cosine),
            other => Err(Error::Config(format!("unknown rate schedule '{other}'"))),
        }
    }
}

/// Optimizer steps between connectivity updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateInterval {
    /// Largest interval that still gives a run at least 20 updates.
    Auto,
    Steps(usize),
}

impl UpdateInterval {
    pub const AUTO_MIN_EVENTS: usize = 20;

    pub fn resolve(self, total_steps: usize) -> usize {
        self.resolve_phases(&[total_steps])
    }

    /// Resolves the interval for a run split into phases whose step counters
    /// restart at zero, so each phase contributes `⌊len / ΔT⌋` updates.
    pub fn resolve_phases(self, phase_steps: &[usize]) -> usize {
        match self {
            UpdateInterval::Steps(n) => n.max(1),
            UpdateInterval::Auto => {
                let events = |dt: usize| phase_steps.iter().map(|&l| l / dt).sum::<usize>();
                let total: usize = phase_steps.iter().sum();
                // events(dt) ≤ total / dt, so no interval above total / 20 qualifies
                let mut dt = (total / Self::AUTO_MIN_EVENTS).max(1);
                while dt > 1 && events(dt) < Self::AUTO_MIN_EVENTS {
                    dt -= 1;
                }
                dt
            }
        }
    }
}

impl fmt::Display for UpdateInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateInterval::Auto => f.write_str("auto"),
            UpdateInterval::Steps(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for UpdateInterval {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(UpdateInterval::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(UpdateInterval::Steps(n)),
            _ => Err(Error::Config(format!(
                "update interval must be 'auto' or a positive integer, got '{s}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationConfig {
    /// Fraction `p` of active weights replaced at each update.
    pub rate: f64,
    pub interval: UpdateInterval,
    pub schedule: RateSchedule,
    pub growth: Growth,
    /// Fraction `q` replaced by the perturbation between refinement phases.
    pub global_rate: f64,
    /// Bar just-pruned positions from being regrown in the same update.
    pub exclude_pruned: bool,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            rate: 0.5,
            interval: UpdateInterval::Auto,
            schedule: RateSchedule::Constant,
            growth: Growth::Gradient,
            global_rate: 0.8,
            exclude_pruned: false,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!("p = {} must lie in (0, 1)", self.rate)));
        }
        if !(self.global_rate > 0.0 && self.global_rate < 1.0) {
            return Err(Error::Config(format!("q = {} must lie in (0, 1)", self.global_rate)));
        }
        if let UpdateInterval::Steps(0) = self.interval {
            return Err(Error::Config("delta_t must be at least 1".into()));
        }
        Ok(())
    }

    /// Exploration rate at global step `step` of a run lasting `total_steps`.
    pub fn rate_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            RateSchedule::Constant => self.rate,
            RateSchedule::Cosine => {
                if total_steps == 0 {
                    return self.rate;
                }
                let frac = (step as f64 / total_steps as f64).min(1.0);
                self.rate / 2.0 * (1.0 + (PI * frac).cos())
            }
        }
    }
}

/// Summary of one prune-and-grow update.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationEvent {
    pub rate: f64,
    pub pruned: Vec<usize>,
    pub grown: Vec<usize>,
    /// Regrown positions that came from the just-pruned set.
    pub shortfall: usize,
}

impl ExplorationEvent {
    pub fn replaced(&self) -> usize {
        self.grown.iter().sum()
    }
}

/// Prunes a fraction `rate` of every layer by magnitude and regrows the same
/// number of positions. Pruned and grown weights are set to exactly zero and
/// their momentum is cleared.
pub fn explore(
    net: &mut SparseNetwork,
    opt: Option<&mut OptimizerState>,
    grads: Option<&Gradients>,
    rate: f64,
    growth: Growth,
    exclude_pruned: bool,
    rng: &mut Rng,
) -> Result<ExplorationEvent> {
    if growth == Growth::Gradient {
        match grads {
            None => return Err(Error::InvalidArgument("gradient growth needs dense gradients".into())),
            Some(g) if g.layers.len() != net.layers.len() => {
                return Err(Error::dims("explore", "gradient layer count"))
            }
            _ => {}
        }
    }
    let mut opt = opt;
    let mut event = ExplorationEvent {
        rate,
        pruned: Vec::with_capacity(net.layers.len()),
        grown: Vec::with_capacity(net.layers.len()),
        shortfall: 0,
    };
    for l in 0..net.layers.len() {
        let (mut mask, pruned) = prune_magnitude(&net.masks.layers[l], net.layers[l].weights.as_slice(), rate);
        let excluded: &[usize] = if exclude_pruned { &pruned } else { &[] };
        let source = match growth {
            Growth::Gradient => GrowthSource::Gradient(grads.expect("checked above").layers[l].weights.as_slice()),
            Growth::Random => GrowthSource::Random(&mut *rng),
        };
        let outcome = grow(&mut mask, pruned.len(), source, excluded);

        let weights = net.layers[l].weights.as_mut_slice();
        for &i in pruned.iter().chain(&outcome.grown) {
            weights[i] = 0.0;
        }
        if let Some(o) = opt.as_deref_mut() {
            o.reset_velocity(l, &pruned);
            o.reset_velocity(l, &outcome.grown);
        }
        event.pruned.push(pruned.len());
        event.grown.push(outcome.grown.len());
        event.shortfall += outcome.shortfall;
        net.masks.layers[l] = mask;
    }
    Ok(event)
}

/// Scheduled DST update at `step` (a multiple of the resolved interval).
pub fn exploration_step(
    net: &mut SparseNetwork,
    opt: Option<&mut OptimizerState>,
    grads: &Gradients,
    cfg: &ExplorationConfig,
    step: usize,
    total_steps: usize,
    rng: &mut Rng,
) -> Result<ExplorationEvent> {
    let interval = cfg.interval.resolve(total_steps);
    if !step.is_multiple_of(interval) {
        return Err(Error::InvalidArgument(format!(
            "step {step} is not a multiple of the update interval {interval}"
        )));
    }
    let rate = cfg.rate_at(step, total_steps);
    explore(net, opt, Some(grads), rate, cfg.growth, cfg.exclude_pruned, rng)
}

/// Large perturbation with rate `q` used to leave a converged basin.
pub fn global_perturbation(
    net: &mut SparseNetwork,
    opt: Option<&mut OptimizerState>,
    grads: &Gradients,
    cfg: &ExplorationConfig,
    rng: &mut Rng,
) -> Result<ExplorationEvent> {
    explore(
        net,
        opt,
        Some(grads),
        cfg.global_rate,
        cfg.growth,
        cfg.exclude_pruned,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn mask_from(active: &[bool]) -> LayerMask {
        LayerMask {
            rows: 1,
            cols: active.len(),
            active: active.to_vec(),
            budget: active.iter().filter(|&&a| a).count(),
        }
    }

    #[test]
    fn erk_single_layer_hits_target() {
        let shapes = [LayerShape::dense(30, 20)];
        let alloc = erk_densities(&shapes, 0.9).unwrap();
        assert!((alloc.densities[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn erk_zero_sparsity_is_dense() {
        let shapes = LayerShape::mlp(&[784, 100, 10]);
        let masks = erk_init(&shapes, 0.0, &mut Rng::new(0)).unwrap();
        assert!(masks.layers.iter().all(|l| l.active.iter().all(|&a| a)));
    }

    #[test]
    fn erk_rejects_bad_requests() {
        assert!(erk_densities(&[], 0.5).is_err());
        assert!(erk_densities(&[LayerShape::dense(2, 2)], 1.0).is_err());
        assert!(erk_densities(&[LayerShape::dense(2, 2)], -0.1).is_err());
    }

    #[test]
    fn erk_clips_small_layers_and_keeps_target() {
        // the 64->2 output layer saturates at S = 0.5
        let shapes = LayerShape::mlp(&[2, 64, 64, 2]);
        let alloc = erk_densities(&shapes, 0.5).unwrap();
        assert!(alloc.dense_layers.iter().any(|&d| d));
        let params: Vec<f64> = shapes.iter().map(|s| s.params() as f64).collect();
        let kept: f64 = alloc.densities.iter().zip(&params).map(|(d, p)| d * p).sum();
        let total: f64 = params.iter().sum();
        assert!((kept / total - 0.5).abs() < 1e-12);
        assert!(alloc.densities.iter().all(|&d| d <= 1.0));
    }

    #[test]
    fn erk_conv_score_includes_kernel() {
        let s = LayerShape::conv(16, 32, 3, 3);
        assert!((erk_score(&s) - (16.0 + 32.0 + 3.0 + 3.0) / (16.0 * 32.0 * 9.0)).abs() < 1e-15);
    }

    #[test]
    fn uniform_budgets() {
        let mut rng = Rng::new(0);
        let m = uniform_init(&[LayerShape::dense(4, 4)], 0.5, &mut rng).unwrap();
        assert_eq!(m.layers[0].active_count(), 8);
        let m = uniform_init(&[LayerShape::dense(10, 10), LayerShape::dense(20, 5)], 0.8, &mut rng).unwrap();
        assert_eq!(m.layers.iter().map(|l| l.budget).collect::<Vec<_>>(), vec![20, 20]);
        let m = uniform_init(&[LayerShape::dense(3, 7)], 0.0, &mut rng).unwrap();
        assert_eq!(m.layers[0].active_count(), 21);
    }

    #[test]
    fn prune_keeps_largest() {
        let mask = mask_from(&[true; 4]);
        let (m, pruned) = prune_magnitude(&mask, &[0.9, 0.1, 0.5, 0.3], 0.5);
        assert_eq!(m.active, vec![true, false, true, false]);
        assert_eq!(pruned, vec![1, 3]);
    }

    #[test]
    fn prune_ties_prefer_low_index() {
        let mask = mask_from(&[true; 4]);
        let (m, _) = prune_magnitude(&mask, &[0.5, 0.5, 0.5, 0.2], 0.5);
        assert_eq!(m.active, vec![true, true, false, false]);
    }

    #[test]
    fn prune_zero_rate_is_noop() {
        let mask = mask_from(&[true, false, true, true]);
        let (m, pruned) = prune_magnitude(&mask, &[0.1, 0.0, -0.2, 0.3], 0.0);
        assert_eq!(m, mask);
        assert!(pruned.is_empty());
    }

    #[test]
    fn keep_count_rounding() {
        assert_eq!(keep_count(10, 0.5), 5);
        assert_eq!(keep_count(10, 0.8), 2);
        assert_eq!(keep_count(10, 0.01), 10);
        assert_eq!(keep_count(3, 0.5), 2);
        assert_eq!(keep_count(1, 0.9), 1);
    }

    #[test]
    fn gradient_growth_picks_largest() {
        let mut mask = mask_from(&[true, false, false, false]);
        let out = grow(&mut mask, 2, GrowthSource::Gradient(&[5.0, 0.7, -0.2, 0.9]), &[]);
        assert_eq!(out.grown, vec![1, 3]);
        assert_eq!(mask.active, vec![true, true, false, true]);
    }

    #[test]
    fn grow_zero_is_noop() {
        let mut mask = mask_from(&[true, false, false]);
        let before = mask.clone();
        let out = grow(&mut mask, 0, GrowthSource::Gradient(&[0.0, 1.0, 2.0]), &[]);
        assert!(out.grown.is_empty());
        assert_eq!(mask, before);
    }

    #[test]
    fn grow_falls_back_to_excluded_positions() {
        let mut mask = mask_from(&[true, false, false, false]);
        let g = [0.0, 1.0, 3.0, 2.0];
        let out = grow(&mut mask, 2, GrowthSource::Gradient(&g), &[2, 3]);
        // position 1 is the only free candidate; the best excluded one fills the rest
        assert_eq!(out.grown, vec![1, 2]);
        assert_eq!(out.shortfall, 1);
        assert_eq!(mask.active_count(), 3);
    }

    #[test]
    fn random_growth_is_reproducible() {
        let base = mask_from(&[true, false, false, false, false, false]);
        let run = || {
            let mut m = base.clone();
            grow(&mut m, 2, GrowthSource::Random(&mut Rng::new(17)), &[]).grown
        };
        let a = run();
        assert_eq!(a.len(), 2);
        assert_eq!(a, run());
        assert!(a.iter().all(|&i| i != 0));
    }

    #[test]
    fn excluded_positions_are_not_regrown() {
        let mut mask = mask_from(&[false, false, false]);
        let out = grow(&mut mask, 1, GrowthSource::Gradient(&[9.0, 1.0, 2.0]), &[0]);
        assert_eq!(out.grown, vec![2]);
    }

    #[test]
    fn cosine_endpoints() {
        let cfg = ExplorationConfig {
            schedule: RateSchedule::Cosine,
            ..Default::default()
        };
        assert_eq!(cfg.rate_at(0, 100), 0.5);
        assert!(cfg.rate_at(100, 100).abs() < 1e-15);
        assert!((cfg.rate_at(50, 100) - 0.25).abs() < 1e-12);
    }

    fn toy_network(seed: u64) -> (SparseNetwork, Gradients) {
        let shapes = LayerShape::mlp(&[6, 10, 4]);
        let mut rng = Rng::new(seed);
        let masks = uniform_init(&shapes, 0.5, &mut rng).unwrap();
        let net = SparseNetwork::init(&shapes, masks, &mut rng).unwrap();
        let x = Matrix::from_vec(8, 6, (0..48).map(|_| rng.normal()).collect()).unwrap();
        let y: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let (g, _) = net.loss_and_gradients(&x, &y).unwrap();
        (net, g)
    }

    #[test]
    fn exploration_conserves_budget_and_zeroes_growth() {
        let (mut net, g) = toy_network(1);
        let before = net.masks.total_active();
        let cfg = ExplorationConfig {
            interval: UpdateInterval::Steps(10),
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&net, 0.1, 0.9, 0.0).unwrap();
        let old = net.masks.clone();
        let ev = exploration_step(&mut net, Some(&mut opt), &g, &cfg, 10, 100, &mut Rng::new(0)).unwrap();
        assert_eq!(net.masks.total_active(), before);
        assert!(net.masks.budgets_respected());
        assert_eq!(net.mask_violations(), 0);
        assert_eq!(ev.pruned, ev.grown);
        for (l, layer) in net.layers.iter().enumerate() {
            for (i, &on) in net.masks.layers[l].active.iter().enumerate() {
                if on && !old.layers[l].active[i] {
                    assert_eq!(layer.weights.as_slice()[i], 0.0);
                }
            }
        }
        assert!(exploration_step(&mut net, None, &g, &cfg, 11, 100, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn constant_rate_counts() {
        let shapes = [LayerShape::dense(5, 4)];
        let masks = MaskSet {
            layers: vec![LayerMask::from_active(4, 5, &[0, 2, 4, 6, 8, 10, 12, 14, 16, 18]).unwrap()],
        };
        let mut net = SparseNetwork::init(&shapes, masks, &mut Rng::new(3)).unwrap();
        let x = Matrix::from_vec(3, 5, (0..15).map(|i| i as f64 * 0.1).collect()).unwrap();
        let (g, _) = net.loss_and_gradients(&x, &[0, 1, 2]).unwrap();
        let ev = explore(&mut net, None, Some(&g), 0.5, Growth::Gradient, false, &mut Rng::new(0)).unwrap();
        assert_eq!(ev.pruned, vec![5]);
        assert_eq!(ev.grown, vec![5]);
    }

    #[test]
    fn tiny_global_rate_changes_nothing() {
        let shapes = [LayerShape::dense(5, 4)];
        let masks = MaskSet {
            layers: vec![LayerMask::from_active(4, 5, &[0, 2, 4, 6, 8, 10, 12, 14, 16, 18]).unwrap()],
        };
        let mut net = SparseNetwork::init(&shapes, masks, &mut Rng::new(3)).unwrap();
        let before = net.clone();
        let x = Matrix::from_vec(3, 5, (0..15).map(|i| i as f64 * 0.1).collect()).unwrap();
        let (g, _) = net.loss_and_gradients(&x, &[0, 1, 2]).unwrap();
        let cfg = ExplorationConfig {
            global_rate: 0.01,
            ..Default::default()
        };
        let ev = global_perturbation(&mut net, None, &g, &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(ev.replaced(), 0);
        assert_eq!(net, before);
    }

    #[test]
    fn larger_global_rate_moves_mask_further() {
        let mut hi = 0usize;
        let mut lo = 0usize;
        for seed in 0..20 {
            for (q, acc) in [(0.8, &mut hi), (0.1, &mut lo)] {
                let (mut net, g) = toy_network(seed);
                let old = net.masks.clone();
                let cfg = ExplorationConfig {
                    global_rate: q,
                    growth: Growth::Random,
                    ..Default::default()
                };
                global_perturbation(&mut net, None, &g, &cfg, &mut Rng::new(seed)).unwrap();
                *acc += old.hamming_distance(&net.masks);
            }
        }
        assert!(hi >= lo);
    }

    #[test]
    fn auto_interval_counts_events_per_phase() {
        assert_eq!(UpdateInterval::Auto.resolve(585), 29);
        assert_eq!(UpdateInterval::Auto.resolve(10), 1);
        assert_eq!(UpdateInterval::Steps(7).resolve_phases(&[3, 3]), 7);
        // 585 / 20 = 29 gives 6 + 3·4 = 18 updates with restarting counters
        let phases = [195, 130, 130, 130];
        let dt = UpdateInterval::Auto.resolve_phases(&phases);
        let events: usize = phases.iter().map(|l| l / dt).sum();
        assert!(events >= UpdateInterval::AUTO_MIN_EVENTS);
        assert!(phases.iter().map(|l| l / (dt + 1)).sum::<usize>() < UpdateInterval::AUTO_MIN_EVENTS);
    }
}
