//! Ensemble training procedures.
//!
//! * [`train_dst_ensemble`]: `M` independent sparse runs, each with periodic
//!   prune-and-grow updates, one ticket per run.
//! * [`train_edst_ensemble`]: a single run made of one high learning-rate
//!   exploration phase followed by `M` refinement phases. Each refinement ends
//!   with a snapshot and, except for the last one, a large global perturbation
//!   of the connectivity.
//! * [`train_static_baseline`]: the first procedure with the mask frozen at
//!   initialisation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops;
use crate::network::{sgd_step, Gradients, LayerShape, OptimizerState, SparseNetwork};
use crate::sparsity::{self, Distribution, ExplorationConfig, ExplorationEvent, Growth};
use crate::tensor::{Matrix, Rng};

// Rng streams derived from a member seed.
const STREAM_MASK: u64 = 1;
const STREAM_WEIGHTS: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_GROWTH: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Dst,
    Edst,
    Static,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dst => "dst",
            Method::Edst => "edst",
            Method::Static => "static",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dst" => Ok(Method::Dst),
            "edst" => Ok(Method::Edst),
            "static" => Ok(Method::Static),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Every training hyperparameter. Durations are in epochs, the update
/// interval in optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    /// Hidden layer widths; input and output widths come from the dataset.
    pub hidden: Vec<usize>,
    pub sparsity: f64,
    pub distribution: Distribution,
    /// Number of independent members for the one-run-per-member procedures.
    pub ensemble_size: usize,
    pub exploration: ExplorationConfig,
    /// Turns off every connectivity update (prune-and-grow and the global
    /// perturbation) for ablations.
    pub explore: bool,
    /// Training length of one independent member.
    pub epochs: usize,
    pub t_ex: usize,
    pub t_re: usize,
    pub t_total: usize,
    pub lr_explore: f64,
    pub lr_refine_1: f64,
    pub lr_refine_2: f64,
    /// Fraction of each refinement phase spent at `lr_refine_1`.
    pub refine_split: f64,
    /// Fractions of an independent member's run after which the learning rate
    /// steps from `lr_explore` to `lr_refine_1`, then to `lr_refine_2`.
    pub member_lr_milestones: (f64, f64),
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            sparsity: 0.8,
            distribution: Distribution::Erk,
            ensemble_size: 3,
            exploration: ExplorationConfig::default(),
            explore: true,
            epochs: 250,
            t_ex: 150,
            t_re: 100,
            t_total: 450,
            lr_explore: 0.1,
            lr_refine_1: 0.01,
            lr_refine_2: 0.001,
            refine_split: 0.5,
            member_lr_milestones: (0.5, 0.75),
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity {} must lie in [0, 1)", self.sparsity)));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        for (name, lr) in [
            ("lr_explore", self.lr_explore),
            ("lr_refine_1", self.lr_refine_1),
            ("lr_refine_2", self.lr_refine_2),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} = {lr} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.refine_split) {
            return Err(Error::Config("refine_split must lie in [0, 1]".into()));
        }
        let (a, b) = self.member_lr_milestones;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(Error::Config(
                "member_lr_milestones must satisfy 0 <= a <= b <= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        self.exploration.validate()
    }

    /// `M = (t_total − t_ex) / t_re`, required to be a positive integer.
    pub fn edst_members(&self) -> Result<usize> {
        if self.t_ex == 0 || self.t_re == 0 {
            return Err(Error::Config("t_ex and t_re must be positive".into()));
        }
        if self.t_total <= self.t_ex {
            return Err(Error::Config(format!(
                "t_total ({}) must exceed t_ex ({})",
                self.t_total, self.t_ex
            )));
        }
        let rest = self.t_total - self.t_ex;
        if !rest.is_multiple_of(self.t_re) {
            return Err(Error::Config(format!(
                "t_total - t_ex = {rest} is not divisible by t_re = {}",
                self.t_re
            )));
        }
        Ok(rest / self.t_re)
    }

    pub fn layer_shapes(&self, input_dim: usize, classes: usize) -> Vec<LayerShape> {
        let widths: Vec<usize> = std::iter::once(input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect();
        LayerShape::mlp(&widths)
    }

    /// Learning rate of an independent member at step `step` of `total`.
    pub fn member_lr(&self, step: usize, total: usize) -> f64 {
        let frac = step as f64 / total.max(1) as f64;
        let (a, b) = self.member_lr_milestones;
        if frac < a {
            self.lr_explore
        } else if frac < b {
            self.lr_refine_1
        } else {
            self.lr_refine_2
        }
    }
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size)
}

/// Where a ticket came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub method: Method,
    /// 1-based member index.
    pub member: usize,
    pub seed: u64,
    /// Global optimizer steps bounding the phase that produced the ticket.
    pub phase_start: usize,
    pub phase_end: usize,
    pub achieved_sparsity: f64,
    pub final_loss: f64,
}

impl Provenance {
    pub fn to_text(&self) -> String {
        format!(
            "method={}\nmember={}\nseed={}\nphase_start={}\nphase_end={}\nachieved_sparsity={}\nfinal_loss={}\n",
            self.method,
            self.member,
            self.seed,
            self.phase_start,
            self.phase_end,
            self.achieved_sparsity,
            self.final_loss
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Provenance {
            method: Method::Dst,
            member: 0,
            seed: 0,
            phase_start: 0,
            phase_end: 0,
            achieved_sparsity: 0.0,
            final_loss: f64::NAN,
        };
        let bad = |k: &str, v: &str| Error::Config(format!("provenance field {k} = '{v}'"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("provenance line '{line}'")))?;
            match k {
                "method" => p.method = v.parse()?,
                "member" => p.member = v.parse().map_err(|_| bad(k, v))?,
                "seed" => p.seed = v.parse().map_err(|_| bad(k, v))?,
                "phase_start" => p.phase_start = v.parse().map_err(|_| bad(k, v))?,
                "phase_end" => p.phase_end = v.parse().map_err(|_| bad(k, v))?,
                "achieved_sparsity" => p.achieved_sparsity = v.parse().map_err(|_| bad(k, v))?,
                "final_loss" => p.final_loss = v.parse().map_err(|_| bad(k, v))?,
                _ => {}
            }
        }
        Ok(p)
    }
}

/// A converged sparse subnetwork used as one ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct Ticket {
    pub network: SparseNetwork,
    pub provenance: Provenance,
}

impl Ticket {
    pub fn sparsity(&self) -> f64 {
        self.network.masks.global_sparsity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Scheduled prune-and-grow with rate `p`.
    Dst,
    /// Perturbation with rate `q` between refinement phases.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub step: usize,
    pub kind: EventKind,
    pub rate: f64,
    pub replaced: usize,
    /// Active weights per layer right after the update.
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    /// Exploration rate in effect at the end of the epoch.
    pub rate: f64,
    /// Cumulative training FLOPs.
    pub flops: f64,
}

/// A contiguous run of steps trained at one learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSegment {
    pub start_step: usize,
    pub end_step: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub events: Vec<EventRecord>,
    pub lr_segments: Vec<LrSegment>,
}

impl TrainLog {
    pub fn total_flops(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.flops)
    }

    pub fn dst_events(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Dst).count()
    }

    fn record_lr(&mut self, step: usize, lr: f64) {
        match self.lr_segments.last_mut() {
            Some(seg) if seg.lr == lr && seg.end_step + 1 == step => seg.end_step = step,
            _ => self.lr_segments.push(LrSegment {
                start_step: step,
                end_step: step,
                lr,
            }),
        }
    }

    /// Tab-separated epoch table followed by the event table.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tstep\tlr\tloss\taccuracy\trate\tflops\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}\n",
                e.epoch, e.step, e.lr, e.loss, e.accuracy, e.rate, e.flops
            ));
        }
        out.push_str("\nevent_step\tkind\trate\treplaced\tactive\n");
        for ev in &self.events {
            let kind = match ev.kind {
                EventKind::Dst => "dst",
                EventKind::Global => "global",
            };
            let active: Vec<String> = ev.active.iter().map(ToString::to_string).collect();
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{}\t{}\n",
                ev.step,
                kind,
                ev.rate,
                ev.replaced,
                active.join(",")
            ));
        }
        out
    }
}

/// One member's output.
#[derive(Debug, Clone)]
pub struct MemberRun {
    pub ticket: Ticket,
    pub log: TrainLog,
}

/// A member that diverged, with the state it had at the start of the
/// failing epoch.
#[derive(Debug)]
pub struct MemberFailure {
    pub member: usize,
    pub error: Error,
    pub last_good: Option<Box<Ticket>>,
}

#[derive(Debug)]
pub struct EnsembleRun {
    pub tickets: Vec<Ticket>,
    pub logs: Vec<TrainLog>,
    pub failures: Vec<MemberFailure>,
}

/// Mutable state of one training trajectory.
struct Trainer<'a> {
    data: &'a Dataset,
    cfg: &'a ScheduleConfig,
    method: Method,
    member: usize,
    seed: u64,
    shapes: Vec<LayerShape>,
    net: SparseNetwork,
    opt: OptimizerState,
    shuffle_rng: Rng,
    growth_rng: Rng,
    step: usize,
    epoch: usize,
    total_steps: usize,
    interval: usize,
    flops: f64,
    last_grads: Option<Gradients>,
    last_loss: f64,
    log: TrainLog,
}

struct Diverged {
    error: Error,
    last_good: SparseNetwork,
}

impl<'a> Trainer<'a> {
    fn new(
        data: &'a Dataset,
        cfg: &'a ScheduleConfig,
        method: Method,
        member: usize,
        seed: u64,
        phases: &[usize],
    ) -> Result<Self> {
        if data.train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let shapes = cfg.layer_shapes(data.dim(), data.num_classes);
        let masks = sparsity::init_masks(
            cfg.distribution,
            &shapes,
            cfg.sparsity,
            &mut Rng::with_stream(seed, STREAM_MASK),
        )?;
        let net = SparseNetwork::init(&shapes, masks, &mut Rng::with_stream(seed, STREAM_WEIGHTS))?;
        let opt = OptimizerState::new(&net, cfg.lr_explore, cfg.momentum, cfg.weight_decay)?;
        Ok(Self {
            data,
            cfg,
            method,
            member,
            seed,
            shapes,
            net,
            opt,
            shuffle_rng: Rng::with_stream(seed, STREAM_SHUFFLE),
            growth_rng: Rng::with_stream(seed, STREAM_GROWTH),
            step: 0,
            epoch: 0,
            total_steps: phases.iter().sum(),
            interval: cfg.exploration.interval.resolve_phases(phases),
            flops: 0.0,
            last_grads: None,
            last_loss: f64::NAN,
            log: TrainLog::default(),
        })
    }

    fn spe(&self) -> usize {
        steps_per_epoch(self.data.train.len(), self.cfg.batch_size)
    }

    fn densities(&self) -> Vec<f64> {
        self.net.masks.densities()
    }

    /// Trains `epochs` epochs. `lr_at(local_step, phase_steps)` gives the
    /// learning rate; connectivity updates fire when the phase-local step is
    /// a multiple of the update interval.
    fn run_phase(
        &mut self,
        epochs: usize,
        lr_at: impl Fn(usize, usize) -> f64,
        explore: bool,
    ) -> std::result::Result<(), Diverged> {
        let phase_steps = epochs * self.spe();
        let mut local = 0usize;
        let densities = self.densities();
        let per_sample_step = flops::step_flops(&self.shapes, &densities, 1);
        for _ in 0..epochs {
            let checkpoint = self.net.clone();
            let order = self.shuffle_rng.shuffle(self.data.train.len());
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            let mut seen = 0usize;
            let mut lr = 0.0;
            for batch_idx in order.chunks(self.cfg.batch_size) {
                local += 1;
                self.step += 1;
                lr = lr_at(local, phase_steps);
                self.opt.learning_rate = lr;
                self.log.record_lr(self.step, lr);

                let batch = self.data.train.subset(batch_idx);
                let fail = |error| Diverged {
                    error,
                    last_good: checkpoint.clone(),
                };
                let cache = self.net.forward(&batch.inputs).map_err(fail)?;
                let (grads, loss) = self.net.backward(&cache, &batch.labels).map_err(fail)?;
                if !loss.is_finite() {
                    return Err(fail(Error::Diverged {
                        member: self.member,
                        step: self.step,
                    }));
                }
                correct += cache
                    .probabilities
                    .argmax_rows()
                    .iter()
                    .zip(&batch.labels)
                    .filter(|(p, y)| p == y)
                    .count();
                seen += batch.len();
                loss_sum += loss * batch.len() as f64;
                sgd_step(&mut self.net, &grads, &mut self.opt).map_err(fail)?;
                if !self.net.layers.iter().all(|l| l.weights.all_finite()) {
                    return Err(fail(Error::Diverged {
                        member: self.member,
                        step: self.step,
                    }));
                }
                self.flops += per_sample_step * batch.len() as f64;

                if explore && local.is_multiple_of(self.interval) {
                    let rate = self.cfg.exploration.rate_at(self.step, self.total_steps);
                    let event = sparsity::explore(
                        &mut self.net,
                        Some(&mut self.opt),
                        Some(&grads),
                        rate,
                        self.cfg.exploration.growth,
                        self.cfg.exploration.exclude_pruned,
                        &mut self.growth_rng,
                    )
                    .map_err(fail)?;
                    self.record_event(EventKind::Dst, &event, batch.len());
                }
                self.last_grads = Some(grads);
                self.last_loss = loss;
            }
            self.epoch += 1;
            let rate = if explore {
                self.cfg.exploration.rate_at(self.step, self.total_steps)
            } else {
                0.0
            };
            self.log.epochs.push(EpochRecord {
                epoch: self.epoch,
                step: self.step,
                lr,
                loss: loss_sum / seen.max(1) as f64,
                accuracy: correct as f64 / seen.max(1) as f64,
                rate,
                flops: self.flops,
            });
        }
        Ok(())
    }

    fn record_event(&mut self, kind: EventKind, event: &ExplorationEvent, batch_len: usize) {
        if self.cfg.exploration.growth == Growth::Gradient {
            self.flops += flops::dense_backward_flops(&self.shapes, batch_len);
        }
        self.log.events.push(EventRecord {
            step: self.step,
            kind,
            rate: event.rate,
            replaced: event.replaced(),
            active: self.net.masks.layers.iter().map(|m| m.active_count()).collect(),
        });
    }

    fn perturb(&mut self) -> Result<()> {
        let grads = match self.last_grads.take() {
            Some(g) => g,
            None => return Ok(()),
        };
        let event = sparsity::global_perturbation(
            &mut self.net,
            Some(&mut self.opt),
            &grads,
            &self.cfg.exploration,
            &mut self.growth_rng,
        )?;
        let batch_len = self.cfg.batch_size.min(self.data.train.len());
        self.record_event(EventKind::Global, &event, batch_len);
        self.last_grads = Some(grads);
        Ok(())
    }

    fn snapshot(&self, member: usize, phase_start: usize) -> Ticket {
        Ticket {
            network: self.net.clone(),
            provenance: Provenance {
                method: self.method,
                member,
                seed: self.seed,
                phase_start,
                phase_end: self.step,
                achieved_sparsity: self.net.masks.global_sparsity(),
                final_loss: self.last_loss,
            },
        }
    }

    fn failure(&self, d: Diverged, member: usize) -> MemberFailure {
        let mut last_good = self.snapshot(member, 0);
        last_good.network = d.last_good;
        MemberFailure {
            member,
            error: d.error,
            last_good: Some(Box::new(last_good)),
        }
    }
}

fn train_member(
    data: &Dataset,
    cfg: &ScheduleConfig,
    member: usize,
    method: Method,
) -> std::result::Result<MemberRun, MemberFailure> {
    let seed = cfg.seed.wrapping_add(member as u64);
    let setup = |error| MemberFailure {
        member,
        error,
        last_good: None,
    };
    cfg.validate().map_err(setup)?;
    let phases = phase_steps(cfg, method, data.train.len()).map_err(setup)?;
    let mut trainer = Trainer::new(data, cfg, method, member, seed, &phases).map_err(setup)?;
    let explore = cfg.explore && method != Method::Static;
    let result = trainer.run_phase(cfg.epochs, |t, n| cfg.member_lr(t - 1, n), explore);
    if let Err(d) = result {
        return Err(trainer.failure(d, member));
    }
    Ok(MemberRun {
        ticket: trainer.snapshot(member, 0),
        log: trainer.log,
    })
}

/// One independent sparse run with seed `cfg.seed + member`.
pub fn train_dst_member(data: &Dataset, cfg: &ScheduleConfig, member: usize) -> Result<MemberRun> {
    train_member(data, cfg, member, Method::Dst).map_err(|f| f.error)
}

/// Like [`train_dst_member`] but keeps the last good state on divergence.
pub fn train_dst_member_detailed(
    data: &Dataset,
    cfg: &ScheduleConfig,
    member: usize,
) -> std::result::Result<MemberRun, MemberFailure> {
    train_member(data, cfg, member, Method::Dst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

fn train_independent(data: &Dataset, cfg: &ScheduleConfig, method: Method, exec: Execution) -> Result<EnsembleRun> {
    cfg.validate()?;
    let members: Vec<usize> = (1..=cfg.ensemble_size).collect();
    let results: Vec<_> = match exec {
        Execution::Parallel => members
            .par_iter()
            .map(|&j| train_member(data, cfg, j, method))
            .collect(),
        Execution::Sequential => members.iter().map(|&j| train_member(data, cfg, j, method)).collect(),
    };
    let mut run = EnsembleRun {
        tickets: Vec::new(),
        logs: Vec::new(),
        failures: Vec::new(),
    };
    for r in results {
        match r {
            Ok(m) => {
                run.tickets.push(m.ticket);
                run.logs.push(m.log);
            }
            Err(f) => run.failures.push(f),
        }
    }
    if run.tickets.is_empty() {
        let first = run.failures.remove(0);
        return Err(first.error);
    }
    Ok(run)
}

/// `M` independent sparse runs (seeds `seed+1 ..= seed+M`), ordered by member.
/// Diverged members are reported in `failures`; the call only errors when no
/// member survives.
pub fn train_dst_ensemble(data: &Dataset, cfg: &ScheduleConfig) -> Result<EnsembleRun> {
    train_independent(data, cfg, Method::Dst, Execution::Parallel)
}

pub fn train_dst_ensemble_with(data: &Dataset, cfg: &ScheduleConfig, exec: Execution) -> Result<EnsembleRun> {
    train_independent(data, cfg, Method::Dst, exec)
}

/// Independent runs with the initial mask frozen.
pub fn train_static_baseline(data: &Dataset, cfg: &ScheduleConfig) -> Result<EnsembleRun> {
    train_independent(data, cfg, Method::Static, Execution::Parallel)
}

/// Exploration phase of `t_ex` epochs at `lr_explore`, then `M` refinement
/// phases of `t_re` epochs (first `refine_split` at `lr_refine_1`, the rest at
/// `lr_refine_2`). Uses seed `cfg.seed + 1`.
pub fn train_edst_ensemble(data: &Dataset, cfg: &ScheduleConfig) -> Result<EnsembleRun> {
    cfg.validate()?;
    let m = cfg.edst_members()?;
    let phases = phase_steps(cfg, Method::Edst, data.train.len())?;
    let seed = cfg.seed.wrapping_add(1);
    let mut trainer = Trainer::new(data, cfg, Method::Edst, 1, seed, &phases)?;
    let explore = cfg.explore;
    let diverged = |trainer: &Trainer, d: Diverged, j: usize| -> Result<EnsembleRun> {
        let f = trainer.failure(d, j);
        Err(f.error)
    };

    if let Err(d) = trainer.run_phase(cfg.t_ex, |_, _| cfg.lr_explore, explore) {
        return diverged(&trainer, d, 0);
    }
    let mut tickets = Vec::with_capacity(m);
    for j in 1..=m {
        let start = trainer.step;
        let split = cfg.refine_split;
        let lr = |t: usize, n: usize| {
            if (t as f64) <= split * n as f64 {
                cfg.lr_refine_1
            } else {
                cfg.lr_refine_2
            }
        };
        if let Err(d) = trainer.run_phase(cfg.t_re, lr, explore) {
            return diverged(&trainer, d, j);
        }
        tickets.push(trainer.snapshot(j, start));
        if j < m && explore {
            trainer.perturb()?;
        }
    }
    Ok(EnsembleRun {
        tickets,
        logs: vec![trainer.log],
        failures: Vec::new(),
    })
}

/// Dispatches on method.
pub fn train(data: &Dataset, cfg: &ScheduleConfig, method: Method) -> Result<EnsembleRun> {
    match method {
        Method::Dst => train_dst_ensemble(data, cfg),
        Method::Edst => train_edst_ensemble(data, cfg),
        Method::Static => train_static_baseline(data, cfg),
    }
}

/// Total optimizer steps a method's schedule takes on `data`.
pub fn schedule_steps(cfg: &ScheduleConfig, method: Method, n_train: usize) -> Result<usize> {
    let spe = steps_per_epoch(n_train, cfg.batch_size);
    Ok(match method {
        Method::Dst | Method::Static => cfg.ensemble_size * cfg.epochs * spe,
        Method::Edst => {
            cfg.edst_members()?;
            cfg.t_total * spe
        }
    })
}

/// Optimizer steps of each phase of one training run: a single phase for an
/// independent member, exploration then `M` refinements for the single-run
/// ensemble.
pub fn phase_steps(cfg: &ScheduleConfig, method: Method, n_train: usize) -> Result<Vec<usize>> {
    let spe = steps_per_epoch(n_train, cfg.batch_size);
    Ok(match method {
        Method::Edst => {
            let m = cfg.edst_members()?;
            std::iter::once(cfg.t_ex * spe)
                .chain(std::iter::repeat_n(cfg.t_re * spe, m))
                .collect()
        }
        _ => vec![cfg.epochs * spe],
    })
}

/// Update interval a run of `method` uses on a training set of `n_train`.
pub fn resolved_interval(cfg: &ScheduleConfig, method: Method, n_train: usize) -> Result<usize> {
    Ok(cfg
        .exploration
        .interval
        .resolve_phases(&phase_steps(cfg, method, n_train)?))
}

/// Analytic training and inference cost of a method's whole schedule.
///
/// Counts every optimizer step at the initial densities (budgets never change)
/// and, with `dense_overhead`, one dense backward per connectivity update.
pub fn schedule_flops(
    cfg: &ScheduleConfig,
    method: Method,
    n_train: usize,
    input_dim: usize,
    classes: usize,
    dense_overhead: bool,
) -> Result<flops::FlopsReport> {
    cfg.validate()?;
    let shapes = cfg.layer_shapes(input_dim, classes);
    // budgets depend only on the shapes and sparsity, not on the draw
    let densities = sparsity::init_masks(cfg.distribution, &shapes, cfg.sparsity, &mut Rng::new(0))?.densities();
    let spe = steps_per_epoch(n_train, cfg.batch_size);
    let interval = resolved_interval(cfg, method, n_train)?;
    let events = match method {
        Method::Static => 0,
        _ if !cfg.explore => 0,
        Method::Dst => cfg.ensemble_size * (cfg.epochs * spe / interval),
        Method::Edst => {
            let m = cfg.edst_members()?;
            cfg.t_ex * spe / interval + m * (cfg.t_re * spe / interval) + (m - 1)
        }
    };
    let mut model = flops::FlopsModel::new(
        shapes,
        densities,
        schedule_steps(cfg, method, n_train)? as u64,
        cfg.batch_size.min(n_train) as u64,
    );
    model.exploration_events = events as u64;
    model.dense_exploration_overhead = dense_overhead && cfg.exploration.growth == Growth::Gradient;
    flops::training_flops(&model)
}

/// Stacks member predictions on `inputs`.
pub fn predict_all(tickets: &[Ticket], inputs: &Matrix) -> Result<Vec<Matrix>> {
    tickets.iter().map(|t| t.network.predict(inputs)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind};
    use crate::sparsity::UpdateInterval;

    fn small_cfg() -> ScheduleConfig {
        ScheduleConfig {
            hidden: vec![16, 16],
            epochs: 4,
            t_ex: 2,
            t_re: 2,
            t_total: 8,
            batch_size: 32,
            exploration: ExplorationConfig {
                interval: UpdateInterval::Steps(5),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn moons() -> Dataset {
        gen_synthetic(SyntheticKind::TwoMoons, 300, 0.1, 7).unwrap()
    }

    #[test]
    fn edst_member_count() {
        let mut cfg = ScheduleConfig::default();
        assert_eq!(cfg.edst_members().unwrap(), 3);
        cfg.t_total = 850;
        assert_eq!(cfg.edst_members().unwrap(), 7);
        cfg.t_total = 455;
        assert!(cfg.edst_members().is_err());
        cfg.t_total = 150;
        assert!(cfg.edst_members().is_err());
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let data = moons();
        let cfg = ScheduleConfig {
            epochs: 0,
            ..small_cfg()
        };
        let run = train_dst_member(&data, &cfg, 1).unwrap();
        let shapes = cfg.layer_shapes(2, 2);
        let masks = sparsity::erk_init(&shapes, cfg.sparsity, &mut Rng::with_stream(1, STREAM_MASK)).unwrap();
        let net = SparseNetwork::init(&shapes, masks, &mut Rng::with_stream(1, STREAM_WEIGHTS)).unwrap();
        assert_eq!(run.ticket.network, net);
    }

    #[test]
    fn member_runs_are_deterministic() {
        let data = moons();
        let cfg = small_cfg();
        let a = train_dst_member(&data, &cfg, 2).unwrap();
        let b = train_dst_member(&data, &cfg, 2).unwrap();
        assert_eq!(a.ticket, b.ticket);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn parallel_matches_sequential() {
        let data = moons();
        let cfg = small_cfg();
        let par = train_dst_ensemble_with(&data, &cfg, Execution::Parallel).unwrap();
        let seq = train_dst_ensemble_with(&data, &cfg, Execution::Sequential).unwrap();
        assert_eq!(par.tickets, seq.tickets);
        assert_eq!(par.tickets.len(), 3);
        for w in par.tickets.windows(2) {
            assert!(w[0].network.masks.hamming_distance(&w[1].network.masks) > 0);
        }
        let one = train_dst_ensemble(
            &data,
            &ScheduleConfig {
                ensemble_size: 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(one.tickets[0], train_dst_member(&data, &cfg, 1).unwrap().ticket);
    }

    #[test]
    fn static_masks_never_move() {
        let data = moons();
        let cfg = small_cfg();
        let run = train_static_baseline(&data, &cfg).unwrap();
        for t in &run.tickets {
            let shapes = cfg.layer_shapes(2, 2);
            let init = sparsity::erk_init(
                &shapes,
                cfg.sparsity,
                &mut Rng::with_stream(t.provenance.seed, STREAM_MASK),
            )
            .unwrap();
            assert_eq!(t.network.masks, init);
            assert!((t.sparsity() - cfg.sparsity).abs() < 0.005);
        }
        assert!(run.logs.iter().all(|l| l.events.is_empty()));
    }

    #[test]
    fn edst_phases_and_lr_trace() {
        let data = moons();
        let cfg = small_cfg();
        let run = train_edst_ensemble(&data, &cfg).unwrap();
        assert_eq!(run.tickets.len(), 3);
        let log = &run.logs[0];
        let lrs: Vec<f64> = log.lr_segments.iter().map(|s| s.lr).collect();
        assert_eq!(lrs, vec![0.1, 0.01, 0.001, 0.01, 0.001, 0.01, 0.001]);
        let globals = log.events.iter().filter(|e| e.kind == EventKind::Global).count();
        assert_eq!(globals, 2);
        let budget = run.tickets[0].network.masks.total_budget();
        for t in &run.tickets {
            assert!(t.network.masks.budgets_respected());
            assert_eq!(t.network.masks.total_active(), budget);
            assert_eq!(t.network.mask_violations(), 0);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let data = moons();
        let cfg = ScheduleConfig {
            lr_explore: 1e200,
            weight_decay: 0.0,
            ..small_cfg()
        };
        match train_dst_member_detailed(&data, &cfg, 1) {
            Err(f) => {
                assert!(matches!(f.error, Error::Diverged { member: 1, .. }));
                assert!(f.last_good.is_some());
            }
            Ok(_) => panic!("expected divergence"),
        }
        assert!(train_dst_ensemble(&data, &cfg).is_err());
    }

    #[test]
    fn flops_are_nondecreasing() {
        let data = moons();
        let run = train_dst_member(&data, &small_cfg(), 1).unwrap();
        let f: Vec<f64> = run.log.epochs.iter().map(|e| e.flops).collect();
        assert!(f.windows(2).all(|w| w[1] >= w[0]));
        assert!(f[0] > 0.0);
    }
}
