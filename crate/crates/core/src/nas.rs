//! Cost-aware architecture search over a split-attention path space.
//!
//! Architectures are a stem convolution followed by stages; every stage is a
//! path of `depth` convolutions (optionally densely connected) closed by a
//! 1×1 combine convolution. Candidates are ranked by the weighted-product
//! reward `acc · (cost / target)^α`.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Kernel {
    #[serde(rename = "k1")]
    K1,
    #[serde(rename = "k3")]
    K3,
    #[serde(rename = "k5")]
    K5,
    #[serde(rename = "k7")]
    K7,
    #[serde(rename = "a1x3_3x1")]
    A1x3_3x1,
    #[serde(rename = "a1x5_5x1")]
    A1x5_5x1,
    #[serde(rename = "a1x7_7x1")]
    A1x7_7x1,
}

impl Kernel {
    pub const ALL: [Kernel; 7] = [
        Kernel::K1,
        Kernel::K3,
        Kernel::K5,
        Kernel::K7,
        Kernel::A1x3_3x1,
        Kernel::A1x5_5x1,
        Kernel::A1x7_7x1,
    ];

    pub fn size(self) -> u64 {
        match self {
            Kernel::K1 => 1,
            Kernel::K3 | Kernel::A1x3_3x1 => 3,
            Kernel::K5 | Kernel::A1x5_5x1 => 5,
            Kernel::K7 | Kernel::A1x7_7x1 => 7,
        }
    }

    pub fn is_asymmetric(self) -> bool {
        matches!(self, Kernel::A1x3_3x1 | Kernel::A1x5_5x1 | Kernel::A1x7_7x1)
    }

    /// `(kh, kw)` of the convolutions this kernel expands to.
    pub fn convs(self) -> Vec<(u64, u64)> {
        let k = self.size();
        if self.is_asymmetric() {
            vec![(1, k), (k, 1)]
        } else {
            vec![(k, k)]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub kernel: Kernel,
    pub depth: usize,
    pub dense: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub path: PathSpec,
    pub channels: usize,
    pub stride: usize,
}

fn default_input_channels() -> usize {
    3
}

/// `stem_channels = 0` means no stem: stages read the input directly.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub stem_channels: usize,
    pub input_resolution: usize,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Twice the multiply-accumulate count.
    pub flops: u64,
    pub params: u64,
    pub latency_ms: Option<f64>,
}

impl std::ops::Add for CostEstimate {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            flops: self.flops + o.flops,
            params: self.params + o.params,
            latency_ms: match (self.latency_ms, o.latency_ms) {
                (Some(a), Some(b)) => Some(a + b),
                (a, b) => a.or(b),
            },
        }
    }
}

fn out_size(h: usize, stride: usize) -> usize {
    h.div_ceil(stride)
}

/// Cost of one `kh × kw` convolution with "same" padding on an `h × w` input.
pub fn conv2d_cost(h: usize, w: usize, cin: usize, cout: usize, kh: u64, kw: u64, stride: usize) -> CostEstimate {
    let (ho, wo) = (out_size(h, stride) as u64, out_size(w, stride) as u64);
    let weights = kh * kw * cin as u64 * cout as u64;
    CostEstimate {
        flops: 2 * ho * wo * weights,
        params: weights,
        latency_ms: None,
    }
}

/// Cost of one kernel position; asymmetric kernels are two stacked 1-D convolutions,
/// the first carrying the stride and the channel change.
pub fn kernel_cost(h: usize, cin: usize, cout: usize, kernel: Kernel, stride: usize) -> CostEstimate {
    let mut total = CostEstimate::default();
    let (mut h, mut c, mut s) = (h, cin, stride);
    for (kh, kw) in kernel.convs() {
        total = total + conv2d_cost(h, h, c, cout, kh, kw, s);
        h = out_size(h, s);
        c = cout;
        s = 1;
    }
    total
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArch(m));
        if self.input_channels == 0 || self.input_resolution == 0 {
            return bad("input channels and resolution must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.stride == 0 {
                return bad(format!("stage {i}: channels and stride must be positive"));
            }
            if !(2..=4).contains(&s.path.depth) {
                return bad(format!("stage {i}: depth {} outside 2..=4", s.path.depth));
            }
        }
        Ok(())
    }

    fn stem_cost(&self) -> CostEstimate {
        if self.stem_channels == 0 {
            CostEstimate::default()
        } else {
            kernel_cost(self.input_resolution, self.input_channels, self.stem_channels, Kernel::K3, 1)
        }
    }

    /// Per-stage `(input resolution, input channels)`.
    pub fn stage_inputs(&self) -> Vec<(usize, usize)> {
        let mut h = self.input_resolution;
        let mut c = if self.stem_channels == 0 {
            self.input_channels
        } else {
            self.stem_channels
        };
        self.stages
            .iter()
            .map(|s| {
                let here = (h, c);
                h = out_size(h, s.stride);
                c = s.channels;
                here
            })
            .collect()
    }

    /// Stem cost followed by one entry per stage; the entries sum to [`ArchSpec::cost`].
    pub fn cost_breakdown(&self) -> (CostEstimate, Vec<CostEstimate>) {
        let stages = self
            .stages
            .iter()
            .zip(self.stage_inputs())
            .map(|(s, (h, cin))| stage_cost(h, cin, s))
            .collect();
        (self.stem_cost(), stages)
    }

    pub fn cost(&self) -> CostEstimate {
        let (stem, stages) = self.cost_breakdown();
        stages.into_iter().fold(stem, |a, b| a + b)
    }

    pub fn flops(&self) -> u64 {
        self.cost().flops
    }

    pub fn params(&self) -> u64 {
        self.cost().params
    }
}

/// Path convolutions plus the 1×1 combine. Layer `j > 0` of a dense path reads
/// the concatenation of all earlier layer outputs (`j · cout` channels) and the
/// combine reads all `depth` outputs.
pub fn stage_cost(h: usize, cin: usize, s: &Stage) -> CostEstimate {
    let cout = s.channels;
    let mut total = kernel_cost(h, cin, cout, s.path.kernel, s.stride);
    let h = out_size(h, s.stride);
    for j in 1..s.path.depth {
        let c = if s.path.dense { j * cout } else { cout };
        total = total + kernel_cost(h, c, cout, s.path.kernel, 1);
    }
    let combine_in = if s.path.dense { s.path.depth * cout } else { cout };
    total + conv2d_cost(h, h, combine_in, cout, 1, 1, 1)
}

pub fn flops(arch: &ArchSpec) -> u64 {
    arch.flops()
}

pub fn params(arch: &ArchSpec) -> u64 {
    arch.params()
}

/// One latency measurement; `None` fields match anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyEntry {
    #[serde(default)]
    pub kernel: Option<Kernel>,
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default)]
    pub dense: Option<bool>,
    #[serde(default)]
    pub channels: Option<usize>,
    #[serde(default)]
    pub resolution: Option<usize>,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyTable {
    pub entries: Vec<LatencyEntry>,
}

impl LatencyTable {
    /// Latency of one stage, keyed on its input resolution and output channels.
    /// Entries without an exact channel match are interpolated linearly between
    /// the nearest measured channel counts on either side.
    pub fn stage_ms(&self, stage_index: usize, s: &Stage, resolution: usize) -> Result<f64> {
        let cands: Vec<&LatencyEntry> = self
            .entries
            .iter()
            .filter(|e| {
                e.kernel.is_none_or(|k| k == s.path.kernel)
                    && e.depth.is_none_or(|d| d == s.path.depth)
                    && e.dense.is_none_or(|d| d == s.path.dense)
                    && e.resolution.is_none_or(|r| r == resolution)
            })
            .collect();
        let q = s.channels;
        if let Some(e) = cands.iter().find(|e| e.channels == Some(q)) {
            return Ok(e.ms);
        }
        if let Some(e) = cands.iter().find(|e| e.channels.is_none()) {
            return Ok(e.ms);
        }
        let below = cands
            .iter()
            .filter_map(|e| e.channels.filter(|&c| c < q).map(|c| (c, e.ms)))
            .max_by_key(|&(c, _)| c);
        let above = cands
            .iter()
            .filter_map(|e| e.channels.filter(|&c| c > q).map(|c| (c, e.ms)))
            .min_by_key(|&(c, _)| c);
        match (below, above) {
            (Some((c0, t0)), Some((c1, t1))) => {
                let f = (q - c0) as f64 / (c1 - c0) as f64;
                Ok(t0 + f * (t1 - t0))
            }
            _ => Err(Error::TableMiss { stage: stage_index }),
        }
    }
}

/// Sum of per-stage table lookups.
pub fn latency(arch: &ArchSpec, table: &LatencyTable) -> Result<f64> {
    arch.stages
        .iter()
        .zip(arch.stage_inputs())
        .enumerate()
        .map(|(i, (s, (h, _)))| table.stage_ms(i, s, h))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostBackend {
    #[default]
    Flops,
    LatencyTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub target: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub cost_backend: CostBackend,
}

fn default_alpha() -> f64 {
    -0.07
}

impl RewardConfig {
    pub fn new(target: f64) -> Self {
        Self {
            target,
            alpha: default_alpha(),
            cost_backend: CostBackend::Flops,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target > 0.0 && self.target.is_finite()) {
            return Err(Error::InvalidConfig(format!("target cost {} must be positive", self.target)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidConfig("alpha must be finite".into()));
        }
        Ok(())
    }
}

/// `acc · (cost / target)^α`.
pub fn reward(acc: f64, cost: f64, cfg: &RewardConfig) -> Result<f64> {
    if !(cost > 0.0 && cost.is_finite()) {
        return Err(Error::NonPositiveCost(cost));
    }
    cfg.validate()?;
    Ok(acc * (cost / cfg.target).powf(cfg.alpha))
}

/// Multiplies channels, path depth and input resolution; depths stay in 2..=4
/// and channels at least 1.
pub fn scale_arch(arch: &ArchSpec, width_mult: f64, depth_mult: f64, resolution_mult: f64) -> Result<ArchSpec> {
    for m in [width_mult, depth_mult, resolution_mult] {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidArch(format!("multiplier {m} must be positive")));
        }
    }
    let ch = |c: usize| ((c as f64 * width_mult).round() as usize).max(1);
    Ok(ArchSpec {
        input_channels: arch.input_channels,
        stem_channels: if arch.stem_channels == 0 { 0 } else { ch(arch.stem_channels) },
        input_resolution: ((arch.input_resolution as f64 * resolution_mult).round() as usize).max(1),
        stages: arch
            .stages
            .iter()
            .map(|s| Stage {
                path: PathSpec {
                    depth: ((s.path.depth as f64 * depth_mult).round() as usize).clamp(2, 4),
                    ..s.path
                },
                channels: ch(s.channels),
                stride: s.stride,
            })
            .collect(),
    })
}

/// Allowed values of each field of one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageChoices {
    pub kernels: Vec<Kernel>,
    pub depths: Vec<usize>,
    pub dense: Vec<bool>,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl StageChoices {
    fn radices(&self) -> [usize; 5] {
        [
            self.kernels.len(),
            self.depths.len(),
            self.dense.len(),
            self.channels.len(),
            self.strides.len(),
        ]
    }

    fn stage(&self, g: &[usize]) -> Stage {
        Stage {
            path: PathSpec {
                kernel: self.kernels[g[0]],
                depth: self.depths[g[1]],
                dense: self.dense[g[2]],
            },
            channels: self.channels[g[3]],
            stride: self.strides[g[4]],
        }
    }
}

/// A finite product space, enumerated in mixed radix with the last field of the
/// last stage varying fastest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub stem_channels: usize,
    pub input_resolution: usize,
    pub stages: Vec<StageChoices>,
}

const FIELDS: usize = 5;

impl SearchSpace {
    /// The 756-architecture toy space: a free first stage (7 kernels × 3 depths
    /// × 2 wirings), a second stage limited to the regular 3/5/7 kernels, and a
    /// fixed third stage.
    pub fn toy() -> Self {
        let all = |kernels: Vec<Kernel>, depths: Vec<usize>, dense: Vec<bool>, ch, stride| StageChoices {
            kernels,
            depths,
            dense,
            channels: vec![ch],
            strides: vec![stride],
        };
        Self {
            input_channels: 3,
            stem_channels: 16,
            input_resolution: 32,
            stages: vec![
                all(Kernel::ALL.to_vec(), vec![2, 3, 4], vec![false, true], 16, 1),
                all(vec![Kernel::K3, Kernel::K5, Kernel::K7], vec![2, 3, 4], vec![false, true], 32, 2),
                all(vec![Kernel::K3], vec![2], vec![false], 64, 2),
            ],
        }
    }

    fn radices(&self) -> Vec<usize> {
        self.stages.iter().flat_map(|s| s.radices()).collect()
    }

    pub fn size(&self) -> u128 {
        self.radices().iter().map(|&r| r as u128).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.size() == 0 {
            return Err(Error::EmptySpace);
        }
        // every architecture must be valid; checking each field value is enough
        for s in &self.stages {
            if s.depths.iter().any(|d| !(2..=4).contains(d)) || s.channels.contains(&0) || s.strides.contains(&0) {
                return Err(Error::InvalidArch("search space contains invalid values".into()));
            }
        }
        if self.input_channels == 0 || self.input_resolution == 0 {
            return Err(Error::InvalidArch("input channels and resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn genome(&self, mut index: u128) -> Vec<usize> {
        let radices = self.radices();
        let mut g = vec![0; radices.len()];
        for (slot, &r) in g.iter_mut().zip(&radices).rev() {
            *slot = (index % r as u128) as usize;
            index /= r as u128;
        }
        g
    }

    pub fn index(&self, genome: &[usize]) -> u128 {
        genome
            .iter()
            .zip(self.radices())
            .fold(0u128, |acc, (&g, r)| acc * r as u128 + g as u128)
    }

    pub fn decode(&self, genome: &[usize]) -> ArchSpec {
        ArchSpec {
            input_channels: self.input_channels,
            stem_channels: self.stem_channels,
            input_resolution: self.input_resolution,
            stages: self
                .stages
                .iter()
                .zip(genome.chunks(FIELDS))
                .map(|(s, g)| s.stage(g))
                .collect(),
        }
    }

    pub fn arch(&self, index: u128) -> ArchSpec {
        self.decode(&self.genome(index))
    }
}

/// Smooth single-peaked accuracy surrogate: best at 5-wide kernels, depth 3 and
/// dense wiring, with a mild preference for asymmetric kernels.
pub fn synthetic_accuracy(arch: &ArchSpec) -> f64 {
    let mut penalty = 0.0;
    for (i, s) in arch.stages.iter().enumerate() {
        let w = 1.0 / (i + 1) as f64;
        let k = s.path.kernel.size() as f64;
        let d = s.path.depth as f64;
        penalty += w * (0.004 * (k - 5.0).powi(2) + 0.02 * (d - 3.0).powi(2));
        if !s.path.dense {
            penalty += w * 0.01;
        }
        if s.path.kernel.is_asymmetric() {
            penalty -= w * 0.005;
        }
    }
    (0.95 - penalty).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    #[default]
    Evolutionary,
    Random,
    Exhaustive,
}

impl std::str::FromStr for Controller {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evolutionary" => Ok(Self::Evolutionary),
            "random" => Ok(Self::Random),
            "exhaustive" => Ok(Self::Exhaustive),
            other => Err(Error::InvalidConfig(format!("unknown controller {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    pub population: usize,
    pub tournament: usize,
    pub elitism: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population: 16,
            tournament: 4,
            elitism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub reward: RewardConfig,
    pub controller: Controller,
    /// Number of evaluations; the exhaustive controller visits the first `budget` indices.
    pub budget: usize,
    pub seed: u64,
    pub evolution: EvolutionConfig,
    /// Concurrent evaluate calls; 1 evaluates sequentially.
    pub parallelism: usize,
}

impl SearchConfig {
    pub fn new(reward: RewardConfig, controller: Controller, budget: usize, seed: u64) -> Self {
        Self {
            reward,
            controller,
            budget,
            seed,
            evolution: EvolutionConfig::default(),
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub index: u128,
    pub arch: ArchSpec,
    pub acc: f64,
    pub cost: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: HistoryRecord,
    pub history: Vec<HistoryRecord>,
}

impl SearchResult {
    /// One JSON object per line.
    pub fn history_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.history {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

struct Evaluator<'a, F> {
    space: &'a SearchSpace,
    evaluate: &'a F,
    cfg: &'a SearchConfig,
    table: Option<&'a LatencyTable>,
    history: Vec<HistoryRecord>,
    seen: HashMap<u128, usize>,
}

impl<F: Fn(&ArchSpec) -> f64 + Sync> Evaluator<'_, F> {
    fn cost_of(&self, arch: &ArchSpec) -> Result<f64> {
        match self.cfg.reward.cost_backend {
            CostBackend::Flops => Ok(arch.flops() as f64),
            CostBackend::LatencyTable => {
                let table = self
                    .table
                    .ok_or_else(|| Error::InvalidConfig("latency backend needs a table".into()))?;
                latency(arch, table)
            }
        }
    }

    fn remaining(&self) -> usize {
        self.cfg.budget.saturating_sub(self.history.len())
    }

    /// Evaluates the unseen indices (deduplicated, order kept) and returns
    /// history positions for all of them.
    fn run(&mut self, indices: &[u128]) -> Result<Vec<usize>> {
        let mut fresh = Vec::new();
        for &i in indices {
            if !self.seen.contains_key(&i) && !fresh.contains(&i) && fresh.len() < self.remaining() {
                fresh.push(i);
            }
        }
        let archs: Vec<ArchSpec> = fresh.iter().map(|&i| self.space.arch(i)).collect();
        let evaluate = self.evaluate;
        let accs: Vec<f64> = if self.cfg.parallelism > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.cfg.parallelism)
                .build()
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            pool.install(|| archs.par_iter().map(evaluate).collect())
        } else {
            archs.iter().map(evaluate).collect()
        };
        for ((index, arch), acc) in fresh.into_iter().zip(archs).zip(accs) {
            let cost = self.cost_of(&arch)?;
            let reward = reward(acc, cost, &self.cfg.reward)?;
            self.seen.insert(index, self.history.len());
            self.history.push(HistoryRecord {
                step: self.history.len(),
                index,
                arch,
                acc,
                cost,
                reward,
            });
        }
        Ok(indices.iter().filter_map(|i| self.seen.get(i).copied()).collect())
    }

    fn better(&self, a: usize, b: usize) -> bool {
        let (ra, rb) = (&self.history[a], &self.history[b]);
        ra.reward > rb.reward || (ra.reward == rb.reward && ra.index < rb.index)
    }
}

/// Evaluates architectures from `space` and returns the highest-reward one
/// (ties go to the lowest space index) with the full evaluation history.
pub fn search<F>(
    space: &SearchSpace,
    evaluate: &F,
    cfg: &SearchConfig,
    table: Option<&LatencyTable>,
) -> Result<SearchResult>
where
    F: Fn(&ArchSpec) -> f64 + Sync,
{
    space.validate()?;
    cfg.reward.validate()?;
    if cfg.budget == 0 {
        return Err(Error::InvalidConfig("budget must be at least 1".into()));
    }
    let size = space.size();
    let mut ev = Evaluator {
        space,
        evaluate,
        cfg,
        table,
        history: Vec::new(),
        seen: HashMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let take = (cfg.budget as u128).min(size) as usize;

    match cfg.controller {
        Controller::Exhaustive => {
            let all: Vec<u128> = (0..take as u128).collect();
            ev.run(&all)?;
        }
        Controller::Random => {
            let picks = sample_indices(&mut rng, size, take);
            ev.run(&picks)?;
        }
        Controller::Evolutionary => evolve(&mut ev, &mut rng, size)?,
    }

    let best = (0..ev.history.len())
        .reduce(|a, b| if ev.better(b, a) { b } else { a })
        .expect("budget ≥ 1 and space nonempty");
    Ok(SearchResult {
        best: ev.history[best].clone(),
        history: ev.history,
    })
}

fn sample_indices(rng: &mut ChaCha8Rng, size: u128, amount: usize) -> Vec<u128> {
    if let Ok(n) = usize::try_from(size) {
        return sample(rng, n, amount).into_iter().map(|i| i as u128).collect();
    }
    let mut out = Vec::with_capacity(amount);
    while out.len() < amount {
        let i = rng.random_range(0..size);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

fn mutate(space: &SearchSpace, genome: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let radices = space.radices();
    let free: Vec<usize> = (0..radices.len()).filter(|&f| radices[f] > 1).collect();
    let mut child = genome.to_vec();
    if let Some(&f) = free.get(rng.random_range(0..free.len().max(1))) {
        let shift = rng.random_range(1..radices[f]);
        child[f] = (child[f] + shift) % radices[f];
    }
    child
}

fn evolve<F>(ev: &mut Evaluator<'_, F>, rng: &mut ChaCha8Rng, size: u128) -> Result<()>
where
    F: Fn(&ArchSpec) -> f64 + Sync,
{
    let ecfg = ev.cfg.evolution;
    if ecfg.population == 0 || ecfg.tournament == 0 {
        return Err(Error::InvalidConfig("population and tournament must be positive".into()));
    }
    let init = (ecfg.population as u128).min(size) as usize;
    let mut population = ev.run(&sample_indices(rng, size, init.min(ev.cfg.budget)))?;
    // duplicate-only generations do not spend budget; bound them so a saturated space terminates
    let mut idle = 0;
    while ev.remaining() > 0 && (ev.history.len() as u128) < size && idle < 64 {
        population.sort_by(|&a, &b| {
            if ev.better(a, b) {
                std::cmp::Ordering::Less
            } else if ev.better(b, a) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            }
        });
        let mut next: Vec<usize> = population.iter().copied().take(ecfg.elitism).collect();
        let mut children = Vec::new();
        while next.len() + children.len() < ecfg.population {
            let parent = (0..ecfg.tournament)
                .map(|_| population[rng.random_range(0..population.len())])
                .reduce(|a, b| if ev.better(b, a) { b } else { a })
                .expect("tournament nonempty");
            let g = ev.space.genome(ev.history[parent].index);
            children.push(ev.space.index(&mutate(ev.space, &g, rng)));
        }
        let before = ev.history.len();
        next.extend(ev.run(&children)?);
        idle = if ev.history.len() == before { idle + 1 } else { 0 };
        population = next;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(kernel: Kernel, depth: usize, dense: bool, channels: usize, stride: usize) -> Stage {
        Stage {
            path: PathSpec { kernel, depth, dense },
            channels,
            stride,
        }
    }

    #[test]
    fn conv_examples() {
        let k3 = kernel_cost(8, 16, 16, Kernel::K3, 1);
        assert_eq!((k3.flops, k3.params), (294_912, 2_304));
        let a3 = kernel_cost(8, 16, 16, Kernel::A1x3_3x1, 1);
        assert_eq!((a3.flops, a3.params), (196_608, 1_536));
        assert_eq!(kernel_cost(1, 1, 1, Kernel::K1, 1).flops, 2);
    }

    #[test]
    fn empty_stage_list_is_stem_only() {
        let arch = ArchSpec {
            input_channels: 3,
            stem_channels: 16,
            input_resolution: 8,
            stages: vec![],
        };
        assert_eq!(arch.params(), 9 * 3 * 16);
        assert_eq!(arch.flops(), 2 * 64 * 9 * 3 * 16);
    }

    #[test]
    fn stage_accounting() {
        // plain depth-2 path: two 3x3 convs then the 1x1 combine
        let s = stage(Kernel::K3, 2, false, 16, 1);
        let c = stage_cost(8, 16, &s);
        assert_eq!(c.params, 2 * 2304 + 256);
        // dense depth-3: second conv reads 16, third reads 32, combine reads 48
        let d = stage(Kernel::K3, 3, true, 16, 1);
        let c = stage_cost(8, 16, &d);
        assert_eq!(c.params, 9 * 16 * 16 + 9 * 16 * 16 + 9 * 32 * 16 + 48 * 16);
        // stride 2 halves the spatial size from the first conv on
        let s2 = stage(Kernel::K1, 2, false, 4, 2);
        assert_eq!(stage_cost(8, 4, &s2).flops, 3 * 2 * 16 * 16);
        assert_eq!(stage_cost(7, 4, &s2).flops, 3 * 2 * 16 * 16);
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::new(1e6);
        assert_eq!(reward(0.9, 1e6, &cfg).unwrap(), 0.9);
        assert!((reward(0.9, 2e6, &cfg).unwrap() - 0.857_374_198_239_543_7).abs() < 1e-12);
        assert!((reward(0.9, 5e5, &cfg).unwrap() - 0.944_745_015_260_760_5).abs() < 1e-12);
        assert!(matches!(reward(0.9, 0.0, &cfg), Err(Error::NonPositiveCost(_))));
        assert!(matches!(reward(0.9, 1.0, &RewardConfig::new(0.0)), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn latency_examples() {
        let arch = SearchSpace::toy().arch(0);
        let universal = LatencyTable {
            entries: vec![LatencyEntry {
                kernel: None,
                depth: None,
                dense: None,
                channels: None,
                resolution: None,
                ms: 1.5,
            }],
        };
        assert_eq!(latency(&arch, &universal).unwrap(), 4.5);

        let at = |c, ms| LatencyEntry {
            kernel: None,
            depth: None,
            dense: None,
            channels: Some(c),
            resolution: None,
            ms,
        };
        let table = LatencyTable {
            entries: vec![at(16, 2.0), at(32, 4.0)],
        };
        let s = stage(Kernel::K3, 2, false, 24, 1);
        assert_eq!(table.stage_ms(0, &s, 8).unwrap(), 3.0);
        let wide = stage(Kernel::K3, 2, false, 64, 1);
        assert!(matches!(table.stage_ms(5, &wide, 8), Err(Error::TableMiss { stage: 5 })));
    }

    #[test]
    fn scaling_examples() {
        let arch = SearchSpace::toy().arch(123);
        assert_eq!(scale_arch(&arch, 1.0, 1.0, 1.0).unwrap(), arch);

        let one = ArchSpec {
            input_channels: 3,
            stem_channels: 16,
            input_resolution: 8,
            stages: vec![stage(Kernel::K3, 2, false, 16, 1)],
        };
        let wide = scale_arch(&one, 2.0, 1.0, 1.0).unwrap();
        assert_eq!(wide.stem_channels, 32);
        assert_eq!(wide.stages[0].channels, 32);
        let (_, a) = one.cost_breakdown();
        let (_, b) = wide.cost_breakdown();
        assert_eq!(b[0].flops, 4 * a[0].flops);

        let deep = scale_arch(&one, 1.0, 100.0, 1.0).unwrap();
        assert_eq!(deep.stages[0].path.depth, 4);
        let shallow = scale_arch(&one, 0.001, 0.01, 1.0).unwrap();
        assert_eq!(shallow.stages[0].path.depth, 2);
        assert_eq!(shallow.stages[0].channels, 1);
        assert!(scale_arch(&one, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn toy_space_shape() {
        let space = SearchSpace::toy();
        assert_eq!(space.size(), 756);
        for i in [0u128, 1, 17, 400, 755] {
            assert_eq!(space.index(&space.genome(i)), i);
        }
        let archs: std::collections::HashSet<ArchSpec> = (0..756).map(|i| space.arch(i)).collect();
        assert_eq!(archs.len(), 756);
    }

    #[test]
    fn random_with_full_budget_equals_exhaustive() {
        let space = SearchSpace::toy();
        let target = space.arch(0).flops() as f64;
        let ex = search(
            &space,
            &synthetic_accuracy,
            &SearchConfig::new(RewardConfig::new(target), Controller::Exhaustive, 756, 0),
            None,
        )
        .unwrap();
        let rnd = search(
            &space,
            &synthetic_accuracy,
            &SearchConfig::new(RewardConfig::new(target), Controller::Random, 756, 3),
            None,
        )
        .unwrap();
        assert_eq!(ex.best, HistoryRecord { step: ex.best.step, ..rnd.best.clone() });
        assert_eq!(rnd.history.len(), 756);
    }

    #[test]
    fn search_is_deterministic_and_parallel_safe() {
        let space = SearchSpace::toy();
        let mut cfg = SearchConfig::new(RewardConfig::new(5e6), Controller::Evolutionary, 100, 9);
        let a = search(&space, &synthetic_accuracy, &cfg, None).unwrap();
        cfg.parallelism = 4;
        let b = search(&space, &synthetic_accuracy, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 100);
        let idx: std::collections::HashSet<u128> = a.history.iter().map(|r| r.index).collect();
        assert_eq!(idx.len(), 100);
    }

    #[test]
    fn latency_backend_requires_table() {
        let space = SearchSpace::toy();
        let mut cfg = SearchConfig::new(RewardConfig::new(1.0), Controller::Random, 5, 0);
        cfg.reward.cost_backend = CostBackend::LatencyTable;
        assert!(search(&space, &synthetic_accuracy, &cfg, None).is_err());
    }

    #[test]
    fn empty_space() {
        let mut space = SearchSpace::toy();
        space.stages[0].kernels.clear();
        let cfg = SearchConfig::new(RewardConfig::new(1.0), Controller::Random, 5, 0);
        assert!(matches!(search(&space, &synthetic_accuracy, &cfg, None), Err(Error::EmptySpace)));
    }
}
