//! The step engines: memory walk, once-reinforced walk, and the generalized
//! kernel walk, sharing one state representation and one neighbor-selection
//! path.
//!
//! Window membership is O(1) per edge: e lies in the window of width k at
//! step n iff its *latest* crossing time is >= n - k + 1, so a map from edge
//! to last traversal time replaces any sliding multiset. Every engine draws
//! one K value and one uniform per step — the once-reinforced walk ignores
//! the K value — so a (seed, horizon) pair pins the exact rng stream
//! regardless of engine.

use crate::lattice::{canonical_edge, neighbors_into, symmetry_group, Edge, SignedPerm, Site};
use crate::memory::MemoryLaw;
use crate::rng::SplitMix64;
use crate::{Error, Result};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Which jump law drives the walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    /// Reinforce exactly the edges crossed in the last K_n steps.
    MemoryWalk,
    /// Reinforce every edge ever crossed, permanently.
    Orrw,
    /// Kernel engine preloaded with the memory-walk weight kernel.
    KernelJump,
    /// Kernel engine preloaded with a constant kernel (simple random walk).
    KernelConst,
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.write_str(match self {
            EngineKind::MemoryWalk => "memory_walk",
            EngineKind::Orrw => "orrw",
            EngineKind::KernelJump => "kernel_jump",
            EngineKind::KernelConst => "kernel_const",
        })
    }
}

/// Engine-level run parameters. `run` itself tolerates horizon = 0 (a walk
/// that never moves); the experiment-config layer is stricter.
#[derive(Debug, Clone)]
pub struct WalkConfig {
    pub dimension: usize,
    pub delta: f64,
    pub memory: MemoryLaw,
    pub engine: EngineKind,
    pub horizon: u64,
    pub seed: u64,
    /// Record the position every `record_stride` steps (0 = none). Stride 1
    /// also records X_0, giving the full trajectory for sub-walk extraction.
    pub record_stride: u64,
    /// Extra recording times, strictly increasing.
    pub checkpoints: Vec<u64>,
    /// Keep the full K-sequence in the summary.
    pub record_k: bool,
    /// Keep the per-step log (K_n, axis, sign).
    pub record_log: bool,
    /// Fold the K-sequence into a SHA-256 digest (stream identity check).
    pub record_digest: bool,
}

impl WalkConfig {
    pub fn new(
        dimension: usize,
        delta: f64,
        memory: MemoryLaw,
        engine: EngineKind,
        horizon: u64,
        seed: u64,
    ) -> Self {
        Self {
            dimension,
            delta,
            memory,
            engine,
            horizon,
            seed,
            record_stride: 0,
            checkpoints: Vec::new(),
            record_k: false,
            record_log: false,
            record_digest: true,
        }
    }
}

/// One step of the log: memory length drawn, axis moved along, direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRecord {
    pub k: u64,
    pub axis: u8,
    pub sign: i8,
}

/// Walk state after n steps.
#[derive(Debug, Clone)]
pub struct WalkState {
    pub position: Site,
    pub step_index: u64,
    /// Largest step index at which each crossed edge was traversed; the key
    /// set is the range E_n, and values stay in [1, n].
    pub last_traversal: FxHashMap<Edge, u64>,
}

impl WalkState {
    pub fn new(dimension: usize) -> Self {
        Self {
            position: Site::origin(dimension),
            step_index: 0,
            last_traversal: FxHashMap::default(),
        }
    }

    /// Membership of e in the width-k_n window at the current step: only the
    /// latest crossing matters, so e is in iff last_traversal(e) >= n - k + 1.
    /// k_n = 0 gives the empty window; k_n > n degrades to full-range
    /// membership (only n edges exist).
    pub fn window_contains(&self, e: &Edge, k_n: u64) -> bool {
        if k_n == 0 {
            return false;
        }
        match self.last_traversal.get(e) {
            Some(&t) => t >= self.step_index.saturating_sub(k_n) + 1,
            None => false,
        }
    }
}

fn fill_weights_memory(
    state: &WalkState,
    delta: f64,
    k_n: u64,
    neigh: &[Site],
    out: &mut Vec<f64>,
) {
    out.clear();
    if k_n == 0 {
        out.resize(neigh.len(), 1.0);
        return;
    }
    for y in neigh {
        let e = canonical_edge(&state.position, y).expect("neighbors are adjacent");
        let hit = state.window_contains(&e, k_n);
        out.push(if hit { 1.0 + delta } else { 1.0 });
    }
}

fn fill_weights_orrw(state: &WalkState, delta: f64, neigh: &[Site], out: &mut Vec<f64>) {
    out.clear();
    for y in neigh {
        let e = canonical_edge(&state.position, y).expect("neighbors are adjacent");
        let hit = state.last_traversal.contains_key(&e);
        out.push(if hit { 1.0 + delta } else { 1.0 });
    }
}

/// Unnormalized jump weights of the memory walk: 1 + delta per window edge.
pub fn step_weights_memory(state: &WalkState, delta: f64, k_n: u64) -> Vec<f64> {
    let mut neigh = Vec::new();
    neighbors_into(&state.position, &mut neigh);
    let mut out = Vec::new();
    fill_weights_memory(state, delta, k_n, &neigh, &mut out);
    out
}

/// Unnormalized jump weights of the once-reinforced walk: 1 + delta on every
/// edge of the range, forever.
pub fn step_weights_orrw(state: &WalkState, delta: f64) -> Vec<f64> {
    let mut neigh = Vec::new();
    neighbors_into(&state.position, &mut neigh);
    let mut out = Vec::new();
    fill_weights_orrw(state, delta, &neigh, &mut out);
    out
}

/// Exact membership oracle for the memory window a kernel sees. Queries are
/// always answered from the last-traversal map, so membership is exact for
/// any window width.
pub trait WindowQuery {
    fn contains(&self, e: &Edge) -> bool;
}

/// The live window R_{n, k} of a walk state.
pub struct StateWindow<'a> {
    pub state: &'a WalkState,
    pub k: u64,
}

impl WindowQuery for StateWindow<'_> {
    fn contains(&self, e: &Edge) -> bool {
        self.state.window_contains(e, self.k)
    }
}

/// Image of a window under a lattice symmetry g fixing `center`:
/// e is in gW iff g^{-1} e is in W.
struct MappedWindow<'a> {
    base: &'a dyn WindowQuery,
    inv: SignedPerm,
    center: &'a Site,
}

impl WindowQuery for MappedWindow<'_> {
    fn contains(&self, e: &Edge) -> bool {
        self.base.contains(&self.inv.apply_to_edge(self.center, e))
    }
}

/// A user-supplied jump kernel: strictly positive weight for each candidate
/// neighbor given the current window. The engine normalizes over the 2d
/// neighbors; `floor` documents the kernel's guaranteed minimum normalized
/// probability, checked (along with symmetry in the window argument) on
/// every step while validation is on.
pub trait MemoryKernel {
    fn weight(&self, x: &Site, y: &Site, window: &dyn WindowQuery) -> f64;
    fn floor(&self, dimension: usize) -> f64;
}

/// The memory-walk law as a kernel: weight 1 + delta on window edges. Its
/// minimal normalized probability is 1/(1 + (2d-1)(1+delta)), attained when
/// every other incident edge is reinforced and the candidate is not.
pub struct JumpKernel {
    pub delta: f64,
}

impl MemoryKernel for JumpKernel {
    fn weight(&self, x: &Site, y: &Site, window: &dyn WindowQuery) -> f64 {
        let e = canonical_edge(x, y).expect("neighbors are adjacent");
        if window.contains(&e) {
            1.0 + self.delta
        } else {
            1.0
        }
    }
    fn floor(&self, dimension: usize) -> f64 {
        1.0 / (1.0 + (2 * dimension - 1) as f64 * (1.0 + self.delta))
    }
}

/// Window-blind kernel: the walk is simple random walk.
pub struct ConstKernel;

impl MemoryKernel for ConstKernel {
    fn weight(&self, _x: &Site, _y: &Site, _window: &dyn WindowQuery) -> f64 {
        1.0
    }
    fn floor(&self, dimension: usize) -> f64 {
        1.0 / (2 * dimension) as f64
    }
}

/// Select a neighbor index from positive weights with one uniform draw:
/// smallest i with u * total < cumsum_i, in fixed neighbor order.
fn select_neighbor(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// A stepping walk: state plus engine context and scratch buffers.
pub struct Walker<'a> {
    pub state: WalkState,
    config: &'a WalkConfig,
    kernel: Option<Box<dyn MemoryKernel + 'a>>,
    /// Symmetry battery for kernel validation (capped subsample of the
    /// hyperoctahedral group).
    battery: Vec<SignedPerm>,
    validate: bool,
    neigh: Vec<Site>,
    weights: Vec<f64>,
}

const BATTERY_CAP: usize = 48;

impl<'a> Walker<'a> {
    pub fn new(config: &'a WalkConfig) -> Result<Self> {
        let kernel: Option<Box<dyn MemoryKernel>> = match config.engine {
            EngineKind::MemoryWalk | EngineKind::Orrw => None,
            EngineKind::KernelJump => Some(Box::new(JumpKernel { delta: config.delta })),
            EngineKind::KernelConst => Some(Box::new(ConstKernel)),
        };
        Self::build(config, kernel)
    }

    /// Register a custom kernel; the engine field of the config is ignored.
    pub fn with_kernel(config: &'a WalkConfig, kernel: Box<dyn MemoryKernel + 'a>) -> Result<Self> {
        Self::build(config, Some(kernel))
    }

    fn build(config: &'a WalkConfig, kernel: Option<Box<dyn MemoryKernel + 'a>>) -> Result<Self> {
        if config.dimension < 1 || config.dimension > 16 {
            return Err(Error::Config(format!(
                "dimension: must be in [1, 16] (got {})",
                config.dimension
            )));
        }
        if !config.delta.is_finite() || config.delta <= -1.0 {
            return Err(Error::Config(format!(
                "delta: must be finite and > -1 (got {})",
                config.delta
            )));
        }
        let battery = if kernel.is_some() {
            let mut g = symmetry_group(config.dimension);
            if g.len() > BATTERY_CAP {
                // Deterministic stride subsample keeps the battery bounded.
                let step = g.len() / BATTERY_CAP;
                g = g.into_iter().step_by(step).take(BATTERY_CAP).collect();
            }
            g
        } else {
            Vec::new()
        };
        Ok(Self {
            state: WalkState::new(config.dimension),
            config,
            kernel,
            battery,
            validate: cfg!(debug_assertions),
            neigh: Vec::with_capacity(2 * config.dimension),
            weights: Vec::with_capacity(2 * config.dimension),
        })
    }

    /// Force kernel validation on or off regardless of build profile.
    pub fn set_validate(&mut self, on: bool) {
        self.validate = on;
    }

    /// Advance one step: draw K_n, pick a neighbor by the engine's weights,
    /// move, and stamp the crossed edge with the new step index.
    pub fn step(&mut self, rng: &mut SplitMix64) -> Result<StepRecord> {
        let k = self.config.memory.sample_k(rng);
        let u = rng.next_f64();
        neighbors_into(&self.state.position, &mut self.neigh);
        match (&self.kernel, self.config.engine) {
            (Some(kernel), _) => {
                let window = StateWindow { state: &self.state, k };
                self.weights.clear();
                for y in &self.neigh {
                    let w = kernel.weight(&self.state.position, y, &window);
                    if !w.is_finite() || w <= 0.0 {
                        return Err(Error::Kernel(format!(
                            "step {}: kernel weight {w} for jump {} -> {} is not positive",
                            self.state.step_index + 1,
                            self.state.position,
                            y
                        )));
                    }
                    self.weights.push(w);
                }
                if self.validate {
                    self.validate_kernel(kernel.as_ref(), k)?;
                }
            }
            (None, EngineKind::MemoryWalk) => {
                fill_weights_memory(
                    &self.state,
                    self.config.delta,
                    k,
                    &self.neigh,
                    &mut self.weights,
                );
            }
            (None, EngineKind::Orrw) => {
                fill_weights_orrw(&self.state, self.config.delta, &self.neigh, &mut self.weights);
            }
            (None, _) => unreachable!("kernel engines always carry a kernel"),
        }
        let idx = select_neighbor(&self.weights, u);
        let next = self.neigh[idx].clone();
        let e = canonical_edge(&self.state.position, &next).expect("neighbors are adjacent");
        self.state.step_index += 1;
        self.state.last_traversal.insert(e, self.state.step_index);
        self.state.position = next;
        Ok(StepRecord {
            k,
            axis: (idx / 2) as u8,
            sign: if idx % 2 == 1 { 1 } else { -1 },
        })
    }

    /// Ellipticity floor and window-symmetry checks for the current step's
    /// weights. Symmetry: for every battery element g fixing the position,
    /// weight(x, y, W) must equal weight(x, gy, gW).
    fn validate_kernel(&self, kernel: &dyn MemoryKernel, k: u64) -> Result<()> {
        let n = self.state.step_index + 1;
        let d = self.config.dimension;
        let floor = kernel.floor(d);
        let total: f64 = self.weights.iter().sum();
        for (i, &w) in self.weights.iter().enumerate() {
            let p = w / total;
            if p < floor - 1e-12 {
                return Err(Error::Kernel(format!(
                    "step {n}: normalized probability {p:.6e} for neighbor {i} \
                     breaches the ellipticity floor {floor:.6e}"
                )));
            }
        }
        let x = &self.state.position;
        let window = StateWindow { state: &self.state, k };
        for g in &self.battery {
            let mapped = MappedWindow { base: &window, inv: g.inverse(), center: x };
            for (i, y) in self.neigh.iter().enumerate() {
                let gy = g.apply_about(x, y);
                let wg = kernel.weight(x, &gy, &mapped);
                let w = self.weights[i];
                if (wg - w).abs() > 1e-9 * w.abs().max(1.0) {
                    return Err(Error::Kernel(format!(
                        "step {n}: kernel is not symmetric in its window argument: \
                         weight(x, y, W) = {w} but weight(x, gy, gW) = {wg} \
                         for a lattice symmetry g fixing x = {x}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything a replica reports back without retaining full state.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_position: Site,
    /// Visits to the origin at steps n >= 1.
    pub origin_returns: u64,
    /// Largest n >= 1 with X_n = 0, or 0 if the walk never returned.
    pub last_return: u64,
    pub checkpoint_positions: Vec<(u64, Site)>,
    pub stride_positions: Vec<Site>,
    pub k_seq: Option<Vec<u64>>,
    /// Hex SHA-256 over the K-sequence as little-endian u64 words.
    pub k_digest: Option<String>,
}

pub struct RunOutput {
    pub state: WalkState,
    pub log: Vec<StepRecord>,
    pub summary: RunSummary,
}

impl std::fmt::Debug for RunOutput {
    fn fmt(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.debug_struct("RunOutput")
            .field("steps", &self.state.step_index)
            .field("summary", &self.summary)
            .finish_non_exhaustive()
    }
}

/// Upper bound on recording memory, checked before the walk starts.
const RESOURCE_CAP_BYTES: u128 = 4 << 30;

fn estimate_bytes(config: &WalkConfig) -> u128 {
    let site = 24 + 8 * config.dimension as u128;
    let mut total = 0u128;
    if config.record_stride > 0 {
        total += (config.horizon as u128 / config.record_stride as u128 + 2) * site;
    }
    total += config.checkpoints.len() as u128 * site;
    if config.record_k {
        total += config.horizon as u128 * 8;
    }
    if config.record_log {
        total += config.horizon as u128 * 16;
    }
    total
}

/// Run `horizon` steps from the origin with empty memory.
pub fn run(config: &WalkConfig) -> Result<RunOutput> {
    let walker = Walker::new(config)?;
    run_walker(walker, config)
}

/// Run with a custom registered kernel.
pub fn run_with_kernel(config: &WalkConfig, kernel: Box<dyn MemoryKernel + '_>) -> Result<RunOutput> {
    let walker = Walker::with_kernel(config, kernel)?;
    run_walker(walker, config)
}

fn run_walker(mut walker: Walker, config: &WalkConfig) -> Result<RunOutput> {
    let est = estimate_bytes(config);
    if est > RESOURCE_CAP_BYTES {
        return Err(Error::Resource(format!(
            "recording ~{} bytes exceeds the {} byte cap; raise record_stride \
             or drop per-step recording",
            est, RESOURCE_CAP_BYTES
        )));
    }
    if !config.checkpoints.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config(
            "checkpoints: must be strictly increasing".into(),
        ));
    }
    let mut rng = SplitMix64::new(config.seed);
    let mut log = Vec::with_capacity(if config.record_log {
        config.horizon.min(1 << 24) as usize
    } else {
        0
    });
    let mut summary = RunSummary {
        final_position: Site::origin(config.dimension),
        origin_returns: 0,
        last_return: 0,
        checkpoint_positions: Vec::with_capacity(config.checkpoints.len()),
        stride_positions: Vec::new(),
        k_seq: if config.record_k { Some(Vec::with_capacity(config.horizon as usize)) } else { None },
        k_digest: None,
    };
    if config.record_stride > 0 {
        summary.stride_positions.push(walker.state.position.clone());
    }
    let mut hasher = config.record_digest.then(Sha256::new);
    let mut buf: Vec<u8> = Vec::with_capacity(8192);
    let mut next_cp = 0usize;
    for n in 1..=config.horizon {
        let rec = walker.step(&mut rng)?;
        if let Some(h) = hasher.as_mut() {
            buf.extend_from_slice(&rec.k.to_le_bytes());
            if buf.len() == buf.capacity() {
                h.update(&buf);
                buf.clear();
            }
        }
        if let Some(ks) = summary.k_seq.as_mut() {
            ks.push(rec.k);
        }
        if config.record_log {
            log.push(rec);
        }
        if walker.state.position.is_origin() {
            summary.origin_returns += 1;
            summary.last_return = n;
        }
        if config.record_stride > 0 && n % config.record_stride == 0 {
            summary.stride_positions.push(walker.state.position.clone());
        }
        if next_cp < config.checkpoints.len() && config.checkpoints[next_cp] == n {
            summary.checkpoint_positions.push((n, walker.state.position.clone()));
            next_cp += 1;
        }
    }
    if let Some(mut h) = hasher {
        h.update(&buf);
        let digest = h.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        summary.k_digest = Some(hex);
    }
    summary.final_position = walker.state.position.clone();
    Ok(RunOutput { state: walker.state, log, summary })
}
