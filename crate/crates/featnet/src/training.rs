//! The two-stage training regime: SGD to a threshold accuracy, then
//! gradient-descent tunneling (GDT) toward zero training error, plus the
//! continued-SGD variant and orchestration of the whole (feature, module,
//! submodule) grid.
//!
//! GDT is a loss-reweighting homotopy. At stage λ ∈ [0, 1] the objective is
//!
//! ```text
//! L_λ = Σ_{t correct} ℓ_t + (1 + λβ) · Σ_{t misclassified} ℓ_t
//! ```
//!
//! minimized in blocks of inner gradient steps. A block is accepted only if
//! the misclassified-set size did not grow; otherwise it is rolled back and
//! the inner rate halved. Accepted blocks advance λ by δλ. When patience
//! runs out at λ = 1 with progress since the last anneal, λ restarts at 0
//! (a new tunnel); without progress the run stalls.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufReader;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{
    materialize_featured_batch, modularize, scan_double_labels, split_submodules, ConflictReport,
    FeaturedBatch, LabeledDataset,
};
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::fnn::{
    accumulate_grad, arg_top, forward, init_params, quantize_params, read_weights, write_weights,
    FnnArch, FnnParams, Gradient,
};
use crate::util::{atomic_write, splitmix64};

/// Below this fraction of the chance-level accuracy the run is treated as
/// diverged once a tenth of the epoch budget has passed.
const DIVERGENCE_MARGIN: f64 = 0.75;

#[derive(Debug, Clone)]
pub struct SgdConfig {
    /// Initial learning rate.
    pub rate: f64,
    /// Multiplicative rate decay, applied every `decay_interval` epochs.
    pub decay: f64,
    pub decay_interval: usize,
    pub minibatch: usize,
    pub max_epochs: usize,
    /// Early-stop threshold θ on full-batch training accuracy (fraction).
    pub threshold: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            rate: 0.1,
            decay: 0.5,
            decay_interval: 100,
            minibatch: 10,
            max_epochs: 300,
            threshold: 0.98,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::Config("SGD rate must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("SGD decay must be in (0, 1]".into()));
        }
        if self.decay_interval == 0 || self.minibatch == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "SGD decay interval, minibatch and epoch budget must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("SGD threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    fn rate_at(&self, epoch: usize) -> f64 {
        self.rate * self.decay.powi((epoch / self.decay_interval) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct GdtConfig {
    /// Homotopy increment δλ per accepted block.
    pub lambda_step: f64,
    /// Gradient steps per block.
    pub inner_steps: usize,
    /// Error-weight amplification β.
    pub amplification: f64,
    /// Accepted blocks without an error-count decrease before the tunnel is
    /// considered exhausted.
    pub patience: usize,
    /// Initial inner learning rate (halved on every rollback).
    pub inner_rate: f64,
    /// Decimal grid of the duplicate pre-scan.
    pub scan_decimals: u8,
    /// Optional wall-clock cap. `None` keeps the run fully deterministic.
    pub time_budget: Option<Duration>,
}

impl Default for GdtConfig {
    fn default() -> Self {
        Self {
            lambda_step: 0.1,
            inner_steps: 10,
            amplification: 4.0,
            patience: 40,
            inner_rate: 0.05,
            scan_decimals: 6,
            time_budget: None,
        }
    }
}

impl GdtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_step > 0.0 && self.lambda_step <= 1.0) {
            return Err(Error::Config("GDT lambda step must be in (0, 1]".into()));
        }
        if self.inner_steps == 0 || self.patience == 0 {
            return Err(Error::Config(
                "GDT inner steps and patience must be positive".into(),
            ));
        }
        if !(self.amplification > 0.0) {
            return Err(Error::Config("GDT amplification must be positive".into()));
        }
        if !(self.inner_rate > 0.0 && self.inner_rate.is_finite()) {
            return Err(Error::Config("GDT inner rate must be positive".into()));
        }
        if self.scan_decimals == 0 {
            return Err(Error::Config("GDT scan decimals must be positive".into()));
        }
        Ok(())
    }
}

fn check_shapes(arch: &FnnArch, fb: &FeaturedBatch) -> Result<()> {
    if fb.is_empty() {
        return Err(Error::Data(format!(
            "featured batch ({}, {}, {}) is empty",
            fb.feature, fb.module, fb.submodule
        )));
    }
    if fb.dim() != arch.input_len() {
        return Err(Error::Dimension(format!(
            "batch vectors have {} entries, net expects {}",
            fb.dim(),
            arch.input_len()
        )));
    }
    let classes = arch.output_len() as u32;
    if let Some(&bad) = fb.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Domain(format!(
            "local label {bad} outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Misclassified sample count under the current parameters.
pub fn count_errors(params: &FnnParams, fb: &FeaturedBatch) -> Result<usize> {
    let mut errors = 0;
    for (x, &y) in fb.inputs.iter().zip(&fb.labels) {
        if arg_top(&forward(params, x)?.probs) != y {
            errors += 1;
        }
    }
    Ok(errors)
}

/// Full-batch training accuracy as a fraction in [0, 1].
pub fn batch_accuracy(params: &FnnParams, fb: &FeaturedBatch) -> Result<f64> {
    Ok(1.0 - count_errors(params, fb)? as f64 / fb.len() as f64)
}

/// One epoch of minibatch SGD over a shuffled order. Returns an error on a
/// non-finite sample loss.
fn sgd_epoch(
    params: &mut FnnParams,
    fb: &FeaturedBatch,
    order: &[usize],
    rate: f64,
    minibatch: usize,
    grad: &mut Gradient,
    epoch: usize,
) -> Result<()> {
    for chunk in order.chunks(minibatch) {
        grad.clear();
        for &t in chunk {
            let (loss, _) = accumulate_grad(params, &fb.inputs[t], fb.labels[t], 1.0, grad)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, rate {rate}"
                )));
            }
        }
        params.apply_step(grad, rate / chunk.len() as f64);
    }
    Ok(())
}

/// Trains a fresh net by minibatch SGD, stopping at the first epoch whose
/// full-batch accuracy reaches the threshold. Returns the parameters and
/// the per-epoch accuracy trace.
pub fn sgd_train(
    arch: &FnnArch,
    fb: &FeaturedBatch,
    cfg: &SgdConfig,
) -> Result<(FnnParams, Vec<f64>)> {
    cfg.validate()?;
    check_shapes(arch, fb)?;
    let mut params = init_params(arch, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x56d));
    let trace = sgd_loop(&mut params, fb, cfg, &mut rng, cfg.max_epochs, true)?;
    Ok((params, trace))
}

/// The shared epoch loop; `stop_at_threshold` distinguishes plain training
/// from the continued variant.
fn sgd_loop(
    params: &mut FnnParams,
    fb: &FeaturedBatch,
    cfg: &SgdConfig,
    rng: &mut ChaCha8Rng,
    epochs: usize,
    stop_at_threshold: bool,
) -> Result<Vec<f64>> {
    let chance = 1.0 / params.arch.output_len() as f64;
    let mut order: Vec<usize> = (0..fb.len()).collect();
    let mut grad = Gradient::zeros(&params.arch);
    let mut trace = Vec::new();
    for epoch in 0..epochs {
        let rate = cfg.rate_at(epoch);
        order.shuffle(rng);
        sgd_epoch(params, fb, &order, rate, cfg.minibatch, &mut grad, epoch)?;
        let acc = batch_accuracy(params, fb)?;
        trace.push(acc);
        if stop_at_threshold && acc >= cfg.threshold {
            break;
        }
        if epoch + 1 > epochs / 10 && acc < DIVERGENCE_MARGIN * chance {
            return Err(Error::Divergence(format!(
                "accuracy {acc:.4} below chance level {chance:.4} at epoch {epoch}, rate {rate}"
            )));
        }
    }
    Ok(trace)
}

/// Continues SGD for the full epoch budget with no threshold stop and
/// returns the best-accuracy parameters encountered, the input included.
pub fn sgd_continue(params: FnnParams, fb: &FeaturedBatch, cfg: &SgdConfig) -> Result<FnnParams> {
    cfg.validate()?;
    check_shapes(&params.arch, fb)?;
    let mut best = params.clone();
    let mut best_acc = batch_accuracy(&params, fb)?;
    let mut current = params;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0xC0117177));
    let chance = 1.0 / current.arch.output_len() as f64;
    let mut order: Vec<usize> = (0..fb.len()).collect();
    let mut grad = Gradient::zeros(&current.arch);
    for epoch in 0..cfg.max_epochs {
        let rate = cfg.rate_at(epoch);
        order.shuffle(&mut rng);
        sgd_epoch(&mut current, fb, &order, rate, cfg.minibatch, &mut grad, epoch)?;
        let acc = batch_accuracy(&current, fb)?;
        if acc > best_acc {
            best_acc = acc;
            best = current.clone();
        }
        if epoch + 1 > cfg.max_epochs / 10 && acc < DIVERGENCE_MARGIN * chance {
            return Err(Error::Divergence(format!(
                "accuracy {acc:.4} below chance level {chance:.4} at epoch {epoch}, rate {rate}"
            )));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TunnelStatus {
    ErrorFree,
    Inconsistent,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct TunnelResult {
    pub params: FnnParams,
    pub status: TunnelStatus,
    /// Misclassified samples under the final parameters.
    pub errors: usize,
    /// Error counts over accepted blocks, initial state included;
    /// non-increasing by construction.
    pub trace: Vec<usize>,
    /// Populated only for `Inconsistent`.
    pub conflicts: ConflictReport,
}

/// One block of inner gradient steps on L_λ. Returns false when a loss went
/// non-finite, in which case the caller rolls the block back.
fn gdt_block(
    params: &mut FnnParams,
    fb: &FeaturedBatch,
    lambda: f64,
    cfg: &GdtConfig,
    rate: f64,
    grad: &mut Gradient,
) -> Result<bool> {
    let heavy = 1.0 + lambda * cfg.amplification;
    for _ in 0..cfg.inner_steps {
        grad.clear();
        let mut total = 0.0;
        for (x, &y) in fb.inputs.iter().zip(&fb.labels) {
            let correct = arg_top(&forward(params, x)?.probs) == y;
            let weight = if correct { 1.0 } else { heavy };
            let (loss, _) = accumulate_grad(params, x, y, weight, grad)?;
            total += loss;
        }
        if !total.is_finite() {
            return Ok(false);
        }
        params.apply_step(grad, rate / fb.len() as f64);
    }
    Ok(true)
}

/// Tunnels from an SGD solution toward zero training error.
///
/// Exact duplicated inputs with conflicting labels provably cap the
/// reachable accuracy, so the batch is scanned first and such runs return
/// `Inconsistent` without iterating.
pub fn gdt_tunnel(params: FnnParams, fb: &FeaturedBatch, cfg: &GdtConfig) -> Result<TunnelResult> {
    cfg.validate()?;
    check_shapes(&params.arch, fb)?;

    let conflicts = scan_double_labels(fb, cfg.scan_decimals);
    let initial = count_errors(&params, fb)?;
    if !conflicts.is_empty() {
        return Ok(TunnelResult {
            params,
            status: TunnelStatus::Inconsistent,
            errors: initial,
            trace: vec![initial],
            conflicts,
        });
    }
    let mut trace = vec![initial];
    if initial == 0 {
        return Ok(TunnelResult {
            params,
            status: TunnelStatus::ErrorFree,
            errors: 0,
            trace,
            conflicts: ConflictReport::default(),
        });
    }

    let start = Instant::now();
    let mut accepted = params;
    let mut grad = Gradient::zeros(&accepted.arch);
    let mut current = initial;
    let mut lambda = 0.0f64;
    let mut rate = cfg.inner_rate;
    let mut stale = 0usize;
    let mut tunnel_entry = initial;

    loop {
        if cfg
            .time_budget
            .is_some_and(|budget| start.elapsed() >= budget)
        {
            return Ok(TunnelResult {
                params: accepted,
                status: TunnelStatus::Stalled,
                errors: current,
                trace,
                conflicts: ConflictReport::default(),
            });
        }

        let mut candidate = accepted.clone();
        let finite = gdt_block(&mut candidate, fb, lambda, cfg, rate, &mut grad)?;
        let after = if finite {
            count_errors(&candidate, fb)?
        } else {
            usize::MAX
        };

        if after <= current {
            accepted = candidate;
            trace.push(after);
            stale = if after < current { 0 } else { stale + 1 };
            current = after;
            if current == 0 {
                return Ok(TunnelResult {
                    params: accepted,
                    status: TunnelStatus::ErrorFree,
                    errors: 0,
                    trace,
                    conflicts: ConflictReport::default(),
                });
            }
            lambda = (lambda + cfg.lambda_step).min(1.0);
        } else {
            rate /= 2.0;
            if rate < 1e-300 {
                return Ok(TunnelResult {
                    params: accepted,
                    status: TunnelStatus::Stalled,
                    errors: current,
                    trace,
                    conflicts: ConflictReport::default(),
                });
            }
        }

        if stale >= cfg.patience && lambda >= 1.0 {
            if current < tunnel_entry {
                // Progress since the last anneal: open a new tunnel.
                lambda = 0.0;
                rate = cfg.inner_rate;
                stale = 0;
                tunnel_entry = current;
            } else {
                return Ok(TunnelResult {
                    params: accepted,
                    status: TunnelStatus::Stalled,
                    errors: current,
                    trace,
                    conflicts: ConflictReport::default(),
                });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Proto-model orchestration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    S,
    SPrime,
    T,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::S => "S",
            TrainMode::SPrime => "S'",
            TrainMode::T => "T",
        })
    }
}

impl TrainMode {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "S" => Ok(TrainMode::S),
            "S'" => Ok(TrainMode::SPrime),
            "T" => Ok(TrainMode::T),
            other => Err(Error::Parse(format!("unknown training mode {other:?}"))),
        }
    }
}

/// Grid coordinate of one net: 1-based feature, module and submodule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellId {
    pub feature: usize,
    pub module: u32,
    pub submodule: u32,
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.feature, self.module, self.submodule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    /// SGD finished (threshold reached or budget exhausted); modes S and S′.
    Trained,
    ErrorFree,
    Stalled,
    Inconsistent,
    /// SGD diverged; the cell holds no parameters.
    Diverged,
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellStatus::Trained => "Trained",
            CellStatus::ErrorFree => "ErrorFree",
            CellStatus::Stalled => "Stalled",
            CellStatus::Inconsistent => "Inconsistent",
            CellStatus::Diverged => "Diverged",
        })
    }
}

impl CellStatus {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "Trained" => Ok(CellStatus::Trained),
            "ErrorFree" => Ok(CellStatus::ErrorFree),
            "Stalled" => Ok(CellStatus::Stalled),
            "Inconsistent" => Ok(CellStatus::Inconsistent),
            "Diverged" => Ok(CellStatus::Diverged),
            other => Err(Error::Parse(format!("unknown cell status {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedCell {
    /// `None` only for diverged cells.
    pub params: Option<FnnParams>,
    pub status: CellStatus,
    /// Training accuracy on the cell's own batch, in percent.
    pub accuracy_pct: f64,
    /// GDT error trace (mode T); empty otherwise.
    pub trace: Vec<usize>,
    pub conflicts: ConflictReport,
}

/// The full grid of independently trained nets.
#[derive(Debug, Clone)]
pub struct ProtoModel {
    pub mode: TrainMode,
    pub arch: FnnArch,
    pub features: Vec<FeatureSpec>,
    pub k: u32,
    pub r: u32,
    pub label_count: u32,
    pub cells: BTreeMap<CellId, TrainedCell>,
}

impl ProtoModel {
    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    /// Hidden-depth tag: `h1` for one hidden layer, `h2` for two, and so on.
    pub fn arch_tag(&self) -> String {
        format!("h{}", self.arch.sizes().len() - 2)
    }

    /// A model with any diverged (parameterless) cell is partial and cannot
    /// serve inference.
    pub fn is_partial(&self) -> bool {
        self.cells.values().any(|c| c.params.is_none())
    }

    pub fn cell(&self, id: CellId) -> Result<&TrainedCell> {
        self.cells
            .get(&id)
            .ok_or_else(|| Error::PartialModel(format!("no cell {id}")))
    }

    pub fn cell_params(&self, id: CellId) -> Result<&FnnParams> {
        self.cell(id)?
            .params
            .as_ref()
            .ok_or_else(|| Error::PartialModel(format!("cell {id} diverged during training")))
    }

    /// Applies decimal quantization to every cell.
    pub fn quantized(&self, decimals: u8) -> ProtoModel {
        let mut out = self.clone();
        for cell in out.cells.values_mut() {
            if let Some(p) = &cell.params {
                cell.params = Some(quantize_params(p, decimals));
            }
        }
        out
    }
}

/// Deterministic per-cell seed, spread from the master seed.
pub fn cell_seed(master: u64, id: CellId) -> u64 {
    splitmix64(
        master
            ^ ((id.feature as u64) << 42)
            ^ ((id.module as u64) << 21)
            ^ id.submodule as u64,
    )
}

/// Materializes every (feature, module, submodule) batch of the grid.
pub fn materialize_grid(
    ds: &LabeledDataset,
    features: &[FeatureSpec],
    k: u32,
    r: u32,
) -> Result<Vec<FeaturedBatch>> {
    let modules = modularize(ds, k)?;
    let mut splits = Vec::new();
    for batch in &modules {
        splits.push(split_submodules(batch, r)?);
    }
    let mut jobs = Vec::new();
    for (fi, spec) in features.iter().enumerate() {
        for (mj, subs) in splits.iter().enumerate() {
            for (ss, items) in subs.iter().enumerate() {
                jobs.push((fi + 1, mj as u32 + 1, ss as u32 + 1, spec, items));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(i, j, s, spec, items)| {
            materialize_featured_batch(items, spec, i, j, s, k, ds.label_count())
        })
        .collect()
}

fn train_cell(
    fb: &FeaturedBatch,
    arch: &FnnArch,
    mode: TrainMode,
    sgd: &SgdConfig,
    gdt: &GdtConfig,
    seed: u64,
) -> Result<TrainedCell> {
    let mut cell_sgd = sgd.clone();
    cell_sgd.seed = seed;
    let sgd_out = match sgd_train(arch, fb, &cell_sgd) {
        Ok(out) => out,
        Err(Error::Divergence(_)) => {
            return Ok(TrainedCell {
                params: None,
                status: CellStatus::Diverged,
                accuracy_pct: 0.0,
                trace: Vec::new(),
                conflicts: ConflictReport::default(),
            })
        }
        Err(e) => return Err(e),
    };
    let (params, _) = sgd_out;
    match mode {
        TrainMode::S => {
            let acc = batch_accuracy(&params, fb)?;
            Ok(TrainedCell {
                params: Some(params),
                status: CellStatus::Trained,
                accuracy_pct: 100.0 * acc,
                trace: Vec::new(),
                conflicts: ConflictReport::default(),
            })
        }
        TrainMode::SPrime => {
            // "A few more iterations": a quarter of the original budget.
            let mut extra = cell_sgd.clone();
            extra.max_epochs = (sgd.max_epochs / 4).max(1);
            extra.seed = splitmix64(seed ^ 0x51);
            let best = match sgd_continue(params, fb, &extra) {
                Ok(best) => best,
                Err(Error::Divergence(_)) => {
                    return Ok(TrainedCell {
                        params: None,
                        status: CellStatus::Diverged,
                        accuracy_pct: 0.0,
                        trace: Vec::new(),
                        conflicts: ConflictReport::default(),
                    })
                }
                Err(e) => return Err(e),
            };
            let acc = batch_accuracy(&best, fb)?;
            Ok(TrainedCell {
                params: Some(best),
                status: CellStatus::Trained,
                accuracy_pct: 100.0 * acc,
                trace: Vec::new(),
                conflicts: ConflictReport::default(),
            })
        }
        TrainMode::T => {
            let result = gdt_tunnel(params, fb, gdt)?;
            let acc = 1.0 - result.errors as f64 / fb.len() as f64;
            Ok(TrainedCell {
                params: Some(result.params),
                status: match result.status {
                    TunnelStatus::ErrorFree => CellStatus::ErrorFree,
                    TunnelStatus::Stalled => CellStatus::Stalled,
                    TunnelStatus::Inconsistent => CellStatus::Inconsistent,
                },
                accuracy_pct: 100.0 * acc,
                trace: result.trace,
                conflicts: result.conflicts,
            })
        }
    }
}

/// Trains one net per featured batch, in parallel, and assembles the grid.
/// The batch list must cover a full n×k×r grid.
#[allow(clippy::too_many_arguments)]
pub fn train_proto_model_from_batches(
    batches: &[FeaturedBatch],
    arch: &FnnArch,
    features: &[FeatureSpec],
    k: u32,
    r: u32,
    label_count: u32,
    mode: TrainMode,
    sgd: &SgdConfig,
    gdt: &GdtConfig,
) -> Result<ProtoModel> {
    let n = features.len();
    if batches.len() != n * (k * r) as usize {
        return Err(Error::Config(format!(
            "expected {} featured batches for a {n}x{k}x{r} grid, got {}",
            n * (k * r) as usize,
            batches.len()
        )));
    }
    let trained: Vec<(CellId, TrainedCell)> = batches
        .par_iter()
        .map(|fb| {
            let id = CellId {
                feature: fb.feature,
                module: fb.module,
                submodule: fb.submodule,
            };
            let seed = cell_seed(sgd.seed, id);
            train_cell(fb, arch, mode, sgd, gdt, seed).map(|cell| (id, cell))
        })
        .collect::<Result<_>>()?;
    let mut cells = BTreeMap::new();
    for (id, cell) in trained {
        if cells.insert(id, cell).is_some() {
            return Err(Error::Config(format!("duplicate batch for cell {id}")));
        }
    }
    for fi in 1..=n {
        for j in 1..=k {
            for s in 1..=r {
                let id = CellId {
                    feature: fi,
                    module: j,
                    submodule: s,
                };
                if !cells.contains_key(&id) {
                    return Err(Error::Config(format!("missing batch for cell {id}")));
                }
            }
        }
    }
    Ok(ProtoModel {
        mode,
        arch: arch.clone(),
        features: features.to_vec(),
        k,
        r,
        label_count,
        cells,
    })
}

/// End-to-end training: modularize, split, transform, then train the grid.
#[allow(clippy::too_many_arguments)]
pub fn train_proto_model(
    ds: &LabeledDataset,
    arch: &FnnArch,
    features: &[FeatureSpec],
    k: u32,
    r: u32,
    mode: TrainMode,
    sgd: &SgdConfig,
    gdt: &GdtConfig,
) -> Result<ProtoModel> {
    let batches = materialize_grid(ds, features, k, r)?;
    train_proto_model_from_batches(
        &batches,
        arch,
        features,
        k,
        r,
        ds.label_count(),
        mode,
        sgd,
        gdt,
    )
}

// ---------------------------------------------------------------------------
// Persistence: manifest.txt plus one weight file per cell.
// ---------------------------------------------------------------------------

const MANIFEST_HEADER: &str = "FEATNET-MODEL v1";
const MANIFEST_NAME: &str = "manifest.txt";

fn weight_file_name(id: CellId) -> String {
    format!("weights/c{}_{}_{}.fnnw", id.feature, id.module, id.submodule)
}

/// Writes the manifest and quantized weight files under `dir`, atomically
/// per file. Repeated saves of the same model are byte-identical.
pub fn save_proto_model(dir: &Path, pm: &ProtoModel, decimals: u8) -> Result<()> {
    std::fs::create_dir_all(dir.join("weights"))?;
    let mut manifest = String::new();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    manifest.push_str(&format!("mode {}\n", pm.mode));
    manifest.push_str(&format!("arch {}\n", pm.arch.label()));
    manifest.push_str(&format!("precision {decimals}\n"));
    manifest.push_str(&format!("k {}\n", pm.k));
    manifest.push_str(&format!("r {}\n", pm.r));
    manifest.push_str(&format!("labels {}\n", pm.label_count));
    for spec in &pm.features {
        manifest.push_str(&format!(
            "feature {} {} {} {}\n",
            spec.name, spec.wr, spec.wg, spec.wb
        ));
    }
    for (id, cell) in &pm.cells {
        let path = match &cell.params {
            Some(params) => {
                let name = weight_file_name(*id);
                let mut buf = Vec::new();
                write_weights(&mut buf, &quantize_params(params, decimals))?;
                atomic_write(&dir.join(&name), &buf)?;
                name
            }
            None => "-".to_string(),
        };
        manifest.push_str(&format!(
            "cell {} {} {} {} {} {:.6}\n",
            id.feature, id.module, id.submodule, path, cell.status, cell.accuracy_pct
        ));
    }
    atomic_write(&dir.join(MANIFEST_NAME), manifest.as_bytes())
}

fn manifest_field<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
    line.and_then(|l| l.strip_prefix(key))
        .and_then(|v| v.strip_prefix(' '))
        .ok_or_else(|| Error::Parse(format!("manifest: expected `{key} ...` line")))
}

/// Loads a saved model. GDT traces and conflict details are not persisted;
/// loaded cells carry empty ones.
pub fn load_proto_model(dir: &Path) -> Result<ProtoModel> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Parse("not a model manifest".into()));
    }
    let mode = TrainMode::parse(manifest_field(lines.next(), "mode")?)?;
    let arch = FnnArch::parse(manifest_field(lines.next(), "arch")?)?;
    let _precision: u8 = manifest_field(lines.next(), "precision")?
        .parse()
        .map_err(|_| Error::Parse("manifest: bad precision".into()))?;
    let k: u32 = manifest_field(lines.next(), "k")?
        .parse()
        .map_err(|_| Error::Parse("manifest: bad k".into()))?;
    let r: u32 = manifest_field(lines.next(), "r")?
        .parse()
        .map_err(|_| Error::Parse("manifest: bad r".into()))?;
    let label_count: u32 = manifest_field(lines.next(), "labels")?
        .parse()
        .map_err(|_| Error::Parse("manifest: bad label count".into()))?;

    let mut features = Vec::new();
    let mut cells = BTreeMap::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("feature ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("manifest: bad feature line {line:?}")));
            }
            let parse = |t: &str| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("manifest: bad weight {t:?}")))
            };
            features.push(FeatureSpec::new(
                f[0],
                parse(f[1])?,
                parse(f[2])?,
                parse(f[3])?,
            )?);
        } else if let Some(rest) = line.strip_prefix("cell ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::Parse(format!("manifest: bad cell line {line:?}")));
            }
            let id = CellId {
                feature: f[0]
                    .parse()
                    .map_err(|_| Error::Parse("manifest: bad cell feature".into()))?,
                module: f[1]
                    .parse()
                    .map_err(|_| Error::Parse("manifest: bad cell module".into()))?,
                submodule: f[2]
                    .parse()
                    .map_err(|_| Error::Parse("manifest: bad cell submodule".into()))?,
            };
            let params = if f[3] == "-" {
                None
            } else {
                let file = std::fs::File::open(dir.join(f[3]))?;
                Some(read_weights(BufReader::new(file))?)
            };
            let status = CellStatus::parse(f[4])?;
            let accuracy_pct: f64 = f[5]
                .parse()
                .map_err(|_| Error::Parse("manifest: bad cell accuracy".into()))?;
            cells.insert(
                id,
                TrainedCell {
                    params,
                    status,
                    accuracy_pct,
                    trace: Vec::new(),
                    conflicts: ConflictReport::default(),
                },
            );
        } else {
            return Err(Error::Parse(format!("manifest: unknown line {line:?}")));
        }
    }
    if features.is_empty() || cells.is_empty() {
        return Err(Error::Parse("manifest: no features or no cells".into()));
    }
    Ok(ProtoModel {
        mode,
        arch,
        features,
        k,
        r,
        label_count,
        cells,
    })
}
