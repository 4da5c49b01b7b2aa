//! Mixed-supervision training with the asymmetric two-phase update.
//!
//! Per mini-batch:
//! 1. Primary phase: MSE on `F_0` for dot-annotated items plus
//!    `alpha * |sum F_0 - c|` for count-annotated items; updates the backbone
//!    and the primary branch.
//! 2. Auxiliary phase (MATT variants, count-annotated items only): a fresh
//!    forward pass with the just-updated weights, auxiliary loss against a
//!    detached `F_0`; updates the backbone and branches `1..=K`.
//!
//! With a batch size of one this is exactly the per-sample loop.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape};
use crate::density::{render_density, DensityGrid, DotMap, KernelSpec};
use crate::error::{Error, Result};
use crate::grid::DenseGrid;
use crate::losses::{self, BatchTerm, LossWeights, PrimaryCoupling};
use crate::model::{image_tensor, init_model, ModelConfig, ModelParams, ParamGroup};
use crate::rng;
use crate::synth::DatasetSplits;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Dot-annotated images only.
    Baseline1,
    /// Adds the count loss on count-annotated images.
    Baseline2,
    Matt,
    /// Auxiliary gradients also flow into the primary branch.
    MattSymmetric,
    /// Auxiliary loss without the consistency term.
    MattCountOnly,
    /// Auxiliary loss without the auxiliary count term.
    MattMseOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 6] = [
        TrainMode::Baseline1,
        TrainMode::Baseline2,
        TrainMode::Matt,
        TrainMode::MattSymmetric,
        TrainMode::MattCountOnly,
        TrainMode::MattMseOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline1 => "baseline1",
            TrainMode::Baseline2 => "baseline2",
            TrainMode::Matt => "matt",
            TrainMode::MattSymmetric => "matt-symmetric",
            TrainMode::MattCountOnly => "matt-count-only",
            TrainMode::MattMseOnly => "matt-mse-only",
        }
    }

    pub fn uses_aux(self) -> bool {
        !matches!(self, TrainMode::Baseline1 | TrainMode::Baseline2)
    }

    /// Loss weights with the ablated term switched off.
    pub fn effective_weights(self, w: LossWeights) -> LossWeights {
        match self {
            TrainMode::MattCountOnly => LossWeights { beta1: 0.0, ..w },
            TrainMode::MattMseOnly => LossWeights { beta2: 0.0, ..w },
            _ => w,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| {
                let names: Vec<_> = TrainMode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown mode {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    /// Ground-truth Gaussian sigma in pixels.
    pub density_sigma: f64,
    /// Truncation radius in sigma units.
    pub density_truncation: f64,
    /// Each dot-annotated image appears this many times per epoch.
    pub full_oversample: usize,
    /// Also run the auxiliary phase on dot-annotated images, using their dot
    /// count as the label.
    pub aux_on_full: bool,
    /// Baseline1 repeats its dot-annotated images so an epoch has as many
    /// steps as the mixed modes see.
    pub match_steps: bool,
    /// Give the backbone its own optimizer state for the auxiliary phase
    /// instead of sharing moments with the primary phase.
    pub split_backbone_moments: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Matt,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            loss_weights: LossWeights::default(),
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            density_sigma: 2.0,
            density_truncation: 4.0,
            full_oversample: 1,
            aux_on_full: false,
            match_steps: true,
            split_backbone_moments: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.full_oversample == 0 {
            return Err(Error::Config("train.full_oversample must be >= 1".into()));
        }
        if !(self.density_sigma > 0.0) || !(self.density_truncation >= 2.0) {
            return Err(Error::Config(
                "train.density_sigma must be > 0 and train.density_truncation >= 2".into(),
            ));
        }
        self.loss_weights.validate()?;
        self.adam.validate()?;
        self.model.validate().map_err(|e| Error::Config(format!("train.model: {e}")))
    }
}

/// One training instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    FullyAnnotated {
        image: DenseGrid,
        dots: DotMap,
        density: DensityGrid,
    },
    WeaklyAnnotated {
        image: DenseGrid,
        count: f64,
    },
}

impl Sample {
    pub fn fully(image: DenseGrid, dots: DotMap, sigma: f64, truncation: f64) -> Result<Self> {
        if (image.rows(), image.cols()) != (dots.height, dots.width) {
            return Err(Error::invalid("image and dot map sizes differ"));
        }
        let density = render_density(&dots, sigma, truncation)?;
        Ok(Sample::FullyAnnotated { image, dots, density })
    }

    pub fn weakly(image: DenseGrid, count: f64) -> Result<Self> {
        if !(count.is_finite() && count >= 0.0) {
            return Err(Error::invalid(format!("count label must be >= 0, got {count}")));
        }
        Ok(Sample::WeaklyAnnotated { image, count })
    }

    pub fn image(&self) -> &DenseGrid {
        match self {
            Sample::FullyAnnotated { image, .. } | Sample::WeaklyAnnotated { image, .. } => image,
        }
    }

    pub fn count(&self) -> f64 {
        match self {
            Sample::FullyAnnotated { dots, .. } => dots.count() as f64,
            Sample::WeaklyAnnotated { count, .. } => *count,
        }
    }

    pub fn is_fully(&self) -> bool {
        matches!(self, Sample::FullyAnnotated { .. })
    }
}

/// Loss components of one step, each already weighted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub mse: f64,
    pub count: f64,
    pub aux: f64,
    pub n_full: usize,
    pub n_weak: usize,
}

impl StepReport {
    pub fn total(&self) -> f64 {
        self.mse + self.count + self.aux
    }
}

/// Model plus one optimizer state per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub backbone_opt: AdamState,
    /// Used by the auxiliary phase when moments are split.
    pub backbone_aux_opt: Option<AdamState>,
    pub branch_opts: Vec<AdamState>,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let params = init_model(&config.model, config.seed)?;
        let mut state = Self::from_params(params, config.adam);
        if config.split_backbone_moments {
            state.backbone_aux_opt = Some(state.backbone_opt.clone());
        }
        Ok(state)
    }

    pub fn from_params(params: ModelParams, adam: AdamConfig) -> Self {
        let backbone_opt = AdamState::new(adam, params.group(ParamGroup::Backbone));
        let branch_opts = (0..params.branches.len())
            .map(|b| AdamState::new(adam, params.group(ParamGroup::Branch(b))))
            .collect();
        TrainState {
            params,
            backbone_opt,
            backbone_aux_opt: None,
            branch_opts,
            step: 0,
        }
    }

    fn apply(&mut self, groups: &[ParamGroup], aux_phase: bool) -> Result<()> {
        for &g in groups {
            let opt = match g {
                ParamGroup::Backbone if aux_phase && self.backbone_aux_opt.is_some() => {
                    self.backbone_aux_opt.as_mut().expect("checked")
                }
                ParamGroup::Backbone => &mut self.backbone_opt,
                ParamGroup::Branch(i) => &mut self.branch_opts[i],
            };
            opt.step(&mut self.params.group_mut(g))?;
        }
        Ok(())
    }
}

fn check_finite(v: f64, step: u64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step: step as usize,
            detail: format!("{what} loss is {v}"),
        })
    }
}

/// Runs both phases for one mini-batch.
pub fn train_step(state: &mut TrainState, batch: &[&Sample], config: &TrainConfig) -> Result<StepReport> {
    let mut report = primary_phase(state, batch, config)?;
    report.aux = aux_phase(state, batch, config)?;
    state.step += 1;
    Ok(report)
}

fn check_batch(batch: &[&Sample], mode: TrainMode) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step needs a non-empty batch"));
    }
    if mode == TrainMode::Baseline1 && batch.iter().any(|s| !s.is_fully()) {
        return Err(Error::invalid("baseline1 trains on dot-annotated images only"));
    }
    Ok(())
}

fn check_params(state: &TrainState) -> Result<()> {
    if state.params.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step: state.step as usize,
            detail: "non-finite parameter after update".into(),
        })
    }
}

/// Phase one: base loss on the primary map; steps the backbone and branch 0.
pub fn primary_phase(state: &mut TrainState, batch: &[&Sample], config: &TrainConfig) -> Result<StepReport> {
    check_batch(batch, config.mode)?;
    let weights = config.mode.effective_weights(config.loss_weights);
    let mut report = StepReport::default();
    let mut tape = Tape::new();
    let vars = state.params.bind(&mut tape);
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        let x = tape.constant(image_tensor(s.image()));
        let f0 = vars.forward_primary(&mut tape, x)?;
        terms.push(match s {
            Sample::FullyAnnotated { density, .. } => BatchTerm::Full { prediction: f0, density },
            Sample::WeaklyAnnotated { count, .. } => BatchTerm::Weak {
                prediction: f0,
                count: *count,
            },
        });
    }
    let loss = losses::base_loss(&mut tape, &terms, weights.alpha)?;
    for t in &terms {
        match *t {
            BatchTerm::Full { prediction, density } => {
                report.n_full += 1;
                report.mse += sq_diff(tape.data(prediction), density.values());
            }
            BatchTerm::Weak { prediction, count } => {
                report.n_weak += 1;
                report.count += weights.alpha * (tape.data(prediction).iter().sum::<f64>() - count).abs();
            }
        }
    }
    check_finite(tape.scalar(loss), state.step, "primary")?;
    tape.backward(loss)?;
    let groups = [ParamGroup::Backbone, ParamGroup::Branch(0)];
    for g in groups {
        state.params.accumulate_grads(&tape, &vars, g)?;
    }
    state.apply(&groups, false)?;
    check_params(state)?;
    Ok(report)
}

/// Phase two: auxiliary loss on a fresh forward pass; steps the backbone and
/// branches `1..=K` (plus branch 0 for the symmetric ablation). Returns the
/// weighted auxiliary loss, or 0 when the mode or batch has nothing to do.
pub fn aux_phase(state: &mut TrainState, batch: &[&Sample], config: &TrainConfig) -> Result<f64> {
    check_batch(batch, config.mode)?;
    let k = state.params.num_aux();
    let items: Vec<(&DenseGrid, f64)> = batch
        .iter()
        .filter(|s| !s.is_fully() || config.aux_on_full)
        .map(|s| (s.image(), s.count()))
        .collect();
    if !config.mode.uses_aux() || k == 0 || items.is_empty() {
        return Ok(0.0);
    }
    let weights = config.mode.effective_weights(config.loss_weights);
    let kernels: Vec<KernelSpec> = state.params.config.kernels()?;
    let coupling = if config.mode == TrainMode::MattSymmetric {
        PrimaryCoupling::Symmetric
    } else {
        PrimaryCoupling::StopGradient
    };
    let mut tape = Tape::new();
    let vars = state.params.bind(&mut tape);
    let mut terms = Vec::with_capacity(items.len());
    for (image, count) in items {
        let x = tape.constant(image_tensor(image));
        let (f0, aux) = vars.forward_all(&mut tape, x)?;
        terms.push(losses::aux_loss_with(&mut tape, &aux, f0, &kernels, count, &weights, coupling)?);
    }
    let loss = tape.add_all(&terms)?;
    let value = tape.scalar(loss);
    check_finite(value, state.step, "auxiliary")?;
    tape.backward(loss)?;

    let mut groups = vec![ParamGroup::Backbone];
    if coupling == PrimaryCoupling::Symmetric {
        groups.push(ParamGroup::Branch(0));
    }
    groups.extend((1..=k).map(ParamGroup::Branch));
    for &g in &groups {
        state.params.accumulate_grads(&tape, &vars, g)?;
    }
    state.apply(&groups, true)?;
    check_params(state)?;
    Ok(value)
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-epoch record. Training rows carry loss sums; validation rows carry MAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub loss_total: Option<f64>,
    pub loss_mse: Option<f64>,
    pub loss_count: Option<f64>,
    pub loss_aux: Option<f64>,
    pub n_full: Option<usize>,
    pub n_weak: Option<usize>,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_params: ModelParams,
    /// Parameters at the epoch with the lowest validation MAE (the final ones
    /// when there is no validation set).
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
    pub steps: u64,
    /// Set when training stopped on a non-finite loss; history up to that
    /// point is kept.
    pub diverged: Option<String>,
}

/// Training material assembled from dataset splits.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub fully: Vec<Sample>,
    pub weak: Vec<Sample>,
    pub val: Vec<(DenseGrid, f64)>,
}

impl TrainingSet {
    pub fn from_splits(splits: &DatasetSplits, sigma: f64, truncation: f64) -> Result<Self> {
        let fully = splits
            .fully
            .iter()
            .map(|s| Sample::fully(s.image.clone(), s.dots.clone(), sigma, truncation))
            .collect::<Result<_>>()?;
        let weak = splits
            .weak
            .iter()
            .map(|s| Sample::weakly(s.image.clone(), s.count))
            .collect::<Result<_>>()?;
        let val = splits.val.iter().map(|s| (s.image.clone(), s.count)).collect();
        Ok(TrainingSet { fully, weak, val })
    }
}

/// Full training run: seeded shuffling every epoch, validation after every
/// epoch, best-validation snapshot retained.
pub fn train(data: &TrainingSet, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, config, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch's rows are recorded.
pub fn train_with(data: &TrainingSet, config: &TrainConfig, mut on_epoch: impl FnMut(&[HistoryRow])) -> Result<TrainOutcome> {
    config.validate()?;
    if data.fully.is_empty() {
        return Err(Error::invalid("at least one dot-annotated image is required"));
    }
    let use_weak = config.mode != TrainMode::Baseline1;
    if use_weak && data.weak.is_empty() && config.mode != TrainMode::Baseline2 && !config.aux_on_full {
        return Err(Error::invalid(format!("{} needs count-annotated images", config.mode)));
    }

    let mut pool: Vec<&Sample> = Vec::new();
    let mixed_len = data.fully.len() * config.full_oversample + data.weak.len();
    let repeats = if use_weak || !config.match_steps {
        config.full_oversample
    } else {
        mixed_len.div_ceil(data.fully.len())
    };
    for _ in 0..repeats {
        pool.extend(&data.fully);
    }
    if use_weak {
        pool.extend(&data.weak);
    }

    let mut state = TrainState::new(config)?;
    let mut rng = rng::substream(config.seed, "shuffle");
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut diverged = None;

    'epochs: for epoch in 1..=config.epochs {
        pool.shuffle(&mut rng);
        let mut sum = StepReport::default();
        for batch in pool.chunks(config.batch_size) {
            match train_step(&mut state, batch, config) {
                Ok(r) => {
                    sum.mse += r.mse;
                    sum.count += r.count;
                    sum.aux += r.aux;
                    sum.n_full += r.n_full;
                    sum.n_weak += r.n_weak;
                }
                Err(e @ Error::Diverged { .. }) => {
                    diverged = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        history.push(HistoryRow {
            epoch,
            split: "train".into(),
            loss_total: Some(sum.total()),
            loss_mse: Some(sum.mse),
            loss_count: Some(sum.count),
            loss_aux: Some(sum.aux),
            n_full: Some(sum.n_full),
            n_weak: Some(sum.n_weak),
            mae: None,
        });
        if !data.val.is_empty() {
            let mae = crate::eval::evaluate_model(&state.params, &data.val)?.mae;
            history.push(HistoryRow {
                epoch,
                split: "val".into(),
                loss_total: None,
                loss_mse: None,
                loss_count: None,
                loss_aux: None,
                n_full: None,
                n_weak: None,
                mae: Some(mae),
            });
            if best.as_ref().is_none_or(|(b, _, _)| mae < *b) {
                best = Some((mae, epoch, state.params.clone()));
            }
        }
        on_epoch(&history);
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (history.iter().map(|r| r.epoch).max().unwrap_or(0), state.params.clone()),
    };
    Ok(TrainOutcome {
        final_params: state.params,
        best_params,
        best_epoch,
        history,
        steps: state.step,
        diverged,
    })
}

pub fn write_history(path: &std::path::Path, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            detail: format!("{other:?}"),
        },
    })?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert_eq!("MATT_symmetric".parse::<TrainMode>().unwrap(), TrainMode::MattSymmetric);
        assert!("matt2".parse::<TrainMode>().is_err());
    }

    #[test]
    fn ablation_weights() {
        let w = LossWeights {
            alpha: 0.1,
            beta1: 2.0,
            beta2: 3.0,
        };
        assert_eq!(TrainMode::MattCountOnly.effective_weights(w).beta1, 0.0);
        assert_eq!(TrainMode::MattMseOnly.effective_weights(w).beta2, 0.0);
        assert_eq!(TrainMode::Matt.effective_weights(w), w);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn negative_count_label_is_rejected() {
        assert!(Sample::weakly(DenseGrid::zeros(2, 2), -1.0).is_err());
    }
}
