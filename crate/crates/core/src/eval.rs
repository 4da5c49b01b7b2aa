//! Counting metrics and method comparison.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DenseGrid;
use crate::model::{predict_count, ModelParams};
use crate::trainer::{train, TrainConfig, TrainMode, TrainingSet};

fn check_lengths(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "prediction and ground truth lengths differ ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("metrics need at least one image"));
    }
    Ok(())
}

/// Mean absolute count error.
pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let s: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Root of the mean squared count error.
pub fn mse_metric(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let s: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// Mean of per-image `|pred - gt| / gt`, as a raw fraction.
pub fn rer(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_lengths(pred, gt)?;
    if let Some(g) = gt.iter().find(|g| !(**g > 0.0)) {
        return Err(Error::invalid(format!("relative error needs positive ground truth, got {g}")));
    }
    let s: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).abs() / g).sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_images: usize,
    pub mae: f64,
    pub mse: f64,
    /// Raw fraction; multiply by 100 for display.
    pub rer: f64,
    /// `(predicted, ground_truth)` per image.
    pub per_image: Vec<(f64, f64)>,
}

impl MetricsReport {
    pub fn from_predictions(pred: &[f64], gt: &[f64]) -> Result<Self> {
        Ok(MetricsReport {
            n_images: pred.len(),
            mae: mae(pred, gt)?,
            mse: mse_metric(pred, gt)?,
            rer: rer(pred, gt)?,
            per_image: pred.iter().copied().zip(gt.iter().copied()).collect(),
        })
    }
}

/// Predicts each image's count as the sum of the primary map.
pub fn evaluate_model(params: &ModelParams, samples: &[(DenseGrid, f64)]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let pred = samples
        .iter()
        .map(|(img, _)| predict_count(params, img))
        .collect::<Result<Vec<_>>>()?;
    let gt: Vec<f64> = samples.iter().map(|(_, c)| *c).collect();
    MetricsReport::from_predictions(&pred, &gt)
}

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub split: String,
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub rer: Option<f64>,
    pub n_images: usize,
    /// Left empty unless timing was requested, so reruns stay byte-identical.
    pub runtime_seconds: Option<f64>,
    /// Empty for completed runs; the divergence message otherwise.
    pub status: String,
}

/// A labelled training variant.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub config: TrainConfig,
    /// Train without the count-annotated images.
    pub drop_weak: bool,
}

impl Variant {
    pub fn mode(base: &TrainConfig, mode: TrainMode) -> Self {
        Variant {
            label: mode.name().to_string(),
            config: TrainConfig { mode, ..base.clone() },
            drop_weak: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub record_runtime: bool,
}

/// Trains every variant for every seed and scores the best-validation
/// snapshot on `test`. Runs are spread over the available cores; rows come
/// back ordered by variant, then seed, whatever the completion order.
pub fn run_variants(
    data: &TrainingSet,
    test: &[(DenseGrid, f64)],
    variants: &[Variant],
    seeds: &[u64],
    opts: RunOptions,
    progress: impl Fn(&ResultRow) + Sync,
) -> Result<Vec<ResultRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let fully_only = TrainingSet {
        fully: data.fully.clone(),
        weak: Vec::new(),
        val: data.val.clone(),
    };
    let mut jobs = Vec::new();
    for v in variants {
        let (set, base) = if v.drop_weak {
            // keep the epoch length of the mixed pool
            let n_full = data.fully.len().max(1);
            let steps = data.fully.len() * v.config.full_oversample + data.weak.len();
            let cfg = TrainConfig {
                full_oversample: steps.div_ceil(n_full),
                ..v.config.clone()
            };
            (&fully_only, cfg)
        } else {
            (data, v.config.clone())
        };
        for &seed in seeds {
            jobs.push((v.label.as_str(), set, TrainConfig { seed, ..base.clone() }));
        }
    }

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<ResultRow>>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some((label, set, config)) = jobs.get(i) else { break };
                let row = run_one(label, set, config, test, opts);
                if let Ok(r) = &row {
                    progress(r);
                }
                *results[i].lock().expect("result slot") = Some(row);
            });
        }
    });
    results
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

fn run_one(label: &str, data: &TrainingSet, config: &TrainConfig, test: &[(DenseGrid, f64)], opts: RunOptions) -> Result<ResultRow> {
    let start = Instant::now();
    let outcome = train(data, config)?;
    let runtime = opts.record_runtime.then(|| start.elapsed().as_secs_f64());
    let mut row = ResultRow {
        method: label.to_string(),
        seed: config.seed,
        split: "test".into(),
        mae: None,
        mse: None,
        rer: None,
        n_images: test.len(),
        runtime_seconds: runtime,
        status: String::new(),
    };
    match &outcome.diverged {
        Some(msg) => row.status = msg.clone(),
        None => {
            let m = evaluate_model(&outcome.best_params, test)?;
            row.mae = Some(m.mae);
            row.mse = Some(m.mse);
            row.rer = Some(m.rer);
        }
    }
    Ok(row)
}

/// Baseline1, Baseline2 and MATT over `seeds`.
pub fn compare_methods(
    data: &TrainingSet,
    test: &[(DenseGrid, f64)],
    base: &TrainConfig,
    seeds: &[u64],
    opts: RunOptions,
) -> Result<Vec<ResultRow>> {
    let variants: Vec<Variant> = [TrainMode::Baseline1, TrainMode::Baseline2, TrainMode::Matt]
        .into_iter()
        .map(|m| Variant::mode(base, m))
        .collect();
    run_variants(data, test, &variants, seeds, opts, |_| {})
}

/// Mean and sample standard deviation of one metric for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub runs: usize,
    pub diverged: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub rer_mean: f64,
    pub rer_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates rows per method, in first-appearance order. RER stays raw.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let ok: Vec<&ResultRow> = rows.iter().filter(|r| r.method == m && r.mae.is_some()).collect();
            let total = rows.iter().filter(|r| r.method == m).count();
            let pick = |f: fn(&ResultRow) -> Option<f64>| mean_std(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let (mae_mean, mae_std) = pick(|r| r.mae);
            let (mse_mean, mse_std) = pick(|r| r.mse);
            let (rer_mean, rer_std) = pick(|r| r.rer);
            SummaryRow {
                method: m.to_string(),
                runs: total,
                diverged: total - ok.len(),
                mae_mean,
                mae_std,
                mse_mean,
                mse_std,
                rer_mean,
                rer_std,
            }
        })
        .collect()
}

/// Plain-text table; RER shown as a percentage.
pub fn format_summary(summary: &[SummaryRow]) -> String {
    let mut out = format!("{:<18} {:>18} {:>18} {:>18}\n", "method", "MAE", "MSE", "RER(%)");
    for s in summary {
        out.push_str(&format!(
            "{:<18} {:>8.3} ± {:<7.3} {:>8.3} ± {:<7.3} {:>8.2} ± {:<7.2}",
            s.method,
            s.mae_mean,
            s.mae_std,
            s.mse_mean,
            s.mse_std,
            100.0 * s.rer_mean,
            100.0 * s.rer_std
        ));
        if s.diverged > 0 {
            out.push_str(&format!("  ({} of {} runs diverged)", s.diverged, s.runs));
        }
        out.push('\n');
    }
    out
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_image() {
        assert_eq!(mae(&[10.0], &[12.0]).unwrap(), 2.0);
        assert_eq!(mse_metric(&[10.0], &[12.0]).unwrap(), 2.0);
    }

    #[test]
    fn relative_error_weights_small_scenes() {
        let r = rer(&[990.0, 10.0], &[1000.0, 20.0]).unwrap();
        assert!((r - 0.255).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
        assert!(rer(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn summary_mean_std() {
        let row = |m: &str, mae: f64| ResultRow {
            method: m.into(),
            seed: 0,
            split: "test".into(),
            mae: Some(mae),
            mse: Some(mae),
            rer: Some(0.1),
            n_images: 1,
            runtime_seconds: None,
            status: String::new(),
        };
        let s = summarize(&[row("a", 1.0), row("a", 3.0), row("b", 2.0)]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].mae_mean, 2.0);
        assert!((s[0].mae_std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].mae_std, 0.0);
    }
}
