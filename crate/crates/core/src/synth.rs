//! Synthetic multi-shot counting data.
//!
//! One seed scene is fully annotated. Every later shot re-arranges the same
//! pile, with a small number of objects added or removed between quantity
//! levels; its count label is propagated from the seed count rather than
//! measured.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::density::DotMap;
use crate::error::{Error, Result};
use crate::grid::DenseGrid;
use crate::pgm;
use crate::rng::{self, Rng};

const MAX_PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub object_radius_range: (f64, f64),
    pub intensity_range: (f64, f64),
    pub background_noise_std: f64,
    pub min_center_distance: f64,
    /// 0 disks, 1 rings, 2 ellipses; larger ids cycle.
    pub category_id: u32,
    /// Per-shot background level, re-drawn for every photograph.
    pub background_range: (f64, f64),
    /// Largest brightness change across the image from the per-shot lighting
    /// gradient.
    pub background_gradient: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            object_radius_range: (1.8, 3.0),
            intensity_range: (0.5, 0.95),
            background_noise_std: 0.03,
            min_center_distance: 3.0,
            category_id: 0,
            background_range: (0.05, 0.35),
            background_gradient: 0.2,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, why: &str| Err(Error::Config(format!("scene.{field}: {why}")));
        if self.width == 0 || self.height == 0 {
            return err("width", "image size must be positive");
        }
        let ranges = [
            ("object_radius_range", self.object_radius_range),
            ("intensity_range", self.intensity_range),
            ("background_range", self.background_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return err(name, "min must be smaller than max");
            }
        }
        if self.object_radius_range.0 <= 0.0 {
            return err("object_radius_range", "radii must be positive");
        }
        for (name, (lo, hi)) in [ranges[1], ranges[2]] {
            if lo < 0.0 || hi > 1.0 {
                return err(name, "values must lie in [0, 1]");
            }
        }
        if !(self.background_noise_std >= 0.0 && self.background_noise_std.is_finite()) {
            return err("background_noise_std", "must be >= 0");
        }
        if !(self.min_center_distance >= 0.0 && self.min_center_distance.is_finite()) {
            return err("min_center_distance", "must be >= 0");
        }
        if !(self.background_gradient >= 0.0 && self.background_gradient.is_finite()) {
            return err("background_gradient", "must be >= 0");
        }
        Ok(())
    }
}

/// Soft coverage of a disk edge: 1 inside, 0 outside, linear over 1.5 px.
fn edge(radius: f64, d: f64) -> f64 {
    ((radius + 0.75 - d) / 1.5).clamp(0.0, 1.0)
}

struct Blob {
    x: f64,
    y: f64,
    radius: f64,
    intensity: f64,
    // ellipse orientation
    cos_t: f64,
    sin_t: f64,
}

impl Blob {
    fn coverage(&self, category: u32, px: f64, py: f64) -> f64 {
        let (dx, dy) = (px - self.x, py - self.y);
        match category % 3 {
            0 => edge(self.radius, dx.hypot(dy)),
            1 => {
                let d = dx.hypot(dy);
                (edge(self.radius, d) - 0.6 * edge(0.45 * self.radius, d)).max(0.0)
            }
            _ => {
                let u = dx * self.cos_t + dy * self.sin_t;
                let v = -dx * self.sin_t + dy * self.cos_t;
                let d = ((u / 1.4).powi(2) + (v / 0.7).powi(2)).sqrt();
                edge(self.radius, d)
            }
        }
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..hi)
}

/// Renders `n_objects` soft blobs over a noisy, unevenly lit background.
/// Dots sit at blob centres; pixel values are clamped to `[0, 1]` and
/// quantized to 16 bits so that images survive a PGM round trip unchanged.
pub fn generate_scene(spec: &SceneSpec, n_objects: usize, rng_seed: u64) -> Result<(DenseGrid, DotMap)> {
    spec.validate()?;
    let mut rng = rng::substream(rng_seed, "scene");
    let (w, h) = (spec.width, spec.height);

    let margin = 1.0f64.min(w as f64 / 4.0).min(h as f64 / 4.0);
    let mut points: Vec<[f64; 2]> = Vec::with_capacity(n_objects);
    let d2min = spec.min_center_distance * spec.min_center_distance;
    while points.len() < n_objects {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let x = rng.random_range(margin..w as f64 - margin);
            let y = rng.random_range(margin..h as f64 - margin);
            let clear = points
                .iter()
                .all(|p| (p[0] - x).powi(2) + (p[1] - y).powi(2) >= d2min);
            if clear {
                points.push([x, y]);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Capacity {
                requested: n_objects,
                placed: points.len(),
            });
        }
    }

    let blobs: Vec<Blob> = points
        .iter()
        .map(|&[x, y]| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Blob {
                x,
                y,
                radius: uniform(&mut rng, spec.object_radius_range),
                intensity: uniform(&mut rng, spec.intensity_range),
                cos_t: theta.cos(),
                sin_t: theta.sin(),
            }
        })
        .collect();

    let base = uniform(&mut rng, spec.background_range);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let strength = rng.random_range(0.0..=spec.background_gradient);
    let (gx, gy) = (angle.cos() * strength, angle.sin() * strength);
    let noise = Normal::new(0.0, spec.background_noise_std.max(f64::MIN_POSITIVE)).expect("valid std");

    let mut image = DenseGrid::zeros(h, w);
    for row in 0..h {
        let py = row as f64 + 0.5;
        for col in 0..w {
            let px = col as f64 + 0.5;
            let mut v = base + gx * (px / w as f64 - 0.5) + gy * (py / h as f64 - 0.5);
            for b in &blobs {
                if (b.x - px).abs() > 2.0 * b.radius + 1.0 || (b.y - py).abs() > 2.0 * b.radius + 1.0 {
                    continue;
                }
                let a = b.coverage(spec.category_id, px, py);
                if a > 0.0 {
                    v = v * (1.0 - a) + b.intensity * a;
                }
            }
            if spec.background_noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            image.set(row, col, pgm::quantize_unit(v));
        }
    }
    Ok((image, DotMap::new(w, h, points)?))
}

/// One count-labelled photograph. `hidden_dots` is the generator's own
/// record, kept for oracles and diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledShot {
    pub image: DenseGrid,
    pub count: f64,
    pub level: usize,
    pub hidden_dots: DotMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedShot {
    pub image: DenseGrid,
    pub dots: DotMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceParams {
    pub base_count: usize,
    pub levels: usize,
    pub shots_per_level: usize,
    /// Inclusive range of the signed count change between levels.
    pub delta_range: (i64, i64),
    pub test_images: usize,
    /// Test counts extend this many multiples of the largest training delta
    /// beyond both ends of the training range.
    pub test_widen_factor: f64,
}

impl Default for SequenceParams {
    fn default() -> Self {
        SequenceParams {
            base_count: 80,
            levels: 10,
            shots_per_level: 20,
            delta_range: (-8, -4),
            test_images: 49,
            test_widen_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub scene_spec: SceneSpec,
    pub generator_seed: u64,
    pub params: SequenceParams,
    pub seed_sample: SeedShot,
    pub weak_samples: Vec<LabeledShot>,
    pub val_samples: Vec<LabeledShot>,
    pub test_samples: Vec<LabeledShot>,
}

fn shot_seed(generator_seed: u64, kind: &str, index: usize) -> u64 {
    rng::derive_seed(generator_seed, &format!("{kind}/{index}"))
}

/// Seed image plus `levels * shots_per_level - 1` count-labelled re-shots.
/// Validation and test lists are left empty.
pub fn multishot_sequence(
    spec: &SceneSpec,
    base_count: usize,
    levels: usize,
    shots_per_level: usize,
    delta_range: (i64, i64),
    rng_seed: u64,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if levels == 0 || shots_per_level == 0 {
        return Err(Error::invalid("levels and shots_per_level must be positive"));
    }
    if base_count == 0 {
        return Err(Error::invalid("base_count must be positive"));
    }
    if delta_range.0 > delta_range.1 {
        return Err(Error::invalid(format!("delta_range {delta_range:?} is empty")));
    }

    let mut rng = rng::substream(rng_seed, "levels");
    let mut counts = Vec::with_capacity(levels);
    let mut current = base_count as i64;
    counts.push(current);
    for level in 1..levels {
        current += rng.random_range(delta_range.0..=delta_range.1);
        if current <= 0 {
            return Err(Error::invalid(format!(
                "count would reach {current} at level {level}; raise base_count or shrink delta_range"
            )));
        }
        counts.push(current);
    }

    let (image, dots) = generate_scene(spec, base_count, shot_seed(rng_seed, "shot", 0))?;
    let seed_sample = SeedShot { image, dots };
    let mut weak_samples = Vec::with_capacity(levels * shots_per_level - 1);
    for (level, &count) in counts.iter().enumerate() {
        for shot in 0..shots_per_level {
            let index = level * shots_per_level + shot;
            if index == 0 {
                continue;
            }
            let (image, hidden_dots) = generate_scene(spec, count as usize, shot_seed(rng_seed, "shot", index))?;
            weak_samples.push(LabeledShot {
                image,
                count: count as f64,
                level,
                hidden_dots,
            });
        }
    }

    Ok(DatasetManifest {
        scene_spec: spec.clone(),
        generator_seed: rng_seed,
        params: SequenceParams {
            base_count,
            levels,
            shots_per_level,
            delta_range,
            test_images: 0,
            test_widen_factor: 0.0,
        },
        seed_sample,
        weak_samples,
        val_samples: Vec::new(),
        test_samples: Vec::new(),
    })
}

impl DatasetManifest {
    /// Smallest and largest count among the seed and re-shots.
    pub fn training_count_range(&self) -> (usize, usize) {
        let seed = self.seed_sample.dots.count();
        self.weak_samples
            .iter()
            .map(|s| s.count as usize)
            .fold((seed, seed), |(lo, hi), c| (lo.min(c), hi.max(c)))
    }

    /// Adds `n` separately shot test images whose counts are spread evenly
    /// over the training range widened by `widen_factor * max|delta|` on both
    /// sides.
    pub fn add_test_pool(&mut self, n: usize, widen_factor: f64) -> Result<()> {
        if !(widen_factor >= 0.0 && widen_factor.is_finite()) {
            return Err(Error::invalid("test widen factor must be >= 0"));
        }
        let (lo, hi) = self.training_count_range();
        let max_delta = self.params.delta_range.0.unsigned_abs().max(self.params.delta_range.1.unsigned_abs()) as f64;
        let widen = (widen_factor * max_delta).round() as usize;
        let lo = lo.saturating_sub(widen).max(1);
        let hi = hi + widen;
        self.test_samples.clear();
        for i in 0..n {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let count = (lo as f64 + t * (hi - lo) as f64).round() as usize;
            let (image, hidden_dots) = generate_scene(&self.scene_spec, count, shot_seed(self.generator_seed, "test", i))?;
            self.test_samples.push(LabeledShot {
                image,
                count: count as f64,
                level: usize::MAX,
                hidden_dots,
            });
        }
        self.params.test_images = n;
        self.params.test_widen_factor = widen_factor;
        Ok(())
    }
}

/// Sequence plus test pool as described by `params`.
pub fn generate_dataset(spec: &SceneSpec, params: &SequenceParams, rng_seed: u64) -> Result<DatasetManifest> {
    let mut m = multishot_sequence(
        spec,
        params.base_count,
        params.levels,
        params.shots_per_level,
        params.delta_range,
        rng_seed,
    )?;
    m.add_test_pool(params.test_images, params.test_widen_factor)?;
    Ok(m)
}

/// Disjoint training / validation / test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub fully: Vec<SeedShot>,
    pub weak: Vec<LabeledShot>,
    pub val: Vec<LabeledShot>,
    pub test: Vec<LabeledShot>,
}

/// A_F is the seed image. A_W and validation are drawn (after a seeded
/// shuffle) from the re-shots; test images come from the separate test pool.
pub fn split_dataset(manifest: &DatasetManifest, train_weak: usize, val: usize, test: usize) -> Result<DatasetSplits> {
    let available = manifest.weak_samples.len() + manifest.val_samples.len();
    if train_weak + val > available {
        return Err(Error::invalid(format!(
            "requested {train_weak} weak + {val} validation images but only {available} re-shots exist"
        )));
    }
    if test > manifest.test_samples.len() {
        return Err(Error::invalid(format!(
            "requested {test} test images but the test pool holds {}",
            manifest.test_samples.len()
        )));
    }
    let mut pool: Vec<&LabeledShot> = manifest.weak_samples.iter().chain(&manifest.val_samples).collect();
    let mut rng = rng::substream(manifest.generator_seed, "split");
    use rand::seq::SliceRandom;
    pool.shuffle(&mut rng);
    let weak = pool[..train_weak].iter().map(|s| (*s).clone()).collect();
    let val = pool[train_weak..train_weak + val].iter().map(|s| (*s).clone()).collect();
    let test = manifest.test_samples[..test].to_vec();
    Ok(DatasetSplits {
        fully: vec![manifest.seed_sample.clone()],
        weak,
        val,
        test,
    })
}

// On-disk layout:
//   manifest.json
//   images/{seed,weak_NNN,test_NNN}.pgm
//   dots/seed.json
//   hidden/{weak_NNN,test_NNN}.json   (never read by training)

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    generator_seed: u64,
    scene_spec: SceneSpec,
    params: SequenceParams,
    seed: SeedEntry,
    weak: Vec<ShotEntry>,
    test: Vec<ShotEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedEntry {
    image: String,
    dots: String,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShotEntry {
    image: String,
    count: f64,
    level: Option<usize>,
    hidden: String,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "dots", "hidden"] {
            mkdir(&dir.join(sub))?;
        }
        pgm::write_unit(&dir.join("images/seed.pgm"), &self.seed_sample.image)?;
        self.seed_sample.dots.save(&dir.join("dots/seed.json"))?;

        let write_shots = |kind: &str, shots: &[LabeledShot]| -> Result<Vec<ShotEntry>> {
            shots
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let image = format!("images/{kind}_{i:03}.pgm");
                    let hidden = format!("hidden/{kind}_{i:03}.json");
                    pgm::write_unit(&dir.join(&image), &s.image)?;
                    s.hidden_dots.save(&dir.join(&hidden))?;
                    Ok(ShotEntry {
                        image,
                        count: s.count,
                        level: (s.level != usize::MAX).then_some(s.level),
                        hidden,
                    })
                })
                .collect()
        };
        // Validation images are carved out of the re-shots at split time, so
        // they are stored with them.
        let mut reshots = self.weak_samples.clone();
        reshots.extend(self.val_samples.iter().cloned());
        let weak = write_shots("weak", &reshots)?;
        let test = write_shots("test", &self.test_samples)?;

        let file = ManifestFile {
            generator_seed: self.generator_seed,
            scene_spec: self.scene_spec.clone(),
            params: self.params,
            seed: SeedEntry {
                image: "images/seed.pgm".into(),
                dots: "dots/seed.json".into(),
                count: self.seed_sample.dots.count(),
            },
            weak,
            test,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let seed_sample = SeedShot {
            image: pgm::read_unit(&dir.join(&file.seed.image))?,
            dots: DotMap::load(&dir.join(&file.seed.dots))?,
        };
        let load_shots = |entries: &[ShotEntry]| -> Result<Vec<LabeledShot>> {
            entries
                .iter()
                .map(|e| {
                    Ok(LabeledShot {
                        image: pgm::read_unit(&dir.join(&e.image))?,
                        count: e.count,
                        level: e.level.unwrap_or(usize::MAX),
                        hidden_dots: DotMap::load(&dir.join(&e.hidden))?,
                    })
                })
                .collect()
        };
        Ok(DatasetManifest {
            scene_spec: file.scene_spec,
            generator_seed: file.generator_seed,
            params: file.params,
            seed_sample,
            weak_samples: load_shots(&file.weak)?,
            val_samples: Vec::new(),
            test_samples: load_shots(&file.test)?,
        })
    }
}
