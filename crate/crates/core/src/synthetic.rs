//! Synthetic classroom data with known structure: per-level Gaussian
//! clusters per modality, an optional per-student offset, and two raters
//! whose average falls inside the band of the true level. Each second draws
//! one noisy point around its level center; its 24 frames jitter around that
//! point.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    average_raters, FrameEmbedding, LabeledSequence, LabeledSequenceSet, RaterSeries, RatingTable,
};
use crate::error::{Error, Result};
use crate::level::{discretize_engagement, EngagementLevel, Thresholds, RATING_MAX, RATING_MIN};
use crate::scalar::Scalar;
use crate::sequence::{Modality, Sequence, FRAMES_PER_SECOND};
use crate::tracklets::{Detection, GalleryEntry};

/// How a student's offset applies to the level centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// One vector moves all three centers together.
    Shared,
    /// Each center moves by its own vector of the same norm.
    PerLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub students: usize,
    pub seconds: u32,
    /// Distance between any two level centers.
    pub separation: f64,
    /// Norm of each student's random offset.
    pub shift: f64,
    pub shift_mode: ShiftMode,
    /// Per-coordinate standard deviation of the noise drawn once per second.
    pub noise: f64,
    /// Per-coordinate standard deviation of the extra noise on each frame.
    pub frame_jitter: f64,
    pub attention_dim: usize,
    pub affect_dim: usize,
    pub identity_dim: usize,
    pub session_id: String,
    pub camera_id: String,
    /// Also emit embedding rows, detections and a gallery.
    pub streams: bool,
    pub thresholds: Thresholds,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            students: 8,
            seconds: 400,
            separation: 3.0,
            shift: 0.0,
            shift_mode: ShiftMode::PerLevel,
            noise: 1.0,
            frame_jitter: 0.25,
            attention_dim: 4,
            affect_dim: 4,
            identity_dim: 16,
            session_id: "session1".into(),
            camera_id: "cam0".into(),
            streams: false,
            thresholds: Thresholds::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset<T: Scalar> {
    pub set: LabeledSequenceSet<T>,
    pub ratings: RatingTable<T>,
    pub embeddings: Vec<FrameEmbedding<T>>,
    pub detections: Vec<Detection<T>>,
    pub gallery: Vec<GalleryEntry<T>>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

/// Vertices of an equilateral triangle with side `separation` in a random
/// plane through the origin.
fn level_centers(rng: &mut ChaCha8Rng, d: usize, separation: f64) -> [Vec<f64>; 3] {
    let e1 = unit(gaussian(rng, d));
    let raw = gaussian(rng, d);
    let proj: f64 = raw.iter().zip(&e1).map(|(a, b)| a * b).sum();
    let e2 = unit(raw.iter().zip(&e1).map(|(a, b)| a - proj * b).collect());
    let radius = separation / 3f64.sqrt();
    std::array::from_fn(|k| {
        let theta = 2.0 * PI * k as f64 / 3.0;
        e1.iter()
            .zip(&e2)
            .map(|(a, b)| radius * (theta.cos() * a + theta.sin() * b))
            .collect()
    })
}

/// A continuous rating strictly inside the band of `level`, 0.01 away from
/// the thresholds.
fn band_value(rng: &mut ChaCha8Rng, level: EngagementLevel, t: &Thresholds) -> f64 {
    let (lo, hi) = match level {
        EngagementLevel::Low => (RATING_MIN, t.low - 0.01),
        EngagementLevel::Medium => (t.low + 0.01, t.high - 0.01),
        EngagementLevel::High => (t.high + 0.01, RATING_MAX),
    };
    rng.random_range(lo..=hi)
}

pub fn generate_synthetic_dataset<T: Scalar>(cfg: &SyntheticConfig) -> Result<SyntheticDataset<T>> {
    if cfg.students < 2 {
        return Err(Error::Config("synthetic data needs at least two students".into()));
    }
    if cfg.seconds == 0 || cfg.attention_dim < 2 || cfg.affect_dim < 2 {
        return Err(Error::Config("synthetic data needs seconds > 0 and dimensions >= 2".into()));
    }
    if !(cfg.separation >= 0.0 && cfg.shift >= 0.0 && cfg.noise >= 0.0 && cfg.frame_jitter >= 0.0) {
        return Err(Error::Config("separation, shift, noise and jitter must be non-negative".into()));
    }
    cfg.thresholds.validate()?;
    if cfg.thresholds.high - cfg.thresholds.low < 0.03 {
        return Err(Error::Config("medium band too narrow for synthetic labels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = [(Modality::Attention, cfg.attention_dim), (Modality::Affect, cfg.affect_dim)];
    let centers: Vec<[Vec<f64>; 3]> = dims.iter().map(|&(_, d)| level_centers(&mut rng, d, cfg.separation)).collect();

    let mut items = Vec::new();
    let mut ratings: RatingTable<T> = BTreeMap::new();
    let mut embeddings = Vec::new();
    let mut detections: BTreeMap<u64, Vec<Detection<T>>> = BTreeMap::new();
    let mut gallery = Vec::new();

    for s in 0..cfg.students {
        let student = format!("s{s:02}");
        // offsets[modality][level]
        let offsets: Vec<Vec<Vec<f64>>> = dims
            .iter()
            .map(|&(_, d)| {
                let shared = unit(gaussian(&mut rng, d));
                (0..3)
                    .map(|_| {
                        let v = match cfg.shift_mode {
                            ShiftMode::Shared => shared.clone(),
                            ShiftMode::PerLevel => unit(gaussian(&mut rng, d)),
                        };
                        v.into_iter().map(|x| x * cfg.shift).collect()
                    })
                    .collect()
            })
            .collect();
        let identity = unit(gaussian(&mut rng, cfg.identity_dim.max(1)));
        if cfg.streams {
            let queries = (0..3)
                .map(|_| identity.iter().map(|&x| T::of(x + 0.02 * rng.sample::<f64, _>(StandardNormal))).collect())
                .collect();
            gallery.push(GalleryEntry::new(student.clone(), queries)?);
        }

        let mut rater_a = BTreeMap::new();
        let mut rater_b = BTreeMap::new();
        let mut levels = Vec::with_capacity(cfg.seconds as usize);
        for sec in 0..cfg.seconds {
            let level = EngagementLevel::ALL[rng.random_range(0..3)];
            let v = band_value(&mut rng, level, &cfg.thresholds);
            let delta = rng.random_range(-0.004..=0.004);
            rater_a.insert(sec, T::of((v + delta).clamp(RATING_MIN, RATING_MAX)));
            rater_b.insert(sec, T::of((v - delta).clamp(RATING_MIN, RATING_MAX)));
            levels.push(level);
        }
        let a = RaterSeries::new("rater_a", rater_a)?;
        let b = RaterSeries::new("rater_b", rater_b)?;
        let merged = average_raters(&a, &b)?;
        ratings.insert((cfg.session_id.clone(), student.clone()), vec![a, b]);

        for (sec, &drawn) in levels.iter().enumerate() {
            let sec = sec as u32;
            let level = discretize_engagement(merged.values[&sec], &cfg.thresholds)?;
            debug_assert_eq!(level, drawn);
            let mut per_modality = Vec::with_capacity(2);
            for (mi, &(modality, d)) in dims.iter().enumerate() {
                let base: Vec<f64> = centers[mi][drawn.index()]
                    .iter()
                    .zip(&offsets[mi][drawn.index()])
                    .map(|(c, o)| c + o + cfg.noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let frames: Vec<Vec<T>> = (0..FRAMES_PER_SECOND)
                    .map(|_| {
                        (0..d)
                            .map(|k| T::of(base[k] + cfg.frame_jitter * rng.sample::<f64, _>(StandardNormal)))
                            .collect()
                    })
                    .collect();
                per_modality.push((modality, frames));
            }
            if cfg.streams {
                for f in 0..FRAMES_PER_SECOND {
                    let frame_index = sec as u64 * FRAMES_PER_SECOND as u64 + f as u64;
                    let mut vectors = BTreeMap::new();
                    for (modality, frames) in &per_modality {
                        vectors.insert(*modality, frames[f].clone());
                        embeddings.push(FrameEmbedding {
                            session_id: cfg.session_id.clone(),
                            student_id: student.clone(),
                            camera_id: cfg.camera_id.clone(),
                            frame_index,
                            modality: *modality,
                            vector: frames[f].clone(),
                        });
                    }
                    let face = identity
                        .iter()
                        .map(|&x| T::of(x + 0.02 * rng.sample::<f64, _>(StandardNormal)))
                        .collect();
                    detections.entry(frame_index).or_default().push(Detection {
                        session_id: cfg.session_id.clone(),
                        camera_id: cfg.camera_id.clone(),
                        frame_index,
                        identity_vector: face,
                        modality_vectors: vectors,
                    });
                }
            }
            for (modality, frames) in per_modality {
                items.push(LabeledSequence {
                    sequence: Sequence::new(student.clone(), cfg.session_id.clone(), sec, modality, frames)?,
                    level,
                });
            }
        }
    }
    Ok(SyntheticDataset {
        set: LabeledSequenceSet::new(items)?,
        ratings,
        embeddings,
        detections: detections.into_values().flatten().collect(),
        gallery,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            students: 3,
            seconds: 12,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_dataset::<f64>(&small(5)).unwrap();
        let b = generate_synthetic_dataset::<f64>(&small(5)).unwrap();
        assert_eq!(a.set.to_json().unwrap(), b.set.to_json().unwrap());
        let c = generate_synthetic_dataset::<f64>(&small(6)).unwrap();
        assert_ne!(a.set, c.set);
    }

    #[test]
    fn shapes_and_labels() {
        let d = generate_synthetic_dataset::<f64>(&small(1)).unwrap();
        assert_eq!(d.set.len(), 3 * 12 * 2);
        assert_eq!(d.set.students().len(), 3);
        assert_eq!(d.set.pairs().len(), 36);
        assert_eq!(d.ratings.len(), 3);
        assert!(d.embeddings.is_empty());
    }

    #[test]
    fn streams_cover_every_frame() {
        let cfg = SyntheticConfig {
            streams: true,
            ..small(2)
        };
        let d = generate_synthetic_dataset::<f64>(&cfg).unwrap();
        assert_eq!(d.detections.len(), 3 * 12 * 24);
        assert_eq!(d.embeddings.len(), 3 * 12 * 24 * 2);
        assert_eq!(d.gallery.len(), 3);
    }

    #[test]
    fn centers_are_equidistant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = level_centers(&mut rng, 5, 3.0);
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let d: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!((d - 3.0).abs() < 1e-12);
        }
    }
}
