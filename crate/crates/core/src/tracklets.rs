//! Identity assignment of detected faces, camera selection and cutting of
//! complete one-second sequences.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{all_finite, dot, norm, Scalar};
use crate::sequence::{Modality, Sequence, FRAMES_PER_SECOND};

/// Default minimum cosine similarity for a detection to be attributed to a
/// gallery student.
pub const DEFAULT_IDENTITY_THRESHOLD: f64 = 0.3;

/// Cosine of the angle between two vectors.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > T::zero() && nb > T::zero()) || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    let c = dot(a, b) / (na * nb);
    // rounding can push |c| a hair past 1
    Ok(c.max(-T::one()).min(T::one()))
}

/// Query identity embeddings of one student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GalleryEntry<T: Scalar> {
    pub student_id: String,
    pub query_vectors: Vec<Vec<T>>,
}

impl<T: Scalar> GalleryEntry<T> {
    pub fn new(student_id: impl Into<String>, query_vectors: Vec<Vec<T>>) -> Result<Self> {
        let e = Self {
            student_id: student_id.into(),
            query_vectors,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_vectors.is_empty() {
            return Err(Error::Config(format!(
                "gallery entry {} has no query vectors",
                self.student_id
            )));
        }
        for q in &self.query_vectors {
            if !all_finite(q) || norm(q) <= T::zero() {
                return Err(Error::Config(format!(
                    "gallery entry {} has a zero or non-finite query vector",
                    self.student_id
                )));
            }
        }
        Ok(())
    }
}

/// Parse the gallery JSON document: an object mapping student id to an array
/// of identity vectors.
pub fn parse_gallery<T: Scalar>(json: &str) -> Result<Vec<GalleryEntry<T>>> {
    let raw: BTreeMap<String, Vec<Vec<T>>> = serde_json::from_str(json)?;
    raw.into_iter().map(|(id, qs)| GalleryEntry::new(id, qs)).collect()
}

pub fn gallery_to_json<T: Scalar>(gallery: &[GalleryEntry<T>]) -> Result<String> {
    let raw: BTreeMap<&str, &Vec<Vec<T>>> = gallery
        .iter()
        .map(|g| (g.student_id.as_str(), &g.query_vectors))
        .collect();
    Ok(serde_json::to_string_pretty(&raw)?)
}

/// One detected face in one frame of one camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Detection<T: Scalar> {
    pub session_id: String,
    pub camera_id: String,
    pub frame_index: u64,
    pub identity_vector: Vec<T>,
    pub modality_vectors: BTreeMap<Modality, Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<T: Scalar> {
    pub student_id: String,
    pub similarity: T,
}

/// Attribute a detection to the gallery student with the highest query
/// similarity, provided it reaches `threshold`. Equal best similarities go to
/// the lexicographically smaller student id.
pub fn assign_identity<T: Scalar>(
    detection: &Detection<T>,
    gallery: &[GalleryEntry<T>],
    threshold: T,
) -> Result<Option<Assignment<T>>> {
    if gallery.is_empty() {
        return Err(Error::Config("empty gallery".into()));
    }
    let mut best: Option<Assignment<T>> = None;
    for entry in gallery {
        for q in &entry.query_vectors {
            let s = cosine_similarity(&detection.identity_vector, q)?;
            let better = match &best {
                None => true,
                Some(b) => s > b.similarity || (s == b.similarity && entry.student_id < b.student_id),
            };
            if better {
                best = Some(Assignment {
                    student_id: entry.student_id.clone(),
                    similarity: s,
                });
            }
        }
    }
    Ok(best.filter(|b| b.similarity >= threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrackletFrame<T: Scalar> {
    pub frame_index: u64,
    pub vectors: BTreeMap<Modality, Vec<T>>,
    pub similarity: T,
}

/// Frames of one student seen by one camera, in increasing frame order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Tracklet<T: Scalar> {
    pub student_id: String,
    pub camera_id: String,
    pub frames: Vec<TrackletFrame<T>>,
}

impl<T: Scalar> Tracklet<T> {
    pub fn new(
        student_id: impl Into<String>,
        camera_id: impl Into<String>,
        mut frames: Vec<TrackletFrame<T>>,
    ) -> Result<Self> {
        frames.sort_by_key(|f| f.frame_index);
        if frames.windows(2).any(|w| w[0].frame_index == w[1].frame_index) {
            return Err(Error::Shape("tracklet has duplicate frame indices".into()));
        }
        Ok(Self {
            student_id: student_id.into(),
            camera_id: camera_id.into(),
            frames,
        })
    }

    pub fn similarity_trace(&self) -> Vec<T> {
        self.frames.iter().map(|f| f.similarity).collect()
    }

    fn frames_in_second(&self, second: u64) -> impl Iterator<Item = &TrackletFrame<T>> {
        let fps = FRAMES_PER_SECOND as u64;
        self.frames
            .iter()
            .filter(move |f| f.frame_index / fps == second)
    }
}

/// Assign every detection and group the matches into per-student,
/// per-camera tracklets. A frame keeps at most one face per student and
/// camera: the most similar one.
pub fn build_tracklets<T: Scalar>(
    detections: &[Detection<T>],
    gallery: &[GalleryEntry<T>],
    threshold: T,
) -> Result<Vec<Tracklet<T>>> {
    let mut groups: BTreeMap<(String, String), BTreeMap<u64, TrackletFrame<T>>> = BTreeMap::new();
    for d in detections {
        let Some(a) = assign_identity(d, gallery, threshold)? else {
            continue;
        };
        let frames = groups.entry((a.student_id, d.camera_id.clone())).or_default();
        let keep = frames
            .get(&d.frame_index)
            .is_none_or(|existing| a.similarity > existing.similarity);
        if keep {
            frames.insert(
                d.frame_index,
                TrackletFrame {
                    frame_index: d.frame_index,
                    vectors: d.modality_vectors.clone(),
                    similarity: a.similarity,
                },
            );
        }
    }
    groups
        .into_iter()
        .map(|((student, camera), frames)| Tracklet::new(student, camera, frames.into_values().collect()))
        .collect()
}

/// Visibility of one student on one camera during one second.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSecond<T: Scalar> {
    pub camera_id: String,
    pub frames: usize,
    pub mean_similarity: T,
}

impl<T: Scalar> CameraSecond<T> {
    pub fn from_tracklet(t: &Tracklet<T>, second: u64) -> Self {
        let sims: Vec<T> = t.frames_in_second(second).map(|f| f.similarity).collect();
        let mean = if sims.is_empty() {
            T::zero()
        } else {
            sims.iter().copied().sum::<T>() / T::of_usize(sims.len())
        };
        Self {
            camera_id: t.camera_id.clone(),
            frames: sims.len(),
            mean_similarity: mean,
        }
    }
}

/// Pick the camera that saw the student best: most matched frames, then
/// higher mean similarity, then the smaller camera id. `None` when no camera
/// has a frame.
pub fn select_camera<T: Scalar>(candidates: &[CameraSecond<T>]) -> Option<String> {
    candidates
        .iter()
        .filter(|c| c.frames > 0)
        .min_by(|a, b| {
            b.frames
                .cmp(&a.frames)
                .then_with(|| {
                    b.mean_similarity
                        .partial_cmp(&a.mean_similarity)
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .then_with(|| a.camera_id.cmp(&b.camera_id))
        })
        .map(|c| c.camera_id.clone())
}

/// Cut a tracklet into complete seconds. A second `k` qualifies when all
/// frame indices `24k..24k+23` are present; it yields one sequence per
/// modality carried by every one of those frames.
pub fn extract_sequences<T: Scalar>(tracklet: &Tracklet<T>, session_id: &str) -> Vec<Sequence<T>> {
    let seconds: BTreeSet<u64> = tracklet
        .frames
        .iter()
        .map(|f| f.frame_index / FRAMES_PER_SECOND as u64)
        .collect();
    seconds
        .into_iter()
        .flat_map(|s| sequences_for_second(tracklet, session_id, s))
        .collect()
}

fn sequences_for_second<T: Scalar>(
    tracklet: &Tracklet<T>,
    session_id: &str,
    second: u64,
) -> Vec<Sequence<T>> {
    let frames: Vec<&TrackletFrame<T>> = tracklet.frames_in_second(second).collect();
    let fps = FRAMES_PER_SECOND as u64;
    let complete = frames.len() == FRAMES_PER_SECOND
        && frames
            .iter()
            .enumerate()
            .all(|(i, f)| f.frame_index == second * fps + i as u64);
    let Ok(second_index) = u32::try_from(second) else {
        return Vec::new();
    };
    if !complete {
        return Vec::new();
    }
    Modality::ALL
        .iter()
        .filter_map(|&m| {
            let vectors: Option<Vec<Vec<T>>> = frames.iter().map(|f| f.vectors.get(&m).cloned()).collect();
            Sequence::new(
                tracklet.student_id.clone(),
                session_id,
                second_index,
                m,
                vectors?,
            )
            .ok()
        })
        .collect()
}

/// Per student and second, choose the better camera and emit that camera's
/// complete sequences.
pub fn assemble_sequences<T: Scalar>(tracklets: &[Tracklet<T>], session_id: &str) -> Vec<Sequence<T>> {
    let mut by_student: BTreeMap<&str, Vec<&Tracklet<T>>> = BTreeMap::new();
    for t in tracklets {
        by_student.entry(t.student_id.as_str()).or_default().push(t);
    }
    let fps = FRAMES_PER_SECOND as u64;
    let mut out = Vec::new();
    for ts in by_student.values() {
        let seconds: BTreeSet<u64> = ts
            .iter()
            .flat_map(|t| t.frames.iter().map(move |f| f.frame_index / fps))
            .collect();
        for s in seconds {
            let stats: Vec<CameraSecond<T>> = ts.iter().map(|t| CameraSecond::from_tracklet(t, s)).collect();
            let Some(cam) = select_camera(&stats) else { continue };
            if let Some(t) = ts.iter().find(|t| t.camera_id == cam) {
                out.extend(sequences_for_second(t, session_id, s));
            }
        }
    }
    out
}
