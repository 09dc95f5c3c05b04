//! Embedding and rating files, rater fusion and the labeled per-second dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::level::{discretize_engagement, EngagementLevel, Thresholds, LEVELS, RATING_MAX, RATING_MIN};
use crate::scalar::{all_finite, Scalar};
use crate::sequence::{Modality, ModalityPair, SecondKey, Sequence, FRAMES_PER_SECOND};
use crate::tracklets::{assemble_sequences, Detection, Tracklet, TrackletFrame};

/// Fixed leading columns of the embeddings CSV.
pub const EMBEDDING_COLUMNS: [&str; 5] = ["session_id", "student_id", "camera_id", "frame_index", "modality"];
pub const RATING_COLUMNS: [&str; 5] = ["session_id", "student_id", "rater_id", "second", "value"];

/// One face embedding in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FrameEmbedding<T: Scalar> {
    pub session_id: String,
    pub student_id: String,
    pub camera_id: String,
    pub frame_index: u64,
    pub modality: Modality,
    pub vector: Vec<T>,
}

impl<T: Scalar> FrameEmbedding<T> {
    pub fn second(&self) -> u64 {
        self.frame_index / FRAMES_PER_SECOND as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionFiles {
    pub session_id: String,
    /// Embeddings CSV per camera id.
    pub embeddings: BTreeMap<String, PathBuf>,
    /// Ratings CSV per rater id.
    pub ratings: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub modality_dims: BTreeMap<Modality, usize>,
    #[serde(default)]
    pub identity_dim: Option<usize>,
    pub sessions: Vec<SessionFiles>,
    #[serde(default)]
    pub gallery: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_fps")]
    pub fps: usize,
}

fn default_fps() -> usize {
    FRAMES_PER_SECOND
}

impl DatasetManifest {
    pub fn from_json(json: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(json)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        if self.fps != FRAMES_PER_SECOND {
            return Err(Error::Config(format!(
                "fps {} unsupported; sequences are fixed at {FRAMES_PER_SECOND} frames",
                self.fps
            )));
        }
        if self.modality_dims.is_empty() || self.modality_dims.values().any(|&d| d == 0) {
            return Err(Error::Config("modality_dims must declare a positive dimension".into()));
        }
        for s in &self.sessions {
            if s.ratings.len() > 2 {
                return Err(Error::Config(format!(
                    "session {} lists {} raters; at most two are supported",
                    s.session_id,
                    s.ratings.len()
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self, m: Modality) -> Result<usize> {
        self.modality_dims
            .get(&m)
            .copied()
            .ok_or_else(|| Error::Config(format!("manifest declares no dimension for {m}")))
    }
}

struct EmbeddingHeader {
    value_columns: usize,
    identity_columns: usize,
}

fn check_header(path: &Path, header: &csv::StringRecord, with_identity: bool) -> Result<EmbeddingHeader> {
    let bad = |message: String| Error::Header {
        path: path.to_path_buf(),
        message,
    };
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    if fields.len() < EMBEDDING_COLUMNS.len() || fields[..5] != EMBEDDING_COLUMNS {
        return Err(bad(format!("expected leading columns {}", EMBEDDING_COLUMNS.join(","))));
    }
    let rest = &fields[5..];
    let value_columns = rest.iter().take_while(|f| f.starts_with("d")).count();
    for (i, f) in rest[..value_columns].iter().enumerate() {
        if *f != format!("d{i}") {
            return Err(bad(format!("column {f:?} out of order, expected d{i}")));
        }
    }
    let ids = &rest[value_columns..];
    for (i, f) in ids.iter().enumerate() {
        if *f != format!("id_d{i}") {
            return Err(bad(format!("unexpected column {f:?}")));
        }
    }
    if value_columns == 0 {
        return Err(bad("no d0.. value columns".into()));
    }
    if with_identity && ids.is_empty() {
        return Err(bad("detections need id_d0.. identity columns".into()));
    }
    if !with_identity && !ids.is_empty() {
        return Err(bad("identity columns are only valid in detection files".into()));
    }
    Ok(EmbeddingHeader {
        value_columns,
        identity_columns: ids.len(),
    })
}

fn parse_values<T: Scalar>(fields: &[&str], expected: usize, row_err: &dyn Fn(String) -> Error) -> Result<Vec<T>> {
    let present: Vec<&str> = fields.iter().map(|s| s.trim()).take_while(|s| !s.is_empty()).collect();
    if fields[present.len()..].iter().any(|s| !s.trim().is_empty()) {
        return Err(row_err("gap inside vector".into()));
    }
    if present.len() != expected {
        return Err(row_err(format!("vector has {} values, expected {expected}", present.len())));
    }
    let v = present
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map(T::of)
                .map_err(|_| row_err(format!("not a number: {s:?}")))
        })
        .collect::<Result<Vec<T>>>()?;
    if !all_finite(&v) {
        return Err(row_err("non-finite component".into()));
    }
    Ok(v)
}

struct RawRow<T: Scalar> {
    embedding: FrameEmbedding<T>,
    identity: Vec<T>,
}

fn read_embedding_rows<T: Scalar>(
    path: &Path,
    data: &str,
    manifest: &DatasetManifest,
    with_identity: bool,
) -> Result<Vec<RawRow<T>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(data.as_bytes());
    let header = rdr.headers()?.clone();
    let layout = check_header(path, &header, with_identity)?;
    let id_dim = manifest.identity_dim.unwrap_or(layout.identity_columns);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let row_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            message,
        };
        let rec = rec.map_err(|e| row_err(e.to_string()))?;
        let fields: Vec<&str> = rec.iter().collect();
        let total = 5 + layout.value_columns + layout.identity_columns;
        if fields.len() < 6 || fields.len() > total {
            return Err(row_err(format!("{} fields, expected between 6 and {total}", fields.len())));
        }
        let modality: Modality = fields[4].parse().map_err(|e: Error| row_err(e.to_string()))?;
        let frame_index: u64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| row_err(format!("bad frame_index {:?}", fields[3])))?;
        let dim = manifest.dim(modality).map_err(|e| row_err(e.to_string()))?;
        let mut padded: Vec<&str> = fields[5..].to_vec();
        padded.resize(layout.value_columns + layout.identity_columns, "");
        let vector = parse_values(&padded[..layout.value_columns], dim, &row_err)?;
        let identity = if with_identity {
            parse_values(&padded[layout.value_columns..], id_dim, &row_err)?
        } else {
            Vec::new()
        };
        out.push(RawRow {
            embedding: FrameEmbedding {
                session_id: fields[0].trim().to_string(),
                student_id: fields[1].trim().to_string(),
                camera_id: fields[2].trim().to_string(),
                frame_index,
                modality,
                vector,
            },
            identity,
        });
    }
    Ok(out)
}

/// Parse an embeddings CSV held in memory. `path` is only used in errors.
pub fn parse_embedding_table<T: Scalar>(path: &Path, data: &str, manifest: &DatasetManifest) -> Result<Vec<FrameEmbedding<T>>> {
    Ok(read_embedding_rows(path, data, manifest, false)?
        .into_iter()
        .map(|r| r.embedding)
        .collect())
}

pub fn load_embedding_table<T: Scalar>(path: &Path, manifest: &DatasetManifest) -> Result<Vec<FrameEmbedding<T>>> {
    parse_embedding_table(path, &fs::read_to_string(path)?, manifest)
}

/// Parse a detections CSV: the embeddings layout plus `id_d*` identity
/// columns. The `student_id` column carries a per-frame face id; rows with the
/// same session, camera, frame and face id form one detection.
pub fn parse_detections<T: Scalar>(path: &Path, data: &str, manifest: &DatasetManifest) -> Result<Vec<Detection<T>>> {
    let rows = read_embedding_rows::<T>(path, data, manifest, true)?;
    let mut grouped: BTreeMap<(String, String, u64, String), Detection<T>> = BTreeMap::new();
    for (i, r) in rows.into_iter().enumerate() {
        let e = r.embedding;
        let key = (e.session_id.clone(), e.camera_id.clone(), e.frame_index, e.student_id.clone());
        let d = grouped.entry(key).or_insert_with(|| Detection {
            session_id: e.session_id.clone(),
            camera_id: e.camera_id.clone(),
            frame_index: e.frame_index,
            identity_vector: r.identity.clone(),
            modality_vectors: BTreeMap::new(),
        });
        let row_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            row: i + 2,
            message: message.to_string(),
        };
        if d.identity_vector != r.identity {
            return Err(row_err("identity vector disagrees with another row of the same face"));
        }
        if d.modality_vectors.insert(e.modality, e.vector).is_some() {
            return Err(row_err("duplicate modality for the same face"));
        }
    }
    Ok(grouped.into_values().collect())
}

/// Render embeddings in the embeddings CSV format.
pub fn write_embedding_table<T: Scalar>(rows: &[FrameEmbedding<T>]) -> Result<String> {
    let width = rows.iter().map(|r| r.vector.len()).max().unwrap_or(1);
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let mut header: Vec<String> = EMBEDDING_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..width).map(|i| format!("d{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.session_id.clone(),
            r.student_id.clone(),
            r.camera_id.clone(),
            r.frame_index.to_string(),
            r.modality.to_string(),
        ];
        rec.extend(r.vector.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
        .map_err(|e| Error::Config(e.to_string()))
}

/// Render detections in the detections CSV format, using `face<i>` as the
/// per-frame face id.
pub fn write_detections<T: Scalar>(detections: &[Detection<T>]) -> Result<String> {
    let width = detections
        .iter()
        .flat_map(|d| d.modality_vectors.values().map(Vec::len))
        .max()
        .unwrap_or(1);
    let id_width = detections.iter().map(|d| d.identity_vector.len()).max().unwrap_or(1);
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let mut header: Vec<String> = EMBEDDING_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..width).map(|i| format!("d{i}")));
    header.extend((0..id_width).map(|i| format!("id_d{i}")));
    w.write_record(&header)?;
    let mut face_counter: BTreeMap<(String, String, u64), usize> = BTreeMap::new();
    for d in detections {
        let slot = face_counter
            .entry((d.session_id.clone(), d.camera_id.clone(), d.frame_index))
            .or_default();
        let face = format!("face{slot}");
        *slot += 1;
        for (m, v) in &d.modality_vectors {
            let mut rec = vec![
                d.session_id.clone(),
                face.clone(),
                d.camera_id.clone(),
                d.frame_index.to_string(),
                m.to_string(),
            ];
            rec.extend(v.iter().map(|x| x.to_string()));
            rec.extend(std::iter::repeat_n(String::new(), width - v.len()));
            rec.extend(d.identity_vector.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
        .map_err(|e| Error::Config(e.to_string()))
}

/// Continuous ratings of one rater, keyed by second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RaterSeries<T: Scalar> {
    pub rater_id: String,
    pub values: BTreeMap<u32, T>,
}

fn check_rating<T: Scalar>(v: T) -> Result<()> {
    let x = v.as_f64();
    if !(RATING_MIN..=RATING_MAX).contains(&x) {
        return Err(Error::Range {
            value: x,
            low: RATING_MIN,
            high: RATING_MAX,
        });
    }
    Ok(())
}

impl<T: Scalar> RaterSeries<T> {
    pub fn new(rater_id: impl Into<String>, values: BTreeMap<u32, T>) -> Result<Self> {
        values.values().try_for_each(|&v| check_rating(v))?;
        Ok(Self {
            rater_id: rater_id.into(),
            values,
        })
    }

    pub fn from_slice(rater_id: impl Into<String>, values: &[T]) -> Result<Self> {
        Self::new(rater_id, values.iter().enumerate().map(|(i, &v)| (i as u32, v)).collect())
    }
}

/// Per-second rater mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ContinuousEngagementSeries<T: Scalar> {
    pub values: BTreeMap<u32, T>,
}

impl<T: Scalar> ContinuousEngagementSeries<T> {
    pub fn new(values: BTreeMap<u32, T>) -> Result<Self> {
        values.values().try_for_each(|&v| check_rating(v))?;
        Ok(Self { values })
    }
}

/// Per-second mean of two raters covering the same seconds.
pub fn average_raters<T: Scalar>(a: &RaterSeries<T>, b: &RaterSeries<T>) -> Result<ContinuousEngagementSeries<T>> {
    let ka: BTreeSet<u32> = a.values.keys().copied().collect();
    let kb: BTreeSet<u32> = b.values.keys().copied().collect();
    let missing: Vec<u32> = ka.symmetric_difference(&kb).copied().collect();
    if !missing.is_empty() {
        return Err(Error::Alignment { missing });
    }
    let values = a
        .values
        .iter()
        .map(|(&s, &va)| (s, (va + b.values[&s]) * T::half()))
        .collect();
    Ok(ContinuousEngagementSeries { values })
}

/// Two-way random-effects, average-measures, absolute-agreement intraclass
/// correlation of two raters over their shared seconds.
pub fn icc_absolute_agreement<T: Scalar>(a: &RaterSeries<T>, b: &RaterSeries<T>) -> Result<T> {
    let pairs: Vec<(T, T)> = a
        .values
        .iter()
        .filter_map(|(s, &va)| b.values.get(s).map(|&vb| (va, vb)))
        .collect();
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("ICC needs at least 2 shared seconds, got {n}")));
    }
    let k = T::of(2.0);
    let nf = T::of_usize(n);
    let grand = pairs.iter().map(|&(x, y)| x + y).sum::<T>() / (nf * k);
    let col_a = pairs.iter().map(|p| p.0).sum::<T>() / nf;
    let col_b = pairs.iter().map(|p| p.1).sum::<T>() / nf;

    let ss_total: T = pairs
        .iter()
        .map(|&(x, y)| (x - grand) * (x - grand) + (y - grand) * (y - grand))
        .sum();
    if ss_total <= T::zero() {
        return Err(Error::Degenerate("ratings have zero variance".into()));
    }
    let ss_rows: T = pairs
        .iter()
        .map(|&(x, y)| {
            let m = (x + y) / k - grand;
            k * m * m
        })
        .sum();
    let ss_cols = nf * ((col_a - grand) * (col_a - grand) + (col_b - grand) * (col_b - grand));
    let ss_err = (ss_total - ss_rows - ss_cols).max(T::zero());

    let ms_r = ss_rows / (nf - T::one());
    let ms_c = ss_cols / (k - T::one());
    let ms_e = ss_err / ((nf - T::one()) * (k - T::one()));
    let denom = ms_r + (ms_c - ms_e) / nf;
    if denom == T::zero() {
        return Err(Error::Degenerate("ICC denominator vanishes".into()));
    }
    Ok((ms_r - ms_e) / denom)
}

/// Ratings grouped per (session, student), one series per rater.
pub type RatingTable<T> = BTreeMap<(String, String), Vec<RaterSeries<T>>>;

pub fn parse_ratings<T: Scalar>(path: &Path, data: &str) -> Result<RatingTable<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(data.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != RATING_COLUMNS {
        return Err(Error::Header {
            path: path.to_path_buf(),
            message: format!("expected {}", RATING_COLUMNS.join(",")),
        });
    }
    let mut raw: BTreeMap<(String, String), BTreeMap<String, BTreeMap<u32, T>>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let row_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            message,
        };
        let rec = rec.map_err(|e| row_err(e.to_string()))?;
        let second: u32 = rec[3].trim().parse().map_err(|_| row_err(format!("bad second {:?}", &rec[3])))?;
        let value: f64 = rec[4].trim().parse().map_err(|_| row_err(format!("bad value {:?}", &rec[4])))?;
        if !(RATING_MIN..=RATING_MAX).contains(&value) {
            return Err(row_err(format!("rating {value} outside [-2, 2]")));
        }
        let series = raw
            .entry((rec[0].trim().to_string(), rec[1].trim().to_string()))
            .or_default()
            .entry(rec[2].trim().to_string())
            .or_default();
        if series.insert(second, T::of(value)).is_some() {
            return Err(row_err(format!("duplicate rating for second {second}")));
        }
    }
    let mut out = RatingTable::new();
    for (key, raters) in raw {
        if raters.len() > 2 {
            return Err(Error::Config(format!(
                "{}/{}: {} raters, at most two are supported",
                key.0,
                key.1,
                raters.len()
            )));
        }
        let series = raters
            .into_iter()
            .map(|(id, v)| RaterSeries::new(id, v))
            .collect::<Result<Vec<_>>>()?;
        out.insert(key, series);
    }
    Ok(out)
}

pub fn write_ratings<T: Scalar>(table: &RatingTable<T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RATING_COLUMNS)?;
    for ((session, student), raters) in table {
        for r in raters {
            for (s, v) in &r.values {
                w.write_record([session.as_str(), student.as_str(), &r.rater_id, &s.to_string(), &v.to_string()])?;
            }
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
        .map_err(|e| Error::Config(e.to_string()))
}

/// One sequence paired with its quantized label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LabeledSequence<T: Scalar> {
    pub sequence: Sequence<T>,
    pub level: EngagementLevel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LabeledSequenceSet<T: Scalar> {
    pub items: Vec<LabeledSequence<T>>,
}

impl<T: Scalar> LabeledSequenceSet<T> {
    /// Builds a set, rejecting duplicate (student, session, second, modality)
    /// entries and malformed sequences.
    pub fn new(items: Vec<LabeledSequence<T>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for it in &items {
            it.sequence.validate()?;
            if !seen.insert((it.sequence.key(), it.sequence.modality)) {
                return Err(Error::Config(format!(
                    "duplicate sequence {:?}/{}",
                    it.sequence.key(),
                    it.sequence.modality
                )));
            }
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn students(&self) -> BTreeSet<String> {
        self.items.iter().map(|i| i.sequence.student_id.clone()).collect()
    }

    pub fn modality(&self, m: Modality) -> impl Iterator<Item = &LabeledSequence<T>> {
        self.items.iter().filter(move |i| i.sequence.modality == m)
    }

    /// Aligned attention/affect pairs, in key order. Seconds that lack one of
    /// the two modalities are skipped.
    pub fn pairs(&self) -> Vec<(ModalityPair<T>, EngagementLevel)> {
        let mut att: BTreeMap<SecondKey, &LabeledSequence<T>> = BTreeMap::new();
        let mut aff: BTreeMap<SecondKey, &LabeledSequence<T>> = BTreeMap::new();
        for it in &self.items {
            match it.sequence.modality {
                Modality::Attention => att.insert(it.sequence.key(), it),
                Modality::Affect => aff.insert(it.sequence.key(), it),
            };
        }
        att.into_iter()
            .filter_map(|(k, a)| {
                let b = aff.get(&k)?;
                ModalityPair::new(a.sequence.clone(), b.sequence.clone())
                    .ok()
                    .map(|p| (p, a.level))
            })
            .collect()
    }

    /// Fraction of sequences at each level (all zero for an empty set).
    pub fn level_fractions(&self) -> [f64; LEVELS] {
        let mut counts = [0usize; LEVELS];
        for it in &self.items {
            counts[it.level.index()] += 1;
        }
        let n = self.items.len().max(1) as f64;
        counts.map(|c| c as f64 / n)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(json)?;
        Self::new(s.items)
    }
}

/// Continuous labels per student, then per session.
pub type LabelIndex<T> = BTreeMap<String, BTreeMap<String, ContinuousEngagementSeries<T>>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub labeled: usize,
    /// Sequences whose student-second has no label.
    pub unlabeled: usize,
    /// Repeats of an already seen (student, session, second, modality).
    pub duplicates: usize,
}

impl BuildReport {
    pub fn dropped(&self) -> usize {
        self.unlabeled + self.duplicates
    }
}

/// Pair each sequence with the quantized label of its second. Unlabeled
/// sequences are dropped and counted, never imputed.
pub fn build_labeled_dataset<T: Scalar>(
    thresholds: &Thresholds,
    sequences: Vec<Sequence<T>>,
    labels: &LabelIndex<T>,
) -> Result<(LabeledSequenceSet<T>, BuildReport)> {
    thresholds.validate()?;
    let mut report = BuildReport::default();
    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    for seq in sequences {
        let value = labels
            .get(&seq.student_id)
            .and_then(|by_session| by_session.get(&seq.session_id))
            .and_then(|series| series.values.get(&seq.second_index));
        let Some(&value) = value else {
            report.unlabeled += 1;
            continue;
        };
        if !seen.insert((seq.key(), seq.modality)) {
            report.duplicates += 1;
            continue;
        }
        let level = discretize_engagement(value, thresholds)?;
        items.push(LabeledSequence { sequence: seq, level });
    }
    report.labeled = items.len();
    Ok((LabeledSequenceSet::new(items)?, report))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load every file a manifest names and build the labeled dataset. Relative
/// paths resolve against `base_dir`. Embedding rows are already attributed to
/// students; per student-second the better camera is chosen before cutting
/// sequences.
pub fn ingest<T: Scalar>(manifest: &DatasetManifest, base_dir: &Path) -> Result<(LabeledSequenceSet<T>, BuildReport)> {
    manifest.validate()?;
    let mut sequences = Vec::new();
    let mut labels: LabelIndex<T> = BTreeMap::new();
    for session in &manifest.sessions {
        let mut tracks: BTreeMap<(String, String), Vec<TrackletFrame<T>>> = BTreeMap::new();
        let mut frame_slots: BTreeMap<(String, String, u64), BTreeMap<Modality, Vec<T>>> = BTreeMap::new();
        for (camera, rel) in &session.embeddings {
            let path = resolve(base_dir, rel);
            for row in load_embedding_table::<T>(&path, manifest)? {
                if row.session_id != session.session_id || &row.camera_id != camera {
                    return Err(Error::Parse {
                        path: path.clone(),
                        row: 0,
                        message: format!(
                            "row for {}/{} in file listed under {}/{}",
                            row.session_id, row.camera_id, session.session_id, camera
                        ),
                    });
                }
                frame_slots
                    .entry((row.student_id, row.camera_id, row.frame_index))
                    .or_default()
                    .insert(row.modality, row.vector);
            }
        }
        for ((student, camera, frame_index), vectors) in frame_slots {
            tracks.entry((student, camera)).or_default().push(TrackletFrame {
                frame_index,
                vectors,
                similarity: T::one(),
            });
        }
        let tracklets = tracks
            .into_iter()
            .map(|((s, c), f)| Tracklet::new(s, c, f))
            .collect::<Result<Vec<_>>>()?;
        sequences.extend(assemble_sequences(&tracklets, &session.session_id));

        let mut per_student: BTreeMap<String, Vec<RaterSeries<T>>> = BTreeMap::new();
        for rel in session.ratings.values() {
            let path = resolve(base_dir, rel);
            let table = parse_ratings::<T>(&path, &fs::read_to_string(&path)?)?;
            for ((sess, student), series) in table {
                if sess == session.session_id {
                    per_student.entry(student).or_default().extend(series);
                }
            }
        }
        for (student, raters) in per_student {
            let merged = match raters.as_slice() {
                [a, b] => average_raters(a, b)?,
                other => {
                    return Err(Error::Config(format!(
                        "{}/{student}: expected two raters, found {}",
                        session.session_id,
                        other.len()
                    )))
                }
            };
            labels.entry(student).or_default().insert(session.session_id.clone(), merged);
        }
    }
    build_labeled_dataset(&manifest.thresholds, sequences, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(d: usize) -> DatasetManifest {
        DatasetManifest {
            modality_dims: BTreeMap::from([(Modality::Attention, d), (Modality::Affect, d)]),
            identity_dim: None,
            sessions: vec![],
            gallery: None,
            thresholds: Thresholds::default(),
            fps: 24,
        }
    }

    const HEADER: &str = "session_id,student_id,camera_id,frame_index,modality,d0,d1,d2,d3\n";

    #[test]
    fn parses_well_formed_rows() {
        let data = format!(
            "{HEADER}s1,a,L,0,attention,1,2,3,4\ns1,a,L,1,attention,1,2,3,4.5\ns1,b,R,0,affect,0,0,0,1e-3\n"
        );
        let rows: Vec<FrameEmbedding<f64>> = parse_embedding_table(Path::new("x.csv"), &data, &manifest(4)).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].vector[3], 4.5);
        assert_eq!(rows[2].student_id, "b");
        assert_eq!(rows[2].modality, Modality::Affect);
    }

    #[test]
    fn short_vector_names_row() {
        let data = format!("{HEADER}s1,a,L,0,attention,1,2,3,4\ns1,a,L,1,attention,1,2,3\n");
        match parse_embedding_table::<f64>(Path::new("x.csv"), &data, &manifest(4)) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_and_header_errors() {
        let data = format!("{HEADER}s1,a,L,0,attention,1,2,inf,4\n");
        assert!(matches!(
            parse_embedding_table::<f64>(Path::new("x"), &data, &manifest(4)),
            Err(Error::Parse { row: 2, .. })
        ));
        let bad = "session,student_id,camera_id,frame_index,modality,d0\n";
        assert!(matches!(
            parse_embedding_table::<f64>(Path::new("x"), bad, &manifest(1)),
            Err(Error::Header { .. })
        ));
    }

    #[test]
    fn empty_file_with_header() {
        let rows = parse_embedding_table::<f64>(Path::new("x"), HEADER, &manifest(4)).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn embedding_table_roundtrip() {
        let rows = vec![FrameEmbedding {
            session_id: "s".into(),
            student_id: "a".into(),
            camera_id: "L".into(),
            frame_index: 7,
            modality: Modality::Affect,
            vector: vec![0.25, -1.5],
        }];
        let text = write_embedding_table(&rows).unwrap();
        let back = parse_embedding_table::<f64>(Path::new("x"), &text, &manifest(2)).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn rater_mean() {
        let a = RaterSeries::from_slice("a", &[1.0, 0.0]).unwrap();
        let b = RaterSeries::from_slice("b", &[2.0, -1.0]).unwrap();
        let m = average_raters(&a, &b).unwrap();
        assert_eq!(m.values[&0], 1.5);
        assert_eq!(m.values[&1], -0.5);
        assert_eq!(average_raters(&a, &a).unwrap().values, a.values);
    }

    #[test]
    fn rater_alignment_error() {
        let a = RaterSeries::from_slice("a", &[1.0, 0.0]).unwrap();
        let b = RaterSeries::from_slice("b", &[1.0]).unwrap();
        match average_raters(&a, &b) {
            Err(Error::Alignment { missing }) => assert_eq!(missing, vec![1]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rating_range_checked() {
        assert!(RaterSeries::from_slice("a", &[2.5]).is_err());
    }

    #[test]
    fn icc_perfect_and_degenerate() {
        let a = RaterSeries::from_slice("a", &[0.0f64, 1.0, -0.5, 2.0]).unwrap();
        assert!((icc_absolute_agreement(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let c = RaterSeries::from_slice("c", &[0.3, 0.3, 0.3]).unwrap();
        assert!(matches!(icc_absolute_agreement(&c, &c), Err(Error::Degenerate(_))));
        let one = RaterSeries::from_slice("o", &[0.3]).unwrap();
        assert!(icc_absolute_agreement(&one, &one).is_err());
    }

    #[test]
    fn ratings_csv() {
        let data = "session_id,student_id,rater_id,second,value\ns,a,r1,0,0.5\ns,a,r2,0,1.0\ns,a,r1,1,-2\ns,a,r2,1,-1\n";
        let t = parse_ratings::<f64>(Path::new("r"), data).unwrap();
        let raters = &t[&("s".to_string(), "a".to_string())];
        assert_eq!(raters.len(), 2);
        let three = format!("{data}s,a,r3,0,0.0\n");
        assert!(matches!(parse_ratings::<f64>(Path::new("r"), &three), Err(Error::Config(_))));
        let out_of_range = "session_id,student_id,rater_id,second,value\ns,a,r1,0,3\n";
        assert!(matches!(parse_ratings::<f64>(Path::new("r"), out_of_range), Err(Error::Parse { row: 2, .. })));
    }

    fn seq(student: &str, second: u32) -> Sequence<f64> {
        Sequence::new(student, "s1", second, Modality::Attention, vec![vec![0.0; 2]; 24]).unwrap()
    }

    fn labels(entries: &[(&str, u32, f64)]) -> LabelIndex<f64> {
        let mut idx = LabelIndex::new();
        for &(st, sec, v) in entries {
            idx.entry(st.to_string())
                .or_default()
                .entry("s1".to_string())
                .or_insert_with(|| ContinuousEngagementSeries::new(BTreeMap::new()).unwrap())
                .values
                .insert(sec, v);
        }
        idx
    }

    #[test]
    fn build_examples() {
        let t = Thresholds::default();
        let l = labels(&[("a", 0, 1.0), ("a", 1, 1.0)]);
        let (set, rep) = build_labeled_dataset(&t, vec![seq("a", 0), seq("a", 1)], &l).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.items.iter().all(|i| i.level == EngagementLevel::High));
        assert_eq!(rep.dropped(), 0);

        let (set, rep) = build_labeled_dataset(&t, vec![seq("a", 0), seq("a", 5)], &l).unwrap();
        assert_eq!((set.len(), rep.unlabeled), (1, 1));

        let (set, rep) = build_labeled_dataset::<f64>(&t, vec![], &l).unwrap();
        assert!(set.is_empty());
        assert_eq!(rep, BuildReport::default());
    }

    #[test]
    fn duplicates_are_counted() {
        let l = labels(&[("a", 0, 0.0)]);
        let (set, rep) = build_labeled_dataset(&Thresholds::default(), vec![seq("a", 0), seq("a", 0)], &l).unwrap();
        assert_eq!((set.len(), rep.duplicates), (1, 1));
    }

    #[test]
    fn manifest_rejects_unknown_keys_and_bad_fps() {
        let ok = r#"{"modality_dims":{"attention":4},"sessions":[]}"#;
        let m = DatasetManifest::from_json(ok).unwrap();
        assert_eq!(m.fps, 24);
        assert_eq!(m.thresholds, Thresholds::default());
        assert!(DatasetManifest::from_json(r#"{"modality_dims":{"attention":4},"sessions":[],"extra":1}"#).is_err());
        assert!(DatasetManifest::from_json(r#"{"modality_dims":{"attention":4},"sessions":[],"fps":30}"#).is_err());
        let three = r#"{"modality_dims":{"attention":4},"sessions":[{"session_id":"s","embeddings":{},"ratings":{"a":"x","b":"y","c":"z"}}]}"#;
        assert!(DatasetManifest::from_json(three).is_err());
    }
}
