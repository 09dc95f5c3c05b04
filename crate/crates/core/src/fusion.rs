//! Modality fusion and per-second inference by majority vote over frames.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifiers::{train, ClassifierSpec, InputMode, ModelInput, TrainedModel, TrainingInputs};
use crate::dataset::LabeledSequenceSet;
use crate::error::{Error, Result};
use crate::level::{mean_distribution, EngagementLevel, LabelDistribution, LEVELS};
use crate::scalar::Scalar;
use crate::sequence::{check_sequence_shape, Modality, ModalityPair, SecondKey, Sequence, FRAMES_PER_SECOND, MIDDLE_FRAME};

/// Concatenation `[a | b]`.
pub fn fuse_features<T: Copy>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

/// Unweighted element-wise mean of two distributions.
pub fn fuse_scores<T: Scalar>(p: &LabelDistribution<T>, q: &LabelDistribution<T>) -> LabelDistribution<T> {
    let mut out = [T::zero(); LEVELS];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (p.0[i] + q.0[i]) * T::half();
    }
    LabelDistribution(out)
}

/// Frame-wise concatenation of an attention and an affect sequence.
pub fn fuse_pair_frames<T: Scalar>(pair: &ModalityPair<T>) -> Vec<Vec<T>> {
    pair.attention
        .frames
        .iter()
        .zip(&pair.affect.frames)
        .map(|(a, b)| fuse_features(a, b))
        .collect()
}

/// Most frequent level among 24 frame predictions. A tie goes to the tied
/// level with the larger probability mass summed over all frames, then to
/// the lower level.
pub fn majority_vote<T: Scalar>(
    frame_levels: &[EngagementLevel],
    frame_distributions: &[LabelDistribution<T>],
) -> Result<EngagementLevel> {
    if frame_levels.len() != FRAMES_PER_SECOND || frame_distributions.len() != FRAMES_PER_SECOND {
        return Err(Error::Shape(format!(
            "majority vote needs {FRAMES_PER_SECOND} frames, got {} levels and {} distributions",
            frame_levels.len(),
            frame_distributions.len()
        )));
    }
    let mut counts = [0usize; LEVELS];
    for l in frame_levels {
        counts[l.index()] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0);
    let mut mass = [T::zero(); LEVELS];
    for d in frame_distributions {
        for (m, &p) in mass.iter_mut().zip(&d.0) {
            *m += p;
        }
    }
    let mut best: Option<usize> = None;
    for i in (0..LEVELS).filter(|&i| counts[i] == top) {
        match best {
            Some(b) if mass[i] <= mass[b] => {}
            _ => best = Some(i),
        }
    }
    Ok(EngagementLevel::ALL[best.unwrap_or(0)])
}

/// Which modalities a model consumes and how they are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Attention,
    Affect,
    FeatureFusion,
    ScoreFusion,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Self::Attention, Self::Affect, Self::FeatureFusion, Self::ScoreFusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::Affect => "affect",
            Self::FeatureFusion => "feature_fusion",
            Self::ScoreFusion => "score_fusion",
        }
    }

    pub fn single_modality(self) -> Option<Modality> {
        match self {
            Self::Attention => Some(Modality::Attention),
            Self::Affect => Some(Modality::Affect),
            _ => None,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown channel '{s}'")))
    }
}

/// One student-second as seen by a channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", tag = "kind", rename_all = "snake_case")]
pub enum SampleInput<T: Scalar> {
    Single { sequence: Sequence<T> },
    Pair { pair: ModalityPair<T> },
}

impl<T: Scalar> SampleInput<T> {
    pub fn key(&self) -> SecondKey {
        match self {
            Self::Single { sequence } => sequence.key(),
            Self::Pair { pair } => pair.key(),
        }
    }

    pub fn student_id(&self) -> &str {
        match self {
            Self::Single { sequence } => &sequence.student_id,
            Self::Pair { pair } => &pair.attention.student_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LabeledSample<T: Scalar> {
    pub input: SampleInput<T>,
    pub level: EngagementLevel,
}

/// The samples a channel trains and predicts on, ordered by second key.
pub fn channel_samples<T: Scalar>(set: &LabeledSequenceSet<T>, channel: Channel) -> Vec<LabeledSample<T>> {
    let mut out: Vec<LabeledSample<T>> = match channel.single_modality() {
        Some(m) => set
            .modality(m)
            .map(|it| LabeledSample {
                input: SampleInput::Single {
                    sequence: it.sequence.clone(),
                },
                level: it.level,
            })
            .collect(),
        None => set
            .pairs()
            .into_iter()
            .map(|(pair, level)| LabeledSample {
                input: SampleInput::Pair { pair },
                level,
            })
            .collect(),
    };
    out.sort_by_key(|s| s.input.key());
    out
}

/// A fitted classifier for one channel: a single-modality model, a model
/// over concatenated features, or two models whose scores are averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", tag = "channel", rename_all = "snake_case")]
pub enum Predictor<T: Scalar> {
    Single { modality: Modality, model: TrainedModel<T> },
    FeatureFusion { model: TrainedModel<T> },
    ScoreFusion { attention: TrainedModel<T>, affect: TrainedModel<T> },
}

fn single_inputs<T: Scalar>(samples: &[LabeledSample<T>], pick: impl Fn(&SampleInput<T>) -> Result<Vec<Vec<T>>>) -> Result<Vec<Vec<Vec<T>>>> {
    samples.iter().map(|s| pick(&s.input)).collect()
}

fn sequence_of(input: &SampleInput<impl Scalar>, m: Modality) -> Result<()> {
    match input {
        SampleInput::Single { sequence } if sequence.modality == m => Ok(()),
        SampleInput::Single { sequence } => Err(Error::Mode(format!(
            "expected {m} sequence, got {}",
            sequence.modality
        ))),
        SampleInput::Pair { .. } => Ok(()),
    }
}

fn frames_for<T: Scalar>(input: &SampleInput<T>, m: Modality) -> Result<Vec<Vec<T>>> {
    sequence_of(input, m)?;
    Ok(match input {
        SampleInput::Single { sequence } => sequence.frames.clone(),
        SampleInput::Pair { pair } => match m {
            Modality::Attention => pair.attention.frames.clone(),
            Modality::Affect => pair.affect.frames.clone(),
        },
    })
}

fn fused_frames<T: Scalar>(input: &SampleInput<T>) -> Result<Vec<Vec<T>>> {
    match input {
        SampleInput::Pair { pair } => Ok(fuse_pair_frames(pair)),
        SampleInput::Single { .. } => Err(Error::Mode("fusion needs both modalities".into())),
    }
}

/// Fits the model(s) of `channel` on `samples`. Frame-mode families see the
/// middle frame only.
pub fn train_channel<T: Scalar>(spec: &ClassifierSpec, channel: Channel, samples: &[LabeledSample<T>]) -> Result<Predictor<T>> {
    let y: Vec<EngagementLevel> = samples.iter().map(|s| s.level).collect();
    let fit = |frames: Vec<Vec<Vec<T>>>| -> Result<TrainedModel<T>> {
        let inputs = TrainingInputs::from_sequences(spec.input_mode, frames)?;
        train(spec, &inputs, &y)
    };
    match channel {
        Channel::Attention | Channel::Affect => {
            let m = channel.single_modality().expect("single channel");
            let model = fit(single_inputs(samples, |i| frames_for(i, m))?)?;
            Ok(Predictor::Single { modality: m, model })
        }
        Channel::FeatureFusion => {
            if spec.input_mode == InputMode::FullSequence {
                return Err(Error::Mode(format!("{} supports score fusion only", spec.family)));
            }
            Ok(Predictor::FeatureFusion {
                model: fit(single_inputs(samples, fused_frames)?)?,
            })
        }
        Channel::ScoreFusion => {
            if samples.iter().any(|s| matches!(s.input, SampleInput::Single { .. })) {
                return Err(Error::Mode("score fusion needs both modalities".into()));
            }
            let attention = fit(single_inputs(samples, |i| frames_for(i, Modality::Attention))?)?;
            let affect = fit(single_inputs(samples, |i| frames_for(i, Modality::Affect))?)?;
            Ok(Predictor::ScoreFusion { attention, affect })
        }
    }
}

/// Per-second prediction. `frame_distributions` is empty for sequence-mode
/// models; `aggregate` is their mean otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SequencePrediction<T: Scalar> {
    pub student_id: String,
    pub session_id: String,
    pub second_index: u32,
    pub level: EngagementLevel,
    pub frame_distributions: Vec<LabelDistribution<T>>,
    pub aggregate: LabelDistribution<T>,
}

enum Output<T: Scalar> {
    Frames(Vec<LabelDistribution<T>>),
    Whole(LabelDistribution<T>),
}

fn run_model<T: Scalar>(model: &TrainedModel<T>, frames: &[Vec<T>]) -> Result<Output<T>> {
    check_sequence_shape(frames)?;
    match model.input_mode() {
        InputMode::FullSequence => Ok(Output::Whole(model.predict_distribution(ModelInput::Sequence(frames))?)),
        InputMode::MiddleFrame => Ok(Output::Frames(
            frames
                .iter()
                .map(|f| model.predict_distribution(ModelInput::Frame(f)))
                .collect::<Result<_>>()?,
        )),
    }
}

impl<T: Scalar> Predictor<T> {
    pub fn channel(&self) -> Channel {
        match self {
            Self::Single {
                modality: Modality::Attention,
                ..
            } => Channel::Attention,
            Self::Single { .. } => Channel::Affect,
            Self::FeatureFusion { .. } => Channel::FeatureFusion,
            Self::ScoreFusion { .. } => Channel::ScoreFusion,
        }
    }

    pub fn models(&self) -> Vec<&TrainedModel<T>> {
        match self {
            Self::Single { model, .. } | Self::FeatureFusion { model } => vec![model],
            Self::ScoreFusion { attention, affect } => vec![attention, affect],
        }
    }

    fn outputs(&self, input: &SampleInput<T>) -> Result<Output<T>> {
        match self {
            Self::Single { modality, model } => run_model(model, &frames_for(input, *modality)?),
            Self::FeatureFusion { model } => run_model(model, &fused_frames(input)?),
            Self::ScoreFusion { attention, affect } => {
                let SampleInput::Pair { pair } = input else {
                    return Err(Error::Mode("score fusion needs both modalities".into()));
                };
                match (run_model(attention, &pair.attention.frames)?, run_model(affect, &pair.affect.frames)?) {
                    (Output::Frames(a), Output::Frames(b)) => {
                        Ok(Output::Frames(a.iter().zip(&b).map(|(p, q)| fuse_scores(p, q)).collect()))
                    }
                    (Output::Whole(a), Output::Whole(b)) => Ok(Output::Whole(fuse_scores(&a, &b))),
                    _ => Err(Error::Mode("score-fused models disagree on input mode".into())),
                }
            }
        }
    }

    pub fn predict_sequence(&self, input: &SampleInput<T>) -> Result<SequencePrediction<T>> {
        let key = input.key();
        let (level, frame_distributions, aggregate) = match self.outputs(input)? {
            Output::Whole(d) => (d.argmax(), Vec::new(), d),
            Output::Frames(ds) => {
                let levels: Vec<EngagementLevel> = ds.iter().map(|d| d.argmax()).collect();
                let level = majority_vote(&levels, &ds)?;
                let agg = mean_distribution(&ds);
                (level, ds, agg)
            }
        };
        Ok(SequencePrediction {
            student_id: key.student_id,
            session_id: key.session_id,
            second_index: key.second_index,
            level,
            frame_distributions,
            aggregate,
        })
    }

    /// Distribution used for uncertainty scoring: the middle frame for
    /// frame-mode models, the whole sequence otherwise.
    pub fn query_distribution(&self, input: &SampleInput<T>) -> Result<LabelDistribution<T>> {
        let middle = |model: &TrainedModel<T>, frames: &[Vec<T>]| -> Result<LabelDistribution<T>> {
            check_sequence_shape(frames)?;
            match model.input_mode() {
                InputMode::MiddleFrame => model.predict_distribution(ModelInput::Frame(&frames[MIDDLE_FRAME])),
                InputMode::FullSequence => model.predict_distribution(ModelInput::Sequence(frames)),
            }
        };
        match self {
            Self::Single { modality, model } => middle(model, &frames_for(input, *modality)?),
            Self::FeatureFusion { model } => middle(model, &fused_frames(input)?),
            Self::ScoreFusion { attention, affect } => {
                let SampleInput::Pair { pair } = input else {
                    return Err(Error::Mode("score fusion needs both modalities".into()));
                };
                Ok(fuse_scores(
                    &middle(attention, &pair.attention.frames)?,
                    &middle(affect, &pair.affect.frames)?,
                ))
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        for m in p.models() {
            m.spec.validate()?;
        }
        Ok(p)
    }
}

pub const PREDICTION_COLUMNS: [&str; 7] = ["student_id", "session_id", "second", "level", "p_low", "p_medium", "p_high"];

pub fn write_predictions<T: Scalar, W: Write>(out: W, predictions: &[SequencePrediction<T>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PREDICTION_COLUMNS)?;
    for p in predictions {
        w.write_record([
            p.student_id.clone(),
            p.session_id.clone(),
            p.second_index.to_string(),
            p.level.to_string(),
            p.aggregate.0[0].to_string(),
            p.aggregate.0[1].to_string(),
            p.aggregate.0[2].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
