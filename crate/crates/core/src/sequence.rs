//! One-second embedding sequences, the unit every classifier consumes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Frames in one second of video, and therefore in every [`Sequence`].
pub const FRAMES_PER_SECOND: usize = 24;

/// Index of the frame used by frame-mode classifiers during training and
/// active-learning scoring.
pub const MIDDLE_FRAME: usize = FRAMES_PER_SECOND / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Attention,
    Affect,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Attention, Modality::Affect];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Attention => "attention",
            Modality::Affect => "affect",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "attention" => Ok(Modality::Attention),
            "affect" => Ok(Modality::Affect),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Twenty-four consecutive frame embeddings of one student in one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Sequence<T: Scalar> {
    pub student_id: String,
    pub session_id: String,
    pub second_index: u32,
    pub modality: Modality,
    pub frames: Vec<Vec<T>>,
}

impl<T: Scalar> Sequence<T> {
    pub fn new(
        student_id: impl Into<String>,
        session_id: impl Into<String>,
        second_index: u32,
        modality: Modality,
        frames: Vec<Vec<T>>,
    ) -> Result<Self> {
        let s = Self {
            student_id: student_id.into(),
            session_id: session_id.into(),
            second_index,
            modality,
            frames,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_sequence_shape(&self.frames)
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn middle_frame(&self) -> &[T] {
        &self.frames[MIDDLE_FRAME]
    }

    /// Key identifying the student-second this sequence belongs to.
    pub fn key(&self) -> SecondKey {
        SecondKey {
            student_id: self.student_id.clone(),
            session_id: self.session_id.clone(),
            second_index: self.second_index,
        }
    }
}

/// Exactly 24 frames of equal, non-zero length.
pub fn check_sequence_shape<T>(frames: &[Vec<T>]) -> Result<()> {
    if frames.len() != FRAMES_PER_SECOND {
        return Err(Error::Shape(format!(
            "sequence has {} frames, expected {FRAMES_PER_SECOND}",
            frames.len()
        )));
    }
    let d = frames[0].len();
    if d == 0 || frames.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("frames differ in length or are empty".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SecondKey {
    pub student_id: String,
    pub session_id: String,
    pub second_index: u32,
}

/// Aligned attention and affect sequences of the same student-second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ModalityPair<T: Scalar> {
    pub attention: Sequence<T>,
    pub affect: Sequence<T>,
}

impl<T: Scalar> ModalityPair<T> {
    pub fn new(attention: Sequence<T>, affect: Sequence<T>) -> Result<Self> {
        if attention.modality != Modality::Attention || affect.modality != Modality::Affect {
            return Err(Error::Mode("pair requires one attention and one affect sequence".into()));
        }
        if attention.key() != affect.key() {
            return Err(Error::Mode(format!(
                "pair sequences disagree on student-second: {:?} vs {:?}",
                attention.key(),
                affect.key()
            )));
        }
        attention.validate()?;
        affect.validate()?;
        Ok(Self { attention, affect })
    }

    pub fn key(&self) -> SecondKey {
        self.attention.key()
    }
}
