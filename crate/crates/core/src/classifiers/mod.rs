//! The five classifier families behind one specification and one fitted-model
//! type that serializes to self-describing JSON.

pub mod forest;
pub mod lstm;
pub mod mlp;
pub mod nn;
pub mod platt;
pub mod svm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::level::{EngagementLevel, LabelDistribution};
use crate::pca::{fit_pca, PcaModel, DEFAULT_RETAINED_VARIANCE};
use crate::scalar::Scalar;
use crate::sequence::MIDDLE_FRAME;

use forest::{fit_random_forest, ForestParams, RandomForest};
use lstm::{fit_lstm, Lstm, LstmParams};
use mlp::{fit_mlp, Mlp, MlpParams};
use svm::{default_gamma, fit_svm, Kernel, OneVsRestSvm, SvmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    SvmLinear,
    SvmRbf,
    RandomForest,
    Mlp,
    Lstm,
}

impl Family {
    pub const ALL: [Family; 5] = [Self::SvmLinear, Self::SvmRbf, Self::RandomForest, Self::Mlp, Self::Lstm];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SvmLinear => "svm_linear",
            Self::SvmRbf => "svm_rbf",
            Self::RandomForest => "random_forest",
            Self::Mlp => "mlp",
            Self::Lstm => "lstm",
        }
    }

    /// The only input mode the family accepts.
    pub fn input_mode(self) -> InputMode {
        match self {
            Self::Lstm => InputMode::FullSequence,
            _ => InputMode::MiddleFrame,
        }
    }

    pub fn uses_pca(self) -> bool {
        matches!(self, Self::SvmLinear | Self::SvmRbf)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown classifier family '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    MiddleFrame,
    FullSequence,
}

/// Family-specific settings. Unset fields take the family default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub c: Option<f64>,
    pub gamma: Option<f64>,
    pub tolerance: Option<f64>,
    pub calibration_folds: Option<usize>,
    pub pca_variance: Option<f64>,
    pub trees: Option<usize>,
    pub max_depth: Option<usize>,
    pub max_features: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub dense: Option<usize>,
    pub patience: Option<usize>,
    pub validation_fraction: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct ClassifierSpec {
    pub family: Family,
    pub hyperparameters: Hyperparameters,
    pub input_mode: InputMode,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    family: Family,
    #[serde(default)]
    hyperparameters: Hyperparameters,
    input_mode: Option<InputMode>,
}

impl TryFrom<RawSpec> for ClassifierSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let spec = ClassifierSpec {
            family: raw.family,
            input_mode: raw.input_mode.unwrap_or(raw.family.input_mode()),
            hyperparameters: raw.hyperparameters,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn positive(name: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x.is_finite() && x > 0.0) => Err(Error::Config(format!("{name} must be positive, got {x}"))),
        _ => Ok(()),
    }
}

fn nonzero(name: &str, v: Option<usize>) -> Result<()> {
    match v {
        Some(0) => Err(Error::Config(format!("{name} must be at least 1"))),
        _ => Ok(()),
    }
}

impl ClassifierSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            hyperparameters: Hyperparameters::default(),
            input_mode: family.input_mode(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.hyperparameters.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.hyperparameters.seed
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_mode != self.family.input_mode() {
            return Err(Error::Mode(format!(
                "{} requires {:?} input, got {:?}",
                self.family,
                self.family.input_mode(),
                self.input_mode
            )));
        }
        let h = &self.hyperparameters;
        positive("c", h.c)?;
        positive("gamma", h.gamma)?;
        positive("tolerance", h.tolerance)?;
        positive("learning_rate", h.learning_rate)?;
        nonzero("trees", h.trees)?;
        nonzero("max_depth", h.max_depth)?;
        nonzero("max_features", h.max_features)?;
        nonzero("epochs", h.epochs)?;
        nonzero("batch_size", h.batch_size)?;
        nonzero("hidden", h.hidden)?;
        nonzero("layers", h.layers)?;
        nonzero("dense", h.dense)?;
        nonzero("patience", h.patience)?;
        if h.calibration_folds.is_some_and(|f| f < 2) {
            return Err(Error::Config("calibration_folds must be at least 2".into()));
        }
        if let Some(v) = h.pca_variance {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("pca_variance must lie in (0, 1], got {v}")));
            }
        }
        if let Some(m) = h.momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("momentum must lie in [0, 1), got {m}")));
            }
        }
        if let Some(v) = h.validation_fraction {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("validation_fraction must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn forest_params(&self) -> ForestParams {
        let h = &self.hyperparameters;
        let d = ForestParams::default();
        ForestParams {
            trees: h.trees.unwrap_or(d.trees),
            max_depth: h.max_depth.or(d.max_depth),
            min_leaf: d.min_leaf,
            max_features: h.max_features.or(d.max_features),
            seed: h.seed,
        }
    }

    pub fn mlp_params(&self) -> MlpParams {
        let h = &self.hyperparameters;
        let d = MlpParams::default();
        MlpParams {
            hidden: h.hidden.unwrap_or(d.hidden),
            learning_rate: h.learning_rate.unwrap_or(d.learning_rate),
            momentum: h.momentum.unwrap_or(d.momentum),
            batch_size: h.batch_size.unwrap_or(d.batch_size),
            max_epochs: h.epochs.unwrap_or(d.max_epochs),
            patience: h.patience.unwrap_or(d.patience),
            validation_fraction: h.validation_fraction.unwrap_or(d.validation_fraction),
            seed: h.seed,
        }
    }

    pub fn lstm_params(&self) -> LstmParams {
        let h = &self.hyperparameters;
        let d = LstmParams::default();
        LstmParams {
            hidden: h.hidden.unwrap_or(d.hidden),
            layers: h.layers.unwrap_or(d.layers),
            dense: h.dense.unwrap_or(d.dense),
            learning_rate: h.learning_rate.unwrap_or(d.learning_rate),
            epochs: h.epochs.unwrap_or(d.epochs),
            batch_size: h.batch_size.unwrap_or(d.batch_size),
            seed: h.seed,
        }
    }

    /// SVM settings for data already projected by PCA; `x` supplies the
    /// default rbf width.
    pub fn svm_params<T: Scalar>(&self, x: &[Vec<T>]) -> SvmParams<T> {
        let h = &self.hyperparameters;
        let kernel = match self.family {
            Family::SvmRbf => Kernel::Rbf {
                gamma: h.gamma.map_or_else(|| default_gamma(x), T::of),
            },
            _ => Kernel::Linear,
        };
        SvmParams {
            kernel,
            c: T::of(h.c.unwrap_or(1.0)),
            tol: T::of(h.tolerance.unwrap_or(1e-3)),
            folds: h.calibration_folds.unwrap_or(5),
            seed: h.seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub seed: u64,
    pub epochs_run: usize,
    pub loss_curve: Vec<f64>,
    pub validation_trace: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Training inputs in the shape a classifier's input mode expects.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainingInputs<T: Scalar> {
    Frames(Vec<Vec<T>>),
    Sequences(Vec<Vec<Vec<T>>>),
}

impl<T: Scalar> TrainingInputs<T> {
    /// Reduces each 24-frame block to what `mode` consumes.
    pub fn from_sequences(mode: InputMode, sequences: Vec<Vec<Vec<T>>>) -> Result<Self> {
        for s in &sequences {
            crate::sequence::check_sequence_shape(s)?;
        }
        Ok(match mode {
            InputMode::FullSequence => Self::Sequences(sequences),
            InputMode::MiddleFrame => Self::Frames(sequences.into_iter().map(|mut s| s.swap_remove(MIDDLE_FRAME)).collect()),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Frames(x) => x.len(),
            Self::Sequences(x) => x.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> InputMode {
        match self {
            Self::Frames(_) => InputMode::MiddleFrame,
            Self::Sequences(_) => InputMode::FullSequence,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a, T> {
    Frame(&'a [T]),
    Sequence(&'a [Vec<T>]),
}

impl<'a, T> ModelInput<'a, T> {
    /// Picks the middle frame or the whole block of a 24-frame sequence.
    pub fn from_frames(mode: InputMode, frames: &'a [Vec<T>]) -> Result<Self> {
        crate::sequence::check_sequence_shape(frames)?;
        Ok(match mode {
            InputMode::MiddleFrame => Self::Frame(&frames[MIDDLE_FRAME]),
            InputMode::FullSequence => Self::Sequence(frames),
        })
    }

    pub fn mode(&self) -> InputMode {
        match self {
            Self::Frame(_) => InputMode::MiddleFrame,
            Self::Sequence(_) => InputMode::FullSequence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelState<T: Scalar> {
    Svm { pca: PcaModel<T>, ovr: OneVsRestSvm<T> },
    Forest { forest: RandomForest<T> },
    Mlp { mlp: Mlp<T> },
    Lstm { lstm: Lstm<T> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrainedModel<T: Scalar> {
    pub spec: ClassifierSpec,
    pub state: ModelState<T>,
    pub report: TrainingReport,
}

pub fn train<T: Scalar>(spec: &ClassifierSpec, inputs: &TrainingInputs<T>, y: &[EngagementLevel]) -> Result<TrainedModel<T>> {
    spec.validate()?;
    if inputs.mode() != spec.input_mode {
        return Err(Error::Mode(format!(
            "{} expects {:?} inputs, got {:?}",
            spec.family,
            spec.input_mode,
            inputs.mode()
        )));
    }
    if inputs.len() != y.len() {
        return Err(Error::Dimension {
            expected: inputs.len(),
            got: y.len(),
        });
    }
    let seed = spec.seed();
    let plain = TrainingReport {
        seed,
        ..Default::default()
    };
    let (state, report) = match (spec.family, inputs) {
        (Family::SvmLinear | Family::SvmRbf, TrainingInputs::Frames(x)) => {
            let variance = spec.hyperparameters.pca_variance.unwrap_or(DEFAULT_RETAINED_VARIANCE);
            let pca = fit_pca(x, variance)?;
            let z = pca.transform_all(x)?;
            let ovr = fit_svm(&z, y, &spec.svm_params(&z))?;
            (ModelState::Svm { pca, ovr }, plain)
        }
        (Family::RandomForest, TrainingInputs::Frames(x)) => {
            let forest = fit_random_forest(x, y, &spec.forest_params())?;
            (ModelState::Forest { forest }, plain)
        }
        (Family::Mlp, TrainingInputs::Frames(x)) => {
            let (mlp, report) = fit_mlp(x, y, &spec.mlp_params())?;
            (ModelState::Mlp { mlp }, report)
        }
        (Family::Lstm, TrainingInputs::Sequences(x)) => {
            let (lstm, report) = fit_lstm(x, y, &spec.lstm_params())?;
            (ModelState::Lstm { lstm }, report)
        }
        _ => unreachable!("mode checked against family above"),
    };
    Ok(TrainedModel {
        spec: spec.clone(),
        state,
        report,
    })
}

impl<T: Scalar> TrainedModel<T> {
    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn input_mode(&self) -> InputMode {
        self.spec.input_mode
    }

    /// Per-frame dimension the model consumes.
    pub fn input_dim(&self) -> usize {
        match &self.state {
            ModelState::Svm { pca, .. } => pca.input_dim(),
            ModelState::Forest { forest } => forest.input_dim,
            ModelState::Mlp { mlp } => mlp.input_dim,
            ModelState::Lstm { lstm } => lstm.input_dim,
        }
    }

    pub fn predict_distribution(&self, input: ModelInput<'_, T>) -> Result<LabelDistribution<T>> {
        if input.mode() != self.input_mode() {
            return Err(Error::Mode(format!(
                "{} model expects {:?} input, got {:?}",
                self.family(),
                self.input_mode(),
                input.mode()
            )));
        }
        match (&self.state, input) {
            (ModelState::Svm { pca, ovr }, ModelInput::Frame(x)) => ovr.predict_distribution(&pca.transform(x)?),
            (ModelState::Forest { forest }, ModelInput::Frame(x)) => forest.predict_distribution(x),
            (ModelState::Mlp { mlp }, ModelInput::Frame(x)) => mlp.predict_distribution(x),
            (ModelState::Lstm { lstm }, ModelInput::Sequence(s)) => lstm.predict_distribution(s),
            _ => Err(Error::Mode("model state does not match its input mode".into())),
        }
    }

    /// Prediction for a 24-frame block, taking the middle frame if the model
    /// is frame-based.
    pub fn predict_frames(&self, frames: &[Vec<T>]) -> Result<LabelDistribution<T>> {
        self.predict_distribution(ModelInput::from_frames(self.input_mode(), frames)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.spec.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks(n: usize) -> (Vec<Vec<Vec<f64>>>, Vec<EngagementLevel>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 3;
            let jitter = (i as f64 * 0.37).sin() * 0.2;
            let frame = vec![c as f64 * 2.0 + jitter, (c as f64 - 1.0) * jitter, jitter];
            x.push(vec![frame; 24]);
            y.push(EngagementLevel::from_index(c).unwrap());
        }
        (x, y)
    }

    #[test]
    fn lstm_rejects_middle_frame_mode() {
        let mut spec = ClassifierSpec::new(Family::Lstm);
        spec.input_mode = InputMode::MiddleFrame;
        assert!(matches!(spec.validate(), Err(Error::Mode(_))));
        let json = r#"{"family":"random_forest","input_mode":"full_sequence"}"#;
        assert!(serde_json::from_str::<ClassifierSpec>(json).is_err());
    }

    #[test]
    fn spec_defaults_input_mode_from_family() {
        let spec: ClassifierSpec = serde_json::from_str(r#"{"family":"lstm","hyperparameters":{"seed":4}}"#).unwrap();
        assert_eq!(spec.input_mode, InputMode::FullSequence);
        assert_eq!(spec.seed(), 4);
        assert!(serde_json::from_str::<ClassifierSpec>(r#"{"family":"mlp","hyperparameters":{"c":-1}}"#).is_err());
    }

    #[test]
    fn every_family_trains_and_round_trips() {
        let (x, y) = blocks(30);
        for family in Family::ALL {
            let mut spec = ClassifierSpec::new(family).with_seed(3);
            spec.hyperparameters.hidden = Some(6);
            spec.hyperparameters.dense = Some(4);
            spec.hyperparameters.trees = Some(5);
            let inputs = TrainingInputs::from_sequences(spec.input_mode, x.clone()).unwrap();
            let m = train(&spec, &inputs, &y).unwrap();
            assert_eq!(m.input_dim(), 3);
            let p = m.predict_frames(&x[0]).unwrap();
            assert!(p.is_valid(), "{family}");
            let back = TrainedModel::<f64>::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back.predict_frames(&x[0]).unwrap(), p);
        }
    }

    #[test]
    fn mode_mismatch_on_predict() {
        let (x, y) = blocks(12);
        let spec = ClassifierSpec::new(Family::RandomForest);
        let inputs = TrainingInputs::from_sequences(spec.input_mode, x.clone()).unwrap();
        let m = train(&spec, &inputs, &y).unwrap();
        assert!(matches!(m.predict_distribution(ModelInput::Sequence(&x[0])), Err(Error::Mode(_))));
        assert!(m.predict_distribution(ModelInput::Frame(&[1.0, 2.0])).is_err());
    }
}
