//! Pluggable waste classifiers.
//!
//! Every classifier receives the item's true class and an opaque image
//! reference and answers with a [`Classification`]. Latency is always the
//! profile latency of the true class, so timing does not depend on whether
//! the prediction was right.

mod external;
mod stochastic;

pub use external::{parse_result_line, ExternalClassifier, ExternalError};
pub use stochastic::{StochasticModel, RNG_ALGORITHM};
pub(crate) use stochastic::unit_f64;

use std::collections::VecDeque;

use serde::Serialize;

use crate::domain::{ProfileSet, WasteClass, NUM_CLASSES};
use crate::time::SimTime;

/// Default probability mass put on the predicted class.
pub const DEFAULT_PEAK: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub predicted: WasteClass,
    /// Softmax-style probabilities in class order.
    pub confidence: [f64; NUM_CLASSES],
    pub latency: SimTime,
}

impl Prediction {
    /// Checks the probability vector: non-negative, sums to 1 within 1e-9,
    /// unique argmax at `predicted`.
    pub fn check(&self) -> Result<(), String> {
        if self.confidence.iter().any(|p| !(*p >= 0.0)) {
            return Err(format!("negative or NaN confidence {:?}", self.confidence));
        }
        let sum: f64 = self.confidence.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("confidence sums to {sum}"));
        }
        let peak = self.confidence[self.predicted.index()];
        let ties = self.confidence.iter().filter(|p| **p >= peak).count();
        if ties != 1 {
            return Err(format!("argmax of {:?} is not uniquely {}", self.confidence, self.predicted));
        }
        Ok(())
    }

    pub fn peak(&self) -> f64 {
        self.confidence[self.predicted.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classification {
    Predicted(Prediction),
    /// No usable answer (adapter timeout, closed pipe or confidence gate).
    Unavailable { latency: SimTime, reason: String },
}

impl Classification {
    pub fn latency(&self) -> SimTime {
        match self {
            Classification::Predicted(p) => p.latency,
            Classification::Unavailable { latency, .. } => *latency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassifierError {
    #[error("classifier script exhausted after {0} predictions")]
    ScriptExhausted(usize),
    #[error("invalid confidence peak {0}: must satisfy 1/6 < peak <= 1")]
    InvalidPeak(f64),
    #[error("invalid stochastic model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifyRequest<'a> {
    pub item_id: u64,
    pub true_class: WasteClass,
    pub image_ref: &'a str,
}

pub trait Classifier {
    /// Short identifier recorded in trace headers.
    fn name(&self) -> String;

    fn classify(&mut self, request: &ClassifyRequest<'_>) -> Result<Classification, ClassifierError>;
}

impl<C: Classifier + ?Sized> Classifier for Box<C> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn classify(&mut self, request: &ClassifyRequest<'_>) -> Result<Classification, ClassifierError> {
        (**self).classify(request)
    }
}

/// `peak` on `predicted`, the remainder split evenly over the other five.
pub fn make_confidence(predicted: WasteClass, peak: f64) -> Result<[f64; NUM_CLASSES], ClassifierError> {
    if !(peak > 1.0 / NUM_CLASSES as f64 && peak <= 1.0) {
        return Err(ClassifierError::InvalidPeak(peak));
    }
    let rest = (1.0 - peak) / (NUM_CLASSES - 1) as f64;
    let mut v = [rest; NUM_CLASSES];
    v[predicted.index()] = peak;
    Ok(v)
}

/// Always right. Used as the routing oracle.
#[derive(Debug, Clone, Default)]
pub struct PerfectClassifier {
    profiles: ProfileSet,
}

impl PerfectClassifier {
    pub fn new(profiles: ProfileSet) -> Self {
        PerfectClassifier { profiles }
    }

    pub fn predict(&self, true_class: WasteClass) -> Prediction {
        Prediction {
            predicted: true_class,
            confidence: make_confidence(true_class, 1.0).expect("peak 1.0 is valid"),
            latency: self.profiles.get(true_class).latency(),
        }
    }
}

impl Classifier for PerfectClassifier {
    fn name(&self) -> String {
        "perfect".into()
    }

    fn classify(&mut self, request: &ClassifyRequest<'_>) -> Result<Classification, ClassifierError> {
        Ok(Classification::Predicted(self.predict(request.true_class)))
    }
}

/// Perfect prediction with the built-in profiles.
pub fn classify_perfect(true_class: WasteClass) -> Prediction {
    PerfectClassifier::default().predict(true_class)
}

/// Replays a fixed list of predicted classes in order.
#[derive(Debug, Clone)]
pub struct ScriptedClassifier {
    script: VecDeque<WasteClass>,
    served: usize,
    profiles: ProfileSet,
    peak: f64,
}

impl ScriptedClassifier {
    pub fn new(script: impl IntoIterator<Item = WasteClass>, profiles: ProfileSet) -> Self {
        ScriptedClassifier { script: script.into_iter().collect(), served: 0, profiles, peak: DEFAULT_PEAK }
    }

    pub fn with_peak(mut self, peak: f64) -> Result<Self, ClassifierError> {
        make_confidence(WasteClass::Plastic, peak)?;
        self.peak = peak;
        Ok(self)
    }

    pub fn remaining(&self) -> usize {
        self.script.len()
    }

    /// Next scripted prediction; the latency comes from `true_class`.
    pub fn next_prediction(&mut self, true_class: WasteClass) -> Result<Prediction, ClassifierError> {
        let predicted = self.script.pop_front().ok_or(ClassifierError::ScriptExhausted(self.served))?;
        self.served += 1;
        Ok(Prediction {
            predicted,
            confidence: make_confidence(predicted, self.peak)?,
            latency: self.profiles.get(true_class).latency(),
        })
    }
}

impl Classifier for ScriptedClassifier {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn classify(&mut self, request: &ClassifyRequest<'_>) -> Result<Classification, ClassifierError> {
        self.next_prediction(request.true_class).map(Classification::Predicted)
    }
}

pub fn classify_stochastic(model: &mut StochasticModel, true_class: WasteClass) -> Prediction {
    model.sample(true_class)
}
