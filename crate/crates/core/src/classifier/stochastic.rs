use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{make_confidence, Classification, Classifier, ClassifierError, ClassifyRequest, Prediction, DEFAULT_PEAK};
use crate::domain::{ProfileSet, WasteClass, NUM_CLASSES};

/// Identifier of the random stream, recorded in trace headers.
///
/// ChaCha with 8 rounds seeded through `SeedableRng::seed_from_u64`; uniform
/// variates are `(next_u64 >> 11) * 2^-53`.
pub const RNG_ALGORITHM: &str = "chacha8-seed_from_u64-u53";

pub(crate) fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Classifier that is right with the per-class accuracy of its profile and
/// otherwise picks a wrong class from a per-class error distribution.
#[derive(Debug, Clone)]
pub struct StochasticModel {
    profiles: ProfileSet,
    /// Row `c`: probability of predicting each class given a wrong answer for
    /// true class `c`. Diagonal is zero; rows sum to one.
    errors: [[f64; NUM_CLASSES]; NUM_CLASSES],
    peak: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl StochasticModel {
    /// Uniform error distribution over the five wrong classes.
    pub fn new(profiles: ProfileSet, seed: u64) -> Self {
        let mut errors = [[0.2; NUM_CLASSES]; NUM_CLASSES];
        for (i, row) in errors.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        StochasticModel { profiles, errors, peak: DEFAULT_PEAK, seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uses a full row-stochastic confusion matrix (`matrix[true][predicted]`).
    /// Per-class accuracy is taken from the diagonal; latencies stay with `profiles`.
    pub fn with_confusion_matrix(
        profiles: ProfileSet,
        matrix: [[f64; NUM_CLASSES]; NUM_CLASSES],
        seed: u64,
    ) -> Result<Self, ClassifierError> {
        let mut entries = profiles.as_slice().to_vec();
        let mut errors = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        for (i, row) in matrix.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0 && *p <= 1.0)) {
                return Err(ClassifierError::InvalidModel(format!("row {i} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ClassifierError::InvalidModel(format!("row {i} sums to {sum}")));
            }
            let off = 1.0 - row[i];
            if off > 0.0 {
                for j in 0..NUM_CLASSES {
                    if j != i {
                        errors[i][j] = row[j] / off;
                    }
                }
            } else {
                // never wrong; keep a valid (unused) distribution
                for j in 0..NUM_CLASSES {
                    if j != i {
                        errors[i][j] = 0.2;
                    }
                }
            }
            entries[i].accuracy = row[i];
        }
        let profiles = ProfileSet::new(&entries).map_err(|e| ClassifierError::InvalidModel(e.to_string()))?;
        Ok(StochasticModel { errors, ..StochasticModel::new(profiles, seed) })
    }

    pub fn with_peak(mut self, peak: f64) -> Result<Self, ClassifierError> {
        make_confidence(WasteClass::Plastic, peak)?;
        self.peak = peak;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn profiles(&self) -> &ProfileSet {
        &self.profiles
    }

    /// Probability of predicting `predicted` for an item of class `truth`.
    pub fn probability(&self, truth: WasteClass, predicted: WasteClass) -> f64 {
        let acc = self.profiles.get(truth).accuracy;
        if truth == predicted {
            acc
        } else {
            (1.0 - acc) * self.errors[truth.index()][predicted.index()]
        }
    }

    /// Draws one prediction and advances the random stream.
    pub fn sample(&mut self, truth: WasteClass) -> Prediction {
        let profile = *self.profiles.get(truth);
        let predicted = if unit_f64(&mut self.rng) < profile.accuracy {
            truth
        } else {
            let u = unit_f64(&mut self.rng);
            let row = &self.errors[truth.index()];
            let mut acc = 0.0;
            let mut pick = None;
            for class in WasteClass::ALL {
                if class == truth || row[class.index()] == 0.0 {
                    continue;
                }
                acc += row[class.index()];
                pick = Some(class);
                if u < acc {
                    break;
                }
            }
            pick.unwrap_or(truth)
        };
        Prediction {
            predicted,
            confidence: make_confidence(predicted, self.peak).expect("peak validated"),
            latency: profile.latency(),
        }
    }
}

impl Classifier for StochasticModel {
    fn name(&self) -> String {
        "stochastic".into()
    }

    fn classify(&mut self, request: &ClassifyRequest<'_>) -> Result<Classification, ClassifierError> {
        Ok(Classification::Predicted(self.sample(request.true_class)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_accuracy_never_errs() {
        let profiles: Vec<_> = ProfileSet::default()
            .as_slice()
            .iter()
            .map(|p| crate::domain::ClassProfile { accuracy: 1.0, ..*p })
            .collect();
        let mut m = StochasticModel::new(ProfileSet::new(&profiles).unwrap(), 7);
        for _ in 0..1000 {
            for c in WasteClass::ALL {
                assert_eq!(m.sample(c).predicted, c);
            }
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let run = |seed| {
            let mut m = StochasticModel::new(ProfileSet::default(), seed);
            (0..500).map(|i| m.sample(WasteClass::ALL[i % 6]).predicted).collect::<Vec<_>>()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn rows_are_distributions() {
        let m = StochasticModel::new(ProfileSet::default(), 0);
        for t in WasteClass::ALL {
            let total: f64 = WasteClass::ALL.iter().map(|p| m.probability(t, *p)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_matrix_sets_accuracy_and_errors() {
        let mut matrix = [[0.0; 6]; 6];
        for (i, row) in matrix.iter_mut().enumerate() {
            row[i] = 0.5;
            row[(i + 1) % 6] = 0.5;
        }
        let mut m = StochasticModel::with_confusion_matrix(ProfileSet::default(), matrix, 3).unwrap();
        assert_eq!(m.probability(WasteClass::Plastic, WasteClass::Metal), 0.5);
        assert_eq!(m.probability(WasteClass::Plastic, WasteClass::Glass), 0.0);
        for _ in 0..200 {
            let p = m.sample(WasteClass::EWaste).predicted;
            assert!(p == WasteClass::EWaste || p == WasteClass::Plastic);
        }
        matrix[0][0] = 0.7;
        assert!(StochasticModel::with_confusion_matrix(ProfileSet::default(), matrix, 3).is_err());
    }

    #[test]
    fn unit_is_in_half_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let u = unit_f64(&mut rng);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
