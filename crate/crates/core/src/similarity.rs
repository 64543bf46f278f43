//! Cross-layer similarity scores between consecutive exits' predictions.
//!
//! Every measure is built from one primitive, the epsilon-floored
//! cross-entropy `-sum_j p_j ln q_j`. Multi-label predictions are k Bernoulli
//! pairs and the primitive sums over both labels and outcomes. Scores are in
//! nats; smaller means the two layers agree more.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::tensor::sigmoid;

const SUM_TOL: f64 = 1e-9;

/// A per-exit prediction: a categorical distribution (single-label) or one
/// `(p, 1 - p)` pair per label (multi-label).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProbDist {
    Slc(Vec<f64>),
    Mlc(Vec<[f64; 2]>),
}

impl ProbDist {
    pub fn slc(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::contract("single-label distribution needs k >= 2"));
        }
        if probs.iter().any(|&p| !(0.0..=1.0 + SUM_TOL).contains(&p)) {
            return Err(Error::contract(format!(
                "probabilities out of range: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::contract(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(ProbDist::Slc(probs))
    }

    pub fn mlc(pairs: Vec<[f64; 2]>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract(
                "multi-label distribution needs at least one label",
            ));
        }
        for (j, &[p, q]) in pairs.iter().enumerate() {
            if p < 0.0 || q < 0.0 || (p + q - 1.0).abs() > SUM_TOL {
                return Err(Error::contract(format!(
                    "label {j} pair ({p}, {q}) is not a distribution"
                )));
            }
        }
        Ok(ProbDist::Mlc(pairs))
    }

    /// Builds the multi-label form from per-label positive probabilities.
    pub fn mlc_from_probs(probs: &[f64]) -> Result<Self> {
        Self::mlc(probs.iter().map(|&p| [p, 1.0 - p]).collect())
    }

    /// Softmax over the logits.
    pub fn from_slc_logits(logits: &[f64]) -> Self {
        let mut p = logits.to_vec();
        crate::tensor::softmax_in_place(&mut p);
        ProbDist::Slc(p)
    }

    /// Per-label sigmoid; the complement is computed as `sigmoid(-x)`.
    pub fn from_mlc_logits(logits: &[f64]) -> Self {
        ProbDist::Mlc(logits.iter().map(|&x| [sigmoid(x), sigmoid(-x)]).collect())
    }

    pub fn from_logits(task: TaskKind, logits: &[f64]) -> Self {
        match task {
            TaskKind::Slc => Self::from_slc_logits(logits),
            TaskKind::Mlc => Self::from_mlc_logits(logits),
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            ProbDist::Slc(_) => TaskKind::Slc,
            ProbDist::Mlc(_) => TaskKind::Mlc,
        }
    }

    /// Number of classes (single-label) or labels (multi-label).
    pub fn k(&self) -> usize {
        match self {
            ProbDist::Slc(p) => p.len(),
            ProbDist::Mlc(p) => p.len(),
        }
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        match self {
            ProbDist::Slc(p) => argmax(p),
            ProbDist::Mlc(p) => argmax(&p.iter().map(|x| x[0]).collect::<Vec<_>>()),
        }
    }

    /// Labels whose positive probability exceeds 0.5. For single-label
    /// distributions this is the argmax class.
    pub fn label_set(&self) -> Vec<usize> {
        match self {
            ProbDist::Slc(p) => vec![argmax(p)],
            ProbDist::Mlc(p) => p
                .iter()
                .enumerate()
                .filter(|(_, x)| x[0] > 0.5)
                .map(|(j, _)| j)
                .collect(),
        }
    }

    /// Shannon entropy in nats; mean per-label binary entropy for multi-label.
    pub fn entropy(&self) -> f64 {
        let h = |xs: &[f64]| -> f64 {
            -xs.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        };
        match self {
            ProbDist::Slc(p) => h(p).max(0.0),
            ProbDist::Mlc(p) => {
                let total: f64 = p.iter().map(|pair| h(pair).max(0.0)).sum();
                total / p.len() as f64
            }
        }
    }

    /// Largest class probability; for multi-label, the least decisive label's
    /// `max(p, 1 - p)`.
    pub fn max_prob(&self) -> f64 {
        match self {
            ProbDist::Slc(p) => p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ProbDist::Mlc(p) => p
                .iter()
                .map(|x| x[0].max(x[1]))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Elementwise midpoint of two distributions of the same shape.
    pub fn midpoint(&self, other: &ProbDist) -> Result<ProbDist> {
        check_compatible(self, other)?;
        Ok(match (self, other) {
            (ProbDist::Slc(p), ProbDist::Slc(q)) => {
                ProbDist::Slc(p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect())
            }
            (ProbDist::Mlc(p), ProbDist::Mlc(q)) => ProbDist::Mlc(
                p.iter()
                    .zip(q)
                    .map(|(a, b)| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0])
                    .collect(),
            ),
            _ => unreachable!("checked above"),
        })
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_compatible(a: &ProbDist, b: &ProbDist) -> Result<()> {
    if a.kind() != b.kind() {
        return Err(Error::contract(format!(
            "cannot compare {:?} with {:?} distributions",
            a.kind(),
            b.kind()
        )));
    }
    if a.k() != b.k() {
        return Err(Error::contract(format!(
            "distribution sizes differ: {} vs {}",
            a.k(),
            b.k()
        )));
    }
    Ok(())
}

/// `-sum p ln max(q, eps)` over every probability entry, in storage order.
fn cross_entropy(p: &ProbDist, q: &ProbDist, eps: f64) -> Result<f64> {
    check_compatible(p, q)?;
    let mut acc = 0.0;
    match (p, q) {
        (ProbDist::Slc(p), ProbDist::Slc(q)) => {
            for (&a, &b) in p.iter().zip(q) {
                acc += a * b.max(eps).ln();
            }
        }
        (ProbDist::Mlc(p), ProbDist::Mlc(q)) => {
            for (a, b) in p.iter().zip(q) {
                for i in 0..2 {
                    acc += a[i] * b[i].max(eps).ln();
                }
            }
        }
        _ => unreachable!("checked above"),
    }
    Ok((-acc).max(0.0))
}

/// The four cross-layer comparison objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Kd,
    Rekd,
    Symkd,
    Jskd,
}

impl Measure {
    pub const ALL: [Measure; 4] = [Measure::Kd, Measure::Rekd, Measure::Symkd, Measure::Jskd];
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Kd => "kd",
            Measure::Rekd => "rekd",
            Measure::Symkd => "symkd",
            Measure::Jskd => "jskd",
        })
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kd" => Ok(Measure::Kd),
            "rekd" => Ok(Measure::Rekd),
            "symkd" => Ok(Measure::Symkd),
            "jskd" => Ok(Measure::Jskd),
            other => Err(Error::config(format!(
                "unknown similarity measure '{other}'"
            ))),
        }
    }
}

/// A measure together with its log floor and the optional conversion of each
/// cross-entropy term into a KL divergence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMeasure {
    pub measure: Measure,
    pub epsilon: f64,
    /// Subtract the first argument's self-entropy from every cross-entropy
    /// term, so identical distributions score 0.
    pub kl_mode: bool,
}

impl SimilarityMeasure {
    pub const DEFAULT_EPSILON: f64 = 1e-12;

    pub fn new(measure: Measure) -> Self {
        Self {
            measure,
            epsilon: Self::DEFAULT_EPSILON,
            kl_mode: false,
        }
    }

    pub fn with_kl_mode(mut self, on: bool) -> Self {
        self.kl_mode = on;
        self
    }

    fn term(&self, p: &ProbDist, q: &ProbDist) -> Result<f64> {
        let ce = cross_entropy(p, q, self.epsilon)?;
        if self.kl_mode {
            Ok((ce - cross_entropy(p, p, self.epsilon)?).max(0.0))
        } else {
            Ok(ce)
        }
    }

    /// `s(prev, cur)` for the configured variant.
    pub fn score(&self, prev: &ProbDist, cur: &ProbDist) -> Result<f64> {
        match self.measure {
            Measure::Kd => self.term(prev, cur),
            Measure::Rekd => self.term(cur, prev),
            Measure::Symkd => Ok(self.term(prev, cur)? + self.term(cur, prev)?),
            Measure::Jskd => {
                let m = prev.midpoint(cur)?;
                Ok(0.5 * self.term(prev, &m)? + 0.5 * self.term(cur, &m)?)
            }
        }
    }
}

pub fn score_kd(prev: &ProbDist, cur: &ProbDist) -> Result<f64> {
    SimilarityMeasure::new(Measure::Kd).score(prev, cur)
}

pub fn score_rekd(prev: &ProbDist, cur: &ProbDist) -> Result<f64> {
    SimilarityMeasure::new(Measure::Rekd).score(prev, cur)
}

pub fn score_symkd(prev: &ProbDist, cur: &ProbDist) -> Result<f64> {
    SimilarityMeasure::new(Measure::Symkd).score(prev, cur)
}

pub fn score_jskd(prev: &ProbDist, cur: &ProbDist) -> Result<f64> {
    SimilarityMeasure::new(Measure::Jskd).score(prev, cur)
}

pub fn score(measure: &SimilarityMeasure, prev: &ProbDist, cur: &ProbDist) -> Result<f64> {
    measure.score(prev, cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn slc(p: &[f64]) -> ProbDist {
        ProbDist::slc(p.to_vec()).unwrap()
    }

    fn mlc(p: &[f64]) -> ProbDist {
        ProbDist::mlc_from_probs(p).unwrap()
    }

    /// Independent double loop over labels and outcomes.
    fn oracle_mlc_ce(p: &[f64], q: &[f64]) -> f64 {
        let mut total = 0.0;
        for j in 0..p.len() {
            let pj = [p[j], 1.0 - p[j]];
            let qj = [q[j], 1.0 - q[j]];
            for i in 0..2 {
                total -= pj[i] * qj[i].ln();
            }
        }
        total
    }

    #[test]
    fn kd_one_hot_picks_single_term() {
        assert!((score_kd(&slc(&[1.0, 0.0]), &slc(&[0.5, 0.5])).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn kd_of_identical_is_entropy_not_zero() {
        let u = slc(&[0.5, 0.5]);
        assert!((score_kd(&u, &u).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn kd_mlc_matches_double_sum() {
        let (p, q) = ([0.9, 0.2], [0.8, 0.3]);
        let got = score_kd(&mlc(&p), &mlc(&q)).unwrap();
        assert!((got - oracle_mlc_ce(&p, &q)).abs() < 1e-12);
        // frozen from the oracle: -(0.9 ln .8 + .1 ln .2 + .2 ln .3 + .8 ln .7)
        assert!((got - 0.887_907_503_442_372).abs() < 1e-12, "{got}");
    }

    #[test]
    fn rekd_is_flipped_kd() {
        let got = score_rekd(&slc(&[0.5, 0.5]), &slc(&[1.0, 0.0])).unwrap();
        assert!((got - LN_2).abs() < 1e-12);
        let (p, q) = ([0.15, 0.6, 0.95], [0.3, 0.45, 0.7]);
        let got = score_rekd(&mlc(&p), &mlc(&q)).unwrap();
        assert!((got - oracle_mlc_ce(&q, &p)).abs() < 1e-12);
    }

    #[test]
    fn symkd_cases() {
        let u = slc(&[0.5, 0.5]);
        assert!((score_symkd(&u, &u).unwrap() - 2.0 * LN_2).abs() < 1e-12);
        let (a, b) = (slc(&[0.9, 0.1]), slc(&[0.1, 0.9]));
        let expected = -(0.9f64 * 0.1f64.ln() + 0.1 * 0.9f64.ln()) * 2.0;
        assert!((score_symkd(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn jskd_cases() {
        let p = slc(&[0.3, 0.7]);
        assert!((score_jskd(&p, &p).unwrap() - p.entropy()).abs() < 1e-12);
        let got = score_jskd(&slc(&[1.0, 0.0]), &slc(&[0.0, 1.0])).unwrap();
        assert!((got - LN_2).abs() < 1e-12);
    }

    #[test]
    fn floored_logs_stay_finite() {
        let got = score_kd(&slc(&[0.0, 1.0]), &slc(&[1.0, 0.0])).unwrap();
        assert!(got.is_finite());
        assert!((got + 1e-12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn kl_mode_zero_on_identical() {
        let m = SimilarityMeasure::new(Measure::Kd).with_kl_mode(true);
        let p = slc(&[0.2, 0.5, 0.3]);
        assert_eq!(m.score(&p, &p).unwrap(), 0.0);
        let q = slc(&[0.4, 0.4, 0.2]);
        let kl: f64 = [0.2f64, 0.5, 0.3]
            .iter()
            .zip([0.4f64, 0.4, 0.2])
            .map(|(a, b)| a * (a / b).ln())
            .sum();
        assert!((m.score(&p, &q).unwrap() - kl).abs() < 1e-12);
    }

    #[test]
    fn mismatches_are_contract_errors() {
        assert!(matches!(
            score_kd(&slc(&[0.5, 0.5]), &mlc(&[0.5, 0.5])),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            score_kd(&slc(&[0.5, 0.5]), &slc(&[0.2, 0.3, 0.5])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn validation() {
        assert!(ProbDist::slc(vec![1.0]).is_err());
        assert!(ProbDist::slc(vec![0.6, 0.6]).is_err());
        assert!(ProbDist::mlc(vec![[0.6, 0.6]]).is_err());
        assert!(ProbDist::mlc(vec![]).is_err());
        assert!(ProbDist::mlc(vec![[0.25, 0.75]]).is_ok());
    }

    #[test]
    fn measure_names_round_trip() {
        for m in Measure::ALL {
            assert_eq!(m.to_string().parse::<Measure>().unwrap(), m);
        }
        assert!("cosine".parse::<Measure>().is_err());
    }

    fn slc_strategy() -> impl Strategy<Value = ProbDist> {
        (2usize..=10).prop_flat_map(|k| {
            prop::collection::vec(0.0f64..1.0, k).prop_map(|w| {
                let total: f64 = w.iter().sum::<f64>() + 1e-9;
                let mut p: Vec<f64> = w
                    .iter()
                    .map(|x| (x + 1e-9 / w.len() as f64) / total)
                    .collect();
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= s);
                ProbDist::Slc(p)
            })
        })
    }

    proptest! {
        #[test]
        fn symmetric_measures_are_exactly_symmetric(p in slc_strategy(), seed in any::<u64>()) {
            let q = {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let w: Vec<f64> = (0..p.k()).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = w.iter().sum();
                ProbDist::Slc(w.iter().map(|x| x / s).collect())
            };
            prop_assert_eq!(score_symkd(&p, &q).unwrap(), score_symkd(&q, &p).unwrap());
            prop_assert_eq!(score_jskd(&p, &q).unwrap(), score_jskd(&q, &p).unwrap());
            prop_assert_eq!(score_rekd(&p, &q).unwrap(), score_kd(&q, &p).unwrap());
            prop_assert!(score_jskd(&p, &q).unwrap() <= score_symkd(&p, &q).unwrap());
        }

        #[test]
        fn single_label_mlc_matches_binary_slc(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
            let (mp, mq) = (mlc(&[p]), mlc(&[q]));
            let (sp, sq) = (ProbDist::Slc(vec![p, 1.0 - p]), ProbDist::Slc(vec![q, 1.0 - q]));
            for m in Measure::ALL {
                let sm = SimilarityMeasure::new(m);
                prop_assert_eq!(sm.score(&mp, &mq).unwrap(), sm.score(&sp, &sq).unwrap());
            }
        }
    }
}
