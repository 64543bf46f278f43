//! Halt/continue state machines fed one exit prediction at a time.
//!
//! Patience policies compare each new prediction with the previous one and
//! count consecutive agreements; the others decide from a single layer.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PredictionStream;
use crate::similarity::{Measure, ProbDist, SimilarityMeasure};

/// What a policy sees after layer `layer` (1-based) has run.
#[derive(Clone, Copy, Debug)]
pub struct LayerView<'a> {
    pub layer: usize,
    pub n_layers: usize,
    pub probs: &'a ProbDist,
    /// Output of the layer's learned confidence head.
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitReason {
    PatienceReached,
    Confidence,
    FixedLayer,
    FinalLayerFallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExitDecision {
    Continue,
    Halt(ExitReason),
}

impl ExitDecision {
    pub fn is_halt(self) -> bool {
        matches!(self, ExitDecision::Halt(_))
    }
}

/// One policy step: the decision plus whatever internal signal produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub decision: ExitDecision,
    /// Cross-layer score, or the single-layer statistic that was thresholded.
    pub score: Option<f64>,
    /// Patience counter after the step.
    pub patience: Option<u32>,
}

impl StepRecord {
    fn plain(decision: ExitDecision, score: Option<f64>) -> Self {
        Self {
            decision,
            score,
            patience: None,
        }
    }
}

pub trait ExitPolicy: Send {
    /// Clears per-sample state.
    fn reset(&mut self);

    fn step(&mut self, view: &LayerView<'_>) -> Result<StepRecord>;
}

// ── Traces ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub layer: usize,
    pub predicted: Vec<usize>,
    pub max_prob: f64,
    pub score: Option<f64>,
    pub patience: Option<u32>,
    pub decision: ExitDecision,
}

/// Per-layer record of one sample's walk through the exits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExitTrace {
    pub entries: Vec<TraceEntry>,
    pub exit_layer: usize,
}

impl ExitTrace {
    pub fn record(&mut self, view: &LayerView<'_>, step: StepRecord) {
        self.entries.push(TraceEntry {
            layer: view.layer,
            predicted: view.probs.label_set(),
            max_prob: view.probs.max_prob(),
            score: step.score,
            patience: step.patience,
            decision: step.decision,
        });
        if step.decision.is_halt() {
            self.exit_layer = view.layer;
        }
    }
}

/// Feeds a precomputed stream through `policy` exactly as an early-exit
/// forward pass would, including the final-layer fallback.
pub fn replay(policy: &mut dyn ExitPolicy, stream: &PredictionStream) -> Result<ExitTrace> {
    policy.reset();
    let n = stream.len();
    let mut trace = ExitTrace::default();
    for (i, probs) in stream.probs.iter().enumerate() {
        let view = LayerView {
            layer: i + 1,
            n_layers: n,
            probs,
            confidence: stream.confidences.get(i).copied().unwrap_or(0.5),
        };
        let mut step = policy.step(&view)?;
        if i + 1 == n && step.decision == ExitDecision::Continue {
            step.decision = ExitDecision::Halt(ExitReason::FinalLayerFallback);
        }
        trace.record(&view, step);
        if step.decision.is_halt() {
            return Ok(trace);
        }
    }
    Err(Error::contract("cannot replay an empty prediction stream"))
}

// ── Flexible patience ───────────────────────────────────────────────

/// How two consecutive predictions are judged to agree.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Comparator {
    /// Agree when `s(prev, cur) < thre`.
    Similarity(SimilarityMeasure),
    /// Agree when the predicted labels are identical.
    PredictionEquality,
}

/// Patience counter over cross-layer similarity scores.
#[derive(Clone, Debug, PartialEq)]
pub struct FPabeeState {
    pub thre: f64,
    pub patience: u32,
    pub pat: u32,
    pub prev: Option<ProbDist>,
}

impl FPabeeState {
    pub fn new(thre: f64, patience: u32) -> Result<Self> {
        if patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if thre.is_nan() {
            return Err(Error::config("threshold must not be NaN"));
        }
        Ok(Self {
            thre,
            patience,
            pat: 0,
            prev: None,
        })
    }

    pub fn reset(&mut self) {
        self.pat = 0;
        self.prev = None;
    }

    /// One counter update given whether the latest comparison agreed.
    pub fn observe_agreement(&mut self, agree: bool) -> ExitDecision {
        self.pat = if agree {
            (self.pat + 1).min(self.patience)
        } else {
            0
        };
        if self.pat == self.patience {
            ExitDecision::Halt(ExitReason::PatienceReached)
        } else {
            ExitDecision::Continue
        }
    }

    /// Strict `s < thre` increments; anything else resets.
    pub fn observe_score(&mut self, score: f64) -> ExitDecision {
        self.observe_agreement(score < self.thre)
    }

    pub fn step(&mut self, p: &ProbDist, comparator: &Comparator) -> Result<StepRecord> {
        let Some(prev) = self.prev.take() else {
            self.prev = Some(p.clone());
            return Ok(StepRecord {
                decision: ExitDecision::Continue,
                score: None,
                patience: Some(self.pat),
            });
        };
        let (decision, score) = match comparator {
            Comparator::Similarity(m) => {
                let s = m.score(&prev, p)?;
                (self.observe_score(s), Some(s))
            }
            Comparator::PredictionEquality => (
                self.observe_agreement(prev.label_set() == p.label_set()),
                None,
            ),
        };
        self.prev = Some(p.clone());
        Ok(StepRecord {
            decision,
            score,
            patience: Some(self.pat),
        })
    }
}

/// Functional form of one flexible-patience update.
pub fn fpabee_step(
    mut state: FPabeeState,
    p: &ProbDist,
    measure: &SimilarityMeasure,
) -> Result<(FPabeeState, StepRecord)> {
    let rec = state.step(p, &Comparator::Similarity(*measure))?;
    Ok((state, rec))
}

#[derive(Clone, Debug)]
pub struct FPabee {
    state: FPabeeState,
    comparator: Comparator,
}

impl FPabee {
    pub fn new(comparator: Comparator, thre: f64, patience: u32) -> Result<Self> {
        Ok(Self {
            state: FPabeeState::new(thre, patience)?,
            comparator,
        })
    }

    pub fn state(&self) -> &FPabeeState {
        &self.state
    }
}

impl ExitPolicy for FPabee {
    fn reset(&mut self) {
        self.state.reset();
    }

    fn step(&mut self, view: &LayerView<'_>) -> Result<StepRecord> {
        self.state.step(view.probs, &self.comparator)
    }
}

// ── Exact-agreement patience ────────────────────────────────────────

/// Exits once the predicted label (single-label) or 0.5-thresholded label set
/// (multi-label) has stayed unchanged for `patience` consecutive layers.
#[derive(Clone, Debug)]
pub struct Pabee {
    patience: u32,
    count: u32,
    last: Option<Vec<usize>>,
}

impl Pabee {
    pub fn new(patience: u32) -> Result<Self> {
        if patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(Self {
            patience,
            count: 0,
            last: None,
        })
    }
}

pub fn pabee_step(state: &mut Pabee, p: &ProbDist) -> ExitDecision {
    let labels = p.label_set();
    match state.last.replace(labels) {
        None => ExitDecision::Continue,
        Some(before) => {
            if Some(&before) == state.last.as_ref() {
                state.count = (state.count + 1).min(state.patience);
            } else {
                state.count = 0;
            }
            if state.count >= state.patience {
                ExitDecision::Halt(ExitReason::PatienceReached)
            } else {
                ExitDecision::Continue
            }
        }
    }
}

impl ExitPolicy for Pabee {
    fn reset(&mut self) {
        self.count = 0;
        self.last = None;
    }

    fn step(&mut self, view: &LayerView<'_>) -> Result<StepRecord> {
        let decision = pabee_step(self, view.probs);
        Ok(StepRecord {
            decision,
            score: None,
            patience: Some(self.count),
        })
    }
}

// ── Single-layer confidence policies ────────────────────────────────

/// Halts when the prediction entropy (nats) drops below `threshold`.
pub fn entropy_step(p: &ProbDist, threshold: f64) -> ExitDecision {
    if p.entropy() < threshold {
        ExitDecision::Halt(ExitReason::Confidence)
    } else {
        ExitDecision::Continue
    }
}

/// Halts when the top probability strictly exceeds `threshold`.
pub fn maxprob_step(p: &ProbDist, threshold: f64) -> ExitDecision {
    if p.max_prob() > threshold {
        ExitDecision::Halt(ExitReason::Confidence)
    } else {
        ExitDecision::Continue
    }
}

/// Halts when the learned confidence head strictly exceeds `threshold`.
pub fn learned_confidence_step(confidence: f64, threshold: f64) -> ExitDecision {
    if confidence > threshold {
        ExitDecision::Halt(ExitReason::Confidence)
    } else {
        ExitDecision::Continue
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EntropyExit {
    pub threshold: f64,
}

impl ExitPolicy for EntropyExit {
    fn reset(&mut self) {}

    fn step(&mut self, view: &LayerView<'_>) -> Result<StepRecord> {
        Ok(StepRecord::plain(
            entropy_step(view.probs, self.threshold),
            Some(view.probs.entropy()),
        ))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaxProbExit {
    pub threshold: f64,
}

impl ExitPolicy for MaxProbExit {
    fn reset(&mut self) {}

    fn step(&mut self, view: &LayerView<'_>) -> Result<StepRecord> {
        Ok(StepRecord::plain(
            maxprob_step(view.probs, self.threshold),
            Some(view.probs.max_prob()),
        ))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LearnedConfidenceExit {
    pub threshold: f64,
}

impl ExitPolicy for LearnedConfidenceExit {
    fn reset(&mut self) {}

    fn step(&mut self, view: &LayerView<'_>) -> Result<StepRecord> {
        Ok(StepRecord::plain(
            learned_confidence_step(view.confidence, self.threshold),
            Some(view.confidence),
        ))
    }
}

/// Always exits at one layer.
#[derive(Clone, Copy, Debug)]
pub struct FixedExit {
    layer: usize,
}

impl FixedExit {
    pub fn new(layer: usize) -> Self {
        Self { layer }
    }
}

pub fn fixed_exit(layer: usize) -> FixedExit {
    FixedExit::new(layer)
}

impl ExitPolicy for FixedExit {
    fn reset(&mut self) {}

    fn step(&mut self, view: &LayerView<'_>) -> Result<StepRecord> {
        let decision = if view.layer >= self.layer {
            ExitDecision::Halt(ExitReason::FixedLayer)
        } else {
            ExitDecision::Continue
        };
        Ok(StepRecord::plain(decision, None))
    }
}

// ── Serializable policy selection ───────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum PolicySpec {
    Fpabee {
        measure: Measure,
        thre: f64,
        patience: u32,
        kl_mode: bool,
    },
    Pabee {
        patience: u32,
    },
    Entropy {
        threshold: f64,
    },
    Maxprob {
        threshold: f64,
    },
    Learned {
        threshold: f64,
    },
    Fixed {
        layer: usize,
    },
}

impl PolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::Fpabee { .. } => "fpabee",
            PolicySpec::Pabee { .. } => "pabee",
            PolicySpec::Entropy { .. } => "entropy",
            PolicySpec::Maxprob { .. } => "maxprob",
            PolicySpec::Learned { .. } => "learned",
            PolicySpec::Fixed { .. } => "fixed",
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        match *self {
            PolicySpec::Fpabee { patience, thre, .. } => {
                FPabeeState::new(thre, patience)?;
            }
            PolicySpec::Pabee { patience } => {
                Pabee::new(patience)?;
            }
            PolicySpec::Entropy { threshold }
            | PolicySpec::Maxprob { threshold }
            | PolicySpec::Learned { threshold } => {
                if threshold.is_nan() {
                    return Err(Error::config("threshold must not be NaN"));
                }
            }
            PolicySpec::Fixed { layer } => {
                if layer == 0 || layer > n_layers {
                    return Err(Error::config(format!(
                        "fixed exit layer {layer} outside 1..={n_layers}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self, n_layers: usize) -> Result<Box<dyn ExitPolicy>> {
        self.validate(n_layers)?;
        Ok(match *self {
            PolicySpec::Fpabee {
                measure,
                thre,
                patience,
                kl_mode,
            } => Box::new(FPabee::new(
                Comparator::Similarity(SimilarityMeasure::new(measure).with_kl_mode(kl_mode)),
                thre,
                patience,
            )?),
            PolicySpec::Pabee { patience } => Box::new(Pabee::new(patience)?),
            PolicySpec::Entropy { threshold } => Box::new(EntropyExit { threshold }),
            PolicySpec::Maxprob { threshold } => Box::new(MaxProbExit { threshold }),
            PolicySpec::Learned { threshold } => Box::new(LearnedConfidenceExit { threshold }),
            PolicySpec::Fixed { layer } => Box::new(FixedExit::new(layer)),
        })
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Fpabee {
                measure,
                thre,
                patience,
                kl_mode,
            } => write!(
                f,
                "fpabee-{measure}{}(thre={thre}, patience={patience})",
                if *kl_mode { "-kl" } else { "" }
            ),
            PolicySpec::Pabee { patience } => write!(f, "pabee(patience={patience})"),
            PolicySpec::Entropy { threshold } => write!(f, "entropy(threshold={threshold})"),
            PolicySpec::Maxprob { threshold } => write!(f, "maxprob(threshold={threshold})"),
            PolicySpec::Learned { threshold } => write!(f, "learned(threshold={threshold})"),
            PolicySpec::Fixed { layer } => write!(f, "fixed(layer={layer})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slc(p: &[f64]) -> ProbDist {
        ProbDist::Slc(p.to_vec())
    }

    fn stream(probs: Vec<ProbDist>) -> PredictionStream {
        let n = probs.len();
        PredictionStream {
            probs,
            confidences: vec![0.5; n],
            hidden: None,
        }
    }

    #[test]
    fn fpabee_counter_follows_scores() {
        let mut s = FPabeeState::new(0.5, 2).unwrap();
        let mut pats = Vec::new();
        let mut halted_at = None;
        for (i, score) in [0.4, 0.6, 0.3, 0.2].into_iter().enumerate() {
            let d = s.observe_score(score);
            pats.push(s.pat);
            if d.is_halt() && halted_at.is_none() {
                // comparison i happens at layer i + 2
                halted_at = Some(i + 2);
            }
        }
        assert_eq!(pats, vec![1, 0, 1, 2]);
        assert_eq!(halted_at, Some(5));
    }

    #[test]
    fn fpabee_first_layer_only_stores() {
        let s = FPabeeState::new(1.0, 1).unwrap();
        let m = SimilarityMeasure::new(Measure::Kd);
        let (s, rec) = fpabee_step(s, &slc(&[0.5, 0.5]), &m).unwrap();
        assert_eq!(rec.decision, ExitDecision::Continue);
        assert_eq!(rec.score, None);
        assert_eq!(s.pat, 0);
        assert!(s.prev.is_some());
        let (s, rec) = fpabee_step(s, &slc(&[0.5, 0.5]), &m).unwrap();
        // ln 2 < 1.0
        assert_eq!(
            rec.decision,
            ExitDecision::Halt(ExitReason::PatienceReached)
        );
        assert_eq!(s.pat, 1);
    }

    #[test]
    fn infinite_threshold_halts_at_patience_plus_one() {
        for patience in 1..=5u32 {
            let mut p = PolicySpec::Fpabee {
                measure: Measure::Symkd,
                thre: f64::INFINITY,
                patience,
                kl_mode: false,
            }
            .build(8)
            .unwrap();
            let s = stream(vec![slc(&[0.3, 0.7]); 8]);
            assert_eq!(
                replay(p.as_mut(), &s).unwrap().exit_layer,
                patience as usize + 1
            );
        }
    }

    #[test]
    fn zero_threshold_never_halts() {
        let mut p = PolicySpec::Fpabee {
            measure: Measure::Kd,
            thre: 0.0,
            patience: 1,
            kl_mode: true,
        }
        .build(5)
        .unwrap();
        // identical distributions score exactly 0 in KL mode; 0 < 0 is false
        let s = stream(vec![slc(&[1.0, 0.0]); 5]);
        let t = replay(p.as_mut(), &s).unwrap();
        assert_eq!(t.exit_layer, 5);
        assert_eq!(
            t.entries.last().unwrap().decision,
            ExitDecision::Halt(ExitReason::FinalLayerFallback)
        );
        assert!(t.entries.iter().all(|e| e.patience.unwrap_or(0) == 0));
    }

    #[test]
    fn score_equal_to_threshold_resets() {
        let mut s = FPabeeState::new(0.5, 3).unwrap();
        s.observe_score(0.1);
        assert_eq!(s.pat, 1);
        s.observe_score(0.5);
        assert_eq!(s.pat, 0);
    }

    #[test]
    fn pabee_cases() {
        let one_hot = |c: usize| {
            let mut p = vec![0.1; 3];
            p[c] = 0.8;
            slc(&p)
        };
        let mut p = Pabee::new(2).unwrap();
        let t = replay(
            &mut p,
            &stream(vec![one_hot(2), one_hot(2), one_hot(2), one_hot(0)]),
        )
        .unwrap();
        assert_eq!(t.exit_layer, 3);

        let alternating: Vec<_> = (0..8).map(|i| one_hot(1 + i % 2)).collect();
        let t = replay(&mut p, &stream(alternating)).unwrap();
        assert_eq!(t.exit_layer, 8);
        assert_eq!(
            t.entries.last().unwrap().decision,
            ExitDecision::Halt(ExitReason::FinalLayerFallback)
        );
    }

    #[test]
    fn pabee_mlc_uses_label_sets() {
        let a = ProbDist::mlc_from_probs(&[0.9, 0.2, 0.7]).unwrap();
        let b = ProbDist::mlc_from_probs(&[0.6, 0.4, 0.8]).unwrap();
        let c = ProbDist::mlc_from_probs(&[0.6, 0.6, 0.8]).unwrap();
        let mut p = Pabee::new(1).unwrap();
        assert_eq!(
            replay(&mut p, &stream(vec![a.clone(), b.clone(), c.clone()]))
                .unwrap()
                .exit_layer,
            2
        );
        assert_eq!(
            replay(&mut p, &stream(vec![b, c, a])).unwrap().exit_layer,
            3
        );
    }

    #[test]
    fn entropy_cases() {
        assert!(entropy_step(&slc(&[1.0, 0.0]), 1e-6).is_halt());
        assert!(!entropy_step(&slc(&[0.5, 0.5]), 0.5).is_halt());
        for p in [0.05, 0.2, 0.35, 0.5] {
            let h = -(p * f64::ln(p) + (1.0 - p) * f64::ln(1.0 - p));
            let d = slc(&[p, 1.0 - p]);
            assert!(entropy_step(&d, h + 1e-9).is_halt());
            assert!(!entropy_step(&d, h - 1e-9).is_halt());
        }
    }

    #[test]
    fn maxprob_cases() {
        assert!(maxprob_step(&slc(&[0.9, 0.1]), 0.8).is_halt());
        assert!(!maxprob_step(&slc(&[0.25; 4]), 0.3).is_halt());
        assert!(!maxprob_step(&slc(&[0.75, 0.25]), 0.75).is_halt());
        let m = ProbDist::mlc_from_probs(&[0.95, 0.3]).unwrap();
        assert!(!maxprob_step(&m, 0.7).is_halt());
        assert!(maxprob_step(&m, 0.69).is_halt());
    }

    #[test]
    fn learned_cases() {
        assert!(!learned_confidence_step(0.5, 0.5).is_halt());
        assert!(!learned_confidence_step(0.999, 1.0).is_halt());
        assert!(learned_confidence_step(0.7, 0.6).is_halt());
    }

    #[test]
    fn fixed_exit_layer() {
        let mut f = fixed_exit(3);
        let t = replay(&mut f, &stream(vec![slc(&[0.5, 0.5]); 12])).unwrap();
        assert_eq!(t.exit_layer, 3);
        assert!(PolicySpec::Fixed { layer: 13 }.build(12).is_err());
        assert!(PolicySpec::Fixed { layer: 0 }.build(12).is_err());
    }

    #[test]
    fn trace_has_single_halt_at_end() {
        let mut p = Pabee::new(1).unwrap();
        let t = replay(&mut p, &stream(vec![slc(&[0.9, 0.1]); 4])).unwrap();
        let halts: Vec<_> = t.entries.iter().filter(|e| e.decision.is_halt()).collect();
        assert_eq!(halts.len(), 1);
        assert_eq!(halts[0].layer, t.exit_layer);
        assert_eq!(t.entries.last().unwrap().layer, t.exit_layer);
    }

    #[test]
    fn spec_rejects_bad_parameters() {
        assert!(PolicySpec::Pabee { patience: 0 }.build(6).is_err());
        assert!(PolicySpec::Entropy {
            threshold: f64::NAN
        }
        .build(6)
        .is_err());
    }
}
