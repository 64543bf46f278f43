//! Evaluation, sweeps, speed/score comparison and result emission.
//!
//! Cost is counted in executed encoder layers, so exiting at layer `j` of `n`
//! saves `1 - j/n` of the compute. Speedup is the mean of that ratio over
//! samples.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedDataset, Label};
use crate::error::{Error, Result};
use crate::model::{MultiExitModel, PredictionStream, TaskKind};
use crate::policy::{replay, PolicySpec};
use crate::similarity::{Measure, ProbDist, SimilarityMeasure};

/// Running counts for accuracy and micro-F1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub n: usize,
    /// Exact matches (multi-label: whole label set).
    pub correct: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub(crate) fn normalized(ls: &[usize]) -> Vec<usize> {
    ls.iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

impl Metrics {
    pub fn add(&mut self, p: &ProbDist, target: &Label) {
        self.n += 1;
        match target {
            Label::Single(t) => {
                if p.argmax() == *t {
                    self.correct += 1;
                }
            }
            Label::Multi(ls) => {
                let gold = normalized(ls);
                let pred = p.label_set();
                if pred == gold {
                    self.correct += 1;
                }
                let hits = pred.iter().filter(|l| gold.contains(l)).count();
                self.tp += hits;
                self.fp += pred.len() - hits;
                self.fn_ += gold.len() - hits;
            }
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }

    /// Equals accuracy for single-label tasks; 0 when nothing is predicted or gold.
    pub fn micro_f1(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::Slc => self.accuracy(),
            TaskKind::Mlc => {
                let denom = 2 * self.tp + self.fp + self.fn_;
                if denom == 0 {
                    0.0
                } else {
                    2.0 * self.tp as f64 / denom as f64
                }
            }
        }
    }

    /// Headline score: accuracy (single-label) or micro-F1 (multi-label).
    pub fn score(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::Slc => self.accuracy(),
            TaskKind::Mlc => self.micro_f1(task),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub policy: PolicySpec,
    /// Single-label accuracy, or subset accuracy for multi-label.
    pub accuracy: f64,
    pub micro_f1: f64,
    pub speedup: f64,
    pub mean_exit_layer: f64,
    /// Exit counts for layers `1..=n`.
    pub histogram: Vec<usize>,
    pub n_samples: usize,
}

impl EvalResult {
    pub fn score(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::Slc => self.accuracy,
            TaskKind::Mlc => self.micro_f1,
        }
    }
}

struct Accumulator {
    policy: PolicySpec,
    task: TaskKind,
    metrics: Metrics,
    histogram: Vec<usize>,
    layer_sum: usize,
}

impl Accumulator {
    fn new(policy: PolicySpec, task: TaskKind, n_layers: usize) -> Self {
        Self {
            policy,
            task,
            metrics: Metrics::default(),
            histogram: vec![0; n_layers],
            layer_sum: 0,
        }
    }

    fn add(&mut self, prediction: &ProbDist, exit_layer: usize, target: &Label) {
        self.metrics.add(prediction, target);
        self.histogram[exit_layer - 1] += 1;
        self.layer_sum += exit_layer;
    }

    fn finish(self) -> EvalResult {
        let n = self.metrics.n;
        let n_layers = self.histogram.len();
        let (speedup, mean_exit_layer) = if n == 0 {
            (0.0, 0.0)
        } else {
            let total = (n * n_layers) as f64;
            (
                1.0 - self.layer_sum as f64 / total,
                self.layer_sum as f64 / n as f64,
            )
        };
        EvalResult {
            policy: self.policy,
            accuracy: self.metrics.accuracy(),
            micro_f1: self.metrics.micro_f1(self.task),
            speedup,
            mean_exit_layer,
            histogram: self.histogram,
            n_samples: n,
        }
    }
}

fn check_task(model: &MultiExitModel, data: &EncodedDataset) -> Result<()> {
    if model.task_kind() != data.task || model.config().n_classes != data.n_classes {
        return Err(Error::config(format!(
            "dataset ({} with {} classes) does not match model ({} with {} classes)",
            data.task,
            data.n_classes,
            model.task_kind(),
            model.config().n_classes
        )));
    }
    Ok(())
}

/// Runs a true layer-by-layer early-exit pass for every sample.
pub fn evaluate(
    model: &MultiExitModel,
    data: &EncodedDataset,
    spec: &PolicySpec,
) -> Result<EvalResult> {
    check_task(model, data)?;
    let mut policy = spec.build(model.n_layers())?;
    let mut acc = Accumulator::new(*spec, data.task, model.n_layers());
    for ex in &data.examples {
        let out = model.forward_early_exit(&ex.tokens, policy.as_mut())?;
        acc.add(&out.prediction, out.exit_layer, &ex.label);
    }
    Ok(acc.finish())
}

/// Every exit's prediction for every sample, computed once so that many
/// policies can be replayed without rerunning the encoder.
#[derive(Clone, Debug)]
pub struct StreamCache {
    pub task: TaskKind,
    pub n_layers: usize,
    pub streams: Vec<PredictionStream>,
    pub labels: Vec<Label>,
}

impl StreamCache {
    pub fn build(model: &MultiExitModel, data: &EncodedDataset) -> Result<Self> {
        check_task(model, data)?;
        let streams = data
            .examples
            .iter()
            .map(|ex| model.forward_full(&ex.tokens))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            task: data.task,
            n_layers: model.n_layers(),
            streams,
            labels: data.examples.iter().map(|ex| ex.label.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    /// Score of the last exit for every sample.
    pub fn full_depth_score(&self) -> f64 {
        let mut m = Metrics::default();
        for (s, l) in self.streams.iter().zip(&self.labels) {
            m.add(&s.probs[self.n_layers - 1], l);
        }
        m.score(self.task)
    }
}

/// Same result as [`evaluate`], replayed from cached predictions.
pub fn evaluate_cached(cache: &StreamCache, spec: &PolicySpec) -> Result<EvalResult> {
    let mut policy = spec.build(cache.n_layers)?;
    let mut acc = Accumulator::new(*spec, cache.task, cache.n_layers);
    for (stream, label) in cache.streams.iter().zip(&cache.labels) {
        let trace = replay(policy.as_mut(), stream)?;
        acc.add(&stream.probs[trace.exit_layer - 1], trace.exit_layer, label);
    }
    Ok(acc.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<EvalResult>,
    pub n_layers: usize,
    pub seed: u64,
    pub model_hash: String,
    pub data_hash: String,
}

/// One row per grid point, stably sorted by speedup.
pub fn sweep(cache: &StreamCache, grid: &[PolicySpec]) -> Result<Vec<EvalResult>> {
    let mut rows = grid
        .iter()
        .map(|spec| evaluate_cached(cache, spec))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.speedup.total_cmp(&b.speedup));
    Ok(rows)
}

/// `thre x P0` grid for flexible patience.
pub fn fpabee_grid(
    measure: Measure,
    kl_mode: bool,
    thres: &[f64],
    patiences: &[u32],
) -> Vec<PolicySpec> {
    patiences
        .iter()
        .flat_map(|&patience| {
            thres.iter().map(move |&thre| PolicySpec::Fpabee {
                measure,
                thre,
                patience,
                kl_mode,
            })
        })
        .collect()
}

/// Non-dominated `(speedup, score)` points in ascending speedup order.
pub fn pareto_curve(rows: &[EvalResult], task: TaskKind) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.speedup, r.score(task))).collect();
    // Highest score first within equal speedup, then sweep from the fast end.
    pts.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for p in pts {
        if p.1 > best {
            out.push(p);
            best = p.1;
        }
    }
    out.reverse();
    out
}

// ── CSV ─────────────────────────────────────────────────────────────

fn header(n_layers: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "policy",
        "measure",
        "thre",
        "patience",
        "accuracy",
        "micro_f1",
        "speedup",
        "mean_exit_layer",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=n_layers).map(|j| format!("hist_{j}")));
    h.extend(
        ["seed", "model_hash", "data_hash"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

/// `(measure, thre, patience)` columns for a policy.
fn policy_columns(spec: &PolicySpec) -> (String, String, String) {
    match *spec {
        PolicySpec::Fpabee {
            measure,
            thre,
            patience,
            kl_mode,
        } => (
            format!("{measure}{}", if kl_mode { "-kl" } else { "" }),
            thre.to_string(),
            patience.to_string(),
        ),
        PolicySpec::Pabee { patience } => (String::new(), String::new(), patience.to_string()),
        PolicySpec::Entropy { threshold }
        | PolicySpec::Maxprob { threshold }
        | PolicySpec::Learned { threshold } => {
            (String::new(), threshold.to_string(), String::new())
        }
        PolicySpec::Fixed { layer } => (String::new(), String::new(), layer.to_string()),
    }
}

fn csv_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Data {
        line,
        msg: msg.into(),
    }
}

fn parse_policy(
    line: usize,
    name: &str,
    measure: &str,
    thre: &str,
    patience: &str,
) -> Result<PolicySpec> {
    let f = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| csv_err(line, format!("bad number '{s}'")))
    };
    let u = |s: &str| {
        s.parse::<u32>()
            .map_err(|_| csv_err(line, format!("bad integer '{s}'")))
    };
    Ok(match name {
        "fpabee" => {
            let (m, kl_mode) = match measure.strip_suffix("-kl") {
                Some(m) => (m, true),
                None => (measure, false),
            };
            PolicySpec::Fpabee {
                measure: m
                    .parse()
                    .map_err(|_| csv_err(line, format!("bad measure '{measure}'")))?,
                thre: f(thre)?,
                patience: u(patience)?,
                kl_mode,
            }
        }
        "pabee" => PolicySpec::Pabee {
            patience: u(patience)?,
        },
        "entropy" => PolicySpec::Entropy {
            threshold: f(thre)?,
        },
        "maxprob" => PolicySpec::Maxprob {
            threshold: f(thre)?,
        },
        "learned" => PolicySpec::Learned {
            threshold: f(thre)?,
        },
        "fixed" => PolicySpec::Fixed {
            layer: u(patience)? as usize,
        },
        other => return Err(csv_err(line, format!("unknown policy '{other}'"))),
    })
}

pub fn write_csv<W: std::io::Write>(result: &SweepResult, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header(result.n_layers))?;
    for r in &result.rows {
        if r.histogram.len() != result.n_layers {
            return Err(Error::contract("histogram length differs from n_layers"));
        }
        let (measure, thre, patience) = policy_columns(&r.policy);
        let mut rec = vec![
            r.policy.name().to_string(),
            measure,
            thre,
            patience,
            r.accuracy.to_string(),
            r.micro_f1.to_string(),
            r.speedup.to_string(),
            r.mean_exit_layer.to_string(),
        ];
        rec.extend(r.histogram.iter().map(|c| c.to_string()));
        rec.extend([
            result.seed.to_string(),
            result.model_hash.clone(),
            result.data_hash.clone(),
        ]);
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the sweep table; an empty sweep yields only the header.
pub fn emit_csv(result: &SweepResult, path: &Path) -> Result<()> {
    write_csv(result, fs::File::create(path)?)
}

pub fn read_csv(path: &Path) -> Result<SweepResult> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let n_layers = headers.iter().filter(|h| h.starts_with("hist_")).count();
    let expected = header(n_layers);
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(csv_err(1, "unexpected CSV header"));
    }
    let mut result = SweepResult {
        rows: Vec::new(),
        n_layers,
        seed: 0,
        model_hash: String::new(),
        data_hash: String::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let f = |j: usize| {
            rec[j]
                .parse::<f64>()
                .map_err(|_| csv_err(line, format!("bad number '{}'", &rec[j])))
        };
        let policy = parse_policy(line, &rec[0], &rec[1], &rec[2], &rec[3])?;
        let histogram = (0..n_layers)
            .map(|j| {
                rec[8 + j]
                    .parse::<usize>()
                    .map_err(|_| csv_err(line, "bad histogram count"))
            })
            .collect::<Result<Vec<_>>>()?;
        let tail = 8 + n_layers;
        result.seed = rec[tail].parse().map_err(|_| csv_err(line, "bad seed"))?;
        result.model_hash = rec[tail + 1].to_string();
        result.data_hash = rec[tail + 2].to_string();
        result.rows.push(EvalResult {
            policy,
            accuracy: f(4)?,
            micro_f1: f(5)?,
            speedup: f(6)?,
            mean_exit_layer: f(7)?,
            n_samples: histogram.iter().sum(),
            histogram,
        });
    }
    Ok(result)
}

/// One row per configuration: `config,n_samples,hist_1..hist_n`.
pub fn emit_histogram(result: &SweepResult, path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    let mut h = vec!["config".to_string(), "n_samples".to_string()];
    h.extend((1..=result.n_layers).map(|j| format!("hist_{j}")));
    out.write_record(&h)?;
    for r in &result.rows {
        let mut rec = vec![r.policy.to_string(), r.n_samples.to_string()];
        rec.extend(r.histogram.iter().map(|c| c.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// A labelled `(speedup, score)` polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Speedup on x, score on y, both on [0, 1].
pub fn render_svg(curves: &[Curve]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let x = |v: f64| pad + v.clamp(0.0, 1.0) * (w - 2.0 * pad);
    let y = |v: f64| h - pad - v.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{} {} L{} {} L{} {}" fill="none" stroke="black"/>"#,
        x(0.0),
        y(1.0),
        x(0.0),
        y(0.0),
        x(1.0),
        y(0.0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">speedup</text>"#,
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">score</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&(a, b)| format!("{:.2},{:.2}", x(a), y(b)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            w - pad - 100.0,
            pad + 14.0 * i as f64,
            escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn emit_svg(curves: &[Curve], path: &Path) -> Result<()> {
    fs::write(path, render_svg(curves))?;
    Ok(())
}

// ── Matched-speedup comparison ──────────────────────────────────────

/// A policy family with one scalar knob.
#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    /// Searches `thre` separately at each listed patience and keeps the
    /// best-scoring point that lands in the window.
    Fpabee {
        measure: Measure,
        kl_mode: bool,
        patiences: Vec<u32>,
    },
    Pabee,
    Entropy,
    Maxprob,
    Learned,
    Fixed,
}

impl Family {
    pub fn label(&self) -> String {
        match self {
            Family::Fpabee {
                measure, kl_mode, ..
            } => {
                format!("fpabee-{measure}{}", if *kl_mode { "-kl" } else { "" })
            }
            Family::Pabee => "pabee".into(),
            Family::Entropy => "entropy".into(),
            Family::Maxprob => "maxprob".into(),
            Family::Learned => "learned".into(),
            Family::Fixed => "fixed".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub family: String,
    /// `None` when no knob setting lands within tolerance of the target.
    pub result: Option<EvalResult>,
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.retain(|x| x.is_finite());
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Knob settings ordered so that speedup is non-decreasing along the list.
fn candidates(cache: &StreamCache, family: &Family, patience: u32) -> Result<Vec<PolicySpec>> {
    let n = cache.n_layers;
    let all_probs = || cache.streams.iter().flat_map(|s| s.probs.iter());
    Ok(match family {
        Family::Fpabee {
            measure, kl_mode, ..
        } => {
            let sim = SimilarityMeasure::new(*measure).with_kl_mode(*kl_mode);
            let mut scores = Vec::new();
            for s in &cache.streams {
                for pair in s.probs.windows(2) {
                    scores.push(sim.score(&pair[0], &pair[1])?);
                }
            }
            let mut thres = vec![0.0];
            thres.extend(sorted_unique(scores).into_iter().map(f64::next_up));
            thres.push(f64::INFINITY);
            thres.dedup();
            fpabee_grid(*measure, *kl_mode, &thres, &[patience])
        }
        Family::Entropy => {
            let mut t = vec![0.0];
            t.extend(
                sorted_unique(all_probs().map(ProbDist::entropy).collect())
                    .into_iter()
                    .map(f64::next_up),
            );
            t.dedup();
            t.into_iter()
                .map(|threshold| PolicySpec::Entropy { threshold })
                .collect()
        }
        Family::Maxprob | Family::Learned => {
            let values = if *family == Family::Maxprob {
                all_probs().map(ProbDist::max_prob).collect()
            } else {
                cache
                    .streams
                    .iter()
                    .flat_map(|s| s.confidences.iter().copied())
                    .collect()
            };
            let mut t = vec![f64::INFINITY];
            t.extend(sorted_unique(values).into_iter().rev().map(f64::next_down));
            t.dedup();
            t.into_iter()
                .map(|threshold| match family {
                    Family::Maxprob => PolicySpec::Maxprob { threshold },
                    _ => PolicySpec::Learned { threshold },
                })
                .collect()
        }
        Family::Pabee => (1..=n as u32)
            .rev()
            .map(|patience| PolicySpec::Pabee { patience })
            .collect(),
        Family::Fixed => (1..=n)
            .rev()
            .map(|layer| PolicySpec::Fixed { layer })
            .collect(),
    })
}

/// Binary search over a monotone candidate list for the point closest to
/// `target`; `None` if that point is farther than `tol`.
fn search(
    cache: &StreamCache,
    cands: &[PolicySpec],
    target: f64,
    tol: f64,
) -> Result<Option<EvalResult>> {
    if cands.is_empty() {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0usize, cands.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if evaluate_cached(cache, &cands[mid])?.speedup < target {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let mut best: Option<EvalResult> = None;
    for i in [lo.checked_sub(1), Some(lo)].into_iter().flatten() {
        if i >= cands.len() {
            continue;
        }
        let r = evaluate_cached(cache, &cands[i])?;
        let closer = best
            .as_ref()
            .is_none_or(|b| (r.speedup - target).abs() < (b.speedup - target).abs());
        if closer {
            best = Some(r);
        }
    }
    Ok(best.filter(|r| (r.speedup - target).abs() <= tol + 1e-12))
}

/// For each family, the point whose speedup is within `tol` of `target`.
pub fn compare_policies(
    cache: &StreamCache,
    target: f64,
    families: &[Family],
    tol: f64,
) -> Result<Vec<CompareRow>> {
    families
        .iter()
        .map(|family| {
            let result = match family {
                Family::Fpabee { patiences, .. } => {
                    if patiences.is_empty() {
                        return Err(Error::config(
                            "fpabee comparison needs at least one patience",
                        ));
                    }
                    let mut best: Option<EvalResult> = None;
                    for &p in patiences {
                        let cands = candidates(cache, family, p)?;
                        if let Some(r) = search(cache, &cands, target, tol)? {
                            if best
                                .as_ref()
                                .is_none_or(|b| r.score(cache.task) > b.score(cache.task))
                            {
                                best = Some(r);
                            }
                        }
                    }
                    best
                }
                _ => search(cache, &candidates(cache, family, 0)?, target, tol)?,
            };
            Ok(CompareRow {
                family: family.label(),
                result,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn stream(probs: Vec<ProbDist>) -> PredictionStream {
        let n = probs.len();
        PredictionStream {
            probs,
            confidences: (0..n).map(|i| 0.2 + 0.05 * i as f64).collect(),
            hidden: None,
        }
    }

    /// n-layer streams where the prediction settles on the label after `settle` layers.
    fn synthetic_cache(n: usize, settles: &[usize]) -> StreamCache {
        let streams = settles
            .iter()
            .map(|&settle| {
                let probs = (1..=n)
                    .map(|j| {
                        if j >= settle {
                            let c = 0.6 + 0.3 * (j - settle) as f64 / n as f64;
                            ProbDist::Slc(vec![c, 1.0 - c])
                        } else {
                            let c = 0.3 + 0.05 * j as f64;
                            ProbDist::Slc(vec![c, 1.0 - c])
                        }
                    })
                    .collect();
                stream(probs)
            })
            .collect();
        StreamCache {
            task: TaskKind::Slc,
            n_layers: n,
            streams,
            labels: vec![Label::Single(0); settles.len()],
        }
    }

    #[test]
    fn fixed_exit_speedup_is_layer_proportional() {
        let cache = synthetic_cache(12, &[1, 4, 7, 10, 12]);
        let r3 = evaluate_cached(&cache, &PolicySpec::Fixed { layer: 3 }).unwrap();
        let r6 = evaluate_cached(&cache, &PolicySpec::Fixed { layer: 6 }).unwrap();
        let r12 = evaluate_cached(&cache, &PolicySpec::Fixed { layer: 12 }).unwrap();
        assert_eq!(r3.speedup, 0.75);
        assert_eq!(r6.speedup, 0.5);
        assert_eq!(r12.speedup, 0.0);
        assert_eq!(r12.accuracy, cache.full_depth_score());
        assert_eq!(r3.histogram.iter().sum::<usize>(), 5);
        assert_eq!(r3.histogram[2], 5);
    }

    #[test]
    fn mixed_exit_layers_average_per_sample() {
        let mut acc = Accumulator::new(PolicySpec::Fixed { layer: 1 }, TaskKind::Slc, 12);
        let p = ProbDist::Slc(vec![0.9, 0.1]);
        for j in [3, 6, 12] {
            acc.add(&p, j, &Label::Single(0));
        }
        let r = acc.finish();
        assert!((r.speedup - (0.75 + 0.5 + 0.0) / 3.0).abs() < 1e-12);
        assert!((r.speedup - (1.0 - r.mean_exit_layer / 12.0)).abs() < 1e-9);
    }

    #[test]
    fn mlc_metrics() {
        let mut m = Metrics::default();
        m.add(
            &ProbDist::mlc_from_probs(&[0.9, 0.8, 0.1]).unwrap(),
            &Label::Multi(vec![0, 2]),
        );
        m.add(
            &ProbDist::mlc_from_probs(&[0.2, 0.2, 0.2]).unwrap(),
            &Label::Multi(vec![]),
        );
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 1));
        assert_eq!(m.accuracy(), 0.5);
        assert_eq!(m.micro_f1(TaskKind::Mlc), 0.5);
        let mut empty = Metrics::default();
        empty.add(
            &ProbDist::mlc_from_probs(&[0.1]).unwrap(),
            &Label::Multi(vec![]),
        );
        assert_eq!(empty.micro_f1(TaskKind::Mlc), 0.0);
    }

    #[test]
    fn sweep_sorted_and_single_point_matches_evaluate() {
        let cache = synthetic_cache(6, &[1, 2, 3, 5, 6, 6]);
        let grid = fpabee_grid(Measure::Jskd, false, &[0.01, 0.1, 1.0], &[1, 2]);
        let rows = sweep(&cache, &grid).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.windows(2).all(|w| w[0].speedup <= w[1].speedup));
        let one = sweep(&cache, &grid[..1]).unwrap();
        assert_eq!(one[0], evaluate_cached(&cache, &grid[0]).unwrap());
    }

    #[test]
    fn pareto_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let rows: Vec<EvalResult> = (0..rng.gen_range(1..12))
                .map(|_| EvalResult {
                    policy: PolicySpec::Pabee { patience: 1 },
                    accuracy: (rng.gen_range(0..10) as f64) / 10.0,
                    micro_f1: 0.0,
                    speedup: (rng.gen_range(0..10) as f64) / 10.0,
                    mean_exit_layer: 0.0,
                    histogram: vec![],
                    n_samples: 0,
                })
                .collect();
            let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.speedup, r.accuracy)).collect();
            let mut oracle: Vec<(f64, f64)> = pts
                .iter()
                .filter(|a| {
                    !pts.iter()
                        .any(|b| b.0 >= a.0 && b.1 >= a.1 && (b.0 > a.0 || b.1 > a.1))
                })
                .copied()
                .collect();
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0));
            oracle.dedup();
            assert_eq!(pareto_curve(&rows, TaskKind::Slc), oracle);
        }
        let single = vec![EvalResult {
            policy: PolicySpec::Fixed { layer: 1 },
            accuracy: 0.4,
            micro_f1: 0.4,
            speedup: 0.2,
            mean_exit_layer: 1.0,
            histogram: vec![1],
            n_samples: 1,
        }];
        assert_eq!(pareto_curve(&single, TaskKind::Slc), vec![(0.2, 0.4)]);
    }

    #[test]
    fn csv_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let cache = synthetic_cache(4, &[1, 2, 4]);
        let mut grid = fpabee_grid(Measure::Jskd, true, &[0.1 + 0.2, f64::INFINITY], &[1]);
        grid.extend([
            PolicySpec::Pabee { patience: 2 },
            PolicySpec::Entropy { threshold: 0.3 },
            PolicySpec::Maxprob { threshold: 0.7 },
            PolicySpec::Learned {
                threshold: 1.0 / 3.0,
            },
            PolicySpec::Fixed { layer: 2 },
        ]);
        let result = SweepResult {
            rows: sweep(&cache, &grid).unwrap(),
            n_layers: 4,
            seed: 17,
            model_hash: "abc".into(),
            data_hash: "def".into(),
        };
        let path = dir.path().join("s.csv");
        emit_csv(&result, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), result);

        let empty = SweepResult {
            rows: vec![],
            ..result.clone()
        };
        emit_csv(&empty, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(
            text.trim(),
            "policy,measure,thre,patience,accuracy,micro_f1,speedup,mean_exit_layer,hist_1,hist_2,hist_3,hist_4,seed,model_hash,data_hash"
        );

        let hist = dir.path().join("h.csv");
        emit_histogram(&result, &hist).unwrap();
        let first = fs::read_to_string(&hist).unwrap();
        assert_eq!(
            first
                .lines()
                .next()
                .unwrap()
                .split(',')
                .filter(|c| c.starts_with("hist_"))
                .count(),
            4
        );

        let bad = dir.path().join("missing").join("x.csv");
        assert_eq!(emit_csv(&result, &bad).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn svg_has_one_polyline_per_curve() {
        let svg = render_svg(&[
            Curve {
                label: "a<b".into(),
                points: vec![(0.0, 0.5), (0.5, 0.9)],
            },
            Curve {
                label: "c".into(),
                points: vec![(0.1, 0.1)],
            },
        ]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn compare_targets() {
        let cache = synthetic_cache(12, &[1, 2, 3, 5, 8, 12]);
        let families = [
            Family::Fpabee {
                measure: Measure::Jskd,
                kl_mode: false,
                patiences: vec![1, 2, 3],
            },
            Family::Pabee,
            Family::Entropy,
            Family::Maxprob,
            Family::Learned,
            Family::Fixed,
        ];
        let full = cache.full_depth_score();
        for row in compare_policies(&cache, 0.0, &families, 0.02).unwrap() {
            let r = row
                .result
                .unwrap_or_else(|| panic!("{} unattainable", row.family));
            assert_eq!(r.speedup, 0.0, "{}", row.family);
            assert_eq!(r.accuracy, full);
        }
        let fixed = compare_policies(&cache, 0.5, &[Family::Fixed], 0.02).unwrap();
        assert_eq!(
            fixed[0].result.as_ref().unwrap().policy,
            PolicySpec::Fixed { layer: 6 }
        );
        // exiting at layer 1 everywhere is the ceiling
        let unreachable =
            compare_policies(&cache, 0.99, &[Family::Fixed, Family::Pabee], 0.02).unwrap();
        assert!(unreachable.iter().all(|r| r.result.is_none()));
    }

    #[test]
    fn evaluate_rejects_task_mismatch() {
        let model = MultiExitModel::new(ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 8,
            vocab_size: 10,
            max_seq_len: 6,
            ..ModelConfig::default()
        })
        .unwrap();
        let data = EncodedDataset {
            task: TaskKind::Mlc,
            n_classes: 2,
            examples: vec![],
            source_hash: String::new(),
        };
        let spec = PolicySpec::Fixed { layer: 1 };
        assert!(matches!(
            evaluate(&model, &data, &spec),
            Err(Error::Config(_))
        ));
    }
}
