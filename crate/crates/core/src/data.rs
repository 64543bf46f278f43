//! Datasets, whitespace vocabulary, JSONL I/O and the synthetic easy/hard tasks.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TaskKind;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Single(usize),
    /// Sorted, deduplicated label indices.
    Multi(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: TaskKind,
    pub n_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(task: TaskKind, n_classes: usize, examples: Vec<Example>) -> Result<Self> {
        let ds = Self {
            task,
            n_classes,
            examples,
        };
        for (i, ex) in ds.examples.iter().enumerate() {
            ds.check_label(&ex.label)
                .map_err(|msg| Error::Data { line: i + 1, msg })?;
        }
        Ok(ds)
    }

    fn check_label(&self, label: &Label) -> std::result::Result<(), String> {
        match (self.task, label) {
            (TaskKind::Slc, Label::Single(c)) if *c < self.n_classes => Ok(()),
            (TaskKind::Slc, Label::Single(c)) => Err(format!(
                "label {c} out of range for {} classes",
                self.n_classes
            )),
            (TaskKind::Mlc, Label::Multi(ls)) => match ls.iter().find(|&&l| l >= self.n_classes) {
                Some(l) => Err(format!(
                    "label {l} out of range for {} labels",
                    self.n_classes
                )),
                None => Ok(()),
            },
            (task, _) => Err(format!("label kind does not match task {task}")),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Stable content hash (hex, 16 chars).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{}:{}\n", self.task, self.n_classes));
        for ex in &self.examples {
            h.update(to_jsonl_line(ex).as_bytes());
            h.update(b"\n");
        }
        hex16(&h.finalize())
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Multi-label targets as k Bernoulli indicators.
pub fn binarize_mlc(labels: &[usize], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for &l in labels {
        if l < k {
            out[l] = 1.0;
        }
    }
    out
}

/// A dataset after tokenization, ready for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<usize>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDataset {
    pub task: TaskKind,
    pub n_classes: usize,
    pub examples: Vec<EncodedExample>,
    /// Hash of the source dataset.
    pub source_hash: String,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

impl Dataset {
    pub fn encode(&self, vocab: &Vocab, max_len: usize) -> EncodedDataset {
        EncodedDataset {
            task: self.task,
            n_classes: self.n_classes,
            examples: self
                .examples
                .iter()
                .map(|ex| EncodedExample {
                    tokens: vocab.encode(&ex.text, max_len),
                    label: ex.label.clone(),
                })
                .collect(),
            source_hash: self.hash(),
        }
    }
}

// ── JSONL ───────────────────────────────────────────────────────────

fn to_jsonl_line(ex: &Example) -> String {
    let v = match &ex.label {
        Label::Single(c) => serde_json::json!({ "text": ex.text, "label": c }),
        Label::Multi(ls) => serde_json::json!({ "text": ex.text, "labels": ls }),
    };
    v.to_string()
}

pub fn write_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in &ds.examples {
        writeln!(w, "{}", to_jsonl_line(ex))?;
    }
    w.flush()?;
    Ok(())
}

fn parse_line(line: &str, task: TaskKind) -> std::result::Result<Example, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = v.as_object().ok_or("record is not a JSON object")?;
    let text = obj
        .get("text")
        .and_then(Value::as_str)
        .ok_or("missing string field \"text\"")?
        .to_string();
    let as_index = |x: &Value| -> std::result::Result<usize, String> {
        x.as_u64()
            .map(|u| u as usize)
            .ok_or_else(|| format!("label {x} is not a non-negative integer"))
    };
    let label = match task {
        TaskKind::Slc => {
            if obj.contains_key("labels") {
                return Err("single-label record must use \"label\", not \"labels\"".into());
            }
            Label::Single(as_index(
                obj.get("label").ok_or("missing field \"label\"")?,
            )?)
        }
        TaskKind::Mlc => {
            if obj.contains_key("label") {
                return Err("multi-label record must use \"labels\", not \"label\"".into());
            }
            let arr = obj
                .get("labels")
                .and_then(Value::as_array)
                .ok_or("missing array field \"labels\"")?;
            let mut ls = arr
                .iter()
                .map(as_index)
                .collect::<std::result::Result<Vec<_>, _>>()?;
            ls.sort_unstable();
            ls.dedup();
            Label::Multi(ls)
        }
    };
    Ok(Example { text, label })
}

/// Reads one record per line; blank lines are skipped.
pub fn load_jsonl(path: &Path, task: TaskKind, n_classes: usize) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut ds = Dataset {
        task,
        n_classes,
        examples: Vec::new(),
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_line(&line, task).map_err(|msg| Error::Data { line: i + 1, msg })?;
        ds.check_label(&ex.label)
            .map_err(|msg| Error::Data { line: i + 1, msg })?;
        ds.examples.push(ex);
    }
    Ok(ds)
}

// ── Vocabulary ──────────────────────────────────────────────────────

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const CLS: usize = 2;
    pub const RESERVED: [&'static str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

    /// Builds a vocabulary from the non-reserved tokens, in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all: Vec<String> = Self::RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens: all, index }
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[Self::RESERVED.len()..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[CLS]` followed by token ids, truncated to `max_len` ids in total.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        std::iter::once(Self::CLS)
            .chain(tokenize(text).iter().map(|t| self.id(t)))
            .take(max_len)
            .collect()
    }

    /// Inverse of [`Vocab::encode`] for in-vocabulary text, dropping `[CLS]`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != Self::CLS)
            .map(|&i| {
                self.token(i)
                    .unwrap_or(Self::RESERVED[Self::UNK])
                    .to_string()
            })
            .collect()
    }

    /// One token per line; line `i` holds id `i + 3`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in self.entries() {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let tokens = reader.lines().collect::<std::io::Result<Vec<_>>>()?;
        Ok(Self::from_tokens(tokens))
    }
}

/// Keeps the most frequent tokens (ties broken lexicographically) so that the
/// vocabulary, reserved ids included, has at most `max_size` entries.
pub fn build_vocab(ds: &Dataset, max_size: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for ex in &ds.examples {
        for t in tokenize(&ex.text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let keep = max_size.saturating_sub(Vocab::RESERVED.len());
    Vocab::from_tokens(ranked.into_iter().take(keep).map(|(t, _)| t).collect())
}

// ── Synthetic tasks ─────────────────────────────────────────────────

/// Parameters of the synthetic easy/hard generator.
///
/// Easy single-label examples carry one class keyword (`key{c}`). Hard ones
/// carry a cue pair `x{i}`, `y{j}` with `c = (i + j) mod k`, so neither token
/// alone determines the class. In the multi-label task an easy example marks
/// each present label with `key{j}`; a hard one needs both `x{j}` and `y{j}`,
/// and absent labels may contribute a lone half as a distractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub task: TaskKind,
    pub k: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub easy_fraction: f64,
    /// Probability that a single-label example's label is replaced at random
    /// (multi-label: each indicator flipped).
    pub noise: f64,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    pub n_fillers: usize,
    /// Chance that each label is present in a multi-label example.
    pub label_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::Slc,
            k: 4,
            n_train: 1000,
            n_dev: 200,
            n_test: 500,
            easy_fraction: 0.7,
            noise: 0.0,
            seed: 0,
            min_len: 5,
            max_len: 9,
            n_fillers: 30,
            label_rate: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSplits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let min_k = match self.task {
            TaskKind::Slc => 2,
            TaskKind::Mlc => 1,
        };
        if self.k < min_k {
            return Err(Error::config(format!("k must be at least {min_k}")));
        }
        if !(0.0..=1.0).contains(&self.easy_fraction)
            || !(0.0..=1.0).contains(&self.noise)
            || !(0.0..=1.0).contains(&self.label_rate)
        {
            return Err(Error::config(
                "easy_fraction, noise and label_rate must lie in [0, 1]",
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.n_fillers == 0 {
            return Err(Error::config(
                "need 0 < min_len <= max_len and at least one filler",
            ));
        }
        Ok(())
    }

    /// Longest text (in tokens) the generator can emit.
    pub fn max_tokens(&self) -> usize {
        match self.task {
            TaskKind::Slc => self.max_len.max(2),
            TaskKind::Mlc => self.max_len.max(2 * self.k),
        }
    }
}

fn place(rng: &mut ChaCha8Rng, fillers: usize, len: usize, cues: Vec<String>) -> String {
    let len = len.max(cues.len());
    let mut slots: Vec<String> = (0..len - cues.len())
        .map(|_| format!("w{}", rng.gen_range(0..fillers)))
        .collect();
    for cue in cues {
        let pos = rng.gen_range(0..=slots.len());
        slots.insert(pos, cue);
    }
    slots.join(" ")
}

fn generate_split(spec: &SyntheticSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let n_easy = (spec.easy_fraction * n as f64).round() as usize;
    let mut easy: Vec<bool> = (0..n).map(|i| i < n_easy).collect();
    easy.shuffle(rng);
    let mut examples = Vec::with_capacity(n);
    match spec.task {
        TaskKind::Slc => {
            let mut labels: Vec<usize> = (0..n).map(|i| i % spec.k).collect();
            labels.shuffle(rng);
            for (&label, &is_easy) in labels.iter().zip(&easy) {
                let cues = if is_easy {
                    vec![format!("key{label}")]
                } else {
                    let i = rng.gen_range(0..spec.k);
                    let j = (label + spec.k - i) % spec.k;
                    vec![format!("x{i}"), format!("y{j}")]
                };
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let text = place(rng, spec.n_fillers, len, cues);
                let mut label = label;
                if rng.gen::<f64>() < spec.noise {
                    label = rng.gen_range(0..spec.k);
                }
                examples.push(Example {
                    text,
                    label: Label::Single(label),
                });
            }
        }
        TaskKind::Mlc => {
            for &is_easy in &easy {
                let present: Vec<usize> = (0..spec.k)
                    .filter(|_| rng.gen::<f64>() < spec.label_rate)
                    .collect();
                let mut cues = Vec::new();
                for j in 0..spec.k {
                    let on = present.contains(&j);
                    if is_easy {
                        if on {
                            cues.push(format!("key{j}"));
                        }
                    } else if on {
                        cues.push(format!("x{j}"));
                        cues.push(format!("y{j}"));
                    } else if rng.gen::<f64>() < 0.5 {
                        cues.push(format!("{}{j}", if rng.gen::<bool>() { "x" } else { "y" }));
                    }
                }
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let text = place(rng, spec.n_fillers, len, cues);
                let mut labels = present;
                if spec.noise > 0.0 {
                    let mut flipped = Vec::new();
                    for j in 0..spec.k {
                        let on = labels.contains(&j) != (rng.gen::<f64>() < spec.noise);
                        if on {
                            flipped.push(j);
                        }
                    }
                    labels = flipped;
                }
                examples.push(Example {
                    text,
                    label: Label::Multi(labels),
                });
            }
        }
    }
    Dataset::new(spec.task, spec.k, examples)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSplits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(SyntheticSplits {
        train: generate_split(spec, spec.n_train, &mut rng)?,
        dev: generate_split(spec, spec.n_dev, &mut rng)?,
        test: generate_split(spec, spec.n_test, &mut rng)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slc_ds(texts: &[&str]) -> Dataset {
        Dataset::new(
            TaskKind::Slc,
            2,
            texts
                .iter()
                .map(|t| Example {
                    text: t.to_string(),
                    label: Label::Single(0),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn binarize_cases() {
        assert_eq!(binarize_mlc(&[], 3), vec![0.0, 0.0, 0.0]);
        assert_eq!(binarize_mlc(&[0, 2], 3), vec![1.0, 0.0, 1.0]);
        assert_eq!(binarize_mlc(&[0, 1, 2], 3), vec![1.0; 3]);
    }

    #[test]
    fn vocab_basics() {
        let v = build_vocab(&slc_ds(&["a a b"]), 10);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("zzz"), Vocab::UNK);
        assert_eq!(v.encode("A b c", 10), vec![Vocab::CLS, 3, 4, Vocab::UNK]);
    }

    #[test]
    fn vocab_tie_break_is_lexicographic() {
        let v = build_vocab(&slc_ds(&["q b m b q m"]), 5);
        assert_eq!(v.token(3), Some("b"));
        assert_eq!(v.token(4), Some("m"));
        assert_eq!(v.id("q"), Vocab::UNK);
    }

    #[test]
    fn vocab_file_round_trip_and_decode() {
        let v = build_vocab(&slc_ds(&["the cat sat on the mat"]), 50);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.write(&path).unwrap();
        let back = Vocab::read(&path).unwrap();
        assert_eq!(back.len(), v.len());
        for t in ["the", "cat", "mat"] {
            assert_eq!(back.id(t), v.id(t));
        }
        let ids = v.encode("the cat sat", 16);
        assert_eq!(v.decode(&ids), vec!["the", "cat", "sat"]);
    }

    #[test]
    fn jsonl_errors_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_jsonl(&empty, TaskKind::Slc, 2).unwrap().is_empty());

        let wrong = dir.path().join("wrong.jsonl");
        std::fs::write(
            &wrong,
            "{\"text\":\"a\",\"label\":1}\n{\"text\":\"b\",\"labels\":[1]}\n",
        )
        .unwrap();
        match load_jsonl(&wrong, TaskKind::Slc, 2) {
            Err(Error::Data { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected data error, got {other:?}"),
        }

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"text\":\"a\",\"label\":5}\n").unwrap();
        assert!(matches!(
            load_jsonl(&bad, TaskKind::Slc, 2),
            Err(Error::Data { line: 1, .. })
        ));

        std::fs::write(&bad, "not json\n").unwrap();
        assert!(matches!(
            load_jsonl(&bad, TaskKind::Slc, 2),
            Err(Error::Data { line: 1, .. })
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let spec = SyntheticSpec {
            task: TaskKind::Mlc,
            k: 5,
            n_train: 40,
            n_dev: 0,
            n_test: 0,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap().train;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&ds, &path).unwrap();
        assert_eq!(load_jsonl(&path, TaskKind::Mlc, 5).unwrap(), ds);
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.hash(), b.train.hash());
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train.hash(), c.train.hash());
    }

    #[test]
    fn synthetic_labels_balanced() {
        let spec = SyntheticSpec {
            k: 2,
            n_train: 100,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap().train;
        let ones = ds
            .examples
            .iter()
            .filter(|e| e.label == Label::Single(1))
            .count();
        assert!((ones as i64 - 50).abs() <= 10, "{ones}");
    }

    #[test]
    fn all_easy_is_linearly_separable_by_keywords() {
        let spec = SyntheticSpec {
            easy_fraction: 1.0,
            k: 6,
            n_train: 300,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap().train;
        // bag-of-words linear scorer with unit weight on key{c} for class c
        let correct = ds
            .examples
            .iter()
            .filter(|ex| {
                let toks = tokenize(&ex.text);
                let scores: Vec<usize> = (0..spec.k)
                    .map(|c| toks.iter().filter(|t| **t == format!("key{c}")).count())
                    .collect();
                let best = (0..spec.k)
                    .max_by_key(|&c| (scores[c], std::cmp::Reverse(c)))
                    .unwrap();
                ex.label == Label::Single(best)
            })
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn hard_examples_use_cue_pairs() {
        let spec = SyntheticSpec {
            easy_fraction: 0.0,
            k: 4,
            n_train: 200,
            ..SyntheticSpec::default()
        };
        for ex in &generate_synthetic(&spec).unwrap().train.examples {
            let toks = tokenize(&ex.text);
            assert!(!toks.iter().any(|t| t.starts_with("key")));
            let find = |p: char| -> usize {
                toks.iter().find(|t| t.starts_with(p)).unwrap()[1..]
                    .parse()
                    .unwrap()
            };
            assert_eq!(ex.label, Label::Single((find('x') + find('y')) % 4));
        }
    }

    #[test]
    fn easy_fraction_is_respected() {
        let spec = SyntheticSpec {
            easy_fraction: 0.7,
            n_train: 200,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap().train;
        let easy = ds
            .examples
            .iter()
            .filter(|e| e.text.contains("key"))
            .count();
        assert_eq!(easy, 140);
    }
}
