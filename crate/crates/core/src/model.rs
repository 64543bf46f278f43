//! Multi-exit transformer encoder.
//!
//! Token plus learned positional embeddings feed `n` post-LN encoder blocks.
//! After every block a linear classifier reads the first (CLS) position and
//! produces that layer's prediction, and a scalar confidence head produces the
//! learned-exit signal.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ExitDecision, ExitPolicy, ExitReason, ExitTrace, LayerView};
use crate::similarity::ProbDist;
use crate::tensor::{sigmoid, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Slc,
    Mlc,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Slc => "slc",
            TaskKind::Mlc => "mlc",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slc" => Ok(TaskKind::Slc),
            "mlc" => Ok(TaskKind::Mlc),
            other => Err(Error::config(format!("unknown task kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Includes the prepended CLS token.
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub task_kind: TaskKind,
    pub seed: u64,
    /// Start every classifier and confidence head at zero, so an untrained
    /// model predicts uniformly.
    pub zero_init_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            d_model: 64,
            n_heads: 2,
            d_ff: 128,
            vocab_size: 128,
            max_seq_len: 32,
            n_classes: 2,
            task_kind: TaskKind::Slc,
            seed: 0,
            zero_init_heads: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::config("n_layers must be at least 2"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be at least 2"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::config(
                "d_ff, vocab_size and max_seq_len must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

const BLOCK_PARAMS: usize = 16;
// per-block offsets
const WQ: usize = 0;
const BQ: usize = 1;
const WK: usize = 2;
const BK: usize = 3;
const WV: usize = 4;
const BV: usize = 5;
const WO: usize = 6;
const BO: usize = 7;
const LN1_G: usize = 8;
const LN1_B: usize = 9;
const W1: usize = 10;
const B1: usize = 11;
const W2: usize = 12;
const B2: usize = 13;
const LN2_G: usize = 14;
const LN2_B: usize = 15;

/// Output of one layer step.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub hidden: Tensor,
    pub probs: ProbDist,
    /// Learned-exit confidence in (0, 1).
    pub confidence: f64,
}

/// All per-layer predictions for one input, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionStream {
    pub probs: Vec<ProbDist>,
    pub confidences: Vec<f64>,
    pub hidden: Option<Vec<Tensor>>,
}

impl PredictionStream {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct EarlyExit {
    pub prediction: ProbDist,
    /// 1-based.
    pub exit_layer: usize,
    pub trace: ExitTrace,
}

/// Graph handles produced by a full forward pass on a tape.
pub(crate) struct GraphOutputs {
    pub logits: Vec<Var>,
    pub confidence_logits: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiExitModel {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Lazily binds parameters onto a tape so each is added at most once.
struct Binder<'m> {
    params: &'m [Param],
    vars: Vec<Option<Var>>,
}

impl<'m> Binder<'m> {
    fn new(params: &'m [Param]) -> Self {
        Self {
            params,
            vars: vec![None; params.len()],
        }
    }

    fn get(&mut self, tape: &mut Tape, id: usize) -> Var {
        *self.vars[id].get_or_insert_with(|| tape.param(id, self.params[id].value.clone()))
    }
}

impl MultiExitModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, k) = (config.d_model, config.d_ff, config.n_classes);
        let mut params = Vec::new();

        params.push(normal(
            &mut rng,
            "embed.token".into(),
            &[config.vocab_size, d],
            1.0,
        ));
        params.push(normal(
            &mut rng,
            "embed.position".into(),
            &[config.max_seq_len, d],
            1.0,
        ));
        let w_std = 1.0 / (d as f64).sqrt();
        let ff_std = 1.0 / (f as f64).sqrt();
        for l in 0..config.n_layers {
            for (name, shape, init) in [
                ("attn.wq", vec![d, d], Init::Normal(w_std)),
                ("attn.bq", vec![d], Init::Zeros),
                ("attn.wk", vec![d, d], Init::Normal(w_std)),
                ("attn.bk", vec![d], Init::Zeros),
                ("attn.wv", vec![d, d], Init::Normal(w_std)),
                ("attn.bv", vec![d], Init::Zeros),
                ("attn.wo", vec![d, d], Init::Normal(w_std)),
                ("attn.bo", vec![d], Init::Zeros),
                ("ln1.gamma", vec![d], Init::Ones),
                ("ln1.beta", vec![d], Init::Zeros),
                ("ffn.w1", vec![d, f], Init::Normal(w_std)),
                ("ffn.b1", vec![f], Init::Zeros),
                ("ffn.w2", vec![f, d], Init::Normal(ff_std)),
                ("ffn.b2", vec![d], Init::Zeros),
                ("ln2.gamma", vec![d], Init::Ones),
                ("ln2.beta", vec![d], Init::Zeros),
            ] {
                let name = format!("layer{l}.{name}");
                match init {
                    Init::Normal(std) => params.push(normal(&mut rng, name, &shape, std)),
                    Init::Zeros => params.push(Param {
                        name,
                        value: constant(&shape, 0.0),
                    }),
                    Init::Ones => params.push(Param {
                        name,
                        value: constant(&shape, 1.0),
                    }),
                }
            }
        }
        let head_std = if config.zero_init_heads { 0.0 } else { w_std };
        for (prefix, width) in [("classifier", k), ("confidence", 1)] {
            for l in 0..config.n_layers {
                if head_std > 0.0 {
                    params.push(normal(
                        &mut rng,
                        format!("{prefix}{l}.w"),
                        &[d, width],
                        head_std,
                    ));
                    params.push(normal(
                        &mut rng,
                        format!("{prefix}{l}.b"),
                        &[width],
                        head_std,
                    ));
                } else {
                    params.push(Param {
                        name: format!("{prefix}{l}.w"),
                        value: Tensor::zeros(&[d, width]),
                    });
                    params.push(Param {
                        name: format!("{prefix}{l}.b"),
                        value: Tensor::zeros(&[width]),
                    });
                }
            }
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a fresh initialization of `config`.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        let template = Self::new(config.clone())?;
        if template.params.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(&params) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::config(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn task_kind(&self) -> TaskKind {
        self.config.task_kind
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn block_id(&self, layer: usize, offset: usize) -> usize {
        2 + layer * BLOCK_PARAMS + offset
    }

    fn classifier_ids(&self, layer: usize) -> (usize, usize) {
        let base = 2 + self.config.n_layers * BLOCK_PARAMS + 2 * layer;
        (base, base + 1)
    }

    fn confidence_ids(&self, layer: usize) -> (usize, usize) {
        let base = 2 + self.config.n_layers * BLOCK_PARAMS + 2 * self.config.n_layers + 2 * layer;
        (base, base + 1)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input {
                position: 0,
                msg: "token sequence is empty".into(),
            });
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input {
                position: self.config.max_seq_len,
                msg: format!(
                    "sequence of {} tokens exceeds max_seq_len {}",
                    tokens.len(),
                    self.config.max_seq_len
                ),
            });
        }
        if let Some(pos) = tokens.iter().position(|&t| t >= self.config.vocab_size) {
            return Err(Error::Input {
                position: pos,
                msg: format!(
                    "token id {} is outside the vocabulary of {}",
                    tokens[pos], self.config.vocab_size
                ),
            });
        }
        Ok(())
    }

    fn embed_on(&self, tape: &mut Tape, binder: &mut Binder, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let tok_table = binder.get(tape, 0);
        let pos_table = binder.get(tape, 1);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.embedding(tok_table, tokens)?;
        let pos = tape.embedding(pos_table, &positions)?;
        tape.add(tok, pos)
    }

    fn linear(tape: &mut Tape, binder: &mut Binder, x: Var, w: usize, b: usize) -> Result<Var> {
        let wv = binder.get(tape, w);
        let bv = binder.get(tape, b);
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    }

    fn block_on(&self, tape: &mut Tape, binder: &mut Binder, layer: usize, x: Var) -> Result<Var> {
        let id = |o| self.block_id(layer, o);
        let q = Self::linear(tape, binder, x, id(WQ), id(BQ))?;
        let k = Self::linear(tape, binder, x, id(WK), id(BK))?;
        let v = Self::linear(tape, binder, x, id(WV), id(BV))?;
        let head_dim = self.config.d_model / self.config.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let start = h * head_dim;
            let qh = tape.slice_cols(q, start, head_dim)?;
            let kh = tape.slice_cols(k, start, head_dim)?;
            let vh = tape.slice_cols(v, start, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores);
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let attn_out = Self::linear(tape, binder, merged, id(WO), id(BO))?;
        let res1 = tape.add(x, attn_out)?;
        let (g1, b1) = (binder.get(tape, id(LN1_G)), binder.get(tape, id(LN1_B)));
        let h1 = tape.layer_norm(res1, g1, b1, LN_EPS)?;

        let ff = Self::linear(tape, binder, h1, id(W1), id(B1))?;
        let ff = tape.gelu(ff);
        let ff = Self::linear(tape, binder, ff, id(W2), id(B2))?;
        let res2 = tape.add(h1, ff)?;
        let (g2, b2) = (binder.get(tape, id(LN2_G)), binder.get(tape, id(LN2_B)));
        tape.layer_norm(res2, g2, b2, LN_EPS)
    }

    /// Classifier and confidence logits from the CLS position of `h`.
    fn heads_on(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        layer: usize,
        h: Var,
    ) -> Result<(Var, Var)> {
        let pooled = tape.row(h, 0)?;
        let (cw, cb) = self.classifier_ids(layer);
        let logits = Self::linear(tape, binder, pooled, cw, cb)?;
        let (fw, fb) = self.confidence_ids(layer);
        let conf = Self::linear(tape, binder, pooled, fw, fb)?;
        Ok((logits, conf))
    }

    /// Records the full forward pass on `tape` for training.
    pub(crate) fn build_graph(&self, tape: &mut Tape, tokens: &[usize]) -> Result<GraphOutputs> {
        let mut binder = Binder::new(&self.params);
        let mut h = self.embed_on(tape, &mut binder, tokens)?;
        let mut logits = Vec::with_capacity(self.config.n_layers);
        let mut confidence_logits = Vec::with_capacity(self.config.n_layers);
        for layer in 0..self.config.n_layers {
            h = self.block_on(tape, &mut binder, layer, h)?;
            let (l, c) = self.heads_on(tape, &mut binder, layer, h)?;
            logits.push(l);
            confidence_logits.push(c);
        }
        Ok(GraphOutputs {
            logits,
            confidence_logits,
        })
    }

    /// `h_0`: token embeddings plus positional embeddings, `[len, d_model]`.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let h = self.embed_on(&mut tape, &mut binder, tokens)?;
        Ok(tape.value(h).clone())
    }

    /// Runs block `layer_index` (1-based) on `h_prev` and its exit heads.
    pub fn forward_layer(&self, h_prev: &Tensor, layer_index: usize) -> Result<LayerOutput> {
        if layer_index == 0 || layer_index > self.config.n_layers {
            return Err(Error::contract(format!(
                "layer index {layer_index} outside 1..={}",
                self.config.n_layers
            )));
        }
        if h_prev.shape().len() != 2 || h_prev.shape()[1] != self.config.d_model {
            return Err(Error::Shape {
                op: "forward_layer",
                lhs: h_prev.shape().to_vec(),
                rhs: vec![h_prev.leading(), self.config.d_model],
            });
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let x = tape.leaf(h_prev.clone());
        let layer = layer_index - 1;
        let h = self.block_on(&mut tape, &mut binder, layer, x)?;
        let (logits, conf) = self.heads_on(&mut tape, &mut binder, layer, h)?;
        Ok(LayerOutput {
            hidden: tape.value(h).clone(),
            probs: ProbDist::from_logits(self.config.task_kind, tape.value(logits).data()),
            confidence: sigmoid(tape.value(conf).data()[0]),
        })
    }

    /// Predictions from every exit.
    pub fn forward_full(&self, tokens: &[usize]) -> Result<PredictionStream> {
        self.forward_prefix(tokens, self.config.n_layers, false)
    }

    /// Predictions from exits `1..=depth`, optionally keeping hidden states.
    pub fn forward_prefix(
        &self,
        tokens: &[usize],
        depth: usize,
        keep_hidden: bool,
    ) -> Result<PredictionStream> {
        if depth == 0 || depth > self.config.n_layers {
            return Err(Error::contract(format!(
                "depth {depth} outside 1..={}",
                self.config.n_layers
            )));
        }
        let mut h = self.embed(tokens)?;
        let mut probs = Vec::with_capacity(depth);
        let mut confidences = Vec::with_capacity(depth);
        let mut hidden = keep_hidden.then(Vec::new);
        for layer in 1..=depth {
            let out = self.forward_layer(&h, layer)?;
            probs.push(out.probs);
            confidences.push(out.confidence);
            h = out.hidden;
            if let Some(hs) = hidden.as_mut() {
                hs.push(h.clone());
            }
        }
        Ok(PredictionStream {
            probs,
            confidences,
            hidden,
        })
    }

    /// Runs layers one at a time, consulting `policy` after each, and stops
    /// at the first halt. Falls back to the last exit if the policy never fires.
    pub fn forward_early_exit(
        &self,
        tokens: &[usize],
        policy: &mut dyn ExitPolicy,
    ) -> Result<EarlyExit> {
        policy.reset();
        let n = self.config.n_layers;
        let mut trace = ExitTrace::default();
        let mut h = self.embed(tokens)?;
        for layer in 1..=n {
            let out = self.forward_layer(&h, layer)?;
            let view = LayerView {
                layer,
                n_layers: n,
                probs: &out.probs,
                confidence: out.confidence,
            };
            let mut step = policy.step(&view)?;
            if layer == n && step.decision == ExitDecision::Continue {
                step.decision = ExitDecision::Halt(ExitReason::FinalLayerFallback);
            }
            trace.record(&view, step);
            if step.decision.is_halt() {
                return Ok(EarlyExit {
                    prediction: out.probs,
                    exit_layer: layer,
                    trace,
                });
            }
            h = out.hidden;
        }
        unreachable!("the final layer always halts")
    }
}

fn normal(rng: &mut ChaCha8Rng, name: String, shape: &[usize], std: f64) -> Param {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Param {
        name,
        value: Tensor::new(shape.to_vec(), data).expect("shape matches data"),
    }
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

fn constant(shape: &[usize], value: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|x| *x = value);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{FixedExit, PolicySpec};

    fn tiny(task: TaskKind, zero_heads: bool) -> MultiExitModel {
        MultiExitModel::new(ModelConfig {
            n_layers: 4,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 20,
            max_seq_len: 8,
            n_classes: 3,
            task_kind: task,
            seed: 11,
            zero_init_heads: zero_heads,
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            d_model: 10,
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            n_classes: 1,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn embed_contracts() {
        let m = tiny(TaskKind::Slc, true);
        assert!(matches!(m.embed(&[]), Err(Error::Input { .. })));
        assert_eq!(m.embed(&[3]).unwrap().shape(), &[1, 8]);
        assert_eq!(m.embed(&[3, 4, 5]).unwrap(), m.embed(&[3, 4, 5]).unwrap());
        match m.embed(&[1, 2, 25]) {
            Err(Error::Input { position, .. }) => assert_eq!(position, 2),
            other => panic!("expected input error, got {other:?}"),
        }
        assert!(m.embed(&[1; 9]).is_err());
    }

    #[test]
    fn same_seed_same_model() {
        assert_eq!(tiny(TaskKind::Slc, false), tiny(TaskKind::Slc, false));
    }

    #[test]
    fn forward_layer_outputs_are_distributions() {
        let m = tiny(TaskKind::Slc, false);
        let h0 = m.embed(&[2, 5, 7, 9]).unwrap();
        let out = m.forward_layer(&h0, 1).unwrap();
        match &out.probs {
            ProbDist::Slc(p) => assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9),
            _ => panic!("expected SLC"),
        }
        assert!(matches!(m.forward_layer(&h0, 0), Err(Error::Contract(_))));
        assert!(matches!(m.forward_layer(&h0, 5), Err(Error::Contract(_))));

        let m = tiny(TaskKind::Mlc, false);
        let out = m.forward_layer(&m.embed(&[2, 5]).unwrap(), 2).unwrap();
        match &out.probs {
            ProbDist::Mlc(p) => {
                assert_eq!(p.len(), 3);
                for pair in p {
                    assert!((pair[0] + pair[1] - 1.0).abs() < 1e-9);
                }
            }
            _ => panic!("expected MLC"),
        }
    }

    #[test]
    fn zero_heads_predict_uniform() {
        let m = tiny(TaskKind::Slc, true);
        let stream = m.forward_full(&[2, 3, 4]).unwrap();
        for p in &stream.probs {
            assert_eq!(p, &ProbDist::Slc(vec![1.0 / 3.0; 3]));
        }
        assert!(stream.confidences.iter().all(|&c| c == 0.5));
    }

    #[test]
    fn stream_prefix_property() {
        let m = tiny(TaskKind::Slc, false);
        let tokens = [2, 9, 4, 4, 11];
        let full = m.forward_prefix(&tokens, 4, true).unwrap();
        assert_eq!(full.len(), 4);
        for j in 1..=4 {
            let part = m.forward_prefix(&tokens, j, true).unwrap();
            assert_eq!(&part.probs[..], &full.probs[..j]);
            assert_eq!(
                &part.hidden.unwrap()[..],
                &full.hidden.as_ref().unwrap()[..j]
            );
        }
        assert_eq!(
            m.forward_full(&tokens).unwrap(),
            m.forward_full(&tokens).unwrap()
        );
    }

    #[test]
    fn early_exit_fixed_and_fallback() {
        let m = tiny(TaskKind::Slc, false);
        let tokens = [2, 9, 4];
        let full = m.forward_full(&tokens).unwrap();

        let mut fixed = FixedExit::new(3);
        let out = m.forward_early_exit(&tokens, &mut fixed).unwrap();
        assert_eq!(out.exit_layer, 3);
        assert_eq!(out.prediction, full.probs[2]);

        let mut never = PolicySpec::Fpabee {
            measure: crate::similarity::Measure::Kd,
            thre: 0.0,
            patience: 1,
            kl_mode: false,
        }
        .build(4)
        .unwrap();
        let out = m.forward_early_exit(&tokens, never.as_mut()).unwrap();
        assert_eq!(out.exit_layer, 4);
        assert_eq!(out.prediction, full.probs[3]);
        assert_eq!(
            out.trace.entries.last().unwrap().decision,
            ExitDecision::Halt(ExitReason::FinalLayerFallback)
        );
    }

    #[test]
    fn infinite_threshold_exits_after_patience_plus_one() {
        let m = tiny(TaskKind::Slc, false);
        for patience in 1..=3 {
            let mut p = PolicySpec::Fpabee {
                measure: crate::similarity::Measure::Jskd,
                thre: f64::INFINITY,
                patience,
                kl_mode: false,
            }
            .build(4)
            .unwrap();
            let out = m.forward_early_exit(&[2, 3], p.as_mut()).unwrap();
            assert_eq!(out.exit_layer, patience as usize + 1);
        }
    }

    #[test]
    fn parameter_layout_is_consistent() {
        let m = tiny(TaskKind::Slc, true);
        assert_eq!(m.params()[m.block_id(1, WQ)].name, "layer1.attn.wq");
        assert_eq!(m.params()[m.block_id(3, LN2_B)].name, "layer3.ln2.beta");
        assert_eq!(m.params()[m.classifier_ids(2).0].name, "classifier2.w");
        assert_eq!(m.params()[m.confidence_ids(3).1].name, "confidence3.b");
        assert_eq!(m.params().len(), 2 + 4 * BLOCK_PARAMS + 4 * 4);
    }
}
