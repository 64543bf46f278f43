//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::checkpoint::{model_hash, Checkpoint};
use crate::data::{
    build_vocab, generate_synthetic, load_jsonl, write_jsonl, Dataset, Label, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::harness::{
    compare_policies, emit_csv, emit_histogram, emit_svg, evaluate, fpabee_grid, pareto_curve,
    sweep, Curve, Family, StreamCache, SweepResult,
};
use crate::model::{ModelConfig, MultiExitModel, TaskKind};
use crate::policy::PolicySpec;
use crate::similarity::Measure;
use crate::training::{
    grid, grid_search, train, TrainConfig, GRID_BATCH_SIZES, GRID_LEARNING_RATES,
};

#[derive(Debug, Parser)]
#[command(
    name = "flexexit",
    version,
    about = "Early-exit workbench for multi-exit transformer classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a multi-exit model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate one exit policy.
    Eval(EvalArgs),
    /// Evaluate a grid of policy settings and write the sweep CSV.
    Sweep(SweepArgs),
    /// Compare policy families at a matched speedup.
    Compare(CompareArgs),
    /// Write a synthetic easy/hard dataset as JSONL splits.
    GenData(GenDataArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Slc,
    Mlc,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Slc => TaskKind::Slc,
            TaskArg::Mlc => TaskKind::Mlc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Fpabee,
    Pabee,
    Entropy,
    Maxprob,
    Learned,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MeasureArg {
    Kd,
    Rekd,
    Symkd,
    Jskd,
}

impl From<MeasureArg> for Measure {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::Kd => Measure::Kd,
            MeasureArg::Rekd => Measure::Rekd,
            MeasureArg::Symkd => Measure::Symkd,
            MeasureArg::Jskd => Measure::Jskd,
        }
    }
}

#[derive(Debug, Args)]
pub struct Shared {
    /// Checkpoint path.
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    #[arg(long, value_enum, default_value = "fpabee")]
    pub policy: PolicyArg,
    #[arg(long, value_enum, default_value = "jskd")]
    pub measure: MeasureArg,
    /// Similarity threshold for fpabee, or the confidence threshold for
    /// entropy, maxprob and learned.
    #[arg(long)]
    pub thre: Option<f64>,
    #[arg(long)]
    pub patience: Option<u32>,
    #[arg(long)]
    pub fixed_layer: Option<u32>,
    /// Subtract the self-entropy term from the similarity score.
    #[arg(long)]
    pub kl_mode: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint to write.
    #[arg(long)]
    pub model: PathBuf,
    /// Training JSONL.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Development JSONL, required by --grid.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Number of classes or labels; inferred from the data when absent.
    #[arg(long)]
    pub classes: Option<usize>,
    /// TOML file with [model] and [train] tables; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Maximum tokens per input, CLS excluded.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub max_vocab: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Pick batch size and learning rate by dev score over a grid.
    #[arg(long)]
    pub grid: bool,
    #[arg(long, value_delimiter = ',')]
    pub grid_batch_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_lrs: Option<Vec<f64>>,
    /// Write per-epoch loss reports as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long, value_enum, default_value = "fpabee")]
    pub policy: PolicyArg,
    #[arg(long, value_enum, default_value = "jskd")]
    pub measure: MeasureArg,
    #[arg(long)]
    pub kl_mode: bool,
    /// Thresholds (fpabee, entropy, maxprob, learned).
    #[arg(long, value_delimiter = ',')]
    pub thre_grid: Option<Vec<f64>>,
    /// Patience values (fpabee, pabee).
    #[arg(long, value_delimiter = ',')]
    pub patience_grid: Option<Vec<u32>>,
    /// Sweep CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub hist: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub shared: Shared,
    /// Target speedup in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub target: f64,
    #[arg(long, default_value_t = 0.02)]
    pub tolerance: f64,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "fpabee,pabee,entropy,maxprob,learned,fixed"
    )]
    pub policies: Vec<PolicyArg>,
    #[arg(long, value_enum, default_value = "jskd")]
    pub measure: MeasureArg,
    #[arg(long)]
    pub kl_mode: bool,
    /// Patience values searched for fpabee.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub patience_grid: Vec<u32>,
    /// Write attained points in the sweep CSV format.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Output directory for train/dev/test.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_dev: usize,
    #[arg(long, default_value_t = 500)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0.7)]
    pub easy_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: Option<toml::Table>,
    train: Option<TrainConfig>,
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::GenData(a) => cmd_gen_data(a, out),
    }
}

fn load_any_classes(path: &Path, task: TaskKind, classes: Option<usize>) -> Result<Dataset> {
    if let Some(k) = classes {
        return load_jsonl(path, task, k);
    }
    let ds = load_jsonl(path, task, usize::MAX)?;
    let max = ds
        .examples
        .iter()
        .filter_map(|ex| match &ex.label {
            Label::Single(c) => Some(*c),
            Label::Multi(ls) => ls.iter().copied().max(),
        })
        .max()
        .unwrap_or(0);
    let k = match task {
        TaskKind::Slc => (max + 1).max(2),
        TaskKind::Mlc => max + 1,
    };
    Dataset::new(task, k, ds.examples)
}

fn read_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let task = TaskKind::from(a.task);
    let file = read_file_config(a.config.as_deref())?;
    let train_ds = load_any_classes(&a.data, task, a.classes)?;
    if train_ds.is_empty() {
        return Err(Error::Data {
            line: 0,
            msg: "training set is empty".into(),
        });
    }
    let dev_ds = a
        .dev
        .as_deref()
        .map(|p| load_jsonl(p, task, train_ds.n_classes))
        .transpose()?;

    let mut mcfg: ModelConfig = match file.model {
        Some(t) => t
            .try_into()
            .map_err(|e| Error::config(format!("[model]: {e}")))?,
        None => ModelConfig::default(),
    };
    let mut tcfg = file.train.unwrap_or_default();

    let vocab = build_vocab(&train_ds, a.max_vocab);
    let longest = train_ds
        .examples
        .iter()
        .map(|ex| crate::data::tokenize(&ex.text).len())
        .max()
        .unwrap_or(1);
    let max_len = a.max_len.unwrap_or(longest.max(1));
    mcfg.task_kind = task;
    mcfg.n_classes = train_ds.n_classes;
    mcfg.vocab_size = vocab.len();
    mcfg.max_seq_len = max_len + 1;
    if let Some(v) = a.layers {
        mcfg.n_layers = v;
    }
    if let Some(v) = a.d_model {
        mcfg.d_model = v;
    }
    if let Some(v) = a.heads {
        mcfg.n_heads = v;
    }
    if let Some(v) = a.d_ff {
        mcfg.d_ff = v;
    }
    if let Some(s) = a.seed {
        mcfg.seed = s;
        tcfg.seed = s;
    }
    if let Some(v) = a.epochs {
        tcfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        tcfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        tcfg.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        tcfg.weight_decay = v;
    }
    mcfg.validate()?;

    let train_enc = train_ds.encode(&vocab, max_len);
    let (model, history) = if a.grid {
        let dev_ds = dev_ds.ok_or_else(|| Error::config("--grid needs --dev"))?;
        let dev_enc = dev_ds.encode(&vocab, max_len);
        let cells = grid(
            a.grid_batch_sizes.as_deref().unwrap_or(&GRID_BATCH_SIZES),
            a.grid_lrs.as_deref().unwrap_or(&GRID_LEARNING_RATES),
        );
        let gs = grid_search(
            || MultiExitModel::new(mcfg.clone()),
            &train_enc,
            &dev_enc,
            &tcfg,
            &cells,
        )?;
        for (i, row) in gs.rows.iter().enumerate() {
            writeln!(
                out,
                "grid batch_size={} lr={} dev_score={:.4}{}",
                row.batch_size,
                row.learning_rate,
                row.dev_score,
                if i == gs.best_index { " *" } else { "" }
            )?;
        }
        (gs.best_model, gs.best_history)
    } else {
        let mut model = MultiExitModel::new(mcfg)?;
        let history = train(&mut model, &train_enc, &tcfg)?;
        if let Some(dev_ds) = &dev_ds {
            let score =
                crate::training::final_layer_score(&model, &dev_ds.encode(&vocab, max_len))?;
            writeln!(out, "dev final-layer score {score:.4}")?;
        }
        (model, history)
    };

    if let Some(last) = history.last() {
        let per: Vec<String> = last.per_layer.iter().map(|l| format!("{l:.4}")).collect();
        writeln!(
            out,
            "epoch {} total loss {:.4} per layer [{}]",
            last.epoch,
            last.total,
            per.join(", ")
        )?;
    }
    if let Some(path) = &a.report {
        fs::write(path, serde_json::to_vec_pretty(&history)?)?;
    }
    let hash = model_hash(&model);
    Checkpoint { model, vocab }.save(&a.model)?;
    writeln!(out, "wrote {} (model_hash {hash})", a.model.display())?;
    Ok(())
}

struct Loaded {
    ck: Checkpoint,
    data: crate::data::EncodedDataset,
}

fn load_for_eval(s: &Shared) -> Result<Loaded> {
    let ck = Checkpoint::load(&s.model)?;
    let task = TaskKind::from(s.task);
    if task != ck.model.task_kind() {
        return Err(Error::config(format!(
            "--task {task} does not match checkpoint task {}",
            ck.model.task_kind()
        )));
    }
    let ds = load_jsonl(&s.data, task, ck.model.config().n_classes)?;
    let data = ds.encode(&ck.vocab, ck.model.config().max_seq_len - 1);
    Ok(Loaded { ck, data })
}

fn policy_spec(p: &PolicyArgs) -> Result<PolicySpec> {
    let need_thre = || {
        p.thre
            .ok_or_else(|| Error::config("--thre is required for this policy"))
    };
    Ok(match p.policy {
        PolicyArg::Fpabee => PolicySpec::Fpabee {
            measure: p.measure.into(),
            thre: need_thre()?,
            patience: p.patience.unwrap_or(2),
            kl_mode: p.kl_mode,
        },
        PolicyArg::Pabee => PolicySpec::Pabee {
            patience: p.patience.unwrap_or(2),
        },
        PolicyArg::Entropy => PolicySpec::Entropy {
            threshold: need_thre()?,
        },
        PolicyArg::Maxprob => PolicySpec::Maxprob {
            threshold: need_thre()?,
        },
        PolicyArg::Learned => PolicySpec::Learned {
            threshold: need_thre()?,
        },
        PolicyArg::Fixed => PolicySpec::Fixed {
            layer: p
                .fixed_layer
                .ok_or_else(|| Error::config("--fixed-layer is required for the fixed policy"))?
                as usize,
        },
    })
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let spec = policy_spec(&a.policy)?;
    let l = load_for_eval(&a.shared)?;
    let r = evaluate(&l.ck.model, &l.data, &spec)?;
    writeln!(out, "policy {spec}")?;
    writeln!(out, "samples {}", r.n_samples)?;
    writeln!(out, "accuracy {:.6}", r.accuracy)?;
    writeln!(out, "micro_f1 {:.6}", r.micro_f1)?;
    writeln!(out, "speedup {:.6}", r.speedup)?;
    writeln!(out, "mean_exit_layer {:.6}", r.mean_exit_layer)?;
    let hist: Vec<String> = r.histogram.iter().map(|c| c.to_string()).collect();
    writeln!(out, "histogram {}", hist.join(","))?;
    Ok(())
}

const DEFAULT_THRE_GRID: [f64; 10] = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0];

fn sweep_grid(a: &SweepArgs, n_layers: usize) -> Vec<PolicySpec> {
    let thres = a
        .thre_grid
        .clone()
        .unwrap_or_else(|| DEFAULT_THRE_GRID.to_vec());
    let pats = a
        .patience_grid
        .clone()
        .unwrap_or_else(|| (1..n_layers as u32).collect());
    match a.policy {
        PolicyArg::Fpabee => fpabee_grid(a.measure.into(), a.kl_mode, &thres, &pats),
        PolicyArg::Pabee => pats
            .into_iter()
            .map(|patience| PolicySpec::Pabee { patience })
            .collect(),
        PolicyArg::Entropy => thres
            .into_iter()
            .map(|threshold| PolicySpec::Entropy { threshold })
            .collect(),
        PolicyArg::Maxprob => thres
            .into_iter()
            .map(|threshold| PolicySpec::Maxprob { threshold })
            .collect(),
        PolicyArg::Learned => thres
            .into_iter()
            .map(|threshold| PolicySpec::Learned { threshold })
            .collect(),
        PolicyArg::Fixed => (1..=n_layers)
            .map(|layer| PolicySpec::Fixed { layer })
            .collect(),
    }
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write) -> Result<()> {
    let l = load_for_eval(&a.shared)?;
    let n = l.ck.model.n_layers();
    let specs = sweep_grid(&a, n);
    for s in &specs {
        s.validate(n)?;
    }
    let cache = StreamCache::build(&l.ck.model, &l.data)?;
    let result = SweepResult {
        rows: sweep(&cache, &specs)?,
        n_layers: n,
        seed: a.shared.seed.unwrap_or(l.ck.model.config().seed),
        model_hash: model_hash(&l.ck.model),
        data_hash: l.data.source_hash.clone(),
    };
    emit_csv(&result, &a.out)?;
    if let Some(p) = &a.hist {
        emit_histogram(&result, p)?;
    }
    if let Some(p) = &a.svg {
        let curve = Curve {
            label: a.policy_label(),
            points: pareto_curve(&result.rows, cache.task),
        };
        emit_svg(&[curve], p)?;
    }
    writeln!(
        out,
        "wrote {} rows to {} (full-depth score {:.4})",
        result.rows.len(),
        a.out.display(),
        cache.full_depth_score()
    )?;
    Ok(())
}

impl SweepArgs {
    fn policy_label(&self) -> String {
        match self.policy {
            PolicyArg::Fpabee => format!(
                "fpabee-{}{}",
                Measure::from(self.measure),
                if self.kl_mode { "-kl" } else { "" }
            ),
            other => format!("{other:?}").to_lowercase(),
        }
    }
}

fn cmd_compare(a: CompareArgs, out: &mut dyn Write) -> Result<()> {
    if !(0.0..=1.0).contains(&a.target) || a.tolerance.is_nan() || a.tolerance < 0.0 {
        return Err(Error::config(
            "--target must be in [0, 1] and --tolerance non-negative",
        ));
    }
    let l = load_for_eval(&a.shared)?;
    let families: Vec<Family> = a
        .policies
        .iter()
        .map(|p| match p {
            PolicyArg::Fpabee => Family::Fpabee {
                measure: a.measure.into(),
                kl_mode: a.kl_mode,
                patiences: a.patience_grid.clone(),
            },
            PolicyArg::Pabee => Family::Pabee,
            PolicyArg::Entropy => Family::Entropy,
            PolicyArg::Maxprob => Family::Maxprob,
            PolicyArg::Learned => Family::Learned,
            PolicyArg::Fixed => Family::Fixed,
        })
        .collect();
    let cache = StreamCache::build(&l.ck.model, &l.data)?;
    let rows = compare_policies(&cache, a.target, &families, a.tolerance)?;
    writeln!(
        out,
        "target speedup {:.4} (±{:.4}), full-depth score {:.4}",
        a.target,
        a.tolerance,
        cache.full_depth_score()
    )?;
    for row in &rows {
        match &row.result {
            Some(r) => writeln!(
                out,
                "{:<14} score {:.4} speedup {:.4}  {}",
                row.family,
                r.score(cache.task),
                r.speedup,
                r.policy
            )?,
            None => writeln!(out, "{:<14} unattainable", row.family)?,
        }
    }
    if let Some(path) = &a.out {
        let result = SweepResult {
            rows: rows.iter().filter_map(|r| r.result.clone()).collect(),
            n_layers: cache.n_layers,
            seed: a.shared.seed.unwrap_or(l.ck.model.config().seed),
            model_hash: model_hash(&l.ck.model),
            data_hash: l.data.source_hash.clone(),
        };
        emit_csv(&result, path)?;
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SyntheticSpec {
        task: a.task.into(),
        k: a.k,
        n_train: a.n_train,
        n_dev: a.n_dev,
        n_test: a.n_test,
        easy_fraction: a.easy_fraction,
        noise: a.noise,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let splits = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out)?;
    for (name, ds) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
    ] {
        let path = a.out.join(format!("{name}.jsonl"));
        write_jsonl(ds, &path)?;
        writeln!(
            out,
            "wrote {} ({} examples, hash {})",
            path.display(),
            ds.len(),
            ds.hash()
        )?;
    }
    Ok(())
}
