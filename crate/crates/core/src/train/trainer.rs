//! The training loop, evaluation and run history.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pn_tensor::{Element, Gradients, Tensor, TensorError, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dpconv::{binarize_gates, complexity_zeta, objective_on_tape, ordering_penalty_psi, ComplexityBudget};
use crate::error::{config, Error, Result};
use crate::model::Model;
use crate::params::{Mode, ParamId, ParameterStore, Session};
use crate::train::augment::{augment_image, mix_batch, smoothed_targets};
use crate::train::config::{Precision, TrainConfig};
use crate::train::data::{batches, epoch_order, eval_batch, load_dataset, normalize_image, Dataset, Normalization, Split};
use crate::train::optim::{global_grad_norm, AdamW, AdamWConfig};
use crate::train::schedule::cosine_lr;

/// One row per finished epoch. Wall time is kept out so equal seeds give
/// equal histories.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the optimized loss.
    pub train_loss: f64,
    pub eval_top1: Option<f64>,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
    pub zeta: Option<f64>,
    pub psi: Option<f64>,
    /// Convolved channels of each dynamic layer.
    pub c_p: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| x.to_string())
}

impl RunHistory {
    pub const HEADER: &'static str = "epoch\ttrain_loss\teval_top1\tlr\tzeta\tpsi\tc_p";

    /// Tab-separated with a header; floats print in shortest round-trip form.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            let cp: Vec<String> = r.c_p.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch,
                r.train_loss,
                opt(r.eval_top1),
                r.lr,
                opt(r.zeta),
                opt(r.psi),
                if cp.is_empty() { "-".to_string() } else { cp.join(",") }
            );
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<RunHistory> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return config("history: missing header");
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Config(format!("history: bad number `{s}`"))) };
        let maybe = |s: &str| -> Result<Option<f64>> { if s == "-" { Ok(None) } else { num(s).map(Some) } };
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return config(format!("history: expected 7 fields, got {}", f.len()));
            }
            let c_p = if f[6] == "-" {
                Vec::new()
            } else {
                f[6].split(',').map(|c| c.parse().map_err(|_| Error::Config(format!("history: bad width `{c}`")))).collect::<Result<_>>()?
            };
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| Error::Config(format!("history: bad epoch `{}`", f[0])))?,
                train_loss: num(f[1])?,
                eval_top1: maybe(f[2])?,
                lr: num(f[3])?,
                zeta: maybe(f[4])?,
                psi: maybe(f[5])?,
                c_p,
            });
        }
        Ok(RunHistory { records })
    }

    pub fn final_top1(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.eval_top1)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Correct predictions in `[n, k]` row-major logits.
pub fn top1_correct(logits: &[f64], k: usize, labels: &[usize]) -> usize {
    logits.chunks(k).zip(labels).filter(|(row, &l)| argmax_lowest(row) == l).count()
}

/// Fraction of `ds` classified correctly at `side`×`side`.
pub fn evaluate<T: Element>(model: &mut Model<T>, ds: &Dataset, side: usize, norm: &Normalization, batch: usize) -> Result<f64> {
    if ds.is_empty() {
        return config("evaluation set is empty");
    }
    let k = model.config().num_classes;
    if ds.num_classes > k {
        return config(format!("dataset has {} classes, model predicts {k}", ds.num_classes));
    }
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for idx in batches(&order, batch) {
        let (x, labels) = eval_batch::<T>(ds, idx, side, norm)?;
        let y = model.predict(&x)?;
        let logits: Vec<f64> = y.data().iter().map(|v| v.to_f64_lossy()).collect();
        correct += top1_correct(&logits, k, &labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn stream(seed: u64, tag: u64, a: usize, b: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.rotate_left(48) ^ ((a as u64) << 24) ^ b as u64
}

/// Augmented, normalized training batch with soft targets.
pub fn train_batch<T: Element>(
    ds: &Dataset,
    idx: &[usize],
    side: usize,
    norm: &Normalization,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let k = cfg.model.num_classes;
    let mut data = Vec::with_capacity(idx.len() * 3 * side * side);
    for &i in idx {
        let img = augment_image(&ds.to_rgb(i), &cfg.augment, rng);
        normalize_image(&img, side, norm, &mut data);
    }
    let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
    let mut x = Tensor::new(&[idx.len(), 3, side, side], data)?;
    let mut t = smoothed_targets(&labels, k, cfg.label_smoothing);
    mix_batch(&mut x, &mut t, k, &cfg.augment, rng);
    Ok((x, Tensor::from_f64(&[idx.len(), k], &t)?))
}

pub struct TrainOutcome<T: Element> {
    pub model: Model<T>,
    pub history: RunHistory,
    /// Final checkpoint when an output directory was given.
    pub checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const HISTORY_FILE: &str = "history.tsv";

fn dynamic_state<T: Element>(model: &Model<T>) -> (Option<f64>, Option<f64>, Vec<usize>) {
    let layers = model.net.dynamic_layers();
    if layers.is_empty() {
        return (None, None, Vec::new());
    }
    let logits: Vec<Vec<f64>> = layers
        .iter()
        .map(|(_, d)| model.store.value(d.gates).data().iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let bits: Vec<Vec<bool>> = logits.iter().map(|g| binarize_gates(g)).collect();
    let c_p = layers.iter().map(|(_, d)| d.current_cp(&model.store)).collect();
    (Some(complexity_zeta(&bits)), Some(ordering_penalty_psi(&logits)), c_p)
}

type StepResult<T> = Option<(f64, Gradients<T>, Vec<(ParamId, Var)>)>;

/// Loss value and gradients of one batch; `None` once anything goes non-finite.
fn loss_and_grads<T: Element>(
    model: &mut Model<T>,
    x: Tensor<T>,
    targets: Tensor<T>,
    budget: Option<&ComplexityBudget>,
    gate_ids: &[ParamId],
    seed: u64,
) -> Result<StepResult<T>> {
    let (net, store) = model.parts_mut();
    let mut sess = Session::new(store, Mode::Train, true, seed);
    let run = (|| -> Result<StepResult<T>> {
        let xv = sess.tape.constant(x)?;
        let logits = net.forward(&mut sess, xv)?;
        let task = sess.tape.soft_cross_entropy(logits, targets)?;
        let loss = match budget {
            Some(b) => {
                let gates = gate_ids.iter().map(|&id| sess.param(id)).collect::<Result<Vec<_>>>()?;
                objective_on_tape(&mut sess.tape, task, &gates, b)?.loss
            }
            None => task,
        };
        let value = sess.tape.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Ok(None);
        }
        let grads = sess.tape.backward(loss)?;
        Ok(Some((value, grads, sess.bindings())))
    })();
    match run {
        Err(Error::Tensor(TensorError::NonFinite { .. })) => Ok(None),
        other => other,
    }
}

fn save_store<T: Element>(model: &Model<T>, store: &ParameterStore<T>, path: &Path) -> Result<()> {
    let m = Model { net: model.net.clone(), store: store.clone() };
    m.save(path)
}

/// Trains from `cfg.seed` on `train`, evaluating on `test` after each epoch.
/// With an output directory the history and checkpoint are rewritten every
/// epoch. `progress` sees each finished epoch.
pub fn train<T: Element>(
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    norm: &Normalization,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    let start = std::time::Instant::now();
    cfg.validate()?;
    if train.is_empty() {
        return config("training set is empty");
    }
    let k = cfg.model.num_classes;
    for ds in std::iter::once(train).chain(test) {
        if ds.num_classes > k {
            return config(format!("dataset has {} classes, model predicts {k}", ds.num_classes));
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut model = Model::<T>::new(&cfg.model, cfg.seed)?;
    let budget = match cfg.theta {
        Some(theta) => {
            let widths: Vec<usize> = model.net.dynamic_layers().iter().map(|(_, d)| d.channels).collect();
            if widths.is_empty() {
                return config("theta set but the model has no dynamic layers");
            }
            Some(ComplexityBudget::new(&widths, theta)?)
        }
        None => None,
    };
    let gate_ids = model.gate_ids();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let warmup = cfg.warmup_epochs * per_epoch;
    let mut history = RunHistory::default();
    let mut checkpoint = None;
    for epoch in 0..cfg.epochs {
        let last_good = model.store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, 1, epoch, 0));
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let (mut loss_sum, mut seen, mut lr) = (0.0, 0usize, 0.0);
        for (bi, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let side = if cfg.train_sizes.is_empty() {
                cfg.side()
            } else {
                cfg.train_sizes[rng.random_range(0..cfg.train_sizes.len())]
            };
            let (x, t) = train_batch::<T>(train, idx, side, norm, cfg, &mut rng)?;
            let step = epoch * per_epoch + bi;
            lr = cosine_lr(step, total, warmup, cfg.lr);
            let seed = stream(cfg.seed, 2, epoch, bi);
            let Some((value, grads, bindings)) = loss_and_grads(&mut model, x, t, budget.as_ref(), &gate_ids, seed)? else {
                let path = match out {
                    Some(dir) => {
                        let p = dir.join(LAST_GOOD_FILE);
                        save_store(&model, &last_good, &p)?;
                        Some(p)
                    }
                    None => None,
                };
                return Err(Error::NonFiniteLoss { epoch, step: bi, checkpoint: path });
            };
            let scale = if cfg.grad_clip > 0.0 {
                let norm = global_grad_norm(&grads, &bindings);
                if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 }
            } else {
                1.0
            };
            opt.step_scaled(&mut model.store, &grads, &bindings, lr, scale)?;
            loss_sum += value * idx.len() as f64;
            seen += idx.len();
        }
        let eval_top1 = match test {
            Some(ds) => Some(evaluate(&mut model, ds, cfg.side(), norm, cfg.eval_batch_size)?),
            None => None,
        };
        let (zeta, psi, c_p) = dynamic_state(&model);
        let rec = EpochRecord { epoch: epoch + 1, train_loss: loss_sum / seen as f64, eval_top1, lr, zeta, psi, c_p };
        progress(&rec);
        history.records.push(rec);
        if let Some(dir) = out {
            fs::write(dir.join(HISTORY_FILE), history.to_tsv())?;
            let p = dir.join(CHECKPOINT_FILE);
            model.save(&p)?;
            checkpoint = Some(p);
        }
    }
    if cfg.epochs == 0 {
        if let Some(dir) = out {
            fs::write(dir.join(HISTORY_FILE), history.to_tsv())?;
            let p = dir.join(CHECKPOINT_FILE);
            model.save(&p)?;
            checkpoint = Some(p);
        }
    }
    Ok(TrainOutcome { model, history, checkpoint, wall_seconds: start.elapsed().as_secs_f64() })
}

/// Train and test sets named by the config, each cut to its limit.
pub fn load_splits(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let Some(path) = &cfg.data_path else {
        return config("`data_path` is not set");
    };
    let tr = load_dataset(path, cfg.data_format, Split::Train, cfg.side())?.truncated(cfg.train_limit);
    let te = load_dataset(path, cfg.data_format, Split::Test, cfg.side())?.truncated(cfg.test_limit);
    Ok((tr, te))
}

/// Precision-independent result of a run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub history: RunHistory,
    pub checkpoint: Option<PathBuf>,
    pub wall_seconds: f64,
}

impl<T: Element> From<TrainOutcome<T>> for RunSummary {
    fn from(o: TrainOutcome<T>) -> Self {
        RunSummary { history: o.history, checkpoint: o.checkpoint, wall_seconds: o.wall_seconds }
    }
}

/// Trains at the configured precision.
pub fn train_with(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test: Option<&Dataset>,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<RunSummary> {
    let norm = Normalization::for_format(cfg.data_format);
    match cfg.precision {
        Precision::F32 => train::<f32>(cfg, train_set, test, &norm, out, progress).map(Into::into),
        Precision::F64 => train::<f64>(cfg, train_set, test, &norm, out, progress).map(Into::into),
    }
}
