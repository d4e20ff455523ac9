//! Run configuration as flat `key = value` text. Model keys share the same
//! namespace and are read by [`ModelConfig::from_kv`].

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{config, Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::model::ModelConfig;
use crate::train::augment::AugmentConfig;
use crate::train::data::DatasetFormat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => config(format!("unknown precision `{s}` (f32, f64)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data_path: Option<PathBuf>,
    pub data_format: DatasetFormat,
    /// Keep only the first n samples; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Complexity divisor for dynamic splits; `None` trains on the task loss alone.
    pub theta: Option<f64>,
    pub augment: AugmentConfig,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Per-batch training sizes drawn at random; empty trains at the model input size.
    pub train_sizes: Vec<usize>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::custom(32, [1, 2, 8, 2]).with_classes(10).with_input(64, 64),
            data_path: None,
            data_format: DatasetFormat::CifarBinary,
            train_limit: 0,
            test_limit: 0,
            epochs: 30,
            batch_size: 128,
            lr: 0.004,
            weight_decay: 0.005,
            warmup_epochs: 2,
            label_smoothing: 0.1,
            seed: 0,
            precision: Precision::F32,
            theta: None,
            augment: AugmentConfig::default(),
            grad_clip: 0.0,
            train_sizes: Vec::new(),
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return config("batch sizes must be >= 1");
        }
        if self.warmup_epochs > self.epochs {
            return config(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return config("label_smoothing must be in [0, 1)");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return config("lr, weight_decay and grad_clip must be finite and >= 0");
        }
        match self.theta {
            Some(t) if !(t > 0.0) => return config("theta must be > 0"),
            Some(_) if !self.model.dynamic => return config("theta needs dynamic = true"),
            _ => {}
        }
        let (h, w) = self.model.input_size;
        for &s in &self.train_sizes {
            if s == 0 || s % 32 != 0 || s > h.min(w) {
                return config(format!("train size {s} must be a multiple of 32 no larger than the input size"));
            }
        }
        if h != w {
            return config("training uses square inputs");
        }
        Ok(())
    }

    /// Consumes run and model keys, then rejects leftovers.
    pub fn from_kv(mut kv: KvMap) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let model = ModelConfig::from_kv_over(&mut kv, d.model.clone())?;
        let theta = match kv.take_str("theta") {
            None => None,
            Some(s) if s == "none" => None,
            Some(s) => Some(s.parse().map_err(|_| Error::Config(format!("`theta`: cannot parse `{s}`")))?),
        };
        let a = AugmentConfig::default();
        let cfg = TrainConfig {
            model,
            data_path: kv.take_str("data_path").filter(|s| !s.is_empty()).map(PathBuf::from),
            data_format: kv.take_str("data_format").map(|s| s.parse()).transpose()?.unwrap_or(d.data_format),
            train_limit: kv.take_or("train_limit", d.train_limit)?,
            test_limit: kv.take_or("test_limit", d.test_limit)?,
            epochs: kv.take_or("epochs", d.epochs)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            lr: kv.take_or("lr", d.lr)?,
            weight_decay: kv.take_or("weight_decay", d.weight_decay)?,
            warmup_epochs: kv.take_or("warmup_epochs", d.warmup_epochs)?,
            label_smoothing: kv.take_or("label_smoothing", d.label_smoothing)?,
            seed: kv.take_or("seed", d.seed)?,
            precision: kv.take_str("precision").map(|s| s.parse()).transpose()?.unwrap_or(d.precision),
            theta,
            augment: AugmentConfig {
                flip: kv.take_or("flip", a.flip)?,
                crop_pad: kv.take_or("crop_pad", a.crop_pad)?,
                mixup_alpha: kv.take_or("mixup_alpha", a.mixup_alpha)?,
                cutmix_alpha: kv.take_or("cutmix_alpha", a.cutmix_alpha)?,
                randaugment_ops: kv.take_or("randaugment_ops", a.randaugment_ops)?,
                randaugment_magnitude: kv.take_or("randaugment_magnitude", a.randaugment_magnitude)?,
                randaugment_mstd: kv.take_or("randaugment_mstd", a.randaugment_mstd)?,
            },
            grad_clip: kv.take_or("grad_clip", d.grad_clip)?,
            train_sizes: kv.take_list("train_sizes")?.unwrap_or_default(),
            eval_batch_size: kv.take_or("eval_batch_size", d.eval_batch_size)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<TrainConfig> {
        let mut kv = KvMap::parse(text)?;
        kv.apply_overrides(overrides)?;
        TrainConfig::from_kv(kv)
    }

    /// Every resolved key, model keys included; parses back to an equal config.
    pub fn to_kv_text(&self) -> String {
        let mut w = KvWriter::default();
        self.model.to_kv(&mut w);
        let a = &self.augment;
        w.put("data_path", self.data_path.as_ref().map_or(String::new(), |p| p.display().to_string()))
            .put("data_format", self.data_format)
            .put("train_limit", self.train_limit)
            .put("test_limit", self.test_limit)
            .put("epochs", self.epochs)
            .put("batch_size", self.batch_size)
            .put("lr", self.lr)
            .put("weight_decay", self.weight_decay)
            .put("warmup_epochs", self.warmup_epochs)
            .put("label_smoothing", self.label_smoothing)
            .put("seed", self.seed)
            .put("precision", self.precision)
            .put("theta", self.theta.map_or("none".to_string(), |t| t.to_string()))
            .put("flip", a.flip)
            .put("crop_pad", a.crop_pad)
            .put("mixup_alpha", a.mixup_alpha)
            .put("cutmix_alpha", a.cutmix_alpha)
            .put("randaugment_ops", a.randaugment_ops)
            .put("randaugment_magnitude", a.randaugment_magnitude)
            .put("randaugment_mstd", a.randaugment_mstd)
            .put("grad_clip", self.grad_clip);
        if !self.train_sizes.is_empty() {
            w.put_list("train_sizes", &self.train_sizes);
        }
        w.put("eval_batch_size", self.eval_batch_size);
        w.finish()
    }

    pub fn side(&self) -> usize {
        self.model.input_size.0
    }
}
