//! Comparison grids: attention scope, which attention blocks are on, and the
//! stage mixer. Each row is trained once per seed on the same recipe.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::blocks::Scope;
use crate::complexity::count;
use crate::error::{config, Error, Result};
use crate::model::{MixerKind, Model, ModelConfig};
use crate::train::config::TrainConfig;
use crate::train::data::Dataset;
use crate::train::trainer::{train_with, EpochRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// Attention over the complement only versus over all channels.
    Scope,
    /// Attention-free baseline, then channel, spatial and self attention added in turn.
    Blocks,
    /// Channel-attention mixer versus dense and depthwise 3×3 convolution.
    Mixer,
}

impl Grid {
    pub const ALL: [Grid; 3] = [Grid::Scope, Grid::Blocks, Grid::Mixer];
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grid::Scope => "scope",
            Grid::Blocks => "blocks",
            Grid::Mixer => "mixer",
        })
    }
}

impl FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scope" => Ok(Grid::Scope),
            "blocks" => Ok(Grid::Blocks),
            "mixer" => Ok(Grid::Mixer),
            _ => config(format!("unknown grid `{s}` (scope, blocks, mixer)")),
        }
    }
}

pub const ATTENTION_FREE: &str = "none";
pub const FULL_PAT: &str = "ch+sp+sf";

/// Named model variants of `base` for one grid.
pub fn grid_rows(grid: Grid, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match grid {
        Grid::Scope => vec![
            ("partial".into(), with(&|c| c.scope = Scope::Partial)),
            ("full".into(), with(&|c| c.scope = Scope::Full)),
        ],
        Grid::Blocks => vec![
            (ATTENTION_FREE.into(), with(&|c| (c.pat_ch, c.pat_sp, c.pat_sf) = (false, false, false))),
            ("ch".into(), with(&|c| (c.pat_ch, c.pat_sp, c.pat_sf) = (true, false, false))),
            ("ch+sp".into(), with(&|c| (c.pat_ch, c.pat_sp, c.pat_sf) = (true, true, false))),
            (FULL_PAT.into(), with(&|c| (c.pat_ch, c.pat_sp, c.pat_sf) = (true, true, true))),
        ],
        Grid::Mixer => vec![
            ("pat_ch".into(), with(&|c| c.mixer = MixerKind::Pat)),
            ("conv3x3".into(), with(&|c| c.mixer = MixerKind::Conv)),
            ("dwconv3x3".into(), with(&|c| c.mixer = MixerKind::DwConv)),
        ],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    /// `(seed, final top-1)` per run; empty when only counted.
    pub runs: Vec<(u64, f64)>,
}

impl AblationRow {
    pub fn mean_top1(&self) -> Option<f64> {
        (!self.runs.is_empty()).then(|| self.runs.iter().map(|r| r.1).sum::<f64>() / self.runs.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub grid: Grid,
    pub input: (usize, usize),
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Tab-separated: name, params, FLOPs, mean top-1, then one column per seed.
    pub fn to_text(&self) -> String {
        let seeds: Vec<u64> = self.rows.first().map(|r| r.runs.iter().map(|x| x.0).collect()).unwrap_or_default();
        let mut s = format!("# grid {} at {}x{}\nconfig\tparams\tflops\tmean_top1", self.grid, self.input.0, self.input.1);
        for sd in &seeds {
            let _ = write!(s, "\tseed{sd}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}\t{}\t{}\t{}", r.name, r.params, r.flops, r.mean_top1().map_or("-".into(), |m| format!("{:.4}", m)));
            for (_, t) in &r.runs {
                let _ = write!(s, "\t{t:.4}");
            }
            s.push('\n');
        }
        s
    }
}

/// Counts every row and, given data, trains it once per seed.
pub fn run_ablation(
    base: &TrainConfig,
    grid: Grid,
    seeds: &[u64],
    data: Option<(&Dataset, &Dataset)>,
    progress: &mut dyn FnMut(&str, u64, &EpochRecord),
) -> Result<AblationReport> {
    let input = base.model.input_size;
    let mut rows = Vec::new();
    for (name, model) in grid_rows(grid, &base.model) {
        model.validate()?;
        let counted = count(&Model::<f32>::declare(&model)?, input)?;
        let mut runs = Vec::new();
        if let Some((tr, te)) = data {
            for &seed in seeds {
                let cfg = TrainConfig { model: model.clone(), seed, ..base.clone() };
                let summary = train_with(&cfg, tr, Some(te), None, &mut |r| progress(&name, seed, r))?;
                let top1 = summary.history.final_top1().ok_or_else(|| Error::Contract("run produced no evaluation".into()))?;
                runs.push((seed, top1));
            }
        }
        rows.push(AblationRow { name, params: counted.total_params(), flops: counted.total_flops(), runs });
    }
    Ok(AblationReport { grid, input, rows })
}
