//! Analytic parameter and FLOP counts, plus a wall-clock throughput probe.

use std::time::Instant;

use pn_tensor::{Element, Tensor};

use crate::blocks::{BranchConv, PartialConv, PatCh, PatSf, PatSp, Scope};
use crate::error::{config, Result};
use crate::layers::{BatchNorm, Conv, ConvBn};
use crate::model::{Mixer, Model, Network, NETWORK_STRIDE};
use crate::params::{Mode, ParamId, ParameterStore};

/// Stamped on every report.
pub const CONVENTION: &str = "1 MAC = 1 FLOP; conv = h'*w'*k^2*(c_in/groups)*c_out; \
attention: Q*K^T and scores*V as MACs, softmax 5/element, position bias add, statistics, \
gating multiplies and pooling 1/element; batchnorm, activations and residual adds 0; \
params exclude batchnorm running statistics and include gates and position tables";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountRow {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountReport {
    pub rows: Vec<CountRow>,
    pub input: (usize, usize),
    pub convention: &'static str,
}

impl CountReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    /// Aligned human-readable table with totals.
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = format!("# input {}x{}\n# convention: {}\n", self.input.0, self.input.1, self.convention);
        s.push_str(&format!("{:<w$}  {:<12}  {:>12}  {:>15}\n", "layer", "kind", "params", "flops"));
        for r in &self.rows {
            s.push_str(&format!("{:<w$}  {:<12}  {:>12}  {:>15}\n", r.name, r.kind, r.params, r.flops));
        }
        s.push_str(&format!(
            "{:<w$}  {:<12}  {:>12}  {:>15}\n# params {:.3}M  flops {:.3}G\n",
            "total",
            "",
            self.total_params(),
            self.total_flops(),
            self.total_params() as f64 / 1e6,
            self.total_flops() as f64 / 1e9
        ));
        s
    }

    /// Tab-separated rows with a header, totals last.
    pub fn to_delimited(&self) -> String {
        let mut s = String::from("layer\tkind\tparams\tflops\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.name, r.kind, r.params, r.flops));
        }
        s.push_str(&format!("total\t\t{}\t{}\n", self.total_params(), self.total_flops()));
        s
    }
}

struct Counter<'a, T: Element> {
    store: &'a ParameterStore<T>,
    rows: Vec<CountRow>,
}

/// `(flops, h_out, w_out)` of one convolution on an `h`×`w` input.
pub fn conv_flops(c: &Conv, h: usize, w: usize) -> (u64, usize, usize) {
    let (ho, wo) = c.out_hw(h, w);
    let per = (c.k * c.k * (c.c_in / c.params.groups) * c.c_out) as u64;
    (per * (ho * wo) as u64, ho, wo)
}

impl<T: Element> Counter<'_, T> {
    fn p(&self, id: ParamId) -> u64 {
        self.store.numel(id) as u64
    }

    fn conv_params(&self, c: &Conv) -> u64 {
        self.p(c.weight) + c.bias.map_or(0, |b| self.p(b))
    }

    fn bn_params(&self, bn: &Option<BatchNorm>) -> u64 {
        bn.as_ref().map_or(0, |b| self.p(b.gamma) + self.p(b.beta))
    }

    fn push(&mut self, name: String, kind: &'static str, params: u64, flops: u64) {
        self.rows.push(CountRow { name, kind, params, flops });
    }

    fn conv_bn(&mut self, name: &str, kind: &'static str, cb: &ConvBn, h: usize, w: usize) -> (usize, usize) {
        let (f, ho, wo) = conv_flops(&cb.conv, h, w);
        let p = self.conv_params(&cb.conv) + self.bn_params(&cb.bn);
        self.push(name.to_string(), kind, p, f);
        (ho, wo)
    }

    /// `(params, flops, c_p)` of the convolution branch.
    fn branch(&self, b: &BranchConv, c_p_static: usize, plane: u64) -> (u64, u64, usize) {
        match b {
            BranchConv::Static(c) => (self.conv_params(c), (c.k * c.k * c.c_in * c.c_out) as u64 * plane, c_p_static),
            BranchConv::Dynamic(d) => {
                let c_p = d.current_cp(self.store);
                let p = self.p(d.weight) + self.p(d.gates);
                (p, (d.k * d.k * c_p * c_p) as u64 * plane, c_p)
            }
        }
    }

    fn attn_len(split_c: usize, c_p: usize, scope: Scope) -> usize {
        match scope {
            Scope::Partial => split_c - c_p,
            Scope::Full => split_c,
        }
    }

    fn pat_ch(&mut self, name: String, b: &PatCh, plane: u64) {
        let (mut p, mut f, c_p) = self.branch(&b.conv, b.split.c_p(), plane);
        let len = Self::attn_len(b.split.c_in(), c_p, b.scope) as u64;
        p += self.p(b.w_mean) + self.p(b.w_std) + self.bn_params(&b.stat_bn) + b.stat_bias.map_or(0, |s| self.p(s));
        // mean and variance passes, the two-term affine, the gating multiply
        if len > 0 {
            f += 2 * len * plane + 2 * len + len * plane;
        }
        self.push(name, "pat_ch", p, f);
    }

    fn pat_sp(&mut self, name: String, b: &PatSp, plane: u64) {
        let (mut p, mut f, c_p) = match &b.conv {
            Some(bc) => self.branch(bc, b.split.c_p(), plane),
            None => (0, 0, b.split.c_p()),
        };
        let len = Self::attn_len(b.split.c_in(), c_p, b.scope) as u64;
        p += self.p(b.squeeze_weight) + self.p(b.squeeze_bias);
        if len > 0 {
            f += len * plane + len * plane;
        }
        self.push(name, "pat_sp", p, f);
    }

    fn pat_sf(&mut self, name: String, b: &PatSf, plane: u64) {
        let (mut p, mut f, c_p) = self.branch(&b.conv, b.split.c_p(), plane);
        let ca = Self::attn_len(b.split.c_in(), c_p, b.scope) as u64;
        let t = plane;
        let heads = b.heads as u64;
        p += self.conv_params(&b.qkv) + self.conv_params(&b.proj) + self.p(b.rpe);
        f += t * ca * 3 * ca; // qkv
        f += t * t * ca; // Q K^T over all heads
        f += heads * t * t; // scaling
        f += heads * t * t; // position bias
        f += 5 * heads * t * t; // softmax
        f += t * t * ca; // scores V
        f += t * ca * ca; // projection
        self.push(name, "pat_sf", p, f);
    }

    fn partial(&mut self, name: String, b: &PartialConv, plane: u64) {
        let (p, f, _) = self.branch(&b.conv, b.split.c_p(), plane);
        self.push(name, "partial_conv", p, f);
    }
}

/// Parameters and FLOPs per layer for an `input` image.
pub fn count<T: Element>(model: &Model<T>, input: (usize, usize)) -> Result<CountReport> {
    count_network(&model.net, &model.store, input)
}

pub fn count_network<T: Element>(net: &Network, store: &ParameterStore<T>, input: (usize, usize)) -> Result<CountReport> {
    let (h, w) = input;
    if h < NETWORK_STRIDE || w < NETWORK_STRIDE || h % NETWORK_STRIDE != 0 || w % NETWORK_STRIDE != 0 {
        return config(format!("input {h}x{w} must be a positive multiple of {NETWORK_STRIDE}"));
    }
    let mut c = Counter { store, rows: Vec::new() };
    let (mut h, mut w) = c.conv_bn("stem", "stem", &net.stem, h, w);
    for (si, st) in net.stages.iter().enumerate() {
        if let Some(m) = &st.merge {
            (h, w) = c.conv_bn(&format!("stages.{si}.merge"), "merge", m, h, w);
        }
        let plane = (h * w) as u64;
        for (bi, b) in st.blocks.iter().enumerate() {
            let base = format!("stages.{si}.blocks.{bi}");
            match &b.mixer {
                Mixer::PatCh(p) => c.pat_ch(format!("{base}.mixer"), p, plane),
                Mixer::PatSf(p) => {
                    let grid = p.grid;
                    if h > grid.0 || w > grid.1 {
                        return config(format!("input {}x{} exceeds the attention grid the model was built for", input.0, input.1));
                    }
                    c.pat_sf(format!("{base}.mixer"), p, plane)
                }
                Mixer::Partial(p) => c.partial(format!("{base}.mixer"), p, plane),
                Mixer::Full(conv) => {
                    let (f, _, _) = conv_flops(conv, h, w);
                    let kind = if conv.params.groups > 1 { "dwconv" } else { "conv" };
                    let p = c.conv_params(conv);
                    c.push(format!("{base}.mixer"), kind, p, f)
                }
            }
            let m = &b.mlp;
            let p = c.conv_params(&m.conv1) + c.bn_params(&m.bn) + c.conv_params(&m.conv2);
            let f = conv_flops(&m.conv1, h, w).0 + conv_flops(&m.conv2, h, w).0;
            c.push(format!("{base}.mlp"), "mlp", p, f);
            if let Some(sp) = &b.post {
                c.pat_sp(format!("{base}.post"), sp, plane);
            }
        }
    }
    let last = net.stages.last().map_or(0, |s| s.width);
    c.push("pool".into(), "pool", 0, (last * h * w) as u64);
    let hd = &net.head;
    let p = c.conv_params(&hd.conv) + c.bn_params(&hd.bn);
    let f = conv_flops(&hd.conv, 1, 1).0;
    c.push("head.conv".into(), "head", p, f);
    let p = c.conv_params(&hd.fc);
    let f = conv_flops(&hd.fc, 1, 1).0;
    c.push("head.fc".into(), "classifier", p, f);
    Ok(CountReport { rows: c.rows, input, convention: CONVENTION })
}

/// Counts at the model's configured input size.
pub fn count_params<T: Element>(model: &Model<T>) -> Result<CountReport> {
    count(model, model.config().input_size)
}

pub fn count_flops<T: Element>(model: &Model<T>, input: (usize, usize)) -> Result<CountReport> {
    count(model, input)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    pub batch: usize,
    pub reps: usize,
    /// Median images per second.
    pub images_per_sec: f64,
    pub stddev: f64,
    pub threads: usize,
    pub precision: &'static str,
}

impl std::fmt::Display for Throughput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:.1} img/s (sd {:.1}) batch {} reps {} threads {} precision {}",
            self.images_per_sec, self.stddev, self.batch, self.reps, self.threads, self.precision
        )
    }
}

/// Eval-mode forward timing on a fixed random batch. The engine is single
/// threaded.
pub fn benchmark_throughput<T: Element>(model: &mut Model<T>, batch: usize, warmup: usize, reps: usize) -> Result<Throughput> {
    if batch == 0 || reps == 0 {
        return config("benchmark needs batch >= 1 and reps >= 1");
    }
    let (h, w) = model.config().input_size;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let x = Tensor::<T>::randn(&[batch, 3, h, w], 1.0, &mut rng);
    for _ in 0..warmup {
        model.forward(&x, Mode::Eval)?;
    }
    let mut rates = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        model.forward(&x, Mode::Eval)?;
        rates.push(batch as f64 / t.elapsed().as_secs_f64().max(1e-12));
    }
    let mean = rates.iter().sum::<f64>() / reps as f64;
    let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / reps as f64;
    rates.sort_by(|a, b| a.total_cmp(b));
    let median = if reps % 2 == 1 { rates[reps / 2] } else { 0.5 * (rates[reps / 2 - 1] + rates[reps / 2]) };
    Ok(Throughput { batch, reps, images_per_sec: median, stddev: var.sqrt(), threads: 1, precision: T::DTYPE.name() })
}
