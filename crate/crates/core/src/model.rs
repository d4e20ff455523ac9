//! The PartialNet family: a 4×4 patch stem, four stages of partial-attention
//! blocks joined by 2×2 merging layers, and a pooled classifier head.

use std::fmt;
use std::str::FromStr;

use pn_tensor::{Activation, Element, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{PartialConv, PatCh, PatSf, PatSp, Scope};
use crate::dpconv::{log2_exact, DpConv};
use crate::error::{config, Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::layers::{BatchNorm, Conv, ConvBn, ConvShape};
use crate::params::{Mode, ParamId, ParameterStore, Session};
use crate::split::SplitSpec;

/// Total downsampling from input to the last stage.
pub const NETWORK_STRIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    T0,
    T1,
    T2,
    S,
    M,
    L,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::T0, Variant::T1, Variant::T2, Variant::S, Variant::M, Variant::L];

    pub fn name(self) -> &'static str {
        match self {
            Variant::T0 => "T0",
            Variant::T1 => "T1",
            Variant::T2 => "T2",
            Variant::S => "S",
            Variant::M => "M",
            Variant::L => "L",
        }
    }

    /// `(base width, blocks per stage, activation)`.
    pub fn shape(self) -> (usize, [usize; 4], Activation) {
        match self {
            Variant::T0 => (32, [1, 2, 8, 2], Activation::Gelu),
            Variant::T1 => (48, [1, 2, 8, 2], Activation::Gelu),
            Variant::T2 => (64, [2, 2, 6, 4], Activation::Relu),
            Variant::S => (96, [2, 2, 9, 4], Activation::Relu),
            Variant::M => (128, [2, 3, 16, 4], Activation::Relu),
            Variant::L => (160, [2, 3, 20, 4], Activation::Relu),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected T0, T1, T2, S, M or L)")))
    }
}

/// Token mixer used in stages 1-3.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    /// Channel-attention partial convolution, or a plain partial
    /// convolution when channel attention is switched off.
    Pat,
    /// Dense 3×3 convolution over all channels.
    Conv,
    /// Depthwise 3×3 convolution.
    DwConv,
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixerKind::Pat => "pat",
            MixerKind::Conv => "conv",
            MixerKind::DwConv => "dwconv",
        })
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pat" => Ok(MixerKind::Pat),
            "conv" => Ok(MixerKind::Conv),
            "dwconv" => Ok(MixerKind::DwConv),
            other => config(format!("unknown mixer `{other}` (expected pat, conv or dwconv)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_width: usize,
    pub stage_blocks: [usize; 4],
    pub mlp_ratio: usize,
    /// Fraction of channels convolved, per stage.
    pub split_ratio: [f64; 4],
    /// Learn the split with gated convolutions instead of fixing it.
    pub dynamic: bool,
    /// Gates initially on per dynamic layer; `None` starts fully dense.
    pub dynamic_init_ones: Option<usize>,
    pub activation: Activation,
    pub head_width: usize,
    pub num_classes: usize,
    pub input_size: (usize, usize),
    /// Largest per-block residual drop rate; scaled linearly with depth.
    pub drop_path: f64,
    pub pat_ch: bool,
    pub pat_sp: bool,
    pub pat_sf: bool,
    pub scope: Scope,
    pub mixer: MixerKind,
    /// Kernel of the convolution beside self-attention.
    pub sf_conv_k: usize,
}

impl ModelConfig {
    pub fn variant(v: Variant) -> ModelConfig {
        let (c, blocks, act) = v.shape();
        ModelConfig { base_width: c, stage_blocks: blocks, activation: act, ..ModelConfig::custom(c, blocks) }
    }

    /// ImageNet-shaped defaults at the given width and depth.
    pub fn custom(base_width: usize, stage_blocks: [usize; 4]) -> ModelConfig {
        ModelConfig {
            base_width,
            stage_blocks,
            mlp_ratio: 2,
            split_ratio: [0.25; 4],
            dynamic: false,
            dynamic_init_ones: None,
            activation: Activation::Relu,
            head_width: 1280,
            num_classes: 1000,
            input_size: (224, 224),
            drop_path: 0.0,
            pat_ch: true,
            pat_sp: true,
            pat_sf: true,
            scope: Scope::Partial,
            mixer: MixerKind::Pat,
            sf_conv_k: 1,
        }
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        let c = self.base_width;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// Token grid seen by the last stage.
    pub fn last_grid(&self) -> (usize, usize) {
        (self.input_size.0 / NETWORK_STRIDE, self.input_size.1 / NETWORK_STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.head_width == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return config("widths, mlp ratio and class count must be positive");
        }
        if self.stage_blocks.contains(&0) {
            return config(format!("every stage needs at least one block, got {:?}", self.stage_blocks));
        }
        let (h, w) = self.input_size;
        if h < NETWORK_STRIDE || w < NETWORK_STRIDE || h % NETWORK_STRIDE != 0 || w % NETWORK_STRIDE != 0 {
            return config(format!("input {h}x{w} must be a positive multiple of {NETWORK_STRIDE}"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return config(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        if self.sf_conv_k % 2 == 0 {
            return config(format!("sf_conv_k must be odd, got {}", self.sf_conv_k));
        }
        for (c, r) in self.stage_widths().into_iter().zip(self.split_ratio) {
            if self.dynamic {
                log2_exact(c).map_err(|_| Error::Config(format!("dynamic split needs power-of-two widths, got {c}")))?;
            } else {
                SplitSpec::attention(c, SplitSpec::from_ratio(c, r)?.c_p())?;
            }
        }
        Ok(())
    }

    pub fn to_kv(&self, out: &mut KvWriter) {
        out.put("width", self.base_width)
            .put_list("blocks", &self.stage_blocks)
            .put("mlp_ratio", self.mlp_ratio)
            .put_list("split_ratio", &self.split_ratio)
            .put("dynamic", self.dynamic)
            .put("dynamic_init_ones", self.dynamic_init_ones.map_or("all".to_string(), |v| v.to_string()))
            .put("activation", self.activation)
            .put("head_width", self.head_width)
            .put("num_classes", self.num_classes)
            .put_list("input_size", &[self.input_size.0, self.input_size.1])
            .put("drop_path", self.drop_path)
            .put("pat_ch", self.pat_ch)
            .put("pat_sp", self.pat_sp)
            .put("pat_sf", self.pat_sf)
            .put("scope", self.scope)
            .put("mixer", self.mixer)
            .put("sf_conv_k", self.sf_conv_k);
    }

    /// Consumes model keys from `kv`. `variant` picks the base shape; any
    /// explicit key overrides it.
    pub fn from_kv(kv: &mut KvMap) -> Result<ModelConfig> {
        Self::from_kv_over(kv, ModelConfig::custom(32, [1, 2, 8, 2]))
    }

    /// As [`ModelConfig::from_kv`] with unset keys taken from `base`. A
    /// `variant` key replaces only width, depth and activation.
    pub fn from_kv_over(kv: &mut KvMap, base: ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base;
        if let Some(v) = kv.take_str("variant") {
            let (c, blocks, act) = v.parse::<Variant>()?.shape();
            cfg.base_width = c;
            cfg.stage_blocks = blocks;
            cfg.activation = act;
        }
        if let Some(c) = kv.take("width")? {
            cfg.base_width = c;
        }
        if let Some(b) = kv.take_list::<usize>("blocks")? {
            cfg.stage_blocks = b
                .try_into()
                .map_err(|b: Vec<usize>| Error::Config(format!("`blocks` needs 4 entries, got {}", b.len())))?;
        }
        cfg.mlp_ratio = kv.take_or("mlp_ratio", cfg.mlp_ratio)?;
        if let Some(r) = kv.take_list::<f64>("split_ratio")? {
            cfg.split_ratio = match r.len() {
                1 => [r[0]; 4],
                4 => [r[0], r[1], r[2], r[3]],
                n => return config(format!("`split_ratio` needs 1 or 4 entries, got {n}")),
            };
        }
        cfg.dynamic = kv.take_or("dynamic", cfg.dynamic)?;
        if let Some(s) = kv.take_str("dynamic_init_ones") {
            cfg.dynamic_init_ones = match s.as_str() {
                "all" => None,
                n => Some(n.parse().map_err(|_| Error::Config(format!("`dynamic_init_ones`: cannot parse `{n}`")))?),
            };
        }
        if let Some(a) = kv.take_str("activation") {
            cfg.activation = a.parse().map_err(Error::Config)?;
        }
        cfg.head_width = kv.take_or("head_width", cfg.head_width)?;
        cfg.num_classes = kv.take_or("num_classes", cfg.num_classes)?;
        if let Some(s) = kv.take_list::<usize>("input_size")? {
            cfg.input_size = match s.len() {
                1 => (s[0], s[0]),
                2 => (s[0], s[1]),
                n => return config(format!("`input_size` needs 1 or 2 entries, got {n}")),
            };
        }
        cfg.drop_path = kv.take_or("drop_path", cfg.drop_path)?;
        cfg.pat_ch = kv.take_or("pat_ch", cfg.pat_ch)?;
        cfg.pat_sp = kv.take_or("pat_sp", cfg.pat_sp)?;
        cfg.pat_sf = kv.take_or("pat_sf", cfg.pat_sf)?;
        if let Some(s) = kv.take_str("scope") {
            cfg.scope = s.parse().map_err(Error::Config)?;
        }
        if let Some(m) = kv.take_str("mixer") {
            cfg.mixer = m.parse()?;
        }
        cfg.sf_conv_k = kv.take_or("sf_conv_k", cfg.sf_conv_k)?;
        Ok(cfg)
    }

    pub fn kv_text(&self) -> String {
        let mut w = KvWriter::default();
        self.to_kv(&mut w);
        w.finish()
    }

    pub fn parse_kv_text(text: &str) -> Result<ModelConfig> {
        let mut kv = KvMap::parse(text)?;
        let cfg = ModelConfig::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }
}

/// Pointwise expansion, batchnorm, activation, pointwise projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub conv1: Conv,
    pub bn: Option<BatchNorm>,
    pub act: Activation,
    pub conv2: Conv,
}

impl Mlp {
    fn declare<T: Element>(store: &mut ParameterStore<T>, name: &str, c: usize, ratio: usize, act: Activation) -> Result<Mlp> {
        let hidden = c * ratio;
        Ok(Mlp {
            conv1: Conv::declare(store, &format!("{name}.conv1"), ConvShape::new(c, hidden, 1))?,
            bn: Some(BatchNorm::declare(store, &format!("{name}.bn"), hidden)?),
            act,
            conv2: Conv::declare(store, &format!("{name}.conv2"), ConvShape::new(hidden, c, 1))?,
        })
    }

    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.conv1.forward(sess, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(sess, y)?;
        }
        let y = sess.tape.activation(y, self.act)?;
        self.conv2.forward(sess, y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    PatCh(PatCh),
    PatSf(PatSf),
    Partial(PartialConv),
    /// Dense or depthwise convolution over every channel.
    Full(Conv),
}

impl Mixer {
    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            Mixer::PatCh(b) => b.forward(sess, x),
            Mixer::PatSf(b) => b.forward(sess, x),
            Mixer::Partial(b) => b.forward(sess, x),
            Mixer::Full(c) => c.forward(sess, x),
        }
    }
}

/// Block layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockForm {
    /// One shortcut around mixer, MLP and spatial attention.
    Single,
    /// A shortcut around the mixer and another around MLP plus spatial attention.
    Double,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub form: BlockForm,
    pub mixer: Mixer,
    pub mlp: Mlp,
    pub post: Option<PatSp>,
    pub drop_path: f64,
}

fn drop_residual<T: Element>(sess: &mut Session<'_, T>, x: Var, y: Var, rate: f64) -> Result<Var> {
    if !sess.training() || rate <= 0.0 {
        return Ok(sess.tape.add(x, y)?);
    }
    let n = sess.tape.shape(y)[0];
    let keep = 1.0 - rate;
    let mask: Vec<T> = (0..n)
        .map(|_| if sess.rng().random::<f64>() < keep { T::from_f64_lossy(1.0 / keep) } else { T::zero() })
        .collect();
    let m = sess.tape.constant(Tensor::new(&[n, 1, 1, 1], mask)?)?;
    let y = sess.tape.mul(y, m)?;
    Ok(sess.tape.add(x, y)?)
}

impl Block {
    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self.form {
            BlockForm::Single => {
                let y = self.mixer.forward(sess, x)?;
                let y = self.tail(sess, y)?;
                drop_residual(sess, x, y, self.drop_path)
            }
            BlockForm::Double => {
                let y = self.mixer.forward(sess, x)?;
                let x = drop_residual(sess, x, y, self.drop_path)?;
                let y = self.tail(sess, x)?;
                drop_residual(sess, x, y, self.drop_path)
            }
        }
    }

    fn tail<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.mlp.forward(sess, x)?;
        match &self.post {
            Some(sp) => sp.forward(sess, y),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub width: usize,
    /// Downsampling layer in front of stages 2-4.
    pub merge: Option<ConvBn>,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
    pub act: Activation,
    pub fc: Conv,
}

/// Layer structure; parameters live in a separate [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub cfg: ModelConfig,
    pub stem: ConvBn,
    pub stages: Vec<Stage>,
    pub head: Head,
    /// Set once batchnorms are folded and convolutions merged.
    pub fused: bool,
}

impl Network {
    pub fn declare<T: Element>(cfg: &ModelConfig, store: &mut ParameterStore<T>) -> Result<Network> {
        cfg.validate()?;
        let widths = cfg.stage_widths();
        let stem = ConvBn::declare(store, "stem", ConvShape::new(3, widths[0], 4).stride(4).padding(0))?;
        let total: usize = cfg.stage_blocks.iter().sum();
        let mut depth = 0;
        let mut stages = Vec::with_capacity(4);
        for (si, (&c, &nb)) in widths.iter().zip(&cfg.stage_blocks).enumerate() {
            let merge = if si == 0 {
                None
            } else {
                let s = ConvShape::new(widths[si - 1], c, 2).stride(2).padding(0);
                Some(ConvBn::declare(store, &format!("stages.{si}.merge"), s)?)
            };
            let mut blocks = Vec::with_capacity(nb);
            for bi in 0..nb {
                let rate = if total > 1 { cfg.drop_path * depth as f64 / (total - 1) as f64 } else { 0.0 };
                depth += 1;
                blocks.push(declare_block(cfg, store, &format!("stages.{si}.blocks.{bi}"), si, c, rate)?);
            }
            stages.push(Stage { width: c, merge, blocks });
        }
        let last = widths[3];
        let head = Head {
            conv: Conv::declare(store, "head.conv", ConvShape::new(last, cfg.head_width, 1))?,
            bn: Some(BatchNorm::declare(store, "head.bn", cfg.head_width)?),
            act: cfg.activation,
            fc: Conv::declare(store, "head.fc", ConvShape::new(cfg.head_width, cfg.num_classes, 1).bias(true))?,
        };
        Ok(Network { cfg: cfg.clone(), stem, stages, head, fused: false })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return config(format!("expected an [n, 3, h, w] batch, got {shape:?}"));
        }
        let (h, w) = (shape[2], shape[3]);
        if h < NETWORK_STRIDE || w < NETWORK_STRIDE || h % NETWORK_STRIDE != 0 || w % NETWORK_STRIDE != 0 {
            return config(format!("input {h}x{w} must be a positive multiple of {NETWORK_STRIDE}"));
        }
        Ok(())
    }

    /// Logits `[n, classes]` and the output of each stage.
    pub fn forward_features<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(sess.tape.shape(x))?;
        let mut y = self.stem.forward(sess, x)?;
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                y = m.forward(sess, y)?;
            }
            for b in &stage.blocks {
                y = b.forward(sess, y)?;
            }
            feats.push(y);
        }
        let n = sess.tape.shape(y)[0];
        let p = sess.tape.global_avg_pool(y)?;
        let mut z = self.head.conv.forward(sess, p)?;
        if let Some(bn) = &self.head.bn {
            z = bn.forward(sess, z)?;
        }
        let z = sess.tape.activation(z, self.head.act)?;
        let z = self.head.fc.forward(sess, z)?;
        let logits = sess.tape.reshape(z, &[n, self.cfg.num_classes])?;
        Ok((logits, feats))
    }

    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_features(sess, x)?.0)
    }

    /// Every gated convolution, with its block path.
    pub fn dynamic_layers(&self) -> Vec<(String, &DpConv)> {
        use crate::blocks::BranchConv;
        let mut out: Vec<(String, &DpConv)> = Vec::new();
        fn push<'a>(out: &mut Vec<(String, &'a DpConv)>, name: String, b: Option<&'a BranchConv>) {
            if let Some(BranchConv::Dynamic(d)) = b {
                out.push((name, d));
            }
        }
        for (si, st) in self.stages.iter().enumerate() {
            for (bi, b) in st.blocks.iter().enumerate() {
                let base = format!("stages.{si}.blocks.{bi}");
                match &b.mixer {
                    Mixer::PatCh(p) => push(&mut out, format!("{base}.mixer"), Some(&p.conv)),
                    Mixer::PatSf(p) => push(&mut out, format!("{base}.mixer"), Some(&p.conv)),
                    Mixer::Partial(p) => push(&mut out, format!("{base}.mixer"), Some(&p.conv)),
                    Mixer::Full(_) => {}
                }
                if let Some(sp) = &b.post {
                    push(&mut out, format!("{base}.post"), sp.conv.as_ref());
                }
            }
        }
        out
    }

    /// Standalone batchnorm layers executed by a forward pass.
    pub fn batchnorm_count(&self) -> usize {
        let mut n = usize::from(self.stem.bn.is_some()) + usize::from(self.head.bn.is_some());
        for st in &self.stages {
            n += st.merge.as_ref().map_or(0, |m| usize::from(m.bn.is_some()));
            for b in &st.blocks {
                n += usize::from(b.mlp.bn.is_some());
                if let Mixer::PatCh(p) = &b.mixer {
                    n += usize::from(p.stat_bn.is_some());
                }
            }
        }
        n
    }
}

fn declare_block<T: Element>(
    cfg: &ModelConfig,
    store: &mut ParameterStore<T>,
    name: &str,
    stage: usize,
    c: usize,
    drop_path: f64,
) -> Result<Block> {
    let last = stage == 3;
    let dynamic = if cfg.dynamic {
        let n = log2_exact(c)?;
        Some(cfg.dynamic_init_ones.unwrap_or(n).min(n))
    } else {
        None
    };
    let split = if cfg.dynamic {
        // Nominal split for parameter sizing only; the live one comes from the gates.
        SplitSpec::new(c, SplitSpec::from_ratio(c, cfg.split_ratio[stage])?.c_p().min(c - 1).max(1))?
    } else {
        SplitSpec::from_ratio(c, cfg.split_ratio[stage])?
    };
    let mname = format!("{name}.mixer");
    let mixer = if last {
        if cfg.pat_sf {
            Mixer::PatSf(PatSf::declare(store, &mname, split, cfg.scope, cfg.sf_conv_k, cfg.last_grid())?)
        } else {
            Mixer::Partial(PartialConv::declare(store, &mname, split, 3, dynamic)?)
        }
    } else {
        match cfg.mixer {
            MixerKind::Conv => Mixer::Full(Conv::declare(store, &format!("{mname}.conv"), ConvShape::new(c, c, 3))?),
            MixerKind::DwConv => {
                Mixer::Full(Conv::declare(store, &format!("{mname}.conv"), ConvShape::new(c, c, 3).groups(c))?)
            }
            MixerKind::Pat if cfg.pat_ch => Mixer::PatCh(PatCh::declare(store, &mname, split, cfg.scope, dynamic)?),
            MixerKind::Pat => Mixer::Partial(PartialConv::declare(store, &mname, split, 3, dynamic)?),
        }
    };
    let mlp = Mlp::declare(store, &format!("{name}.mlp"), c, cfg.mlp_ratio, cfg.activation)?;
    let post = if cfg.pat_sp { Some(PatSp::declare(store, &format!("{name}.post"), split, cfg.scope, dynamic)?) } else { None };
    let form = if last { BlockForm::Double } else { BlockForm::Single };
    Ok(Block { form, mixer, mlp, post, drop_path })
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Element> {
    pub net: Network,
    pub store: ParameterStore<T>,
}

impl<T: Element> Model<T> {
    /// Structure and parameter shapes only; nothing is allocated.
    pub fn declare(cfg: &ModelConfig) -> Result<Model<T>> {
        let mut store = ParameterStore::new();
        let net = Network::declare(cfg, &mut store)?;
        Ok(Model { net, store })
    }

    /// Declared and initialized from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
        let mut m = Self::declare(cfg)?;
        m.store.materialize(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn parts_mut(&mut self) -> (&Network, &mut ParameterStore<T>) {
        (&self.net, &mut self.store)
    }

    /// Forward without gradient tracking. Training mode still updates
    /// batchnorm statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut sess = Session::new(&mut self.store, mode, false, 0);
        let xv = sess.tape.constant(x.clone())?;
        let y = self.net.forward(&mut sess, xv)?;
        Ok(sess.tape.value(y).clone())
    }

    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x, Mode::Eval)
    }

    /// Shapes of each stage output for a batch.
    pub fn feature_shapes(&mut self, x: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
        let mut sess = Session::new(&mut self.store, Mode::Eval, false, 0);
        let xv = sess.tape.constant(x.clone())?;
        let (_, feats) = self.net.forward_features(&mut sess, xv)?;
        Ok(feats.iter().map(|f| sess.tape.shape(*f).to_vec()).collect())
    }

    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.net.dynamic_layers().iter().map(|(_, d)| d.gates).collect()
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model { net: self.net.clone(), store: self.store.cast() }
    }
}
