//! Partial attention convolutions: a convolution on the leading channels and
//! an attention operator on the rest, concatenated conv-first.

use pn_tensor::{Activation, Element, Tensor, Var};

use crate::dpconv::DpConv;
use crate::error::{config, Result};
use crate::layers::{BatchNorm, Conv, ConvShape, WEIGHT_STD};
use crate::params::{Init, Mode, ParamGroup, ParamId, ParamSpec, ParameterStore, Session};
use crate::split::SplitSpec;

/// Epsilon inside the square root of the per-channel standard deviation.
pub const STAT_EPS: f64 = 1e-5;
/// Channels per self-attention head.
pub const HEAD_DIM: usize = 32;

/// Which channels the attention operator sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Only the channels the convolution skipped.
    Partial,
    /// All channels, after the partial convolution.
    Full,
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scope::Partial => "partial",
            Scope::Full => "full",
        })
    }
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "partial" => Ok(Scope::Partial),
            "full" => Ok(Scope::Full),
            other => Err(format!("unknown attention scope `{other}`")),
        }
    }
}

/// Convolution applied to the leading channels.
#[derive(Clone, Debug, PartialEq)]
pub enum BranchConv {
    /// Fixed `c_p → c_p` convolution.
    Static(Conv),
    /// Gated `c → c` convolution whose `c_p` is learned.
    Dynamic(DpConv),
}

impl BranchConv {
    fn declare<T: Element>(
        store: &mut ParameterStore<T>,
        name: &str,
        split: &SplitSpec,
        k: usize,
        dynamic: Option<usize>,
    ) -> Result<BranchConv> {
        Ok(match dynamic {
            None => BranchConv::Static(Conv::declare(store, name, ConvShape::new(split.c_p(), split.c_p(), k))?),
            Some(ones) => BranchConv::Dynamic(DpConv::declare(store, name, split.c_in(), k, ones)?),
        })
    }

    /// `(y [n, c_p, h, w], c_p)`.
    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var, split: &SplitSpec) -> Result<(Var, usize)> {
        match self {
            BranchConv::Static(conv) => {
                let xc = if split.c_p() == split.c_in() { x } else { sess.tape.narrow(x, 1, 0, split.c_p())? };
                Ok((conv.forward(sess, xc)?, split.c_p()))
            }
            BranchConv::Dynamic(dp) => dp.forward_partial(sess, x),
        }
    }

    pub fn c_p<T: Element>(&self, store: &ParameterStore<T>, split: &SplitSpec) -> usize {
        match self {
            BranchConv::Static(_) => split.c_p(),
            BranchConv::Dynamic(dp) => dp.current_cp(store),
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self, BranchConv::Dynamic(_))
    }
}

/// Attention parameter width and the offset of the live slice.
fn attn_window(split: &SplitSpec, scope: Scope, dynamic: bool, c_p: usize) -> (usize, usize) {
    match (scope, dynamic) {
        (Scope::Full, _) => (0, split.c_in()),
        (Scope::Partial, true) => (c_p, split.c_in() - c_p),
        (Scope::Partial, false) => (0, split.c_att()),
    }
}

fn attn_param_width(split: &SplitSpec, scope: Scope, dynamic: bool) -> usize {
    if dynamic || scope == Scope::Full {
        split.c_in()
    } else {
        split.c_att()
    }
}

fn check_split(split: &SplitSpec, scope: Scope, dynamic: bool) -> Result<()> {
    if scope == Scope::Partial && !dynamic && split.c_att() == 0 {
        return config(format!("attention block needs c_p < {}, got {}", split.c_in(), split.c_p()));
    }
    Ok(())
}

fn sliced<T: Element>(sess: &mut Session<'_, T>, id: ParamId, axis: usize, off: usize, len: usize) -> Result<Var> {
    let v = sess.param(id)?;
    if off == 0 && sess.tape.shape(v)[axis] == len {
        return Ok(v);
    }
    Ok(sess.tape.narrow(v, axis, off, len)?)
}

/// Runs `branch` on the leading channels and `attend` on either the rest
/// (partial scope) or the whole concatenation (full scope).
fn partial_attention<T: Element>(
    sess: &mut Session<'_, T>,
    x: Var,
    split: &SplitSpec,
    scope: Scope,
    yc: Var,
    c_p: usize,
    mut attend: impl FnMut(&mut Session<'_, T>, Var, usize) -> Result<Var>,
) -> Result<Var> {
    let c = split.c_in();
    match scope {
        Scope::Partial => {
            if c_p == c {
                return Ok(yc);
            }
            let xa = sess.tape.narrow(x, 1, c_p, c - c_p)?;
            let ya = attend(sess, xa, c_p)?;
            Ok(sess.tape.concat(&[yc, ya], 1)?)
        }
        Scope::Full => {
            let y = if c_p == c {
                yc
            } else {
                let rest = sess.tape.narrow(x, 1, c_p, c - c_p)?;
                sess.tape.concat(&[yc, rest], 1)?
            };
            attend(sess, y, c_p)
        }
    }
}

/// Channel attention: `a = sigmoid(bn(w_mean·mean + w_std·std))` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatCh {
    pub split: SplitSpec,
    pub scope: Scope,
    pub conv: BranchConv,
    pub w_mean: ParamId,
    pub w_std: ParamId,
    /// Shift left behind when the statistic batchnorm is folded.
    pub stat_bias: Option<ParamId>,
    pub stat_bn: Option<BatchNorm>,
}

impl PatCh {
    pub fn declare<T: Element>(
        store: &mut ParameterStore<T>,
        name: &str,
        split: SplitSpec,
        scope: Scope,
        dynamic: Option<usize>,
    ) -> Result<PatCh> {
        check_split(&split, scope, dynamic.is_some())?;
        let conv = BranchConv::declare(store, &format!("{name}.conv"), &split, 3, dynamic)?;
        let w = attn_param_width(&split, scope, dynamic.is_some());
        let w_mean = store.declare(ParamSpec::new(format!("{name}.w_mean"), &[w], ParamGroup::NoDecay, Init::Zeros))?;
        let w_std = store.declare(ParamSpec::new(format!("{name}.w_std"), &[w], ParamGroup::NoDecay, Init::Zeros))?;
        let stat_bn = Some(BatchNorm::declare(store, &format!("{name}.stat_bn"), w)?);
        Ok(PatCh { split, scope, conv, w_mean, w_std, stat_bias: None, stat_bn })
    }

    /// Per-channel weights in (0, 1) for `xa`, shaped `[n, len, 1, 1]`.
    pub fn channel_weights<T: Element>(&self, sess: &mut Session<'_, T>, xa: Var, off: usize, len: usize) -> Result<Var> {
        let (m, s) = sess.tape.channel_stats(xa, STAT_EPS)?;
        let wm = sliced(sess, self.w_mean, 0, off, len)?;
        let ws = sliced(sess, self.w_std, 0, off, len)?;
        let a = sess.tape.mul(m, wm)?;
        let b = sess.tape.mul(s, ws)?;
        let z = sess.tape.add(a, b)?;
        let n = sess.tape.shape(z)[0];
        let mut z = sess.tape.reshape(z, &[n, len, 1, 1])?;
        if let Some(bn) = &self.stat_bn {
            z = bn.forward_slice(sess, z, off, len)?;
        }
        if let Some(bias) = self.stat_bias {
            let b = sliced(sess, bias, 0, off, len)?;
            let b = sess.tape.reshape(b, &[len, 1, 1])?;
            z = sess.tape.add(z, b)?;
        }
        Ok(sess.tape.activation(z, Activation::Sigmoid)?)
    }

    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (yc, c_p) = self.conv.forward(sess, x, &self.split)?;
        let dynamic = self.conv.is_dynamic();
        let (split, scope) = (self.split, self.scope);
        partial_attention(sess, x, &split, scope, yc, c_p, |sess, xa, c_p| {
            let (off, len) = attn_window(&split, scope, dynamic, c_p);
            let a = self.channel_weights(sess, xa, off, len)?;
            Ok(sess.tape.mul(xa, a)?)
        })
    }
}

/// Spatial attention: a one-channel map `hard_sigmoid(conv1x1(xa))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatSp {
    pub split: SplitSpec,
    pub scope: Scope,
    /// `None` once merged into the preceding pointwise convolution.
    pub conv: Option<BranchConv>,
    pub squeeze_weight: ParamId,
    pub squeeze_bias: ParamId,
}

impl PatSp {
    pub fn declare<T: Element>(
        store: &mut ParameterStore<T>,
        name: &str,
        split: SplitSpec,
        scope: Scope,
        dynamic: Option<usize>,
    ) -> Result<PatSp> {
        check_split(&split, scope, dynamic.is_some())?;
        let conv = BranchConv::declare(store, &format!("{name}.conv"), &split, 1, dynamic)?;
        let w = attn_param_width(&split, scope, dynamic.is_some());
        let squeeze_weight = store.declare(ParamSpec::new(
            format!("{name}.squeeze.weight"),
            &[1, w, 1, 1],
            ParamGroup::Decay,
            Init::TruncNormal(WEIGHT_STD),
        ))?;
        let squeeze_bias =
            store.declare(ParamSpec::new(format!("{name}.squeeze.bias"), &[1], ParamGroup::NoDecay, Init::Zeros))?;
        Ok(PatSp { split, scope, conv: Some(conv), squeeze_weight, squeeze_bias })
    }

    /// The `[n, 1, h, w]` map in [0, 1].
    pub fn spatial_map<T: Element>(&self, sess: &mut Session<'_, T>, xa: Var, off: usize, len: usize) -> Result<Var> {
        let w = sliced(sess, self.squeeze_weight, 1, off, len)?;
        let b = sess.param(self.squeeze_bias)?;
        let z = sess.tape.conv2d(xa, w, Some(b), Default::default())?;
        Ok(sess.tape.activation(z, Activation::HardSigmoid)?)
    }

    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (yc, c_p) = match &self.conv {
            Some(bc) => bc.forward(sess, x, &self.split)?,
            None => (sess.tape.narrow(x, 1, 0, self.split.c_p())?, self.split.c_p()),
        };
        let dynamic = self.conv.as_ref().is_some_and(|c| c.is_dynamic());
        let (split, scope) = (self.split, self.scope);
        partial_attention(sess, x, &split, scope, yc, c_p, |sess, xa, c_p| {
            let (off, len) = attn_window(&split, scope, dynamic, c_p);
            let m = self.spatial_map(sess, xa, off, len)?;
            Ok(sess.tape.mul(xa, m)?)
        })
    }
}

pub fn heads_for(width: usize) -> Result<usize> {
    let heads = (width / HEAD_DIM).max(1);
    if width % heads != 0 {
        return config(format!("{width} attention channels not divisible by {heads} heads"));
    }
    Ok(heads)
}

/// Row of the relative-position table for query `q` and key `k` on a grid
/// whose table was sized for `grid`.
pub fn rpe_row(grid: (usize, usize), q: (usize, usize), k: (usize, usize)) -> usize {
    let dy = q.0 + grid.0 - 1 - k.0;
    let dx = q.1 + grid.1 - 1 - k.1;
    dy * (2 * grid.1 - 1) + dx
}

/// Flat gather indices into a `[rows, heads]` table, ordered `[heads, t, t]`.
pub fn rpe_index(grid: (usize, usize), h: usize, w: usize, heads: usize) -> Vec<usize> {
    let t = h * w;
    let mut idx = Vec::with_capacity(heads * t * t);
    for hd in 0..heads {
        for qi in 0..t {
            for ki in 0..t {
                idx.push(rpe_row(grid, (qi / w, qi % w), (ki / w, ki % w)) * heads + hd);
            }
        }
    }
    idx
}

/// Multi-head self-attention over spatial tokens with a learned relative
/// position bias.
#[derive(Clone, Debug, PartialEq)]
pub struct PatSf {
    pub split: SplitSpec,
    pub scope: Scope,
    pub conv: BranchConv,
    pub qkv: Conv,
    pub proj: Conv,
    pub heads: usize,
    pub rpe: ParamId,
    /// Largest token grid the position table covers.
    pub grid: (usize, usize),
}

impl PatSf {
    pub fn declare<T: Element>(
        store: &mut ParameterStore<T>,
        name: &str,
        split: SplitSpec,
        scope: Scope,
        conv_k: usize,
        grid: (usize, usize),
    ) -> Result<PatSf> {
        check_split(&split, scope, false)?;
        if grid.0 == 0 || grid.1 == 0 {
            return config("self-attention grid must be non-empty");
        }
        let conv = BranchConv::declare(store, &format!("{name}.conv"), &split, conv_k, None)?;
        let w = attn_param_width(&split, scope, false);
        let heads = heads_for(w)?;
        let qkv = Conv::declare(store, &format!("{name}.qkv"), ConvShape::new(w, 3 * w, 1).bias(true))?;
        let proj = Conv::declare(store, &format!("{name}.proj"), ConvShape::new(w, w, 1).bias(true))?;
        let rows = (2 * grid.0 - 1) * (2 * grid.1 - 1);
        let rpe = store.declare(ParamSpec::new(
            format!("{name}.rpe"),
            &[rows, heads],
            ParamGroup::NoDecay,
            Init::TruncNormal(WEIGHT_STD),
        ))?;
        Ok(PatSf { split, scope, conv, qkv, proj, heads, rpe, grid })
    }

    /// Softmax-normalized scores `[n, heads, t, t]` and the attended output.
    pub fn attend<T: Element>(&self, sess: &mut Session<'_, T>, xa: Var) -> Result<(Var, Var)> {
        let s = sess.tape.shape(xa).to_vec();
        let (n, ca, h, w) = (s[0], s[1], s[2], s[3]);
        if h > self.grid.0 || w > self.grid.1 {
            return config(format!("token grid {h}x{w} exceeds position table {}x{}", self.grid.0, self.grid.1));
        }
        let (t, d, nh) = (h * w, ca / self.heads, n * self.heads);
        let qkv = self.qkv.forward(sess, xa)?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let p = sess.tape.narrow(qkv, 1, i * ca, ca)?;
            parts.push(sess.tape.reshape(p, &[nh, d, t])?);
        }
        let scores = sess.tape.bmm(parts[0], parts[1], true, false)?;
        let scores = sess.tape.scale(scores, T::from_f64_lossy(1.0 / (d as f64).sqrt()))?;
        let scores = sess.tape.reshape(scores, &[n, self.heads, t, t])?;
        let table = sess.param(self.rpe)?;
        let bias = sess.tape.gather(table, rpe_index(self.grid, h, w, self.heads), &[self.heads, t, t])?;
        let scores = sess.tape.add(scores, bias)?;
        let attn = sess.tape.softmax(scores, 3)?;
        let a = sess.tape.reshape(attn, &[nh, t, t])?;
        let o = sess.tape.bmm(parts[2], a, false, true)?;
        let o = sess.tape.reshape(o, &[n, ca, h, w])?;
        Ok((attn, self.proj.forward(sess, o)?))
    }

    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (yc, c_p) = self.conv.forward(sess, x, &self.split)?;
        let (split, scope) = (self.split, self.scope);
        partial_attention(sess, x, &split, scope, yc, c_p, |sess, xa, _| Ok(self.attend(sess, xa)?.1))
    }
}

/// Convolution on the leading channels, identity on the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialConv {
    pub split: SplitSpec,
    pub conv: BranchConv,
}

impl PartialConv {
    pub fn declare<T: Element>(
        store: &mut ParameterStore<T>,
        name: &str,
        split: SplitSpec,
        k: usize,
        dynamic: Option<usize>,
    ) -> Result<PartialConv> {
        Ok(PartialConv { split, conv: BranchConv::declare(store, &format!("{name}.conv"), &split, k, dynamic)? })
    }

    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (yc, c_p) = self.conv.forward(sess, x, &self.split)?;
        let c = self.split.c_in();
        if c_p == c {
            return Ok(yc);
        }
        let rest = sess.tape.narrow(x, 1, c_p, c - c_p)?;
        Ok(sess.tape.concat(&[yc, rest], 1)?)
    }
}

/// Runs `f` once on a standalone store, without gradient tracking.
pub fn run_standalone<T: Element>(
    store: &mut ParameterStore<T>,
    x: &Tensor<T>,
    mode: Mode,
    f: impl FnOnce(&mut Session<'_, T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut sess = Session::new(store, mode, false, 0);
    let xv = sess.tape.constant(x.clone())?;
    let y = f(&mut sess, xv)?;
    Ok(sess.tape.value(y).clone())
}
