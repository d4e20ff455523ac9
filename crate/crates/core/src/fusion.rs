//! Inference rewrites: batchnorm folding and merging of back-to-back
//! pointwise convolutions, checked against the unfused model.

use pn_tensor::{Activation, DType, Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::BranchConv;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, ConvBn};
use crate::model::{Mixer, Model};
use crate::params::{Init, Mode, ParamGroup, ParamSpec, ParameterStore, BN_EPS};

/// A batchnorm's affine and statistics as plain vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct BnValues {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BnValues {
    pub fn from_store<T: Element>(store: &ParameterStore<T>, bn: &BatchNorm) -> BnValues {
        let f = |t: &Tensor<T>| t.data().iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>();
        let st = store.stats(bn.stats);
        BnValues {
            gamma: f(store.value(bn.gamma)),
            beta: f(store.value(bn.beta)),
            mean: f(&st.mean),
            var: f(&st.var),
            eps: BN_EPS,
        }
    }

    /// `(scale, shift)` with `bn(z) = scale * z + shift`.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self.gamma.iter().zip(&self.var).map(|(g, v)| g / (v + self.eps).sqrt()).collect();
        let shift = self.beta.iter().zip(&self.mean).zip(&scale).map(|((b, m), s)| b - m * s).collect();
        (scale, shift)
    }
}

/// Folds an eval-mode batchnorm into the preceding convolution:
/// `w'[o] = w[o]·s[o]`, `b'[o] = (b[o] − mean[o])·s[o] + beta[o]`,
/// `s = gamma / sqrt(var + eps)`.
pub fn fold_batchnorm<T: Element>(
    conv_w: &Tensor<T>,
    conv_b: Option<&Tensor<T>>,
    bn: &BnValues,
    mode: Mode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if mode == Mode::Train {
        return Err(Error::Contract("batchnorm can only be folded with frozen eval-mode statistics".into()));
    }
    let co = conv_w.shape()[0];
    if bn.gamma.len() != co {
        return Err(Error::Contract(format!("batchnorm over {} channels after a conv with {co} outputs", bn.gamma.len())));
    }
    let (scale, _) = bn.affine();
    let per = conv_w.numel() / co;
    let mut w = conv_w.clone();
    for (o, row) in w.data_mut().chunks_mut(per).enumerate() {
        for v in row {
            *v = T::from_f64_lossy(v.to_f64_lossy() * scale[o]);
        }
    }
    let b = Tensor::from_fn(&[co], |o| {
        let b0 = conv_b.map_or(0.0, |b| b.data()[o].to_f64_lossy());
        T::from_f64_lossy((b0 - bn.mean[o]) * scale[o] + bn.beta[o])
    });
    Ok((w, b))
}

/// Two 1×1 convolutions, optionally with an activation between them.
#[derive(Clone, Debug)]
pub struct PointwiseChain<T: Element> {
    pub w1: Tensor<T>,
    pub b1: Option<Tensor<T>>,
    pub between: Option<Activation>,
    pub w2: Tensor<T>,
    pub b2: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub enum MergeOutcome<T: Element> {
    Merged(Tensor<T>, Tensor<T>),
    Skipped(String),
}

/// `w = w2·w1`, `b = w2·b1 + b2`, accumulated in 64-bit.
pub fn merge_pointwise_convs<T: Element>(
    w1: &Tensor<T>,
    b1: Option<&Tensor<T>>,
    w2: &Tensor<T>,
    b2: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s1 = w1.shape();
    let s2 = w2.shape();
    if s1.len() != 4 || s2.len() != 4 || s1[2..] != [1, 1] || s2[2..] != [1, 1] || s2[1] != s1[0] {
        return Err(Error::Contract(format!("cannot compose pointwise convs {s1:?} then {s2:?}")));
    }
    let (mid, cin, cout) = (s1[0], s1[1], s2[0]);
    let f = |t: &Tensor<T>| t.data().iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>();
    let (a, b) = (f(w1), f(w2));
    let bias1 = b1.map(f).unwrap_or_else(|| vec![0.0; mid]);
    let bias2 = b2.map(f).unwrap_or_else(|| vec![0.0; cout]);
    let mut w = vec![0.0; cout * cin];
    let mut bias = bias2;
    for o in 0..cout {
        for m in 0..mid {
            let c = b[o * mid + m];
            bias[o] += c * bias1[m];
            for i in 0..cin {
                w[o * cin + i] += c * a[m * cin + i];
            }
        }
    }
    Ok((Tensor::from_f64(&[cout, cin, 1, 1], &w)?, Tensor::from_f64(&[cout], &bias)?))
}

/// Merges `chain` unless something nonlinear sits between the convolutions.
pub fn merge_chain<T: Element>(chain: &PointwiseChain<T>) -> Result<MergeOutcome<T>> {
    if let Some(act) = chain.between {
        return Ok(MergeOutcome::Skipped(format!("{act} activation between the convolutions")));
    }
    let (w, b) = merge_pointwise_convs(&chain.w1, chain.b1.as_ref(), &chain.w2, chain.b2.as_ref())?;
    Ok(MergeOutcome::Merged(w, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewriteKind {
    FoldBatchnorm,
    /// A batchnorm over channel-attention logits absorbed into the statistic weights.
    FoldStatBatchnorm,
    MergePointwise,
}

impl std::fmt::Display for RewriteKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewriteKind::FoldBatchnorm => "fold_bn",
            RewriteKind::FoldStatBatchnorm => "fold_stat_bn",
            RewriteKind::MergePointwise => "merge_1x1",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rewrite {
    pub kind: RewriteKind,
    pub location: String,
    /// `None` when applied, otherwise why the site was left alone.
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Equivalence {
    pub max_deviation: f64,
    pub tol: f64,
    pub probes: usize,
}

impl Equivalence {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub sites: Vec<Rewrite>,
    pub params_before: usize,
    pub params_after: usize,
    pub equivalence: Equivalence,
}

impl FusionReport {
    pub fn passed(&self) -> bool {
        self.equivalence.passed()
    }

    pub fn applied(&self) -> usize {
        self.sites.iter().filter(|s| s.skipped.is_none()).count()
    }

    pub fn to_text(&self) -> String {
        let w = self.sites.iter().map(|s| s.location.len()).max().unwrap_or(8).max(8);
        let mut s = format!("{:<w$}  {:<12}  status\n", "site", "rewrite");
        for r in &self.sites {
            let status = match &r.skipped {
                None => "applied".to_string(),
                Some(why) => format!("skipped: {why}"),
            };
            s.push_str(&format!("{:<w$}  {:<12}  {status}\n", r.location, r.kind.to_string()));
        }
        let e = &self.equivalence;
        s.push_str(&format!(
            "params {} -> {}\nmax deviation {:.3e} over {} probes, tol {:.0e}: {}\n",
            self.params_before,
            self.params_after,
            e.max_deviation,
            e.probes,
            e.tol,
            if e.passed() { "PASS" } else { "FAIL" }
        ));
        s
    }
}

/// Default tolerance for the storage precision.
pub fn default_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-5,
        DType::F64 => 1e-10,
    }
}

/// Max absolute logit difference between `a` and `b` over `probes` random
/// images at the first model's input size.
pub fn verify_equivalence<T: Element>(a: &Model<T>, b: &Model<T>, probes: usize, tol: f64, seed: u64) -> Result<Equivalence> {
    let (h, w) = a.config().input_size;
    if b.config().input_size != (h, w) || a.config().num_classes != b.config().num_classes {
        return Err(Error::Contract("models have different input or output signatures".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut worst = 0.0f64;
    let mut left = probes;
    while left > 0 {
        let n = left.min(4);
        left -= n;
        let x = Tensor::<T>::randn(&[n, 3, h, w], 1.0, &mut rng);
        let ya = a.forward(&x, Mode::Eval)?;
        let yb = b.forward(&x, Mode::Eval)?;
        worst = worst.max(ya.max_abs_diff(&yb).to_f64_lossy());
    }
    Ok(Equivalence { max_deviation: worst, tol, probes })
}

fn fold_conv_bn<T: Element>(
    store: &mut ParameterStore<T>,
    conv: &mut Conv,
    bn_slot: &mut Option<BatchNorm>,
    location: String,
    sites: &mut Vec<Rewrite>,
) -> Result<()> {
    let Some(bn) = bn_slot.take() else { return Ok(()) };
    let vals = BnValues::from_store(store, &bn);
    let (w, b) = fold_batchnorm(store.value(conv.weight), conv.bias.map(|b| store.value(b)), &vals, Mode::Eval)?;
    store.set(conv.weight, w)?;
    let bid = conv.ensure_bias(store)?;
    store.set(bid, b)?;
    bn.remove(store);
    sites.push(Rewrite { kind: RewriteKind::FoldBatchnorm, location, skipped: None });
    Ok(())
}

fn fold_stage_conv<T: Element>(store: &mut ParameterStore<T>, cb: &mut ConvBn, loc: String, sites: &mut Vec<Rewrite>) -> Result<()> {
    fold_conv_bn(store, &mut cb.conv, &mut cb.bn, loc, sites)
}

fn skip(sites: &mut Vec<Rewrite>, location: String, why: &str) {
    sites.push(Rewrite { kind: RewriteKind::MergePointwise, location, skipped: Some(why.to_string()) });
}

/// Applies every legal rewrite and checks the result against `model`.
///
/// On a failed check the original model is returned with the failing report.
pub fn fuse_model<T: Element>(model: &Model<T>, probes: usize, seed: u64) -> Result<(Model<T>, FusionReport)> {
    fuse_model_with_tol(model, probes, default_tolerance(T::DTYPE), seed)
}

pub fn fuse_model_with_tol<T: Element>(model: &Model<T>, probes: usize, tol: f64, seed: u64) -> Result<(Model<T>, FusionReport)> {
    if !model.store.is_materialized() {
        return Err(Error::Contract("fusion needs parameter values".into()));
    }
    if !model.net.dynamic_layers().is_empty() {
        return Err(Error::Contract("dynamic-split models must be frozen to a static split before fusion".into()));
    }
    let mut fused = model.clone();
    let mut sites = Vec::new();
    {
        let Model { net, store } = &mut fused;
        fold_stage_conv(store, &mut net.stem, "stem".into(), &mut sites)?;
        for (si, st) in net.stages.iter_mut().enumerate() {
            if let Some(m) = &mut st.merge {
                fold_stage_conv(store, m, format!("stages.{si}.merge"), &mut sites)?;
            }
            for (bi, b) in st.blocks.iter_mut().enumerate() {
                let base = format!("stages.{si}.blocks.{bi}");
                match &mut b.mixer {
                    Mixer::PatCh(p) => {
                        if let Some(bn) = p.stat_bn.take() {
                            fold_stat_bn(store, p, &bn)?;
                            bn.remove(store);
                            sites.push(Rewrite { kind: RewriteKind::FoldStatBatchnorm, location: format!("{base}.mixer"), skipped: None });
                        }
                    }
                    Mixer::PatSf(p) => {
                        if let BranchConv::Static(c) = &p.conv {
                            if c.k == 1 {
                                skip(&mut sites, format!("{base}.mixer.conv"), "input is a residual sum, not a pointwise conv output");
                            }
                        }
                    }
                    Mixer::Partial(_) | Mixer::Full(_) => {}
                }
                let mlp = &mut b.mlp;
                fold_conv_bn(store, &mut mlp.conv1, &mut mlp.bn, format!("{base}.mlp.conv1"), &mut sites)?;
                skip(&mut sites, format!("{base}.mlp.conv1+conv2"), &format!("{} activation between the convolutions", mlp.act));
                if let Some(sp) = &mut b.post {
                    if let Some(BranchConv::Static(c)) = sp.conv.take() {
                        merge_into_conv2(store, &mut mlp.conv2, &c, sp.split.c_p())?;
                        store.remove(c.weight);
                        if let Some(bias) = c.bias {
                            store.remove(bias);
                        }
                        sites.push(Rewrite { kind: RewriteKind::MergePointwise, location: format!("{base}.mlp.conv2+post.conv"), skipped: None });
                    }
                }
            }
        }
        fold_conv_bn(store, &mut net.head.conv, &mut net.head.bn, "head.conv".into(), &mut sites)?;
        skip(&mut sites, "head.conv+head.fc".into(), &format!("{} activation between the convolutions", net.head.act));
        net.fused = true;
    }
    let equivalence = verify_equivalence(model, &fused, probes, tol, seed)?;
    let report = FusionReport { sites, params_before: model.num_params(), params_after: fused.num_params(), equivalence };
    if report.passed() {
        Ok((fused, report))
    } else {
        Ok((model.clone(), report))
    }
}

/// `bn(wm·m + ws·s) = (scale·wm)·m + (scale·ws)·s + shift`.
fn fold_stat_bn<T: Element>(store: &mut ParameterStore<T>, p: &mut crate::blocks::PatCh, bn: &BatchNorm) -> Result<()> {
    let (scale, shift) = BnValues::from_store(store, bn).affine();
    for id in [p.w_mean, p.w_std] {
        let t = store.value(id).clone();
        let scaled = Tensor::from_fn(t.shape(), |i| T::from_f64_lossy(t.data()[i].to_f64_lossy() * scale[i]));
        store.set(id, scaled)?;
    }
    let name = store.spec(p.w_mean).name.trim_end_matches(".w_mean").to_string();
    let prev = p.stat_bias.map(|b| store.value(b).data().iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>());
    let bias = Tensor::from_fn(&[shift.len()], |i| {
        let b0 = prev.as_ref().map_or(0.0, |p| p[i]);
        T::from_f64_lossy(b0 * scale[i] + shift[i])
    });
    match p.stat_bias {
        Some(id) => store.set(id, bias)?,
        None => {
            let spec = ParamSpec::new(format!("{name}.stat_bias"), &[shift.len()], ParamGroup::NoDecay, Init::Zeros);
            p.stat_bias = Some(store.insert(spec, bias)?);
        }
    }
    Ok(())
}

/// Replaces rows `[0, c_p)` of `conv2` with `sp ∘ conv2[..c_p]`.
fn merge_into_conv2<T: Element>(store: &mut ParameterStore<T>, conv2: &mut Conv, sp: &Conv, c_p: usize) -> Result<()> {
    let w2 = store.value(conv2.weight).clone();
    let c_mid = w2.shape()[1];
    let rows = Tensor::new(&[c_p, c_mid, 1, 1], w2.data()[..c_p * c_mid].to_vec())?;
    let b2 = conv2.bias.map(|b| store.value(b).clone());
    let b_rows = b2.as_ref().map(|b| Tensor::new(&[c_p], b.data()[..c_p].to_vec())).transpose()?;
    let sp_b = sp.bias.map(|b| store.value(b).clone());
    let (w, b) = merge_pointwise_convs(&rows, b_rows.as_ref(), store.value(sp.weight), sp_b.as_ref())?;
    let mut w_new = w2;
    w_new.data_mut()[..c_p * c_mid].copy_from_slice(w.data());
    store.set(conv2.weight, w_new)?;
    let bid = conv2.ensure_bias(store)?;
    let mut bias = store.value(bid).clone();
    bias.data_mut()[..c_p].copy_from_slice(b.data());
    store.set(bid, bias)?;
    Ok(())
}
