//! Dynamic partial convolution: binary gates over a Kronecker-structured
//! connectivity pattern decide how many leading channels are convolved.
//!
//! With gate vector `g` of length `K` over `c = 2^K` channels, the
//! connectivity is `U = U_1 ⊗ … ⊗ U_K` where `U_k` is the 2×2 all-ones
//! matrix when `g_k = 1` and the identity otherwise. The convolved count is
//! `c_p = 2^{Σ g_k}` and channels at or above `c_p` pass through unchanged.
//! Gates are stored as continuous logits and binarized with `g = [g̃ > 0]`;
//! gradients pass straight through inside `|g̃| <= 1`.

use std::fmt::Write as _;

use pn_tensor::ops::shape::{concat, narrow};
use pn_tensor::{conv2d_forward, Activation, Conv2dParams, CustomOp, Element, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, Result};
use crate::layers::{Conv, ConvShape, WEIGHT_STD};
use crate::params::{Init, Mode, ParamGroup, ParamId, ParamSpec, ParameterStore, Session};
use crate::train::optim::{AdamW, AdamWConfig};

/// Exponent applied to `κ/ζ` while the budget is exceeded.
pub const OVER_BUDGET_ALPHA: f64 = -0.01;
pub const DEFAULT_PSI_WEIGHT: f64 = 0.9;
/// Half-width of the straight-through window.
pub const STE_CLIP: f64 = 1.0;

pub fn binarize_gates(g_tilde: &[f64]) -> Vec<bool> {
    g_tilde.iter().map(|&v| v > 0.0).collect()
}

/// Hard-tanh straight-through gradient: pass `upstream` where `|g̃| <= 1`.
pub fn ste_backward(g_tilde: &[f64], upstream: &[f64]) -> Vec<f64> {
    g_tilde.iter().zip(upstream).map(|(&g, &u)| if g.abs() <= STE_CLIP { u } else { 0.0 }).collect()
}

pub fn log2_exact(c: usize) -> Result<usize> {
    if c == 0 || !c.is_power_of_two() {
        return config(format!("dynamic split needs a power-of-two channel count, got {c}"));
    }
    Ok(c.trailing_zeros() as usize)
}

/// Bit of `index` read by Kronecker factor `k` (factor 0 is most significant).
fn bit(index: usize, k: usize, n_factors: usize) -> usize {
    (index >> (n_factors - 1 - k)) & 1
}

/// Dense binary connectivity `U` for a gate vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Connectivity {
    gates: Vec<bool>,
    dim: usize,
    data: Vec<u8>,
}

impl Connectivity {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gates(&self) -> &[bool] {
        &self.gates
    }

    pub fn get(&self, o: usize, i: usize) -> u8 {
        self.data[o * self.dim + i]
    }

    pub fn row_sum(&self, o: usize) -> usize {
        (0..self.dim).map(|i| self.get(o, i) as usize).sum()
    }

    pub fn col_sum(&self, i: usize) -> usize {
        (0..self.dim).map(|o| self.get(o, i) as usize).sum()
    }

    /// Nonzeros of `U ⊙ (m mᵀ)` where `m` keeps the first `c_p` channels.
    pub fn masked_nonzeros(&self, c_p: usize) -> usize {
        (0..c_p).map(|o| (0..c_p).filter(|&i| self.get(o, i) == 1).count()).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.data.chunks(self.dim).map(|r| r.to_vec()).collect()
    }
}

/// Builds `U` by repeated Kronecker products of the per-gate factors.
pub fn build_connectivity(g: &[bool]) -> Connectivity {
    let mut dim = 1;
    let mut data = vec![1u8];
    for &gk in g {
        let factor = if gk { [1u8, 1, 1, 1] } else { [1u8, 0, 0, 1] };
        let nd = dim * 2;
        let mut next = vec![0u8; nd * nd];
        for r in 0..dim {
            for c in 0..dim {
                let v = data[r * dim + c];
                for fr in 0..2 {
                    for fc in 0..2 {
                        next[(r * 2 + fr) * nd + c * 2 + fc] = v * factor[fr * 2 + fc];
                    }
                }
            }
        }
        dim = nd;
        data = next;
    }
    Connectivity { gates: g.to_vec(), dim, data }
}

/// `(c_p, mask)` with `c_p = 2^{Σ g}` and `mask[i] = i < c_p`.
pub fn effective_split(g: &[bool]) -> (usize, Vec<bool>) {
    let c_p = 1usize << g.iter().filter(|&&v| v).count();
    let c = 1usize << g.len();
    (c_p, (0..c).map(|i| i < c_p).collect())
}

fn check_square_pow2(w: &[usize], c: usize, k_gates: usize) -> Result<()> {
    if w.len() != 4 || w[0] != c || w[1] != c {
        return config(format!("dynamic convolution needs a [{c}, {c}, k, k] weight, got {w:?}"));
    }
    if log2_exact(c)? != k_gates {
        return config(format!("{k_gates} gates for {c} channels"));
    }
    Ok(())
}

/// `W[:c_p, :c_p] ⊙ U[:c_p, :c_p]`.
fn masked_weight<T: Element>(w: &Tensor<T>, conn: &Connectivity, c_p: usize) -> Tensor<T> {
    let (c, kk) = (w.shape()[1], w.shape()[2] * w.shape()[3]);
    let mut out = Vec::with_capacity(c_p * c_p * kk);
    for o in 0..c_p {
        for i in 0..c_p {
            let src = &w.data()[(o * c + i) * kk..][..kk];
            if conn.get(o, i) == 1 {
                out.extend_from_slice(src);
            } else {
                out.extend(std::iter::repeat_n(T::zero(), kk));
            }
        }
    }
    Tensor::new(&[c_p, c_p, w.shape()[2], w.shape()[3]], out).expect("masked weight shape")
}

/// Dynamic convolution with stride 1 and same padding; channels at or above
/// `c_p` are passed through.
pub fn dpconv_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, g_tilde: &[f64]) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    check_square_pow2(w.shape(), c, g_tilde.len())?;
    let g = binarize_gates(g_tilde);
    let conn = build_connectivity(&g);
    let (c_p, _) = effective_split(&g);
    let w_eff = masked_weight(w, &conn, c_p);
    let xc = narrow(x, 1, 0, c_p)?;
    let yc = conv2d_forward(&xc, &w_eff, None, Conv2dParams::new(1, w.shape()[2] / 2, 1))?;
    if c_p == c {
        return Ok(yc);
    }
    let rest = narrow(x, 1, c_p, c - c_p)?;
    Ok(concat(&[&yc, &rest], 1)?)
}

/// Multilinear relaxation of one Kronecker factor: `[[1, g], [g, g]]`.
/// It reproduces `U ⊙ m mᵀ` exactly for sorted binary gates.
fn factor(g: f64, o: usize, i: usize) -> f64 {
    if o == 0 && i == 0 {
        1.0
    } else {
        g
    }
}

fn factor_slope(o: usize, i: usize) -> f64 {
    if o == 0 && i == 0 {
        0.0
    } else {
        1.0
    }
}

/// Produces the masked leading block of a dynamic weight. Its gradient
/// reaches the gate logits through the relaxed factors and the STE window.
struct MaskedWeightOp {
    conn: Connectivity,
    c_p: usize,
}

impl<T: Element> CustomOp<T> for MaskedWeightOp {
    fn name(&self) -> &'static str {
        "dpconv_weight"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> pn_tensor::Result<Vec<Option<Tensor<T>>>> {
        let (w, gt) = (inputs[0], inputs[1]);
        let c = w.shape()[1];
        let kk = w.shape()[2] * w.shape()[3];
        let n_f = gt.numel();
        let g: Vec<f64> = self.conn.gates.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mut dw = Tensor::zeros(w.shape());
        let mut dg = vec![0.0f64; n_f];
        for o in 0..self.c_p {
            for i in 0..self.c_p {
                let gsrc = &grad.data()[(o * self.c_p + i) * kk..][..kk];
                let wsrc = &w.data()[(o * c + i) * kk..][..kk];
                if self.conn.get(o, i) == 1 {
                    dw.data_mut()[(o * c + i) * kk..][..kk].copy_from_slice(gsrc);
                }
                let pair: f64 = gsrc.iter().zip(wsrc).map(|(a, b)| (*a * *b).to_f64_lossy()).sum();
                if pair == 0.0 {
                    continue;
                }
                for (k, dgk) in dg.iter_mut().enumerate() {
                    let (ob, ib) = (bit(o, k, n_f), bit(i, k, n_f));
                    let slope = factor_slope(ob, ib);
                    if slope == 0.0 {
                        continue;
                    }
                    let rest: f64 = (0..n_f).filter(|&j| j != k).map(|j| factor(g[j], bit(o, j, n_f), bit(i, j, n_f))).product();
                    *dgk += pair * slope * rest;
                }
            }
        }
        let gt64: Vec<f64> = gt.data().iter().map(|v| v.to_f64_lossy()).collect();
        let dg = ste_backward(&gt64, &dg);
        Ok(vec![Some(dw), Some(Tensor::from_f64(gt.shape(), &dg)?)])
    }
}

/// Records the masked weight block on the tape; returns it with `c_p`.
pub fn masked_weight_var<T: Element>(tape: &mut Tape<T>, w: Var, g_tilde: Var) -> Result<(Var, usize)> {
    let gt: Vec<f64> = tape.value(g_tilde).data().iter().map(|v| v.to_f64_lossy()).collect();
    let c = tape.shape(w)[0];
    check_square_pow2(tape.shape(w), c, gt.len())?;
    let g = binarize_gates(&gt);
    let conn = build_connectivity(&g);
    let (c_p, _) = effective_split(&g);
    let out = masked_weight(tape.value(w), &conn, c_p);
    let v = tape.custom(&[w, g_tilde], out, Box::new(MaskedWeightOp { conn, c_p }))?;
    Ok((v, c_p))
}

fn layer_zeta(g: &[bool]) -> f64 {
    let cp = (1u64 << g.iter().filter(|&&b| b).count()) as f64;
    cp * cp
}

/// `ζ = Σ_l 2^{2 Σ_k g_k^l}`.
pub fn complexity_zeta(gates: &[Vec<bool>]) -> f64 {
    gates.iter().map(|g| layer_zeta(g)).sum()
}

/// True when some adjacent pair has a one followed by a zero.
pub fn is_unsorted(g: &[bool]) -> bool {
    g.windows(2).any(|p| p[0] && !p[1])
}

/// `ψ = Σ_l [gates unsorted] · Σ_k |g̃_k|`.
pub fn ordering_penalty_psi(g_tilde: &[Vec<f64>]) -> f64 {
    g_tilde
        .iter()
        .map(|gt| if is_unsorted(&binarize_gates(gt)) { gt.iter().map(|v| v.abs()).sum() } else { 0.0 })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityBudget {
    pub theta: f64,
    pub kappa: f64,
    pub beta: f64,
}

impl ComplexityBudget {
    /// `κ = Σ_l (c_l / θ)^2` over the dynamic layers' widths.
    pub fn new(widths: &[usize], theta: f64) -> Result<Self> {
        if !(theta > 0.0) || widths.is_empty() {
            return config(format!("budget needs theta > 0 and at least one layer (theta {theta})"));
        }
        let kappa = widths.iter().map(|&c| (c as f64 / theta).powi(2)).sum();
        Ok(ComplexityBudget { theta, kappa, beta: DEFAULT_PSI_WEIGHT })
    }

    pub fn alpha(&self, zeta: f64) -> f64 {
        if zeta <= self.kappa {
            0.0
        } else {
            OVER_BUDGET_ALPHA
        }
    }

    /// Factor applied to the task loss: `(κ/ζ)^α`.
    pub fn multiplier(&self, zeta: f64) -> f64 {
        let a = self.alpha(zeta);
        if a == 0.0 {
            1.0
        } else {
            (self.kappa / zeta).powf(a)
        }
    }
}

/// `task · (κ/ζ)^α + ψ · β`.
pub fn constrained_objective(task_loss: f64, zeta: f64, budget: &ComplexityBudget, psi: f64) -> f64 {
    task_loss * budget.multiplier(zeta) + psi * budget.beta
}

fn gate_vectors<T: Element>(tape: &Tape<T>, gates: &[Var]) -> Vec<Vec<f64>> {
    gates.iter().map(|&v| tape.value(v).data().iter().map(|x| x.to_f64_lossy()).collect()).collect()
}

/// ζ over gate logits. The gradient uses `∂ζ_l/∂g_k = 2 ζ_l / (1 + g_k)`
/// through the STE window.
struct ZetaOp {
    gates: Vec<Vec<f64>>,
}

impl<T: Element> CustomOp<T> for ZetaOp {
    fn name(&self) -> &'static str {
        "zeta"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> pn_tensor::Result<Vec<Option<Tensor<T>>>> {
        let up = grad.item().to_f64_lossy();
        self.gates
            .iter()
            .map(|gt| {
                let g = binarize_gates(gt);
                let z = layer_zeta(&g);
                let raw: Vec<f64> = g.iter().map(|&b| up * 2.0 * z / if b { 2.0 } else { 1.0 }).collect();
                Ok(Some(Tensor::from_f64(&[gt.len()], &ste_backward(gt, &raw))?))
            })
            .collect()
    }
}

/// ψ over gate logits; gradient `sign(g̃)` on unsorted layers.
struct PsiOp {
    gates: Vec<Vec<f64>>,
}

impl<T: Element> CustomOp<T> for PsiOp {
    fn name(&self) -> &'static str {
        "psi"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> pn_tensor::Result<Vec<Option<Tensor<T>>>> {
        let up = grad.item().to_f64_lossy();
        self.gates
            .iter()
            .map(|gt| {
                let on = is_unsorted(&binarize_gates(gt));
                let d: Vec<f64> = gt.iter().map(|&v| if on && v != 0.0 { up * v.signum() } else { 0.0 }).collect();
                Ok(Some(Tensor::from_f64(&[gt.len()], &d)?))
            })
            .collect()
    }
}

/// `(κ/ζ)^α` as a function of ζ, with α frozen at its forward value.
struct BudgetPowerOp {
    alpha: f64,
}

impl<T: Element> CustomOp<T> for BudgetPowerOp {
    fn name(&self) -> &'static str {
        "budget_power"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> pn_tensor::Result<Vec<Option<Tensor<T>>>> {
        let zeta = inputs[0].item().to_f64_lossy();
        let y = output.item().to_f64_lossy();
        let d = -self.alpha * y / zeta * grad.item().to_f64_lossy();
        Ok(vec![Some(Tensor::scalar(T::from_f64_lossy(d)))])
    }
}

/// Objective terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub loss: Var,
    pub zeta: f64,
    pub psi: f64,
    pub multiplier: f64,
}

pub fn zeta_var<T: Element>(tape: &mut Tape<T>, gates: &[Var]) -> Result<Var> {
    let gv = gate_vectors(tape, gates);
    let z = complexity_zeta(&gv.iter().map(|g| binarize_gates(g)).collect::<Vec<_>>());
    Ok(tape.custom(gates, Tensor::scalar(T::from_f64_lossy(z)), Box::new(ZetaOp { gates: gv }))?)
}

pub fn psi_var<T: Element>(tape: &mut Tape<T>, gates: &[Var]) -> Result<Var> {
    let gv = gate_vectors(tape, gates);
    let p = ordering_penalty_psi(&gv);
    Ok(tape.custom(gates, Tensor::scalar(T::from_f64_lossy(p)), Box::new(PsiOp { gates: gv }))?)
}

/// Records `task · (κ/ζ)^α + ψ · β` on the tape.
pub fn objective_on_tape<T: Element>(tape: &mut Tape<T>, task: Var, gates: &[Var], budget: &ComplexityBudget) -> Result<ObjectiveVars> {
    let z = zeta_var(tape, gates)?;
    let p = psi_var(tape, gates)?;
    let zeta = tape.value(z).item().to_f64_lossy();
    let psi = tape.value(p).item().to_f64_lossy();
    let alpha = budget.alpha(zeta);
    let multiplier = budget.multiplier(zeta);
    let scaled = if alpha == 0.0 {
        task
    } else {
        let m = tape.custom(
            &[z],
            Tensor::scalar(T::from_f64_lossy(multiplier)),
            Box::new(BudgetPowerOp { alpha }),
        )?;
        tape.mul(task, m)?
    };
    let pen = tape.scale(p, T::from_f64_lossy(budget.beta))?;
    let loss = tape.add(scaled, pen)?;
    Ok(ObjectiveVars { loss, zeta, psi, multiplier })
}

/// Gate count that makes a layer of width `c` convolve about `c / θ` channels.
pub fn budget_gate_count(c: usize, theta: f64) -> usize {
    let target = (c as f64 / theta).max(1.0);
    (target.log2().floor().max(0.0) as usize).min(c.trailing_zeros() as usize)
}

/// A `c → c` dynamic convolution with same padding.
#[derive(Clone, Debug, PartialEq)]
pub struct DpConv {
    pub weight: ParamId,
    pub gates: ParamId,
    pub channels: usize,
    pub k: usize,
}

impl DpConv {
    /// `init_ones` trailing gates start on, so the initial pattern is sorted.
    pub fn declare<T: Element>(store: &mut ParameterStore<T>, name: &str, channels: usize, k: usize, init_ones: usize) -> Result<DpConv> {
        let n = log2_exact(channels)?;
        if init_ones > n {
            return config(format!("{init_ones} initial gates on for {n} gates"));
        }
        let weight = store.declare(ParamSpec::new(
            format!("{name}.weight"),
            &[channels, channels, k, k],
            ParamGroup::Decay,
            Init::TruncNormal(WEIGHT_STD),
        ))?;
        let gates = store.declare(ParamSpec::new(format!("{name}.gates"), &[n], ParamGroup::NoDecay, Init::Gates { ones: init_ones }))?;
        Ok(DpConv { weight, gates, channels, k })
    }

    pub fn num_gates(&self) -> usize {
        self.channels.trailing_zeros() as usize
    }

    /// Current binary gates; the declared initial pattern if not materialized.
    pub fn gate_bits<T: Element>(&self, store: &ParameterStore<T>) -> Vec<bool> {
        match store.try_value(self.gates) {
            Ok(v) => binarize_gates(&v.data().iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>()),
            Err(_) => match store.spec(self.gates).init {
                Init::Gates { ones } => (0..self.num_gates()).map(|i| i + ones >= self.num_gates()).collect(),
                _ => vec![true; self.num_gates()],
            },
        }
    }

    pub fn current_cp<T: Element>(&self, store: &ParameterStore<T>) -> usize {
        effective_split(&self.gate_bits(store)).0
    }

    /// Convolves the leading `c_p` channels; returns `(y [n, c_p, h, w], c_p)`.
    pub fn forward_partial<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<(Var, usize)> {
        let w = sess.param(self.weight)?;
        let g = sess.param(self.gates)?;
        let (w_eff, c_p) = masked_weight_var(&mut sess.tape, w, g)?;
        let xc = if c_p == self.channels { x } else { sess.tape.narrow(x, 1, 0, c_p)? };
        let y = sess.tape.conv2d(xc, w_eff, None, Conv2dParams::new(1, self.k / 2, 1))?;
        Ok((y, c_p))
    }

    /// Full dynamic layer with identity passthrough above `c_p`.
    pub fn forward<T: Element>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (y, c_p) = self.forward_partial(sess, x)?;
        if c_p == self.channels {
            return Ok(y);
        }
        let rest = sess.tape.narrow(x, 1, c_p, self.channels - c_p)?;
        Ok(sess.tape.concat(&[y, rest], 1)?)
    }
}

/// One row of the per-layer split table.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioRow {
    pub layer: String,
    pub num_gates: usize,
    pub gates: Vec<bool>,
    pub c_p: usize,
    pub channels: usize,
    pub zeta: f64,
}

impl RatioRow {
    pub fn ratio(&self) -> f64 {
        self.c_p as f64 / self.channels as f64
    }
}

pub fn ratio_row(layer: impl Into<String>, gates: &[bool]) -> RatioRow {
    RatioRow {
        layer: layer.into(),
        num_gates: gates.len(),
        gates: gates.to_vec(),
        c_p: effective_split(gates).0,
        channels: 1 << gates.len(),
        zeta: layer_zeta(gates),
    }
}

/// Tab-delimited table with header `layer K g c_p ratio zeta`.
pub fn ratio_table(rows: &[RatioRow]) -> String {
    let mut s = String::from("layer\tK\tg\tc_p\tratio\tzeta\n");
    for r in rows {
        let g: String = r.gates.iter().map(|&b| if b { '1' } else { '0' }).collect();
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{:.4}\t{}", r.layer, r.num_gates, g, r.c_p, r.ratio(), r.zeta);
    }
    s
}

#[derive(Clone, Debug)]
pub struct SearchConfig {
    pub channels: usize,
    pub layers: usize,
    pub theta: f64,
    /// Gates initially on per layer; defaults to all (dense start).
    pub init_ones: Option<usize>,
    pub steps: usize,
    pub batch: usize,
    pub image: usize,
    pub classes: usize,
    pub lr: f64,
    pub seed: u64,
    /// Residual dynamic layers, as in the network blocks.
    pub residual: bool,
    /// Half-width of the uniform pixel noise around each class template.
    pub noise: f32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            channels: 16,
            layers: 4,
            theta: 4.0,
            init_ones: None,
            steps: 500,
            batch: 16,
            image: 8,
            classes: 4,
            lr: 0.02,
            seed: 0,
            residual: true,
            noise: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchStep {
    pub step: usize,
    pub task_loss: f64,
    pub objective: f64,
    pub zeta: f64,
    pub psi: f64,
}

#[derive(Clone, Debug)]
pub struct SearchReport {
    pub budget: ComplexityBudget,
    pub initial_zeta: f64,
    pub history: Vec<SearchStep>,
    /// First step after which `ζ <= κ` and `ψ = 0` both hold.
    pub feasible_at: Option<usize>,
    pub rows: Vec<RatioRow>,
    /// Final continuous gate values per layer.
    pub gate_logits: Vec<Vec<f64>>,
}

impl SearchReport {
    pub fn final_zeta(&self) -> f64 {
        complexity_zeta(&self.rows.iter().map(|r| r.gates.clone()).collect::<Vec<_>>())
    }

    pub fn final_psi(&self) -> f64 {
        self.history.last().map_or(0.0, |h| h.psi)
    }

    pub fn table(&self) -> String {
        ratio_table(&self.rows)
    }
}

struct ToyNet {
    stem: Conv,
    layers: Vec<DpConv>,
    fc: Conv,
    residual: bool,
}

impl ToyNet {
    fn forward(&self, sess: &mut Session<'_, f32>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(sess, x)?;
        for l in &self.layers {
            let y = l.forward(sess, h)?;
            let y = sess.tape.activation(y, Activation::Relu)?;
            h = if self.residual { sess.tape.add(h, y)? } else { y };
        }
        let p = sess.tape.global_avg_pool(h)?;
        let y = self.fc.forward(sess, p)?;
        let n = sess.tape.shape(y)[0];
        let k = sess.tape.shape(y)[1];
        Ok(sess.tape.reshape(y, &[n, k])?)
    }
}

/// Synthetic classification data: one fixed random template per class plus noise.
fn toy_batch(templates: &[Tensor<f32>], batch: usize, noise: f32, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>) {
    let k = templates.len();
    let per = templates[0].numel();
    let mut x = Vec::with_capacity(batch * per);
    let mut t = vec![0.0f32; batch * k];
    for b in 0..batch {
        let cls = rng.random_range(0..k);
        t[b * k + cls] = 1.0;
        for &v in templates[cls].data() {
            x.push(v + rng.random_range(-noise..noise));
        }
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(templates[0].shape());
    (Tensor::new(&shape, x).expect("batch shape"), Tensor::new(&[batch, k], t).expect("target shape"))
}

/// Trains a small stack of dynamic convolutions under the constrained
/// objective and reports the learned per-layer split.
pub fn search(cfg: &SearchConfig) -> Result<SearchReport> {
    let n_g = log2_exact(cfg.channels)?;
    let init_ones = cfg.init_ones.unwrap_or(n_g);
    let mut store = ParameterStore::<f32>::new();
    let stem = Conv::declare(&mut store, "stem", ConvShape::new(3, cfg.channels, 3))?;
    let layers = (0..cfg.layers)
        .map(|i| DpConv::declare(&mut store, &format!("layers.{i}"), cfg.channels, 3, init_ones))
        .collect::<Result<Vec<_>>>()?;
    let fc = Conv::declare(&mut store, "fc", ConvShape::new(cfg.channels, cfg.classes, 1).bias(true))?;
    let net = ToyNet { stem, layers, fc, residual: cfg.residual };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    store.materialize(&mut rng);
    // the plain stack needs a variance-preserving init to train at all
    let dyn_ids: Vec<ParamId> = if cfg.residual { Vec::new() } else { net.layers.iter().map(|l| l.weight).collect() };
    for id in [net.stem.weight, net.fc.weight].into_iter().chain(dyn_ids) {
        let shape = store.value(id).shape().to_vec();
        let fan_in: usize = shape[1..].iter().product();
        store.set(id, Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), &mut rng))?;
    }
    let budget = ComplexityBudget::new(&vec![cfg.channels; cfg.layers], cfg.theta)?;
    let templates: Vec<Tensor<f32>> =
        (0..cfg.classes).map(|_| Tensor::randn(&[3, cfg.image, cfg.image], 1.0, &mut rng)).collect();
    let gates_of = |store: &ParameterStore<f32>| net.layers.iter().map(|l| l.gate_bits(store)).collect::<Vec<_>>();
    let initial_zeta = complexity_zeta(&gates_of(&store));
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    let mut history = Vec::with_capacity(cfg.steps);
    let mut feasible_at = None;
    for step in 0..cfg.steps {
        let (xb, tb) = toy_batch(&templates, cfg.batch, cfg.noise, &mut rng);
        let mut sess = Session::new(&mut store, Mode::Train, true, cfg.seed ^ step as u64);
        let x = sess.tape.constant(xb)?;
        let logits = net.forward(&mut sess, x)?;
        let task = sess.tape.soft_cross_entropy(logits, tb)?;
        let gate_vars = net.layers.iter().map(|l| sess.param(l.gates)).collect::<Result<Vec<_>>>()?;
        let obj = objective_on_tape(&mut sess.tape, task, &gate_vars, &budget)?;
        let task_loss = sess.tape.value(task).item() as f64;
        let objective = sess.tape.value(obj.loss).item() as f64;
        let grads = sess.tape.backward(obj.loss)?;
        let bindings = sess.bindings();
        drop(sess);
        opt.step(&mut store, &grads, &bindings, cfg.lr)?;
        let g = gates_of(&store);
        let zeta = complexity_zeta(&g);
        let gt: Vec<Vec<f64>> =
            net.layers.iter().map(|l| store.value(l.gates).data().iter().map(|&v| v as f64).collect()).collect();
        let psi = ordering_penalty_psi(&gt);
        if zeta <= budget.kappa && psi == 0.0 {
            feasible_at.get_or_insert(step + 1);
        } else {
            feasible_at = None;
        }
        history.push(SearchStep { step: step + 1, task_loss, objective, zeta, psi });
    }
    let rows = net.layers.iter().enumerate().map(|(i, l)| ratio_row(format!("layers.{i}"), &l.gate_bits(&store))).collect();
    let gate_logits = net.layers.iter().map(|l| store.value(l.gates).data().iter().map(|&v| v as f64).collect()).collect();
    Ok(SearchReport { budget, initial_zeta, history, feasible_at, rows, gate_logits })
}
