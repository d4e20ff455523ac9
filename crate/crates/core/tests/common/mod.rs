#![allow(dead_code)]

use partialnet::params::{Mode, ParamId, ParameterStore, Session};
use partialnet::Result;
use pn_tensor::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every parameter redrawn from N(0, std) and every running statistic
/// perturbed, so no value sits at a convenient default.
pub fn randomize(store: &mut ParameterStore<f64>, std: f64, seed: u64) {
    let mut g = rng(seed);
    store.materialize(&mut g);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.spec(id).shape.clone();
        store.set(id, Tensor::randn(&shape, std, &mut g)).unwrap();
    }
    let bufs: Vec<_> = store.buffer_ids().collect();
    for b in bufs {
        let c = store.stats(b).mean.numel();
        let mean = Tensor::randn(&[c], 0.3, &mut g);
        let var = Tensor::uniform(&[c], 0.5, 1.5, &mut g);
        let s = store.stats_mut(b);
        s.mean = mean;
        s.var = var;
    }
}

pub fn run(
    store: &mut ParameterStore<f64>,
    x: &Tensor<f64>,
    mode: Mode,
    f: impl FnOnce(&mut Session<'_, f64>, Var) -> Result<Var>,
) -> Tensor<f64> {
    partialnet::blocks::run_standalone(store, x, mode, f).unwrap()
}

/// Plain nested-loop convolution, `x` as `[n, c, h, w]`, `w` as `[co, c/g, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_ref(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    bias: Option<&[f64]>,
) -> (Vec<f64>, (usize, usize, usize, usize)) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let cig = c / groups;
    let cog = co / groups;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            let g = o / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for ci in 0..cig {
                        let ic = g * cig + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                    * wt[((o * cig + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, (n, co, ho, wo))
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn hard_sigmoid(z: f64) -> f64 {
    (z / 6.0 + 0.5).clamp(0.0, 1.0)
}

/// Eval-mode batchnorm of one value.
pub fn bn_eval(z: f64, gamma: f64, beta: f64, mean: f64, var: f64) -> f64 {
    (z - mean) / (var + 1e-5).sqrt() * gamma + beta
}

/// Channel slice `[c0, c0 + len)` of an `[n, c, h, w]` buffer.
pub fn channels(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), c0: usize, len: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let s = (b * c + c0) * plane;
        out.extend_from_slice(&x[s..s + len * plane]);
    }
    out
}

pub fn cat(a: &[f64], ca: usize, b: &[f64], cb: usize, n: usize, plane: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b[i * cb * plane..(i + 1) * cb * plane]);
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central-difference check of every stored parameter against the tape
/// gradient of `probe · f(x)`. Returns the worst relative error.
pub fn store_grad_check(
    store: &mut ParameterStore<f64>,
    x: &Tensor<f64>,
    mode: Mode,
    f: impl Fn(&mut Session<'_, f64>, Var) -> Result<Var>,
) -> f64 {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-4;
    let probe_for = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng(999));
    // Batchnorm in training mode updates running stats; restore them per eval.
    let snapshot = store.clone();
    let eval = |store: &mut ParameterStore<f64>| -> f64 {
        let y = partialnet::blocks::run_standalone(store, x, mode, &f).unwrap();
        let p = probe_for(y.shape());
        y.data().iter().zip(p.data()).map(|(a, b)| a * b).sum()
    };

    let mut work = snapshot.clone();
    let mut sess = Session::new(&mut work, mode, true, 0);
    let xv = sess.tape.constant(x.clone()).unwrap();
    let y = f(&mut sess, xv).unwrap();
    let p = sess.tape.constant(probe_for(sess.tape.shape(y))).unwrap();
    let prod = sess.tape.mul(y, p).unwrap();
    let loss = sess.tape.sum(prod).unwrap();
    let grads = sess.tape.backward(loss).unwrap();
    let bound = sess.bindings();
    let analytic: Vec<(ParamId, Tensor<f64>)> =
        bound.iter().map(|(id, v)| (*id, grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&[0])))).collect();

    let mut worst = 0.0f64;
    for (id, g) in analytic {
        let n = snapshot.value(id).numel();
        for i in 0..n {
            let mut plus = snapshot.clone();
            plus.value_mut(id).data_mut()[i] += STEP;
            let mut minus = snapshot.clone();
            minus.value_mut(id).data_mut()[i] -= STEP;
            let num = (eval(&mut plus) - eval(&mut minus)) / (2.0 * STEP);
            let ana = if g.numel() == n { g.data()[i] } else { 0.0 };
            let err = (ana - num).abs() / ana.abs().max(num.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    *store = snapshot;
    worst
}

/// Explicit Kronecker product of 2×2 factors, first gate outermost.
pub fn kron_oracle(g: &[bool]) -> Vec<Vec<u8>> {
    let mut u = vec![vec![1u8]];
    for &gk in g {
        let f = if gk { [[1, 1], [1, 1]] } else { [[1, 0], [0, 1]] };
        let n = u.len();
        let mut next = vec![vec![0u8; 2 * n]; 2 * n];
        for (r, row) in u.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                for (a, fr) in f.iter().enumerate() {
                    for (b, &fv) in fr.iter().enumerate() {
                        next[r * 2 + a][c * 2 + b] = v * fv;
                    }
                }
            }
        }
        u = next;
    }
    u
}

pub fn gates_of(bits: usize, k: usize) -> Vec<bool> {
    (0..k).map(|i| bits >> (k - 1 - i) & 1 == 1).collect()
}

pub fn sorted(g: &[bool]) -> bool {
    !g.windows(2).any(|p| p[0] && !p[1])
}

/// Slices the first `c_p` channels, convolves them densely, concatenates the rest.
pub fn slice_oracle(x: &Tensor<f64>, w: &Tensor<f64>, c_p: usize) -> Vec<f64> {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let k = w.shape()[2];
    let xs = channels(x.data(), (n, c, h, wd), 0, c_p);
    let mut ws = Vec::new();
    for o in 0..c_p {
        ws.extend_from_slice(&w.data()[o * c * k * k..][..c_p * k * k]);
    }
    let (y, _) = conv_ref(&xs, (n, c_p, h, wd), &ws, c_p, k, 1, k / 2, 1, None);
    let rest = channels(x.data(), (n, c, h, wd), c_p, c - c_p);
    cat(&y, c_p, &rest, c - c_p, n, h * wd)
}
