mod common;

use common::*;
use partialnet::blocks::{heads_for, rpe_index, rpe_row, BranchConv, PartialConv, PatCh, PatSf, PatSp, Scope};
use partialnet::params::{Mode, ParameterStore};
use partialnet::split::{concat_channels, split_channels, SplitSpec};
use partialnet::Error;
use pn_tensor::Tensor;
use proptest::prelude::*;

fn static_conv(b: &BranchConv) -> &partialnet::layers::Conv {
    match b {
        BranchConv::Static(c) => c,
        BranchConv::Dynamic(_) => panic!("expected a static branch"),
    }
}

fn dims(x: &Tensor<f64>) -> (usize, usize, usize, usize) {
    x.dims4().unwrap()
}

#[test]
fn split_quarter_of_64() {
    let s = SplitSpec::from_ratio(64, 0.25).unwrap();
    assert_eq!((s.c_p(), s.c_att()), (16, 48));
    let x = Tensor::<f64>::randn(&[1, 64, 2, 2], 1.0, &mut rng(1));
    let (a, b) = split_channels(&x, &s).unwrap();
    assert_eq!(a.shape(), &[1, 16, 2, 2]);
    assert_eq!(b.shape(), &[1, 48, 2, 2]);
}

#[test]
fn attention_split_rejects_empty_branch() {
    assert!(matches!(SplitSpec::attention(8, 8), Err(Error::Config(_))));
    assert!(SplitSpec::new(8, 8).is_ok());
    assert!(matches!(SplitSpec::new(8, 0), Err(Error::Config(_))));
    assert!(matches!(SplitSpec::new(8, 9), Err(Error::Config(_))));
    let mut store = ParameterStore::<f64>::new();
    let full = SplitSpec::new(8, 8).unwrap();
    assert!(PatCh::declare(&mut store, "b", full, Scope::Partial, None).is_err());
    assert!(PartialConv::declare(&mut store, "p", full, 3, None).is_ok());
}

#[test]
fn split_concat_round_trip() {
    let x = Tensor::<f64>::randn(&[2, 6, 3, 3], 1.0, &mut rng(2));
    let s = SplitSpec::new(6, 2).unwrap();
    let (a, b) = split_channels(&x, &s).unwrap();
    assert_eq!(concat_channels(&a, &b).unwrap(), x);
}

#[test]
fn split_rejects_wrong_channel_count() {
    let x = Tensor::<f64>::zeros(&[1, 5, 2, 2]);
    assert!(split_channels(&x, &SplitSpec::new(6, 2).unwrap()).is_err());
}

fn pat_ch(c: usize, c_p: usize, seed: u64) -> (ParameterStore<f64>, PatCh) {
    let mut store = ParameterStore::new();
    let blk = PatCh::declare(&mut store, "b", SplitSpec::attention(c, c_p).unwrap(), Scope::Partial, None).unwrap();
    randomize(&mut store, 0.5, seed);
    (store, blk)
}

#[test]
fn pat_ch_zero_logits_halve_attention_branch() {
    let (mut store, blk) = pat_ch(8, 2, 3);
    store.set(blk.w_mean, Tensor::zeros(&[6])).unwrap();
    store.set(blk.w_std, Tensor::zeros(&[6])).unwrap();
    let bn = blk.stat_bn.as_ref().unwrap();
    store.set(bn.gamma, Tensor::ones(&[6])).unwrap();
    store.set(bn.beta, Tensor::zeros(&[6])).unwrap();
    store.stats_mut(bn.stats).mean = Tensor::zeros(&[6]);
    store.stats_mut(bn.stats).var = Tensor::ones(&[6]);
    let x = Tensor::randn(&[2, 8, 3, 3], 1.0, &mut rng(4));
    let y = run(&mut store, &x, Mode::Eval, |s, v| blk.forward(s, v));
    let ya = y.narrow_channels(2, 6).unwrap();
    let xa = x.narrow_channels(2, 6).unwrap().map(|v| v * 0.5);
    assert!(ya.max_abs_diff(&xa) < 1e-15);
}

#[test]
fn pat_ch_zero_input_uses_sqrt_eps() {
    let (mut store, blk) = pat_ch(8, 2, 5);
    let mut x = Tensor::randn(&[1, 8, 3, 3], 1.0, &mut rng(6));
    x.data_mut()[2 * 9..].iter_mut().for_each(|v| *v = 0.0);
    let mut wts = None;
    let y = run(&mut store, &x, Mode::Eval, |s, v| {
        let xa = s.tape.narrow(v, 1, 2, 6)?;
        let a = blk.channel_weights(s, xa, 0, 6)?;
        wts = Some(s.tape.value(a).clone());
        blk.forward(s, v)
    });
    let wts = wts.unwrap();
    let ws = store.value(blk.w_std).data();
    let bn = blk.stat_bn.as_ref().unwrap();
    let (g, b) = (store.value(bn.gamma).data(), store.value(bn.beta).data());
    let st = store.stats(bn.stats);
    for j in 0..6 {
        let a = sigmoid(bn_eval(ws[j] * 1e-5f64.sqrt(), g[j], b[j], st.mean.data()[j], st.var.data()[j]));
        assert!((wts.data()[j] - a).abs() < 1e-14);
    }
    assert!(y.data()[2 * 9..].iter().all(|v| *v == 0.0));
}

fn pat_ch_oracle(store: &ParameterStore<f64>, blk: &PatCh, x: &Tensor<f64>) -> Vec<f64> {
    let (n, c, h, w) = dims(x);
    let cp = blk.split.c_p();
    let ca = c - cp;
    let plane = h * w;
    let conv = static_conv(&blk.conv);
    let xc = channels(x.data(), (n, c, h, w), 0, cp);
    let (yc, _) = conv_ref(&xc, (n, cp, h, w), store.value(conv.weight).data(), cp, 3, 1, 1, 1, None);
    let xa = channels(x.data(), (n, c, h, w), cp, ca);
    let bn = blk.stat_bn.as_ref().unwrap();
    let (wm, ws) = (store.value(blk.w_mean).data(), store.value(blk.w_std).data());
    let (g, b) = (store.value(bn.gamma).data(), store.value(bn.beta).data());
    let st = store.stats(bn.stats);
    let mut ya = xa.clone();
    for i in 0..n {
        for j in 0..ca {
            let s = &xa[(i * ca + j) * plane..(i * ca + j + 1) * plane];
            let mean = s.iter().sum::<f64>() / plane as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let std = (var + 1e-5).sqrt();
            let z = wm[j] * mean + ws[j] * std;
            let a = sigmoid(bn_eval(z, g[j], b[j], st.mean.data()[j], st.var.data()[j]));
            for v in ya[(i * ca + j) * plane..(i * ca + j + 1) * plane].iter_mut() {
                *v *= a;
            }
        }
    }
    cat(&yc, cp, &ya, ca, n, plane)
}

#[test]
fn pat_ch_matches_scalar_oracle() {
    let (mut store, blk) = pat_ch(8, 2, 7);
    let x = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut rng(8));
    let y = run(&mut store, &x, Mode::Eval, |s, v| blk.forward(s, v));
    assert!(max_diff(y.data(), &pat_ch_oracle(&store, &blk, &x)) < 1e-10);
}

fn pat_sp(c: usize, c_p: usize, seed: u64) -> (ParameterStore<f64>, PatSp) {
    let mut store = ParameterStore::new();
    let blk = PatSp::declare(&mut store, "b", SplitSpec::attention(c, c_p).unwrap(), Scope::Partial, None).unwrap();
    randomize(&mut store, 0.5, seed);
    (store, blk)
}

#[test]
fn pat_sp_zero_squeeze_gives_half() {
    let (mut store, blk) = pat_sp(8, 2, 9);
    store.set(blk.squeeze_weight, Tensor::zeros(&[1, 6, 1, 1])).unwrap();
    store.set(blk.squeeze_bias, Tensor::zeros(&[1])).unwrap();
    let x = Tensor::randn(&[1, 8, 3, 3], 1.0, &mut rng(10));
    let y = run(&mut store, &x, Mode::Eval, |s, v| blk.forward(s, v));
    let want = x.narrow_channels(2, 6).unwrap().map(|v| v * 0.5);
    assert!(y.narrow_channels(2, 6).unwrap().max_abs_diff(&want) < 1e-15);
}

#[test]
fn pat_sp_saturated_bias_is_identity() {
    let (mut store, blk) = pat_sp(8, 2, 11);
    store.set(blk.squeeze_weight, Tensor::zeros(&[1, 6, 1, 1])).unwrap();
    store.set(blk.squeeze_bias, Tensor::full(&[1], 6.0)).unwrap();
    let x = Tensor::randn(&[1, 8, 3, 3], 1.0, &mut rng(12));
    let y = run(&mut store, &x, Mode::Eval, |s, v| blk.forward(s, v));
    assert_eq!(y.narrow_channels(2, 6).unwrap(), x.narrow_channels(2, 6).unwrap());
}

fn pat_sp_oracle(store: &ParameterStore<f64>, blk: &PatSp, x: &Tensor<f64>) -> Vec<f64> {
    let (n, c, h, w) = dims(x);
    let cp = blk.split.c_p();
    let ca = c - cp;
    let plane = h * w;
    let conv = static_conv(blk.conv.as_ref().unwrap());
    let xc = channels(x.data(), (n, c, h, w), 0, cp);
    let (yc, _) = conv_ref(&xc, (n, cp, h, w), store.value(conv.weight).data(), cp, 1, 1, 0, 1, None);
    let xa = channels(x.data(), (n, c, h, w), cp, ca);
    let sw = store.value(blk.squeeze_weight).data();
    let sb = store.value(blk.squeeze_bias).data()[0];
    let mut ya = xa.clone();
    for i in 0..n {
        for p in 0..plane {
            let z: f64 = (0..ca).map(|j| sw[j] * xa[(i * ca + j) * plane + p]).sum::<f64>() + sb;
            let m = hard_sigmoid(z);
            for j in 0..ca {
                ya[(i * ca + j) * plane + p] *= m;
            }
        }
    }
    cat(&yc, cp, &ya, ca, n, plane)
}

#[test]
fn pat_sp_matches_scalar_oracle() {
    let (mut store, blk) = pat_sp(8, 2, 13);
    let x = Tensor::randn(&[1, 8, 3, 3], 3.0, &mut rng(14));
    let y = run(&mut store, &x, Mode::Eval, |s, v| blk.forward(s, v));
    assert!(max_diff(y.data(), &pat_sp_oracle(&store, &blk, &x)) < 1e-10);
}

fn pat_sf(c: usize, c_p: usize, grid: (usize, usize), seed: u64) -> (ParameterStore<f64>, PatSf) {
    let mut store = ParameterStore::new();
    let split = SplitSpec::attention(c, c_p).unwrap();
    let blk = PatSf::declare(&mut store, "b", split, Scope::Partial, 3, grid).unwrap();
    randomize(&mut store, 0.5, seed);
    (store, blk)
}

/// Pointwise conv with bias applied per token: `out[o][t] = b[o] + Σ_i w[o][i] x[i][t]`.
fn pointwise(x: &[f64], cin: usize, t: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * t];
    for o in 0..cout {
        for p in 0..t {
            out[o * t + p] = b[o] + (0..cin).map(|i| w[o * cin + i] * x[i * t + p]).sum::<f64>();
        }
    }
    out
}

fn pat_sf_oracle(store: &ParameterStore<f64>, blk: &PatSf, x: &Tensor<f64>) -> Vec<f64> {
    let (n, c, h, w) = dims(x);
    let cp = blk.split.c_p();
    let ca = c - cp;
    let t = h * w;
    let conv = static_conv(&blk.conv);
    let xc = channels(x.data(), (n, c, h, w), 0, cp);
    let (yc, _) = conv_ref(&xc, (n, cp, h, w), store.value(conv.weight).data(), cp, conv.k, 1, conv.k / 2, 1, None);
    let xa = channels(x.data(), (n, c, h, w), cp, ca);
    let heads = blk.heads;
    let d = ca / heads;
    let qkv_w = store.value(blk.qkv.weight).data();
    let qkv_b = store.value(blk.qkv.bias.unwrap()).data();
    let pw = store.value(blk.proj.weight).data();
    let pb = store.value(blk.proj.bias.unwrap()).data();
    let table = store.value(blk.rpe).data();
    let mut ya = Vec::new();
    for i in 0..n {
        let xi = &xa[i * ca * t..(i + 1) * ca * t];
        let qkv = pointwise(xi, ca, t, qkv_w, qkv_b, 3 * ca);
        let mut o = vec![0.0; ca * t];
        for hd in 0..heads {
            let ch = |part: usize, dd: usize, tok: usize| qkv[(part * ca + hd * d + dd) * t + tok];
            for q in 0..t {
                let mut scores = vec![0.0; t];
                for k in 0..t {
                    let dot: f64 = (0..d).map(|dd| ch(0, dd, q) * ch(1, dd, k)).sum();
                    let row = rpe_row(blk.grid, (q / w, q % w), (k / w, k % w));
                    scores[k] = dot / (d as f64).sqrt() + table[row * heads + hd];
                }
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for dd in 0..d {
                    o[(hd * d + dd) * t + q] = (0..t).map(|k| e[k] / z * ch(2, dd, k)).sum();
                }
            }
        }
        ya.extend(pointwise(&o, ca, t, pw, pb, ca));
    }
    cat(&yc, cp, &ya, ca, n, t)
}

#[test]
fn pat_sf_matches_pairwise_oracle() {
    let (mut store, blk) = pat_sf(6, 2, (2, 2), 15);
    assert_eq!(blk.heads, 1);
    let x = Tensor::randn(&[2, 6, 2, 2], 1.0, &mut rng(16));
    let y = run(&mut store, &x, Mode::Eval, |s, v| blk.forward(s, v));
    assert!(max_diff(y.data(), &pat_sf_oracle(&store, &blk, &x)) < 1e-10);
}

#[test]
fn pat_sf_multi_head_smaller_grid_matches_oracle() {
    let (mut store, blk) = pat_sf(72, 8, (4, 5), 17);
    assert_eq!(blk.heads, 2);
    let x = Tensor::randn(&[1, 72, 3, 4], 1.0, &mut rng(18));
    let y = run(&mut store, &x, Mode::Eval, |s, v| blk.forward(s, v));
    assert!(max_diff(y.data(), &pat_sf_oracle(&store, &blk, &x)) < 1e-10);
}

#[test]
fn pat_sf_single_token_is_projected_values() {
    let (mut store, blk) = pat_sf(6, 2, (1, 1), 19);
    let x = Tensor::randn(&[1, 6, 1, 1], 1.0, &mut rng(20));
    let y = run(&mut store, &x, Mode::Eval, |s, v| blk.forward(s, v));
    let xa = x.data()[2..].to_vec();
    let qkv = pointwise(&xa, 4, 1, store.value(blk.qkv.weight).data(), store.value(blk.qkv.bias.unwrap()).data(), 12);
    let want = pointwise(
        &qkv[8..12],
        4,
        1,
        store.value(blk.proj.weight).data(),
        store.value(blk.proj.bias.unwrap()).data(),
        4,
    );
    assert!(max_diff(&y.data()[2..], &want) < 1e-12);
}

#[test]
fn pat_sf_zero_query_attends_uniformly() {
    let (mut store, blk) = pat_sf(6, 2, (2, 3), 21);
    store.set(blk.rpe, Tensor::zeros(store.value(blk.rpe).shape())).unwrap();
    // Zero the query rows of the qkv projection.
    let mut qw = store.value(blk.qkv.weight).clone();
    qw.data_mut()[..4 * 4].iter_mut().for_each(|v| *v = 0.0);
    store.set(blk.qkv.weight, qw).unwrap();
    let mut qb = store.value(blk.qkv.bias.unwrap()).clone();
    qb.data_mut()[..4].iter_mut().for_each(|v| *v = 0.0);
    store.set(blk.qkv.bias.unwrap(), qb).unwrap();
    let x = Tensor::randn(&[1, 6, 2, 3], 1.0, &mut rng(22));
    let mut scores = None;
    run(&mut store, &x, Mode::Eval, |s, v| {
        let xa = s.tape.narrow(v, 1, 2, 4)?;
        let (a, o) = blk.attend(s, xa)?;
        scores = Some(s.tape.value(a).clone());
        Ok(o)
    });
    let a = scores.unwrap();
    assert!(a.data().iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn pat_sf_rejects_indivisible_heads_and_oversized_grid() {
    assert_eq!(heads_for(64).unwrap(), 2);
    assert_eq!(heads_for(20).unwrap(), 1);
    assert!(matches!(heads_for(100), Err(Error::Config(_))));
    let mut store = ParameterStore::<f64>::new();
    let split = SplitSpec::attention(108, 8).unwrap();
    assert!(matches!(PatSf::declare(&mut store, "b", split, Scope::Partial, 1, (2, 2)), Err(Error::Config(_))));
    let (mut store, blk) = pat_sf(6, 2, (2, 2), 23);
    let x = Tensor::zeros(&[1, 6, 3, 2]);
    let r = partialnet::blocks::run_standalone(&mut store, &x, Mode::Eval, |s, v| blk.forward(s, v));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn full_scope_attends_over_all_channels() {
    let mut store = ParameterStore::<f64>::new();
    let split = SplitSpec::attention(8, 2).unwrap();
    let blk = PatCh::declare(&mut store, "b", split, Scope::Full, None).unwrap();
    assert_eq!(store.spec(blk.w_mean).shape, vec![8]);
    randomize(&mut store, 0.5, 24);
    let x = Tensor::randn(&[1, 8, 3, 3], 1.0, &mut rng(25));
    let y = run(&mut store, &x, Mode::Eval, |s, v| blk.forward(s, v));
    // The conv channels are rescaled too, so they differ from the plain conv.
    let conv = static_conv(&blk.conv);
    let xc = channels(x.data(), (1, 8, 3, 3), 0, 2);
    let (yc, _) = conv_ref(&xc, (1, 2, 3, 3), store.value(conv.weight).data(), 2, 3, 1, 1, 1, None);
    assert!(max_diff(&y.data()[..18], &yc) > 1e-6);
    assert_eq!(y.shape(), x.shape());
}

#[test]
fn block_gradients_pass_grad_check() {
    let x = Tensor::randn(&[2, 8, 3, 3], 1.0, &mut rng(26));
    for mode in [Mode::Eval, Mode::Train] {
        let (mut s, b) = pat_ch(8, 2, 27);
        let e = store_grad_check(&mut s, &x, mode, |ss, v| b.forward(ss, v));
        assert!(e < 1e-4, "ch {mode:?}: {e}");
        let (mut s, b) = pat_sp(8, 2, 28);
        let e = store_grad_check(&mut s, &x, mode, |ss, v| b.forward(ss, v));
        assert!(e < 1e-4, "sp {mode:?}: {e}");
    }
    let (mut s, b) = pat_sf(8, 2, (3, 3), 29);
    let e = store_grad_check(&mut s, &x, Mode::Eval, |ss, v| b.forward(ss, v));
    assert!(e < 1e-4, "sf: {e}");
}

#[test]
fn rpe_bias_depends_only_on_offset() {
    let grid = (4, 5);
    for (q, k) in [((0, 0), (1, 2)), ((2, 3), (0, 4)), ((3, 0), (3, 4))] {
        let base = rpe_row(grid, q, k);
        for sy in 0..grid.0 {
            for sx in 0..grid.1 {
                let (q2, k2) = ((q.0 + sy, q.1 + sx), (k.0 + sy, k.1 + sx));
                if q2.0 < grid.0 && k2.0 < grid.0 && q2.1 < grid.1 && k2.1 < grid.1 {
                    assert_eq!(rpe_row(grid, q2, k2), base);
                }
            }
        }
    }
    // Distinct offsets get distinct rows.
    let idx = rpe_index(grid, 4, 5, 1);
    let mut seen = std::collections::HashMap::new();
    for q in 0..20 {
        for k in 0..20 {
            let off = ((q / 5) as isize - (k / 5) as isize, (q % 5) as isize - (k % 5) as isize);
            let row = idx[q * 20 + k];
            assert_eq!(*seen.entry(off).or_insert(row), row);
        }
    }
    assert_eq!(seen.len(), 7 * 9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blocks_preserve_shape_and_bound_attention(
        n in 1usize..3, c_p in 1usize..4, c_att in 1usize..6, h in 1usize..4, w in 1usize..4, seed in 0u64..1000
    ) {
        let c = c_p + c_att;
        let x = Tensor::randn(&[n, c, h, w], 2.0, &mut rng(seed));
        let (mut s, b) = pat_ch(c, c_p, seed);
        let mut wts = None;
        let y = run(&mut s, &x, Mode::Eval, |ss, v| {
            let xa = ss.tape.narrow(v, 1, c_p, c_att)?;
            let a = b.channel_weights(ss, xa, 0, c_att)?;
            wts = Some(ss.tape.value(a).clone());
            b.forward(ss, v)
        });
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(wts.unwrap().data().iter().all(|a| *a > 0.0 && *a < 1.0));

        let (mut s, b) = pat_sp(c, c_p, seed);
        let mut map = None;
        let y = run(&mut s, &x, Mode::Eval, |ss, v| {
            let xa = ss.tape.narrow(v, 1, c_p, c_att)?;
            let m = b.spatial_map(ss, xa, 0, c_att)?;
            map = Some(ss.tape.value(m).clone());
            b.forward(ss, v)
        });
        let map = map.unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert_eq!(map.shape(), &[n, 1, h, w]);
        prop_assert!(map.data().iter().all(|m| (0.0..=1.0).contains(m)));

        let (mut s, b) = pat_sf(c, c_p, (h, w), seed);
        let mut att = None;
        let y = run(&mut s, &x, Mode::Eval, |ss, v| {
            let xa = ss.tape.narrow(v, 1, c_p, c_att)?;
            let a = b.attend(ss, xa)?.0;
            att = Some(ss.tape.value(a).clone());
            b.forward(ss, v)
        });
        prop_assert_eq!(y.shape(), x.shape());
        let att = att.unwrap();
        let t = h * w;
        for row in att.data().chunks(t) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn branches_are_independent(c_p in 1usize..4, c_att in 1usize..5, seed in 0u64..1000) {
        let c = c_p + c_att;
        let x = Tensor::randn(&[2, c, 3, 3], 1.0, &mut rng(seed));
        let mut zero_att = x.clone();
        let mut zero_conv = x.clone();
        for i in 0..2 {
            for j in 0..c {
                let r = (i * c + j) * 9..(i * c + j + 1) * 9;
                if j < c_p { zero_conv.data_mut()[r].iter_mut().for_each(|v| *v = 0.0) }
                else { zero_att.data_mut()[r].iter_mut().for_each(|v| *v = 0.0) }
            }
        }
        let check = |f: &dyn Fn(&mut ParameterStore<f64>, &Tensor<f64>) -> Tensor<f64>, s: &mut ParameterStore<f64>| {
            let y = f(s, &x);
            let ya = f(s, &zero_att);
            let yc = f(s, &zero_conv);
            (
                y.narrow_channels(0, c_p).unwrap() == ya.narrow_channels(0, c_p).unwrap(),
                y.narrow_channels(c_p, c_att).unwrap() == yc.narrow_channels(c_p, c_att).unwrap(),
            )
        };
        let (mut s, b) = pat_ch(c, c_p, seed);
        prop_assert_eq!(check(&|s, x| run(s, x, Mode::Eval, |ss, v| b.forward(ss, v)), &mut s), (true, true));
        let (mut s, b) = pat_sp(c, c_p, seed);
        prop_assert_eq!(check(&|s, x| run(s, x, Mode::Eval, |ss, v| b.forward(ss, v)), &mut s), (true, true));
        let (mut s, b) = pat_sf(c, c_p, (3, 3), seed);
        prop_assert_eq!(check(&|s, x| run(s, x, Mode::Eval, |ss, v| b.forward(ss, v)), &mut s), (true, true));
    }

    #[test]
    fn split_concat_is_identity(n in 1usize..3, c in 1usize..9, h in 1usize..4, seed in 0u64..1000, frac in 0.0f64..1.0) {
        let c_p = 1 + ((c - 1) as f64 * frac) as usize;
        let x = Tensor::<f64>::randn(&[n, c, h, h], 1.0, &mut rng(seed));
        let s = SplitSpec::new(c, c_p).unwrap();
        let (a, b) = split_channels(&x, &s).unwrap();
        if c_p == c {
            prop_assert_eq!(a, x);
        } else {
            prop_assert_eq!(concat_channels(&a, &b).unwrap(), x);
        }
    }
}
