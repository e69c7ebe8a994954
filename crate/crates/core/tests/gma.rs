use groupmix::gma::{factorized_attention, split_segments, vanilla_attention};
use groupmix::{
    AggregatorKind, AggregatorSpec, BranchPlan, Error, GmaBlock, GmaConfig, ParamStore, SeededRng,
    Tape, Tensor, LN_EPS,
};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

fn block(config: GmaConfig, seed: u64) -> (ParamStore, GmaBlock) {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(seed);
    let b = GmaBlock::new(&mut store, "gma", config, &mut rng).unwrap();
    // Leave the unit/zero norm init behind so the oracle sees every parameter.
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.uniform_range(-0.2, 0.2);
        }
    }
    (store, b)
}

fn run(store: &ParamStore, b: &GmaBlock, x: &Tensor, h: usize, w: usize) -> Tensor {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = b.forward(&mut tape, &p, xv, h, w).unwrap();
    tape.value(y).clone()
}

/// Plain-loop evaluation of the block, independent of the tape.
mod reference {
    use super::*;

    pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
        store
            .get(name)
            .unwrap_or_else(|| panic!("missing {name}"))
            .value
            .data()
    }

    fn hardswish(x: f64) -> f64 {
        x * (x + 3.0).clamp(0.0, 6.0) / 6.0
    }

    /// Channel LayerNorm + HardSwish on `C×N`, in place.
    fn norm_act(x: &mut [Vec<f64>], gamma: &[f64], beta: &[f64]) {
        let (c, n) = (x.len(), x[0].len());
        for t in 0..n {
            let mean = (0..c).map(|i| x[i][t]).sum::<f64>() / c as f64;
            let var = (0..c).map(|i| (x[i][t] - mean).powi(2)).sum::<f64>() / c as f64;
            for i in 0..c {
                let z = (x[i][t] - mean) / (var + LN_EPS).sqrt();
                x[i][t] = hardswish(z * gamma[i] + beta[i]);
            }
        }
    }

    fn depthwise(x: &[Vec<f64>], w: &[f64], b: &[f64], k: usize, h: usize, wd: usize) -> Vec<Vec<f64>> {
        let r = (k / 2) as isize;
        (0..x.len())
            .map(|c| {
                let mut out = vec![b[c]; h * wd];
                for y in 0..h {
                    for xx in 0..wd {
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = y as isize + dy as isize - r;
                                let sx = xx as isize + dx as isize - r;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    out[y * wd + xx] += w[c * k * k + dy * k + dx]
                                        * x[c][sy as usize * wd + sx as usize];
                                }
                            }
                        }
                    }
                }
                out
            })
            .collect()
    }

    fn pointwise(x: &[Vec<f64>], w: &[f64], b: &[f64], cout: usize) -> Vec<Vec<f64>> {
        let cin = x.len();
        (0..cout)
            .map(|co| {
                (0..x[0].len())
                    .map(|t| b[co] + (0..cin).map(|ci| w[co * cin + ci] * x[ci][t]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn pool(x: &[Vec<f64>], kind: AggregatorKind, k: usize, h: usize, wd: usize) -> Vec<Vec<f64>> {
        let r = (k / 2) as isize;
        x.iter()
            .map(|plane| {
                let mut out = Vec::with_capacity(h * wd);
                for y in 0..h as isize {
                    for xx in 0..wd as isize {
                        let mut vals = Vec::new();
                        for sy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                            for sx in (xx - r).max(0)..=(xx + r).min(wd as isize - 1) {
                                vals.push(plane[(sy * wd as isize + sx) as usize]);
                            }
                        }
                        out.push(match kind {
                            AggregatorKind::MaxPool => vals.iter().cloned().fold(f64::MIN, f64::max),
                            AggregatorKind::MinPool => vals.iter().cloned().fold(f64::MAX, f64::min),
                            _ => vals.iter().sum::<f64>() / vals.len() as f64,
                        });
                    }
                }
                out
            })
            .collect()
    }

    pub fn gma(store: &ParamStore, cfg: &GmaConfig, x: &Tensor, h: usize, w: usize) -> Tensor {
        let (bsz, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let s = d / 5;
        let wq = param(store, "gma.qkv.weight");
        let bq = param(store, "gma.qkv.bias");
        // planes[t][b][c][n]: Q/K/V third t, channel c.
        let mut planes = vec![vec![vec![vec![0.0; n]; d]; bsz]; 3];
        for b in 0..bsz {
            for t in 0..n {
                for o in 0..3 * d {
                    let mut acc = bq[o];
                    for i in 0..d {
                        acc += x.at(&[b, t, i]) * wq[i * 3 * d + o];
                    }
                    planes[o / d][b][o % d][t] = acc;
                }
            }
        }

        let mut out = Tensor::zeros(&[bsz, n, d]);
        for b in 0..bsz {
            // Pre-attention branches, per third.
            let mut att_in = vec![vec![vec![0.0; n]; 4 * s]; 3];
            for (br, spec) in cfg.plan.pre_attention.iter().enumerate() {
                let pre = format!("gma.branch{br}");
                for third in 0..3 {
                    let seg: Vec<Vec<f64>> = planes[third][b][br * s..(br + 1) * s].to_vec();
                    let mut y = match spec.kind {
                        AggregatorKind::Identity => seg,
                        AggregatorKind::DepthwiseConv => {
                            let dw = depthwise(
                                &seg,
                                param(store, &format!("{pre}.agg.dw.weight")),
                                param(store, &format!("{pre}.agg.dw.bias")),
                                spec.kernel,
                                h,
                                w,
                            );
                            pointwise(
                                &dw,
                                param(store, &format!("{pre}.agg.pw.weight")),
                                param(store, &format!("{pre}.agg.pw.bias")),
                                s,
                            )
                        }
                        kind => pool(&seg, kind, spec.kernel, h, w),
                    };
                    norm_act(
                        &mut y,
                        param(store, &format!("{pre}.norm.weight")),
                        param(store, &format!("{pre}.norm.bias")),
                    );
                    att_in[third][br * s..(br + 1) * s].clone_from_slice(&y);
                }
            }

            // Factorized attention per head.
            let (heads, dh) = (cfg.heads, 4 * s / cfg.heads);
            let scale = 1.0 / (dh as f64).sqrt();
            let mut att = vec![vec![0.0; n]; 4 * s];
            for hd in 0..heads {
                let ch = |j: usize| hd * dh + j;
                let mut ks = vec![vec![0.0; n]; dh];
                for j in 0..dh {
                    let row = &att_in[1][ch(j)];
                    let m = row.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for t in 0..n {
                        ks[j][t] = (row[t] - m).exp() / z;
                    }
                }
                let mut ctx = vec![vec![0.0; dh]; dh];
                for i in 0..dh {
                    for j in 0..dh {
                        ctx[i][j] = (0..n).map(|t| ks[i][t] * att_in[2][ch(j)][t]).sum();
                    }
                }
                for t in 0..n {
                    for j in 0..dh {
                        att[ch(j)][t] = (0..dh)
                            .map(|i| att_in[0][ch(i)][t] * scale * ctx[i][j])
                            .sum();
                    }
                }
            }

            // Non-attention branch.
            let mut non = if cfg.plan.non_attention.is_identity() {
                planes[2][b][4 * s..].to_vec()
            } else {
                let stacked: Vec<Vec<f64>> = (0..3)
                    .flat_map(|t| planes[t][b][4 * s..].to_vec())
                    .collect();
                let dw = depthwise(
                    &stacked,
                    param(store, "gma.non_att.dw.weight"),
                    param(store, "gma.non_att.dw.bias"),
                    cfg.plan.non_attention.kernel,
                    h,
                    w,
                );
                pointwise(
                    &dw,
                    param(store, "gma.non_att.pw.weight"),
                    param(store, "gma.non_att.pw.bias"),
                    s,
                )
            };
            norm_act(
                &mut non,
                param(store, "gma.non_att.norm.weight"),
                param(store, "gma.non_att.norm.bias"),
            );

            // Token ensemble.
            let we = param(store, "gma.ensemble.weight");
            let be = param(store, "gma.ensemble.bias");
            let mut y = vec![vec![0.0; n]; d];
            for t in 0..n {
                let tok: Vec<f64> = (0..d)
                    .map(|c| if c < 4 * s { att[c][t] } else { non[c - 4 * s][t] })
                    .collect();
                for o in 0..d {
                    y[o][t] = be[o] + (0..d).map(|i| tok[i] * we[i * d + o]).sum::<f64>();
                }
            }
            norm_act(
                &mut y,
                param(store, "gma.ensemble_norm.weight"),
                param(store, "gma.ensemble_norm.bias"),
            );
            for t in 0..n {
                for c in 0..d {
                    out.data_mut()[(b * n + t) * d + c] = y[c][t];
                }
            }
        }
        out
    }
}

#[test]
fn split_sizes() {
    for (d, s) in [(40, 8), (200, 40)] {
        let mut tape = Tape::new();
        let x = random(&[3, d, 2, 2], 1);
        let xv = tape.constant(x.clone());
        let segs = split_segments(&mut tape, xv, d).unwrap();
        assert_eq!(segs.len(), 5);
        for &v in &segs {
            assert_eq!(tape.shape(v), &[3, s, 2, 2]);
        }
        let back = tape.concat(&segs, 1).unwrap();
        assert_eq!(tape.value(back), &x);
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 42, 1, 1]));
    assert!(matches!(
        split_segments(&mut tape, x, 42),
        Err(Error::Config(_))
    ));
}

#[test]
fn factorized_single_position() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap());
    let k = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![2.0, 0.0]).unwrap());
    let v = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 3.0]).unwrap());
    let scale = 1.0 / 2f64.sqrt();
    // A single position normalises every key channel to 1, so the context
    // is [[0,3],[0,3]] regardless of k.
    let out = factorized_attention(&mut tape, q, k, v, scale, false).unwrap();
    let got = tape.value(out).data().to_vec();
    assert!(got[0].abs() < 1e-12);
    assert!((got[1] - 3.0 * scale).abs() < 1e-12);

    // Unnormalised contraction kᵀv = [[0,6],[0,0]] gives [0, 6/√2].
    let ctx = tape.bmm(k, v, true, false).unwrap();
    assert_eq!(tape.value(ctx).data(), &[0.0, 6.0, 0.0, 0.0]);
    let qs = tape.scale(q, scale);
    let raw = tape.bmm(qs, ctx, false, false).unwrap();
    assert!((tape.value(raw).data()[1] - 4.2426).abs() < 1e-4);
}

#[test]
fn factorized_with_constant_keys_matches_dense() {
    let (n, dh) = (6, 3);
    let q = random(&[1, 1, n, dh], 2);
    let v = random(&[1, 1, n, dh], 3);
    let krow = random(&[dh], 4);
    let k = Tensor::from_fn(&[1, 1, n, dh], |i| krow.data()[i % dh]);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k), tape.constant(v.clone()));
    let out = factorized_attention(&mut tape, qv, kv, vv, 0.5, false).unwrap();
    // Uniform softmax over positions: context = (1/N) Σ_t 1·v_t per key channel.
    for t in 0..n {
        for j in 0..dh {
            let mean_v: f64 = (0..n).map(|u| v.at(&[0, 0, u, j])).sum::<f64>() / n as f64;
            let want: f64 = (0..dh).map(|i| q.at(&[0, 0, t, i]) * 0.5 * mean_v).sum();
            assert!((tape.value(out).at(&[0, 0, t, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn factorized_context_is_shared_across_query_positions() {
    let (n, dh) = (5, 4);
    let (q, k, v) = (random(&[2, 2, n, dh], 5), random(&[2, 2, n, dh], 6), random(&[2, 2, n, dh], 7));
    let perm = [3, 0, 4, 1, 2];
    let permuted = |x: &Tensor| {
        Tensor::from_fn(x.shape(), |i| {
            let (row, j) = (i / dh, i % dh);
            let (bh, t) = (row / n, row % n);
            x.data()[(bh * n + perm[t]) * dh + j]
        })
    };
    for on_context in [false, true] {
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let qp = tape.constant(permuted(&q));
        let a = factorized_attention(&mut tape, qv, kv, vv, 0.5, on_context).unwrap();
        let b = factorized_attention(&mut tape, qp, kv, vv, 0.5, on_context).unwrap();
        assert!(permuted(tape.value(a)).max_abs_diff(tape.value(b)) < 1e-12);
    }
}

#[test]
fn vanilla_attention_examples() {
    let mut tape = Tape::new();
    let (q, k, v) = (random(&[1, 2, 1, 3], 8), random(&[1, 2, 1, 3], 9), random(&[1, 2, 1, 3], 10));
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
    let out = vanilla_attention(&mut tape, qv, kv, vv, 0.7).unwrap();
    assert!(tape.value(out).max_abs_diff(&v) < 1e-15);

    let row = random(&[3], 11);
    let same = Tensor::from_fn(&[1, 1, 4, 3], |i| row.data()[i % 3]);
    let q = random(&[1, 1, 4, 3], 12);
    let mut tape = Tape::new();
    let (qv, sv) = (tape.constant(q), tape.constant(same.clone()));
    let out = vanilla_attention(&mut tape, qv, sv, sv, 0.7).unwrap();
    assert!(tape.value(out).max_abs_diff(&same) < 1e-12);
}

#[test]
fn attention_rows_sum_to_one() {
    let mut tape = Tape::new();
    let q = tape.constant(random(&[2, 2, 7, 3], 13));
    let k = tape.constant(random(&[2, 2, 7, 3], 14));
    let scores = tape.bmm(q, k, false, true).unwrap();
    let attn = tape.softmax(scores, 3).unwrap();
    for row in tape.value(attn).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn attention_shape_mismatch() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[1, 2, 4, 3]));
    let k = tape.constant(Tensor::zeros(&[1, 2, 5, 3]));
    assert!(matches!(
        factorized_attention(&mut tape, q, k, k, 1.0, false),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(
        vanilla_attention(&mut tape, q, q, k, 1.0),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn block_matches_loop_reference() {
    let pool_plan = BranchPlan {
        pre_attention: [
            AggregatorSpec::new(AggregatorKind::MaxPool, 3),
            AggregatorSpec::new(AggregatorKind::AvgPool, 5),
            AggregatorSpec::new(AggregatorKind::MinPool, 3),
            AggregatorSpec::conv(9),
        ],
        non_attention: AggregatorSpec::conv(5),
    };
    for plan in [BranchPlan::default(), BranchPlan::all_identity(), pool_plan] {
        let config = GmaConfig {
            plan,
            ..GmaConfig::new(20, 2)
        };
        let (store, b) = block(config, 21);
        let x = random(&[2, 15, 20], 22);
        let got = run(&store, &b, &x, 3, 5);
        let want = reference::gma(&store, &config, &x, 3, 5);
        assert!(got.max_abs_diff(&want) < 1e-10, "{plan:?}");
    }
}

#[test]
fn non_attention_branch_matches_loop_oracle() {
    // Isolate the branch: everything but the non-attention output is zeroed
    // by a zero ensemble weight on the first 4s input rows.
    let config = GmaConfig::new(10, 2);
    let (mut store, b) = block(config, 23);
    let id = store.id("gma.ensemble.weight").unwrap();
    let data = store.param_mut(id).value.data_mut();
    data[..8 * 10].fill(0.0);
    let x = random(&[2, 49, 10], 24);
    let got = run(&store, &b, &x, 7, 7);
    assert_eq!(got.shape(), &[2, 49, 10]);
    let want = reference::gma(&store, &config, &x, 7, 7);
    assert!(got.max_abs_diff(&want) < 1e-10);
}

#[test]
fn zero_input_gives_zero_output() {
    let config = GmaConfig::new(10, 2);
    let mut store = ParamStore::new();
    let b = GmaBlock::new(&mut store, "gma", config, &mut SeededRng::new(1)).unwrap();
    let y = run(&store, &b, &Tensor::zeros(&[1, 16, 10]), 4, 4);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_preserved_and_token_count_checked() {
    let (store, b) = block(GmaConfig::new(40, 8), 25);
    let y = run(&store, &b, &random(&[1, 49, 40], 26), 7, 7);
    assert_eq!(y.shape(), &[1, 49, 40]);

    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::zeros(&[1, 48, 40]));
    assert!(matches!(
        b.forward(&mut tape, &p, x, 7, 7),
        Err(Error::Shape { .. })
    ));
}

fn swap_tokens(x: &Tensor, a: usize, b: usize) -> Tensor {
    let (n, d) = (x.shape()[1], x.shape()[2]);
    Tensor::from_fn(x.shape(), |i| {
        let (bt, c) = (i / d, i % d);
        let (batch, t) = (bt / n, bt % n);
        let src = if t == a { b } else if t == b { a } else { t };
        x.data()[(batch * n + src) * d + c]
    })
}

#[test]
fn aggregators_break_permutation_equivariance() {
    let (store, b) = block(GmaConfig::new(10, 2), 27);
    let x = random(&[1, 16, 10], 28);
    let y = run(&store, &b, &x, 4, 4);
    let ys = run(&store, &b, &swap_tokens(&x, 5, 6), 4, 4);
    assert!(swap_tokens(&y, 5, 6).max_abs_diff(&ys) > 1e-6);
}

#[test]
fn all_identity_block_is_permutation_equivariant() {
    let config = GmaConfig {
        plan: BranchPlan::all_identity(),
        ..GmaConfig::new(10, 2)
    };
    let (store, b) = block(config, 29);
    let x = random(&[1, 16, 10], 30);
    let y = run(&store, &b, &x, 4, 4);
    let ys = run(&store, &b, &swap_tokens(&x, 5, 6), 4, 4);
    assert!(swap_tokens(&y, 5, 6).max_abs_diff(&ys) < 1e-12);
}

#[test]
fn param_count_is_analytic_and_monotone() {
    for dim in [10, 40, 80] {
        let base = GmaConfig::new(dim, 2);
        let mut store = ParamStore::new();
        GmaBlock::new(&mut store, "gma", base, &mut SeededRng::new(0)).unwrap();
        assert_eq!(store.num_scalars(), base.param_count());
        for i in 1..4 {
            let mut plan = base.plan;
            plan.pre_attention[i] = AggregatorSpec::IDENTITY;
            let cfg = GmaConfig { plan, ..base };
            let mut store = ParamStore::new();
            GmaBlock::new(&mut store, "gma", cfg, &mut SeededRng::new(0)).unwrap();
            assert_eq!(store.num_scalars(), cfg.param_count());
            assert!(cfg.param_count() < base.param_count());
        }
    }
}

#[test]
fn forward_macs_match_analytic_count() {
    for plan in [BranchPlan::default(), BranchPlan::all_identity()] {
        let cfg = GmaConfig {
            plan,
            ..GmaConfig::new(20, 2)
        };
        let (store, b) = block(cfg, 31);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(random(&[1, 36, 20], 32));
        b.forward(&mut tape, &p, x, 6, 6).unwrap();
        assert_eq!(tape.macs() as usize, cfg.macs(36));
    }
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / n, sy / n);
    let num: f64 = points.iter().map(|&(x, y)| (x.ln() - mx) * (y.ln() - my)).sum();
    let den: f64 = points.iter().map(|&(x, _)| (x.ln() - mx).powi(2)).sum();
    num / den
}

#[test]
fn measured_multiply_counts_scale_linearly_and_quadratically() {
    let mut fact = Vec::new();
    let mut dense = Vec::new();
    for n in [16, 64, 256, 1024] {
        let mut tape = Tape::new();
        let q = tape.constant(random(&[1, 2, n, 8], n as u64));
        let f = factorized_attention(&mut tape, q, q, q, 0.3, false).unwrap();
        let after_fact = tape.macs();
        vanilla_attention(&mut tape, q, q, q, 0.3).unwrap();
        let _ = f;
        fact.push((n as f64, after_fact as f64));
        dense.push((n as f64, (tape.macs() - after_fact) as f64));
    }
    assert!((slope(&fact) - 1.0).abs() <= 0.15);
    assert!((slope(&dense) - 2.0).abs() <= 0.15);
}
