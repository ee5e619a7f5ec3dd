//! Forward values against hand-derived and naive reference computations.

use ag4_core::model::{causal_attention, BlockWeights, Model, ModelConfig, PositionalMode};
use ag4_core::tensor::{gelu, rms_norm, silu, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn activation_reference_values() {
    let x = Tensor::vector(vec![1.0, -1.0]);
    let g = gelu(&x);
    assert!(close(g.data()[0], 0.841345, 1e-6), "{}", g.data()[0]);
    assert!(close(g.data()[1], -0.158655, 1e-6), "{}", g.data()[1]);
    let s = silu(&x);
    assert!(close(s.data()[0], 0.731059, 1e-6), "{}", s.data()[0]);
    assert!(close(s.data()[1], -0.268941, 1e-6), "{}", s.data()[1]);
}

#[test]
fn rms_norm_of_three_four() {
    // rms([3, 4]) = sqrt(12.5)
    let x = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
    let y = rms_norm(&x, &Tensor::ones(vec![2]), 0.0).unwrap();
    let r = 12.5f64.sqrt();
    assert!(close(y.data()[0], 3.0 / r, 1e-15));
    assert!(close(y.data()[1], 4.0 / r, 1e-15));
    let gained = rms_norm(&x, &Tensor::vector(vec![2.0, -1.0]), 0.0).unwrap();
    assert!(close(gained.data()[0], 6.0 / r, 1e-15));
    assert!(close(gained.data()[1], -4.0 / r, 1e-15));
}

#[test]
fn cross_entropy_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (rows, vocab) = (rng.random_range(1..6), rng.random_range(2..9));
        let logits: Vec<f64> = (0..rows * vocab).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut targets: Vec<Option<usize>> = (0..rows)
            .map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..vocab)))
            .collect();
        targets[0] = Some(0);

        let mut want = 0.0;
        let mut n = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = &logits[r * vocab..(r + 1) * vocab];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                want += -(row[*t].exp() / z).ln();
                n += 1.0;
            }
        }
        want /= n;

        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::matrix(rows, vocab, logits).unwrap(), true);
        let loss = tape.cross_entropy(l, &targets).unwrap();
        let got = tape.value(loss).item().unwrap();
        assert!(close(got, want, 1e-10), "{got} vs {want}");
    }
}

fn identity_block(hidden: usize) -> BlockWeights {
    let mut eye = Tensor::zeros(vec![hidden, hidden]);
    for i in 0..hidden {
        eye.data_mut()[i * hidden + i] = 1.0;
    }
    BlockWeights {
        norm_attn_gain: Tensor::ones(vec![hidden]),
        wq: eye.clone(),
        wk: eye.clone(),
        wv: eye.clone(),
        wo: eye.clone(),
        adapter: None,
        norm_mlp_gain: Tensor::ones(vec![hidden]),
        w_gate: eye.clone(),
        w_up_mlp: eye.clone(),
        w_down_mlp: eye,
    }
}

#[test]
fn two_token_attention_closed_form() {
    let cfg = ModelConfig {
        n_blocks: 1,
        hidden: 2,
        n_heads: 1,
        mlp_inner: 2,
        adapters_enabled: false,
        positional_mode: PositionalMode::Absolute,
        ..ModelConfig::reference_toy()
    };
    let blk = identity_block(2);
    let mut tape = Tape::new();
    let mut c = |t: &Tensor| tape.constant(t.clone());
    let w = BlockWeights {
        norm_attn_gain: c(&blk.norm_attn_gain),
        wq: c(&blk.wq),
        wk: c(&blk.wk),
        wv: c(&blk.wv),
        wo: c(&blk.wo),
        adapter: None,
        norm_mlp_gain: c(&blk.norm_mlp_gain),
        w_gate: c(&blk.w_gate),
        w_up_mlp: c(&blk.w_up_mlp),
        w_down_mlp: c(&blk.w_down_mlp),
    };
    let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let out = causal_attention(&mut tape, x, &w, &cfg).unwrap();
    let out = tape.value(out);

    // row 0 sees only itself; row 1 mixes with scores [0, 1] / sqrt(2)
    let e = (1.0 / 2f64.sqrt()).exp();
    let (p0, p1) = (1.0 / (1.0 + e), e / (1.0 + e));
    let want = [1.0, 0.0, p0, p1];
    for (g, w) in out.data().iter().zip(want) {
        assert!(close(*g, w, 1e-15), "{:?} vs {want:?}", out.data());
    }
}

// Naive reference decoder written with plain loops and no shared kernels.

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn rms(x: &Mat, g: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let d = (ms + eps).sqrt();
            row.iter().zip(g).map(|(v, g)| v / d * g).collect()
        })
        .collect()
}

fn rotate(x: &Mat, n_heads: usize, base: f64) -> Mat {
    let d = x[0].len() / n_heads;
    let mut out = x.clone();
    for (pos, row) in out.iter_mut().enumerate() {
        for h in 0..n_heads {
            for i in 0..d / 2 {
                let theta = pos as f64 / base.powf(2.0 * i as f64 / d as f64);
                let (a, b) = (x[pos][h * d + 2 * i], x[pos][h * d + 2 * i + 1]);
                row[h * d + 2 * i] = a * theta.cos() - b * theta.sin();
                row[h * d + 2 * i + 1] = a * theta.sin() + b * theta.cos();
            }
        }
    }
    out
}

fn erf_gelu(v: f64) -> f64 {
    // Simpson integration of the normal density, independent of erf.
    let n = 20_000;
    let (lo, hi) = (-12.0f64, v);
    if hi <= lo {
        return 0.0;
    }
    let h = (hi - lo) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(lo) + pdf(hi);
    for k in 1..n {
        s += pdf(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    v * s * h / 3.0
}

fn reference_logits(m: &Model, tokens: &[usize]) -> Mat {
    let cfg = &m.config;
    let w = &m.weights;
    let emb = to_mat(&w.token_embed);
    let mut x: Mat = tokens.iter().map(|&t| emb[t].clone()).collect();
    let seq = x.len();
    let d = cfg.hidden / cfg.n_heads;
    for b in &w.blocks {
        let n = rms(&x, b.norm_attn_gain.data(), cfg.norm_eps);
        let q = rotate(&mm(&n, &to_mat(&b.wq)), cfg.n_heads, cfg.rope_base);
        let k = rotate(&mm(&n, &to_mat(&b.wk)), cfg.n_heads, cfg.rope_base);
        let v = mm(&n, &to_mat(&b.wv));
        let mut heads = vec![vec![0.0; cfg.hidden]; seq];
        for h in 0..cfg.n_heads {
            for i in 0..seq {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..d).map(|c| q[i][h * d + c] * k[j][h * d + c]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    for c in 0..d {
                        heads[i][h * d + c] += s.exp() / z * v[j][h * d + c];
                    }
                }
            }
        }
        let attn = mm(&heads, &to_mat(&b.wo));
        let hres: Mat = x
            .iter()
            .zip(&attn)
            .map(|(a, b)| a.iter().zip(b).map(|(a, b)| a + b).collect())
            .collect();
        let ad = b.adapter.as_ref().expect("adapters on");
        let down = mm(&hres, &to_mat(&ad.w_down));
        let act: Mat = down
            .iter()
            .map(|r| r.iter().zip(ad.b_down.data()).map(|(v, bb)| erf_gelu(v + bb)).collect())
            .collect();
        let up = mm(&act, &to_mat(&ad.w_up));
        let a: Mat = hres
            .iter()
            .zip(&up)
            .map(|(h, u)| {
                h.iter()
                    .zip(u)
                    .zip(ad.b_up.data())
                    .map(|((h, u), bb)| h + u + bb)
                    .collect()
            })
            .collect();
        let n = rms(&a, b.norm_mlp_gain.data(), cfg.norm_eps);
        let gate = mm(&n, &to_mat(&b.w_gate));
        let upm = mm(&n, &to_mat(&b.w_up_mlp));
        let inner: Mat = gate
            .iter()
            .zip(&upm)
            .map(|(g, u)| g.iter().zip(u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect())
            .collect();
        let mlp = mm(&inner, &to_mat(&b.w_down_mlp));
        x = a
            .iter()
            .zip(&mlp)
            .map(|(a, m)| a.iter().zip(m).map(|(a, m)| a + m).collect())
            .collect();
    }
    let n = rms(&x, w.final_norm_gain.data(), cfg.norm_eps);
    mm(&n, &to_mat(&w.unembed))
}

#[test]
fn one_block_hidden_four_matches_naive_reference() {
    let cfg = ModelConfig {
        n_blocks: 1,
        hidden: 4,
        n_heads: 2,
        mlp_inner: 8,
        vocab_size: 32,
        ..ModelConfig::reference_toy()
    };
    let mut model = Model::init(cfg, 5).unwrap();
    // Move every weight off init so adapters and gains all contribute.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (_, t) in model.weights.entries_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    for tokens in [vec![3], vec![0, 5, 9], vec![1, 2, 3, 4, 5, 6, 7, 31]] {
        let got = model.forward(None, &tokens, None).unwrap().logits;
        let want = reference_logits(&model, &tokens);
        for (r, row) in want.iter().enumerate() {
            for (c, w) in row.iter().enumerate() {
                assert!(close(got.at(r, c), *w, 1e-9), "({r},{c}): {} vs {w}", got.at(r, c));
            }
        }
    }
}
