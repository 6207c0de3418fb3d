//! Model-piece verification against independent brute-force oracles,
//! plus causality and composition checks.
//!
//! Oracles are written as naive per-position loops in f64, separate from
//! the graph-based implementation path.

mod common;

use conformer::model::{
    bind_params, conv_module, count_parameters, decoder_block, feed_forward, logits_for,
    multi_head_causal_attention, ConvBlockSpec, ConvPlacement, ForwardCtx, ModelConfig,
    ModelParams, LAYER_NORM_EPS,
};
use tensorcore::{Graph, Mode, StreamRng, Tensor, TokenIds};

fn rand_tensor(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal_f64() * 0.5)
}

// ── Oracles ─────────────────────────────────────────────────────────────

fn matvec(x: &[f64], w: &Tensor<f64>, bias: &[f64]) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = bias.to_vec();
    for o in 0..dout {
        for i in 0..din {
            out[o] += x[i] * w.data()[i * dout + o];
        }
    }
    out
}

/// Per-position multi-head attention with explicit weighted sums.
#[allow(clippy::too_many_arguments)]
fn attention_oracle(
    x: &[Vec<f64>], // T rows of E
    wq: &Tensor<f64>,
    bq: &[f64],
    wk: &Tensor<f64>,
    bk: &[f64],
    wv: &Tensor<f64>,
    bv: &[f64],
    wo: &Tensor<f64>,
    bo: &[f64],
    heads: usize,
) -> Vec<Vec<f64>> {
    let t = x.len();
    let e = x[0].len();
    let hd = e / heads;
    let q: Vec<Vec<f64>> = x.iter().map(|r| matvec(r, wq, bq)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| matvec(r, wk, bk)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| matvec(r, wv, bv)).collect();
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let mut merged = vec![0.0; e];
        for h in 0..heads {
            let hs = h * hd;
            // Scores over the causal prefix.
            let mut scores = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let mut dot = 0.0;
                for d in 0..hd {
                    dot += q[i][hs + d] * k[j][hs + d];
                }
                scores.push(dot / (hd as f64).sqrt());
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..=i {
                let p = exps[j] / total;
                for d in 0..hd {
                    merged[hs + d] += p * v[j][hs + d];
                }
            }
        }
        out.push(matvec(&merged, wo, bo));
    }
    out
}

fn layer_norm_oracle(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let e = x.len() as f64;
    let mean: f64 = x.iter().sum::<f64>() / e;
    let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| g * (v - mean) * rstd + b)
        .collect()
}

fn relu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

fn ff_oracle(x: &[f64], w1: &Tensor<f64>, b1: &[f64], w2: &Tensor<f64>, b2: &[f64]) -> Vec<f64> {
    matvec(&relu_vec(&matvec(x, w1, b1)), w2, b2)
}

/// Nested-loop causal conv stack with the module skip connection.
fn conv_module_oracle(x: &[Vec<f64>], layers: &[(Tensor<f64>, Vec<f64>)]) -> Vec<Vec<f64>> {
    let t = x.len();
    let mut h: Vec<Vec<f64>> = x.to_vec();
    for (kernel, bias) in layers {
        let (kw, cin, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        let mut next = Vec::with_capacity(t);
        for ti in 0..t {
            let mut row = bias.clone();
            for j in 0..kw {
                if ti >= j {
                    for i in 0..cin {
                        for o in 0..cout {
                            row[o] += h[ti - j][i] * kernel.data()[j * cin * cout + i * cout + o];
                        }
                    }
                }
            }
            next.push(relu_vec(&row));
        }
        h = next;
    }
    (0..t)
        .map(|ti| x[ti].iter().zip(&h[ti]).map(|(a, b)| a + b).collect())
        .collect()
}

fn rows_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let e = *t.shape().last().unwrap();
    t.data().chunks(e).map(|c| c.to_vec()).collect()
}

fn assert_rows_close(got: &[f64], want: &[Vec<f64>], tol: f64, what: &str) {
    let e = want[0].len();
    for (ti, row) in want.iter().enumerate() {
        for (i, &w) in row.iter().enumerate() {
            let g = got[ti * e + i];
            assert!(
                (g - w).abs() <= tol,
                "{what}[{ti},{i}]: got {g}, want {w}"
            );
        }
    }
}

// ── Attention ───────────────────────────────────────────────────────────

struct AttnFixture {
    wq: Tensor<f64>,
    bq: Tensor<f64>,
    wk: Tensor<f64>,
    bk: Tensor<f64>,
    wv: Tensor<f64>,
    bv: Tensor<f64>,
    wo: Tensor<f64>,
    bo: Tensor<f64>,
}

impl AttnFixture {
    fn random(e: usize, rng: &mut StreamRng) -> AttnFixture {
        AttnFixture {
            wq: rand_tensor(&[e, e], rng),
            bq: rand_tensor(&[e], rng),
            wk: rand_tensor(&[e, e], rng),
            bk: rand_tensor(&[e], rng),
            wv: rand_tensor(&[e, e], rng),
            bv: rand_tensor(&[e], rng),
            wo: rand_tensor(&[e, e], rng),
            bo: rand_tensor(&[e], rng),
        }
    }

    fn run(&self, x: &Tensor<f64>, heads: usize) -> Vec<f64> {
        let mut g: Graph<f64> = Graph::new();
        let xid = g.input(x.clone());
        let p = conformer::model::BoundAttention {
            wq: g.input(self.wq.clone()),
            bq: g.input(self.bq.clone()),
            wk: g.input(self.wk.clone()),
            bk: g.input(self.bk.clone()),
            wv: g.input(self.wv.clone()),
            bv: g.input(self.bv.clone()),
            wo: g.input(self.wo.clone()),
            bo: g.input(self.bo.clone()),
        };
        let out = multi_head_causal_attention(&mut g, xid, &p, heads).unwrap();
        g.value(out).data().to_vec()
    }
}

#[test]
fn attention_single_token_degenerate() {
    // T=1: the only attention weight is 1, so out = Wo(Wv x + bv) + bo.
    let mut rng = StreamRng::new(50);
    let e = 6;
    let fx = AttnFixture::random(e, &mut rng);
    let x = rand_tensor(&[1, 1, e], &mut rng);
    let got = fx.run(&x, 2);
    let v_row = matvec(&x.data().to_vec(), &fx.wv, fx.bv.data());
    let want = matvec(&v_row, &fx.wo, fx.bo.data());
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_per_position_oracle() {
    let mut rng = StreamRng::new(51);
    for trial in 0..20 {
        let heads = [1, 2, 4][trial % 3];
        let e = heads * [2, 3][trial % 2];
        let t = 3 + trial % 4;
        let fx = AttnFixture::random(e, &mut rng);
        let x = rand_tensor(&[1, t, e], &mut rng);
        let got = fx.run(&x, heads);
        let want = attention_oracle(
            &rows_of(&x),
            &fx.wq,
            fx.bq.data(),
            &fx.wk,
            fx.bk.data(),
            &fx.wv,
            fx.bv.data(),
            &fx.wo,
            fx.bo.data(),
            heads,
        );
        assert_rows_close(&got, &want, 1e-9, "attention");
    }
}

#[test]
fn attention_future_perturbation_leaves_prefix_unchanged() {
    let mut rng = StreamRng::new(52);
    let (e, t, heads) = (8, 6, 2);
    let fx = AttnFixture::random(e, &mut rng);
    let x = rand_tensor(&[1, t, e], &mut rng);
    let base = fx.run(&x, heads);
    for t0 in 1..t {
        let mut x2 = x.clone();
        for ti in t0..t {
            for i in 0..e {
                x2.data_mut()[ti * e + i] += 2.0;
            }
        }
        let pert = fx.run(&x2, heads);
        for ti in 0..t0 {
            for i in 0..e {
                assert_eq!(base[ti * e + i].to_bits(), pert[ti * e + i].to_bits());
            }
        }
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut rng = StreamRng::new(53);
    let fx = AttnFixture::random(6, &mut rng);
    let x = rand_tensor(&[1, 2, 6], &mut rng);
    let mut g: Graph<f64> = Graph::new();
    let xid = g.input(x);
    let p = conformer::model::BoundAttention {
        wq: g.input(fx.wq.clone()),
        bq: g.input(fx.bq.clone()),
        wk: g.input(fx.wk.clone()),
        bk: g.input(fx.bk.clone()),
        wv: g.input(fx.wv.clone()),
        bv: g.input(fx.bv.clone()),
        wo: g.input(fx.wo.clone()),
        bo: g.input(fx.bo.clone()),
    };
    assert!(multi_head_causal_attention(&mut g, xid, &p, 4).is_err());
}

// ── Feed-forward ────────────────────────────────────────────────────────

#[test]
fn feed_forward_zero_weights_emit_constant() {
    let (e, f) = (4, 8);
    let mut g: Graph<f64> = Graph::new();
    let x = g.input(Tensor::from_fn(vec![1, 3, e], |i| i as f64));
    let w1 = g.input(Tensor::zeros(vec![e, f]));
    let b1 = g.input(Tensor::zeros(vec![f]));
    let w2 = g.input(Tensor::zeros(vec![f, e]));
    let b2 = g.input(Tensor::full(vec![e], 2.5));
    let mut ctx = ForwardCtx::new(Mode::Eval, 0.0, 0);
    let y = feed_forward(&mut g, x, w1, b1, w2, b2, &mut ctx).unwrap();
    for &v in g.value(y).data() {
        assert_eq!(v, 2.5);
    }
}

#[test]
fn feed_forward_identity_weights_pass_nonnegative_input() {
    let e = 4;
    let eye = Tensor::from_fn(vec![e, e], |i| if i / e == i % e { 1.0 } else { 0.0 });
    let mut g: Graph<f64> = Graph::new();
    let x = g.input(Tensor::from_fn(vec![1, 2, e], |i| i as f64 * 0.25));
    let w1 = g.input(eye.clone());
    let b1 = g.input(Tensor::zeros(vec![e]));
    let w2 = g.input(eye);
    let b2 = g.input(Tensor::zeros(vec![e]));
    let mut ctx = ForwardCtx::new(Mode::Eval, 0.5, 7);
    let y = feed_forward(&mut g, x, w1, b1, w2, b2, &mut ctx).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn feed_forward_matches_composed_oracle() {
    let mut rng = StreamRng::new(54);
    for _ in 0..10 {
        let (e, f, t) = (3, 5, 4);
        let w1 = rand_tensor(&[e, f], &mut rng);
        let b1 = rand_tensor(&[f], &mut rng);
        let w2 = rand_tensor(&[f, e], &mut rng);
        let b2 = rand_tensor(&[e], &mut rng);
        let x = rand_tensor(&[1, t, e], &mut rng);
        let mut g: Graph<f64> = Graph::new();
        let xid = g.input(x.clone());
        let ids = (
            g.input(w1.clone()),
            g.input(b1.clone()),
            g.input(w2.clone()),
            g.input(b2.clone()),
        );
        let mut ctx = ForwardCtx::new(Mode::Eval, 0.0, 0);
        let y = feed_forward(&mut g, xid, ids.0, ids.1, ids.2, ids.3, &mut ctx).unwrap();
        let want: Vec<Vec<f64>> = rows_of(&x)
            .iter()
            .map(|row| ff_oracle(row, &w1, b1.data(), &w2, b2.data()))
            .collect();
        assert_rows_close(g.value(y).data(), &want, 1e-12, "feed_forward");
    }
}

// ── Decoder block ───────────────────────────────────────────────────────

fn tiny_config(conv: Option<ConvBlockSpec>) -> ModelConfig {
    let mut c = ModelConfig::new(2, 2, 8, 11);
    c.context = 6;
    c.dropout_rate = 0.0;
    c.seed = 21;
    c.conv_spec = conv;
    c.conv_placement = ConvPlacement::AllGaps;
    c
}

#[test]
fn decoder_block_zero_sublayers_is_double_layer_norm() {
    let mut cfg = tiny_config(None);
    cfg.num_layers = 1;
    let mut params: ModelParams<f64> = ModelParams::init(&cfg).unwrap();
    // Zero every attention and feed-forward weight; keep the norms.
    let b = &mut params.blocks[0];
    for t in [
        &mut b.attn.wq, &mut b.attn.bq, &mut b.attn.wk, &mut b.attn.bk,
        &mut b.attn.wv, &mut b.attn.bv, &mut b.attn.wo, &mut b.attn.bo,
        &mut b.ff_w1, &mut b.ff_b1, &mut b.ff_w2, &mut b.ff_b2,
    ] {
        *t = Tensor::zeros(t.shape().to_vec());
    }
    let mut rng = StreamRng::new(55);
    let x = rand_tensor(&[1, 4, 8], &mut rng);
    let mut g: Graph<f64> = Graph::new();
    let bound = bind_params(&mut g, &params, false);
    let xid = g.input(x.clone());
    let mut ctx = ForwardCtx::new(Mode::Eval, 0.0, 0);
    let y = decoder_block(&mut g, xid, &bound.blocks[0], cfg.num_heads, &mut ctx).unwrap();

    let ones = vec![1.0; 8];
    let zeros = vec![0.0; 8];
    let want: Vec<Vec<f64>> = rows_of(&x)
        .iter()
        .map(|row| layer_norm_oracle(&layer_norm_oracle(row, &ones, &zeros), &ones, &zeros))
        .collect();
    assert_rows_close(g.value(y).data(), &want, 1e-12, "double layer norm");
}

#[test]
fn decoder_block_matches_chained_oracle() {
    let mut rng = StreamRng::new(56);
    for _ in 0..20 {
        let cfg = tiny_config(None);
        let params: ModelParams<f64> = ModelParams::init(&cfg).unwrap();
        let bp = &params.blocks[0];
        let x = rand_tensor(&[1, 5, 8], &mut rng);

        let mut g: Graph<f64> = Graph::new();
        let bound = bind_params(&mut g, &params, false);
        let xid = g.input(x.clone());
        let mut ctx = ForwardCtx::new(Mode::Eval, 0.0, 0);
        let y = decoder_block(&mut g, xid, &bound.blocks[0], cfg.num_heads, &mut ctx).unwrap();

        let attn = attention_oracle(
            &rows_of(&x),
            &bp.attn.wq, bp.attn.bq.data(),
            &bp.attn.wk, bp.attn.bk.data(),
            &bp.attn.wv, bp.attn.bv.data(),
            &bp.attn.wo, bp.attn.bo.data(),
            cfg.num_heads,
        );
        let want: Vec<Vec<f64>> = rows_of(&x)
            .iter()
            .zip(&attn)
            .map(|(row, a)| {
                let sum: Vec<f64> = row.iter().zip(a).map(|(r, a)| r + a).collect();
                let y1 = layer_norm_oracle(&sum, bp.ln1_gamma.data(), bp.ln1_beta.data());
                let ff = ff_oracle(&y1, &bp.ff_w1, bp.ff_b1.data(), &bp.ff_w2, bp.ff_b2.data());
                let sum2: Vec<f64> = y1.iter().zip(&ff).map(|(a, b)| a + b).collect();
                layer_norm_oracle(&sum2, bp.ln2_gamma.data(), bp.ln2_beta.data())
            })
            .collect();
        assert_rows_close(g.value(y).data(), &want, 1e-9, "decoder block");
    }
}

// ── Conv module ─────────────────────────────────────────────────────────

#[test]
fn conv_module_zero_kernels_is_identity() {
    let cfg = tiny_config(Some(ConvBlockSpec::small(8)));
    let mut params: ModelParams<f64> = ModelParams::init(&cfg).unwrap();
    for layer in params.conv_modules[0].layers.iter_mut() {
        layer.kernel = Tensor::zeros(layer.kernel.shape().to_vec());
        layer.bias = Tensor::zeros(layer.bias.shape().to_vec());
    }
    let mut rng = StreamRng::new(57);
    let x = rand_tensor(&[2, 5, 8], &mut rng);
    let mut g: Graph<f64> = Graph::new();
    let bound = bind_params(&mut g, &params, false);
    let xid = g.input(x.clone());
    let y = conv_module(&mut g, xid, &bound.conv_modules[0]).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn conv_module_matches_nested_loop_oracle() {
    let mut rng = StreamRng::new(58);
    for trial in 0..20 {
        let e = 4;
        let spec = if trial % 2 == 0 {
            ConvBlockSpec::small(e)
        } else {
            ConvBlockSpec::large(e)
        };
        let mut cfg = tiny_config(Some(spec));
        cfg.embed_dim = e;
        cfg.num_heads = 2;
        cfg.seed = 100 + trial as u64;
        let params: ModelParams<f64> = ModelParams::init(&cfg).unwrap();
        let x = rand_tensor(&[1, 10, e], &mut rng);

        let mut g: Graph<f64> = Graph::new();
        let bound = bind_params(&mut g, &params, false);
        let xid = g.input(x.clone());
        let y = conv_module(&mut g, xid, &bound.conv_modules[0]).unwrap();

        let layers: Vec<(Tensor<f64>, Vec<f64>)> = params.conv_modules[0]
            .layers
            .iter()
            .map(|l| (l.kernel.clone(), l.bias.data().to_vec()))
            .collect();
        let want = conv_module_oracle(&rows_of(&x), &layers);
        assert_rows_close(g.value(y).data(), &want, 1e-9, "conv module");
    }
}

#[test]
fn conv_module_causality() {
    let cfg = tiny_config(Some(ConvBlockSpec::small(8)));
    let params: ModelParams<f64> = ModelParams::init(&cfg).unwrap();
    let mut rng = StreamRng::new(59);
    let t = 9;
    let x = rand_tensor(&[1, t, 8], &mut rng);
    let run = |xt: &Tensor<f64>| {
        let mut g: Graph<f64> = Graph::new();
        let bound = bind_params(&mut g, &params, false);
        let xid = g.input(xt.clone());
        let y = conv_module(&mut g, xid, &bound.conv_modules[0]).unwrap();
        g.value(y).data().to_vec()
    };
    let base = run(&x);
    for t0 in 1..t {
        let mut x2 = x.clone();
        for ti in t0..t {
            for i in 0..8 {
                x2.data_mut()[ti * 8 + i] -= 1.5;
            }
        }
        let pert = run(&x2);
        for ti in 0..t0 {
            for i in 0..8 {
                assert_eq!(base[ti * 8 + i].to_bits(), pert[ti * 8 + i].to_bits());
            }
        }
    }
}

// ── Full model ──────────────────────────────────────────────────────────

fn tokens_for(cfg: &ModelConfig, b: usize, t: usize, seed: u64) -> TokenIds {
    let mut rng = StreamRng::new(seed);
    TokenIds::new(b, t, (0..b * t).map(|_| rng.below(cfg.vocab) as u32).collect()).unwrap()
}

#[test]
fn forward_shape_contract_across_head_and_embed_grids() {
    for &(heads, e) in &[(4usize, 64usize), (8, 64), (16, 64), (32, 64), (8, 16), (8, 256)] {
        let mut cfg = ModelConfig::new(2, heads, e, 27).with_conv(ConvBlockSpec::small(e));
        cfg.context = 8;
        cfg.conv_placement = ConvPlacement::AllGaps;
        cfg.seed = 9;
        let params: ModelParams<f32> = ModelParams::init(&cfg).unwrap();
        let tokens = tokens_for(&cfg, 2, 5, 77);
        let logits = logits_for(&params, &cfg, &tokens).unwrap();
        assert_eq!(logits.shape(), &[2, 5, 27]);
    }
}

#[test]
fn zero_conv_matches_conv_free_baseline_bitwise() {
    let mut cfg = tiny_config(Some(ConvBlockSpec::small(8)));
    cfg.num_layers = 3;
    let mut conv_params: ModelParams<f32> = ModelParams::init(&cfg).unwrap();
    conv_params.zero_conv();

    // Conv-free baseline sharing the transformer weights.
    let mut base_cfg = cfg.clone();
    base_cfg.conv_spec = None;
    let base_params = ModelParams {
        token_embedding: conv_params.token_embedding.clone(),
        positional_embedding: conv_params.positional_embedding.clone(),
        blocks: conv_params.blocks.clone(),
        conv_modules: vec![],
        out_weight: conv_params.out_weight.clone(),
        out_bias: conv_params.out_bias.clone(),
    };

    let tokens = tokens_for(&cfg, 2, cfg.context, 5);
    let with_conv = logits_for(&conv_params, &cfg, &tokens).unwrap();
    let without = logits_for(&base_params, &base_cfg, &tokens).unwrap();
    for (a, b) in with_conv.data().iter().zip(without.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn end_to_end_causality_with_and_without_conv() {
    for conv in [None, Some(ConvBlockSpec::small(8)), Some(ConvBlockSpec::large(8))] {
        let cfg = tiny_config(conv);
        let params: ModelParams<f32> = ModelParams::init(&cfg).unwrap();
        let t = cfg.context;
        let tokens = tokens_for(&cfg, 1, t, 31);
        let base = logits_for(&params, &cfg, &tokens).unwrap();
        for t0 in 1..t {
            let mut ids = tokens.data().to_vec();
            for (pos, id) in ids.iter_mut().enumerate().skip(t0) {
                *id = (*id + 1 + pos as u32) % cfg.vocab as u32;
            }
            let pert_tokens = TokenIds::new(1, t, ids).unwrap();
            let pert = logits_for(&params, &cfg, &pert_tokens).unwrap();
            for ti in 0..t0 {
                for v in 0..cfg.vocab {
                    let idx = ti * cfg.vocab + v;
                    assert_eq!(
                        base.data()[idx].to_bits(),
                        pert.data()[idx].to_bits(),
                        "causality violated at t0={t0}, ti={ti}"
                    );
                }
            }
        }
    }
}

#[test]
fn window_longer_than_context_is_rejected() {
    let cfg = tiny_config(None);
    let params: ModelParams<f32> = ModelParams::init(&cfg).unwrap();
    let tokens = tokens_for(&cfg, 1, cfg.context + 1, 3);
    assert!(logits_for(&params, &cfg, &tokens).is_err());
}

#[test]
fn shorter_window_matches_prefix_of_sliced_positional() {
    // A [B, T'] window with T' < context uses positional rows 0..T'.
    let cfg = tiny_config(None);
    let params: ModelParams<f32> = ModelParams::init(&cfg).unwrap();
    let full = tokens_for(&cfg, 1, cfg.context, 13);
    let t_short = 3;
    let short = TokenIds::new(1, t_short, full.data()[..t_short].to_vec()).unwrap();
    let full_logits = logits_for(&params, &cfg, &full).unwrap();
    let short_logits = logits_for(&params, &cfg, &short).unwrap();
    // Causality makes the first t_short positions identical.
    for i in 0..t_short * cfg.vocab {
        assert!((full_logits.data()[i] - short_logits.data()[i]).abs() < 1e-6);
    }
}

#[test]
fn full_model_grad_check_in_double_precision() {
    // L=2, E=8, H=2, T=6, V=11 with the small conv spec; all_gaps so the
    // single gap actually holds a conv module.
    let cfg = tiny_config(Some(ConvBlockSpec::small(8)));
    let params: ModelParams<f64> = ModelParams::init(&cfg).unwrap();
    let tokens = tokens_for(&cfg, 1, 6, 17);
    let targets = tokens_for(&cfg, 1, 6, 18);
    let (err, excluded, total) =
        common::model_grad_check_filtered(&cfg, &params, &tokens, &targets, 1e-4);
    // A few ReLU units land near zero for any seed at this scale, and a
    // kink taints every upstream parameter of that unit. The filter
    // excludes those coordinates, never silently: the budget below keeps
    // the check meaningful.
    println!("grad check: {excluded}/{total} kink coordinates excluded, max rel err {err:.3e}");
    assert!(
        excluded * 20 < total,
        "too many kink exclusions: {excluded}/{total}"
    );
    assert!(err < 1e-4, "full model grad check error {err}");
}

#[test]
fn count_parameters_baseline_audit() {
    // The baseline text configuration, with and without the small conv
    // spec; exact closed-form values documented in the README.
    let base = ModelConfig::baseline(27);
    let count = count_parameters(&base);
    assert_eq!(count.total, 1_229_339);
    let conv = ModelConfig::baseline(27).with_conv(ConvBlockSpec::small(128));
    let count_conv = count_parameters(&conv);
    // 4 modules of (3*128*128 + 128) + (7*128*128 + 128) each.
    assert_eq!(count_conv.conv_per_module, 164_096);
    assert_eq!(count_conv.num_conv_modules, 4);
    assert_eq!(count_conv.total, 1_885_723);
}
