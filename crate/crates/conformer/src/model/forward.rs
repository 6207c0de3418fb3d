//! Graph construction for the conformer language model.
//!
//! The model is embedding + learned positional table, a stack of post-norm
//! decoder blocks (causal self-attention, then feed-forward, each wrapped
//! in residual + layer norm), with causal convolution modules placed in
//! the gaps between blocks, and a final linear projection to vocab logits.
//! Logits at position `t` depend only on tokens `0..=t`.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ModelParams;
use tensorcore::{mix_seed, Graph, Mode, NodeId, Scalar, Tensor, TokenIds};

/// Layer norm epsilon used everywhere in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Node handles for one attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub attn: BoundAttention,
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub ff_w1: NodeId,
    pub ff_b1: NodeId,
    pub ff_w2: NodeId,
    pub ff_b2: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConvLayer {
    pub kernel: NodeId,
    pub bias: NodeId,
}

#[derive(Debug, Clone)]
pub struct BoundConvModule {
    pub layers: Vec<BoundConvLayer>,
}

/// Node handles for every model parameter, plus the canonical flat order
/// matching [`ModelParams::named_tensors`] (used to collect gradients).
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub token_embedding: NodeId,
    pub positional_embedding: NodeId,
    pub blocks: Vec<BoundBlock>,
    pub conv_modules: Vec<BoundConvModule>,
    pub out_weight: NodeId,
    pub out_bias: NodeId,
    pub ordered: Vec<NodeId>,
}

/// Register every parameter tensor in the graph, as differentiable leaves
/// when `trainable`. Cheap: tensor buffers are shared, not copied.
pub fn bind_params<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    trainable: bool,
) -> BoundParams {
    let mut ordered = Vec::new();
    let mut insert = |g: &mut Graph<S>, t: &Tensor<S>| -> NodeId {
        let id = if trainable { g.param(t.clone()) } else { g.input(t.clone()) };
        ordered.push(id);
        id
    };
    let token_embedding = insert(g, &params.token_embedding);
    let positional_embedding = insert(g, &params.positional_embedding);
    let blocks = params
        .blocks
        .iter()
        .map(|b| BoundBlock {
            attn: BoundAttention {
                wq: insert(g, &b.attn.wq),
                bq: insert(g, &b.attn.bq),
                wk: insert(g, &b.attn.wk),
                bk: insert(g, &b.attn.bk),
                wv: insert(g, &b.attn.wv),
                bv: insert(g, &b.attn.bv),
                wo: insert(g, &b.attn.wo),
                bo: insert(g, &b.attn.bo),
            },
            ln1_gamma: insert(g, &b.ln1_gamma),
            ln1_beta: insert(g, &b.ln1_beta),
            ln2_gamma: insert(g, &b.ln2_gamma),
            ln2_beta: insert(g, &b.ln2_beta),
            ff_w1: insert(g, &b.ff_w1),
            ff_b1: insert(g, &b.ff_b1),
            ff_w2: insert(g, &b.ff_w2),
            ff_b2: insert(g, &b.ff_b2),
        })
        .collect();
    let conv_modules = params
        .conv_modules
        .iter()
        .map(|m| BoundConvModule {
            layers: m
                .layers
                .iter()
                .map(|l| BoundConvLayer {
                    kernel: insert(g, &l.kernel),
                    bias: insert(g, &l.bias),
                })
                .collect(),
        })
        .collect();
    let out_weight = insert(g, &params.out_weight);
    let out_bias = insert(g, &params.out_bias);
    BoundParams {
        token_embedding,
        positional_embedding,
        blocks,
        conv_modules,
        out_weight,
        out_bias,
        ordered,
    }
}

/// Dropout seed bookkeeping for one forward pass: every dropout site gets
/// its own stream derived from the step seed.
pub struct ForwardCtx {
    pub mode: Mode,
    pub dropout_rate: f64,
    step_seed: u64,
    site: u64,
}

impl ForwardCtx {
    pub fn new(mode: Mode, dropout_rate: f64, step_seed: u64) -> ForwardCtx {
        ForwardCtx {
            mode,
            dropout_rate,
            step_seed,
            site: 0,
        }
    }

    fn next_seed(&mut self) -> u64 {
        self.site += 1;
        mix_seed(self.step_seed, self.site)
    }
}

/// `x @ w + b`, releasing the pre-bias product (backward never reads it).
fn linear<S: Scalar>(g: &mut Graph<S>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let prod = g.matmul(x, w)?;
    let out = g.add_broadcast(prod, b)?;
    g.release_value(prod);
    Ok(out)
}

/// Multi-head causal self-attention over `x [B,T,E]`.
///
/// Per head: `softmax(Q K^T / sqrt(E/H))` with positions `j > i` masked
/// out before the softmax, then the weighted sum of `V`; heads are
/// concatenated and projected by `wo`.
pub fn multi_head_causal_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    p: &BoundAttention,
    num_heads: usize,
) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Config(format!(
            "attention expects [B,T,E] input, got {:?}",
            shape
        )));
    }
    let (b, t, e) = (shape[0], shape[1], shape[2]);
    if num_heads == 0 || e % num_heads != 0 {
        return Err(Error::Config(format!(
            "embed dim {} not divisible by heads {}",
            e, num_heads
        )));
    }
    let hd = e / num_heads;

    let q = linear(g, x, p.wq, p.bq)?;
    let k = linear(g, x, p.wk, p.bk)?;
    let v = linear(g, x, p.wv, p.bv)?;

    // [B,T,E] -> [B,H,T,hd]
    let split = |g: &mut Graph<S>, n: NodeId| -> Result<NodeId> {
        let r = g.reshape(n, vec![b, t, num_heads, hd])?;
        Ok(g.permute(r, vec![0, 2, 1, 3])?)
    };
    let qh = split(g, q)?;
    let kh = split(g, k)?;
    let vh = split(g, v)?;

    let kt = g.permute(kh, vec![0, 1, 3, 2])?; // [B,H,hd,T]
    let scores = g.matmul(qh, kt)?; // [B,H,T,T]
    let scale = S::from_f64(1.0 / (hd as f64).sqrt());
    let probs = g.causal_softmax(scores, scale)?;
    // Raw scores are only read by causal_softmax's forward; free them.
    g.release_value(scores);
    let ctx = g.matmul(probs, vh)?; // [B,H,T,hd]
    let merged = g.permute(ctx, vec![0, 2, 1, 3])?;
    let flat = g.reshape(merged, vec![b, t, e])?;
    linear(g, flat, p.wo, p.bo)
}

/// Position-wise feed-forward: `w2 @ relu(w1 @ x + b1) + b2` with dropout
/// on the hidden activation in train mode.
pub fn feed_forward<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    ctx: &mut ForwardCtx,
) -> Result<NodeId> {
    let pre = linear(g, x, w1, b1)?;
    let hidden = g.relu(pre)?;
    let seed = ctx.next_seed();
    let dropped = g.dropout(hidden, ctx.dropout_rate, ctx.mode, seed)?;
    linear(g, dropped, w2, b2)
}

/// Post-norm decoder block:
/// `y1 = LN(x + attention(x)); y = LN(y1 + feed_forward(y1))`.
pub fn decoder_block<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    p: &BoundBlock,
    num_heads: usize,
    ctx: &mut ForwardCtx,
) -> Result<NodeId> {
    let attn = multi_head_causal_attention(g, x, &p.attn, num_heads)?;
    let res1 = g.add(x, attn)?;
    let y1 = g.layer_norm(res1, p.ln1_gamma, p.ln1_beta, S::from_f64(LAYER_NORM_EPS))?;
    let ff = feed_forward(g, y1, p.ff_w1, p.ff_b1, p.ff_w2, p.ff_b2, ctx)?;
    let res2 = g.add(y1, ff)?;
    Ok(g.layer_norm(res2, p.ln2_gamma, p.ln2_beta, S::from_f64(LAYER_NORM_EPS))?)
}

/// Sandwiched conv module: a stack of `relu(causal_conv(..))` layers with
/// one skip connection adding the module input to the stack output.
pub fn conv_module<S: Scalar>(g: &mut Graph<S>, x: NodeId, p: &BoundConvModule) -> Result<NodeId> {
    let mut h = x;
    for layer in &p.layers {
        let c = g.causal_conv1d(h, layer.kernel, layer.bias)?;
        h = g.relu(c)?;
    }
    Ok(g.add(x, h)?)
}

pub struct ForwardOutput {
    pub logits: NodeId,
    pub bound: BoundParams,
}

/// Build the full model forward pass for a token window `[B, T']`
/// (`T' <= config.context`), returning vocab logits `[B, T', V]`.
///
/// With `trainable`, parameters are differentiable leaves and the window
/// must span the full context (so the positional table receives a
/// gradient for every row it contributed).
pub fn conformer_forward<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    config: &ModelConfig,
    tokens: &TokenIds,
    mode: Mode,
    trainable: bool,
    step_seed: u64,
) -> Result<ForwardOutput> {
    config.validate()?;
    let t = tokens.cols();
    if t > config.context {
        return Err(Error::Usage(format!(
            "window of {} tokens exceeds the {}-token context",
            t, config.context
        )));
    }
    if trainable && t != config.context {
        return Err(Error::Usage(format!(
            "training windows must span the full context ({} tokens), got {}",
            config.context, t
        )));
    }
    let bound = bind_params(g, params, trainable);
    let mut ctx = ForwardCtx::new(mode, config.dropout_rate, step_seed);

    let tok = g.embedding(bound.token_embedding, tokens)?;
    let pos = if t == config.context {
        bound.positional_embedding
    } else {
        let e = config.embed_dim;
        let sliced = Tensor::new(
            vec![t, e],
            params.positional_embedding.data()[..t * e].to_vec(),
        )?;
        g.input(sliced)
    };
    let mut x = g.add_broadcast(tok, pos)?;

    for (i, block) in bound.blocks.iter().enumerate() {
        x = decoder_block(g, x, block, config.num_heads, &mut ctx)?;
        if config.conv_after_block(i) {
            x = conv_module(g, x, &bound.conv_modules[i])?;
        }
    }
    let logits = linear(g, x, bound.out_weight, bound.out_bias)?;
    Ok(ForwardOutput { logits, bound })
}

/// Convenience wrapper: eval-mode logits as a plain tensor.
pub fn logits_for<S: Scalar>(
    params: &ModelParams<S>,
    config: &ModelConfig,
    tokens: &TokenIds,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let out = conformer_forward(&mut g, params, config, tokens, Mode::Eval, false, 0)?;
    Ok(g.value(out.logits).clone())
}
