use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use std::fmt;
use tensorcore::{Scalar, StreamRng, Tensor};

/// Projections and biases of one attention sublayer (`[E,E]` + `[E]` each).
#[derive(Debug, Clone)]
pub struct AttentionParams<S> {
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
}

/// One decoder block: attention, two layer norms, feed-forward.
#[derive(Debug, Clone)]
pub struct BlockParams<S> {
    pub attn: AttentionParams<S>,
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
    pub ff_w1: Tensor<S>,
    pub ff_b1: Tensor<S>,
    pub ff_w2: Tensor<S>,
    pub ff_b2: Tensor<S>,
}

/// One causal conv layer: kernel `[K, Cin, Cout]` and bias `[Cout]`.
#[derive(Debug, Clone)]
pub struct ConvLayerParams<S> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct ConvModuleParams<S> {
    pub layers: Vec<ConvLayerParams<S>>,
}

/// All learned weights of the model, in a fixed, named order.
#[derive(Debug, Clone)]
pub struct ModelParams<S> {
    pub token_embedding: Tensor<S>,
    pub positional_embedding: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub conv_modules: Vec<ConvModuleParams<S>>,
    pub out_weight: Tensor<S>,
    pub out_bias: Tensor<S>,
}

/// Embedding initialization: normal with this standard deviation.
const EMBED_INIT_STD: f64 = 0.02;

fn uniform_fan_in<S: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut StreamRng) -> Tensor<S> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::from_f64(rng.uniform_symmetric(bound)))
}

fn normal_embed<S: Scalar>(shape: Vec<usize>, rng: &mut StreamRng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::from_f64(rng.normal_f64() * EMBED_INIT_STD))
}

impl<S: Scalar> ModelParams<S> {
    /// Seeded initialization: fan-in-scaled uniform matrices and kernels,
    /// zero biases, normal(0.02) embeddings, identity layer norms.
    pub fn init(config: &ModelConfig) -> Result<ModelParams<S>> {
        config.validate()?;
        let e = config.embed_dim;
        let mut rng = StreamRng::derived(config.seed, 0x70);
        let attn = |rng: &mut StreamRng| AttentionParams {
            wq: uniform_fan_in(vec![e, e], e, rng),
            bq: Tensor::zeros(vec![e]),
            wk: uniform_fan_in(vec![e, e], e, rng),
            bk: Tensor::zeros(vec![e]),
            wv: uniform_fan_in(vec![e, e], e, rng),
            bv: Tensor::zeros(vec![e]),
            wo: uniform_fan_in(vec![e, e], e, rng),
            bo: Tensor::zeros(vec![e]),
        };
        let blocks = (0..config.num_layers)
            .map(|_| BlockParams {
                attn: attn(&mut rng),
                ln1_gamma: Tensor::full(vec![e], S::ONE),
                ln1_beta: Tensor::zeros(vec![e]),
                ln2_gamma: Tensor::full(vec![e], S::ONE),
                ln2_beta: Tensor::zeros(vec![e]),
                ff_w1: uniform_fan_in(vec![e, config.ff_hidden], e, &mut rng),
                ff_b1: Tensor::zeros(vec![config.ff_hidden]),
                ff_w2: uniform_fan_in(vec![config.ff_hidden, e], config.ff_hidden, &mut rng),
                ff_b2: Tensor::zeros(vec![e]),
            })
            .collect();
        let conv_modules = (0..config.conv_module_count())
            .map(|_| {
                let spec = config.conv_spec.as_ref().unwrap();
                let mut cin = e;
                let layers = spec
                    .layers
                    .iter()
                    .map(|l| {
                        let p = ConvLayerParams {
                            kernel: uniform_fan_in(
                                vec![l.kernel_width, cin, l.filter_count],
                                l.kernel_width * cin,
                                &mut rng,
                            ),
                            bias: Tensor::zeros(vec![l.filter_count]),
                        };
                        cin = l.filter_count;
                        p
                    })
                    .collect();
                ConvModuleParams { layers }
            })
            .collect();
        Ok(ModelParams {
            token_embedding: normal_embed(vec![config.vocab, e], &mut rng),
            positional_embedding: normal_embed(vec![config.context, e], &mut rng),
            blocks,
            conv_modules,
            out_weight: uniform_fan_in(vec![e, config.vocab], e, &mut rng),
            out_bias: Tensor::zeros(vec![config.vocab]),
        })
    }

    /// Tensors in their canonical (name, tensor) order. This order defines
    /// the optimizer state layout and the checkpoint record order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("positional_embedding".into(), &self.positional_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |suffix: &str| format!("block{}.{}", i, suffix);
            out.push((p("attn.wq"), &b.attn.wq));
            out.push((p("attn.bq"), &b.attn.bq));
            out.push((p("attn.wk"), &b.attn.wk));
            out.push((p("attn.bk"), &b.attn.bk));
            out.push((p("attn.wv"), &b.attn.wv));
            out.push((p("attn.bv"), &b.attn.bv));
            out.push((p("attn.wo"), &b.attn.wo));
            out.push((p("attn.bo"), &b.attn.bo));
            out.push((p("ln1.gamma"), &b.ln1_gamma));
            out.push((p("ln1.beta"), &b.ln1_beta));
            out.push((p("ln2.gamma"), &b.ln2_gamma));
            out.push((p("ln2.beta"), &b.ln2_beta));
            out.push((p("ff.w1"), &b.ff_w1));
            out.push((p("ff.b1"), &b.ff_b1));
            out.push((p("ff.w2"), &b.ff_w2));
            out.push((p("ff.b2"), &b.ff_b2));
        }
        for (m, module) in self.conv_modules.iter().enumerate() {
            for (l, layer) in module.layers.iter().enumerate() {
                out.push((format!("conv{}.layer{}.kernel", m, l), &layer.kernel));
                out.push((format!("conv{}.layer{}.bias", m, l), &layer.bias));
            }
        }
        out.push(("out.weight".into(), &self.out_weight));
        out.push(("out.bias".into(), &self.out_bias));
        out
    }

    /// Mutable access in the same canonical order as [`named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.token_embedding, &mut self.positional_embedding];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.attn.wq);
            out.push(&mut b.attn.bq);
            out.push(&mut b.attn.wk);
            out.push(&mut b.attn.bk);
            out.push(&mut b.attn.wv);
            out.push(&mut b.attn.bv);
            out.push(&mut b.attn.wo);
            out.push(&mut b.attn.bo);
            out.push(&mut b.ln1_gamma);
            out.push(&mut b.ln1_beta);
            out.push(&mut b.ln2_gamma);
            out.push(&mut b.ln2_beta);
            out.push(&mut b.ff_w1);
            out.push(&mut b.ff_b1);
            out.push(&mut b.ff_w2);
            out.push(&mut b.ff_b2);
        }
        for module in self.conv_modules.iter_mut() {
            for layer in module.layers.iter_mut() {
                out.push(&mut layer.kernel);
                out.push(&mut layer.bias);
            }
        }
        out.push(&mut self.out_weight);
        out.push(&mut self.out_bias);
        out
    }

    /// Total scalar parameter count (must equal the closed form exactly).
    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zero every conv kernel and conv bias, leaving the transformer
    /// weights untouched.
    pub fn zero_conv(&mut self) {
        for module in self.conv_modules.iter_mut() {
            for layer in module.layers.iter_mut() {
                layer.kernel = Tensor::zeros(layer.kernel.shape().to_vec());
                layer.bias = Tensor::zeros(layer.bias.shape().to_vec());
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            token_embedding: self.token_embedding.cast(),
            positional_embedding: self.positional_embedding.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    attn: AttentionParams {
                        wq: b.attn.wq.cast(),
                        bq: b.attn.bq.cast(),
                        wk: b.attn.wk.cast(),
                        bk: b.attn.bk.cast(),
                        wv: b.attn.wv.cast(),
                        bv: b.attn.bv.cast(),
                        wo: b.attn.wo.cast(),
                        bo: b.attn.bo.cast(),
                    },
                    ln1_gamma: b.ln1_gamma.cast(),
                    ln1_beta: b.ln1_beta.cast(),
                    ln2_gamma: b.ln2_gamma.cast(),
                    ln2_beta: b.ln2_beta.cast(),
                    ff_w1: b.ff_w1.cast(),
                    ff_b1: b.ff_b1.cast(),
                    ff_w2: b.ff_w2.cast(),
                    ff_b2: b.ff_b2.cast(),
                })
                .collect(),
            conv_modules: self
                .conv_modules
                .iter()
                .map(|m| ConvModuleParams {
                    layers: m
                        .layers
                        .iter()
                        .map(|l| ConvLayerParams {
                            kernel: l.kernel.cast(),
                            bias: l.bias.cast(),
                        })
                        .collect(),
                })
                .collect(),
            out_weight: self.out_weight.cast(),
            out_bias: self.out_bias.cast(),
        }
    }

    /// Replace a tensor by its checkpoint name. Shape must match.
    pub fn set_by_name(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        let names: Vec<String> = self.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        let idx = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", name)))?;
        let mut slots = self.tensors_mut();
        if slots[idx].shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                name,
                tensor.shape(),
                slots[idx].shape()
            )));
        }
        *slots[idx] = tensor;
        Ok(())
    }
}

/// Closed-form parameter count, component by component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub token_embedding: usize,
    pub positional_embedding: usize,
    pub attention_per_block: usize,
    pub layer_norms_per_block: usize,
    pub feed_forward_per_block: usize,
    pub num_blocks: usize,
    pub conv_per_module: usize,
    pub num_conv_modules: usize,
    pub output_head: usize,
    pub total: usize,
}

/// Exact scalar parameter count implied by a config:
///
/// ```text
/// total = V*E + T*E
///       + L * (4*(E*E + E) + 4*E + (E*F + F + F*E + E))
///       + M * sum_layers(K_i * Cin_i * F_i + F_i)
///       + E*V + V
/// ```
///
/// where `F` is the feed-forward hidden size, `M` the number of conv
/// modules implied by placement, and `Cin_i` chains from `E` through the
/// conv filter counts.
pub fn count_parameters(config: &ModelConfig) -> ParamCount {
    let (e, v, t, f) = (config.embed_dim, config.vocab, config.context, config.ff_hidden);
    let attention = 4 * (e * e + e);
    let norms = 4 * e;
    let ff = e * f + f + f * e + e;
    let conv_per_module = config
        .conv_spec
        .as_ref()
        .map(|spec| {
            let mut cin = e;
            let mut sum = 0;
            for l in &spec.layers {
                sum += l.kernel_width * cin * l.filter_count + l.filter_count;
                cin = l.filter_count;
            }
            sum
        })
        .unwrap_or(0);
    let num_conv_modules = config.conv_module_count();
    let head = e * v + v;
    let total = v * e
        + t * e
        + config.num_layers * (attention + norms + ff)
        + num_conv_modules * conv_per_module
        + head;
    ParamCount {
        token_embedding: v * e,
        positional_embedding: t * e,
        attention_per_block: attention,
        layer_norms_per_block: norms,
        feed_forward_per_block: ff,
        num_blocks: config.num_layers,
        conv_per_module,
        num_conv_modules,
        output_head: head,
        total,
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "token_embedding       {:>12}", self.token_embedding)?;
        writeln!(f, "positional_embedding  {:>12}", self.positional_embedding)?;
        writeln!(
            f,
            "decoder blocks        {:>12}  ({} x [attn {} + norms {} + ff {}])",
            self.num_blocks
                * (self.attention_per_block + self.layer_norms_per_block + self.feed_forward_per_block),
            self.num_blocks,
            self.attention_per_block,
            self.layer_norms_per_block,
            self.feed_forward_per_block
        )?;
        writeln!(
            f,
            "conv modules          {:>12}  ({} x {})",
            self.num_conv_modules * self.conv_per_module,
            self.num_conv_modules,
            self.conv_per_module
        )?;
        writeln!(f, "output head           {:>12}", self.output_head)?;
        write!(f, "total                 {:>12}", self.total)
    }
}
