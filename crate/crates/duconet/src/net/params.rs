//! Model parameter containers.
//!
//! Every struct is generic over its storage so the same shape definition
//! serves concrete tensors ([`ModelParams`]) and their on-tape handles
//! (`Model<Var>`). [`Model::flatten`] fixes a single traversal order used
//! everywhere: initialization, optimizer state, checkpoints and binding.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

use super::DucoNetConfig;

/// Convolution weight `[O,I,k,k]` plus per-output bias `[O]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: T,
    pub bias: T,
}

/// Fully-connected weight `[O,I]` plus bias `[O]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcLayer<T> {
    pub weight: T,
    pub bias: T,
}

/// Four conv stages; the first keeps resolution, the rest follow a 2x2 mean
/// pool, so one encoder maps S -> S, S/2, S/4, S/8.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub stages: Vec<ConvLayer<T>>,
}

/// One dynamic convolution: a base kernel `[C,C,3,3]` and the two-layer MLP
/// that turns a control code into per-input-channel scales.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleBlock<T> {
    pub base: T,
    pub mlp_hidden: FcLayer<T>,
    pub mlp_out: FcLayer<T>,
}

/// Control module for one decoder stage: one style block per active channel
/// and, in pixel-fusion mode, a 1x1 head producing the three weight-map
/// logits.
#[derive(Clone, Debug, PartialEq)]
pub struct CmStage<T> {
    pub blocks: Vec<StyleBlock<T>>,
    pub fusion: Option<ConvLayer<T>>,
}

/// All parameters of one model. Which optional parts exist is decided by the
/// ablation mode the model was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub encoder: Encoder<T>,
    pub decoder: Vec<ConvLayer<T>>,
    pub head: ConvLayer<T>,
    pub lab_encoders: Vec<Encoder<T>>,
    pub code_heads: Vec<FcLayer<T>>,
    pub cm_stages: Vec<CmStage<T>>,
    pub skip_merges: Vec<ConvLayer<T>>,
}

pub type ModelParams = Model<Tensor>;

impl<T> Model<T> {
    /// Every tensor with a stable dotted name, in one fixed order.
    pub fn flatten(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        visit(self, &mut |name, t| out.push((name, t)));
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        visit_mut(self, &mut |name, t| out.push((name, t)));
        out
    }

    /// Rebuilds the same structure with transformed storage.
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Model<U> {
        let conv = |c: &ConvLayer<T>, f: &mut dyn FnMut(&T) -> U| ConvLayer {
            weight: f(&c.weight),
            bias: f(&c.bias),
        };
        let fc = |c: &FcLayer<T>, f: &mut dyn FnMut(&T) -> U| FcLayer {
            weight: f(&c.weight),
            bias: f(&c.bias),
        };
        Model {
            encoder: Encoder { stages: self.encoder.stages.iter().map(|s| conv(s, f)).collect() },
            decoder: self.decoder.iter().map(|s| conv(s, f)).collect(),
            head: conv(&self.head, f),
            lab_encoders: self
                .lab_encoders
                .iter()
                .map(|e| Encoder { stages: e.stages.iter().map(|s| conv(s, f)).collect() })
                .collect(),
            code_heads: self.code_heads.iter().map(|h| fc(h, f)).collect(),
            cm_stages: self
                .cm_stages
                .iter()
                .map(|st| CmStage {
                    blocks: st
                        .blocks
                        .iter()
                        .map(|b| StyleBlock {
                            base: f(&b.base),
                            mlp_hidden: fc(&b.mlp_hidden, f),
                            mlp_out: fc(&b.mlp_out, f),
                        })
                        .collect(),
                    fusion: st.fusion.as_ref().map(|g| conv(g, f)),
                })
                .collect(),
            skip_merges: self.skip_merges.iter().map(|s| conv(s, f)).collect(),
        }
    }
}

// A macro could derive both traversals from one body, but it would obscure
// more than it saves; the two are written out and `flatten_orders_agree`
// pins that they stay in lockstep.
fn visit<'a, T>(m: &'a Model<T>, f: &mut impl FnMut(String, &'a T)) {
    for (i, s) in m.encoder.stages.iter().enumerate() {
        f(format!("encoder.{}.weight", i), &s.weight);
        f(format!("encoder.{}.bias", i), &s.bias);
    }
    for (i, s) in m.decoder.iter().enumerate() {
        f(format!("decoder.{}.weight", i), &s.weight);
        f(format!("decoder.{}.bias", i), &s.bias);
    }
    f("head.weight".into(), &m.head.weight);
    f("head.bias".into(), &m.head.bias);
    for (e, enc) in m.lab_encoders.iter().enumerate() {
        for (i, s) in enc.stages.iter().enumerate() {
            f(format!("lab_encoder.{}.{}.weight", e, i), &s.weight);
            f(format!("lab_encoder.{}.{}.bias", e, i), &s.bias);
        }
    }
    for (e, h) in m.code_heads.iter().enumerate() {
        f(format!("code_head.{}.weight", e), &h.weight);
        f(format!("code_head.{}.bias", e), &h.bias);
    }
    for (t, st) in m.cm_stages.iter().enumerate() {
        for (b, blk) in st.blocks.iter().enumerate() {
            f(format!("cm.{}.{}.base", t, b), &blk.base);
            f(format!("cm.{}.{}.mlp_hidden.weight", t, b), &blk.mlp_hidden.weight);
            f(format!("cm.{}.{}.mlp_hidden.bias", t, b), &blk.mlp_hidden.bias);
            f(format!("cm.{}.{}.mlp_out.weight", t, b), &blk.mlp_out.weight);
            f(format!("cm.{}.{}.mlp_out.bias", t, b), &blk.mlp_out.bias);
        }
        if let Some(g) = &st.fusion {
            f(format!("cm.{}.fusion.weight", t), &g.weight);
            f(format!("cm.{}.fusion.bias", t), &g.bias);
        }
    }
    for (t, s) in m.skip_merges.iter().enumerate() {
        f(format!("skip_merge.{}.weight", t), &s.weight);
        f(format!("skip_merge.{}.bias", t), &s.bias);
    }
}

fn visit_mut<'a, T>(m: &'a mut Model<T>, f: &mut impl FnMut(String, &'a mut T)) {
    for (i, s) in m.encoder.stages.iter_mut().enumerate() {
        f(format!("encoder.{}.weight", i), &mut s.weight);
        f(format!("encoder.{}.bias", i), &mut s.bias);
    }
    for (i, s) in m.decoder.iter_mut().enumerate() {
        f(format!("decoder.{}.weight", i), &mut s.weight);
        f(format!("decoder.{}.bias", i), &mut s.bias);
    }
    f("head.weight".into(), &mut m.head.weight);
    f("head.bias".into(), &mut m.head.bias);
    for (e, enc) in m.lab_encoders.iter_mut().enumerate() {
        for (i, s) in enc.stages.iter_mut().enumerate() {
            f(format!("lab_encoder.{}.{}.weight", e, i), &mut s.weight);
            f(format!("lab_encoder.{}.{}.bias", e, i), &mut s.bias);
        }
    }
    for (e, h) in m.code_heads.iter_mut().enumerate() {
        f(format!("code_head.{}.weight", e), &mut h.weight);
        f(format!("code_head.{}.bias", e), &mut h.bias);
    }
    for (t, st) in m.cm_stages.iter_mut().enumerate() {
        for (b, blk) in st.blocks.iter_mut().enumerate() {
            f(format!("cm.{}.{}.base", t, b), &mut blk.base);
            f(format!("cm.{}.{}.mlp_hidden.weight", t, b), &mut blk.mlp_hidden.weight);
            f(format!("cm.{}.{}.mlp_hidden.bias", t, b), &mut blk.mlp_hidden.bias);
            f(format!("cm.{}.{}.mlp_out.weight", t, b), &mut blk.mlp_out.weight);
            f(format!("cm.{}.{}.mlp_out.bias", t, b), &mut blk.mlp_out.bias);
        }
        if let Some(g) = &mut st.fusion {
            f(format!("cm.{}.fusion.weight", t), &mut g.weight);
            f(format!("cm.{}.fusion.bias", t), &mut g.bias);
        }
    }
    for (t, s) in m.skip_merges.iter_mut().enumerate() {
        f(format!("skip_merge.{}.weight", t), &mut s.weight);
        f(format!("skip_merge.{}.bias", t), &mut s.bias);
    }
}

impl ModelParams {
    /// Clones every tensor onto a tape; `trainable` marks them as
    /// differentiable leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Model<Var> {
        self.map(&mut |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }
}

impl ConvLayer<Tensor> {
    pub(crate) fn bind(&self, tape: &mut Tape) -> ConvLayer<Var> {
        ConvLayer { weight: tape.constant(self.weight.clone()), bias: tape.constant(self.bias.clone()) }
    }
}

impl FcLayer<Tensor> {
    pub(crate) fn bind(&self, tape: &mut Tape) -> FcLayer<Var> {
        FcLayer { weight: tape.constant(self.weight.clone()), bias: tape.constant(self.bias.clone()) }
    }
}

impl Encoder<Tensor> {
    pub(crate) fn bind(&self, tape: &mut Tape) -> Encoder<Var> {
        Encoder { stages: self.stages.iter().map(|s| s.bind(tape)).collect() }
    }
}

impl StyleBlock<Tensor> {
    pub(crate) fn bind(&self, tape: &mut Tape) -> StyleBlock<Var> {
        StyleBlock {
            base: tape.constant(self.base.clone()),
            mlp_hidden: self.mlp_hidden.bind(tape),
            mlp_out: self.mlp_out.bind(tape),
        }
    }
}

impl CmStage<Tensor> {
    pub(crate) fn bind(&self, tape: &mut Tape) -> CmStage<Var> {
        CmStage {
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            fusion: self.fusion.as_ref().map(|g| g.bind(tape)),
        }
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }

    /// He-style fan-in scaled conv layer, zero bias.
    fn conv(&mut self, out_c: usize, in_c: usize, k: usize) -> ConvLayer<Tensor> {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        ConvLayer { weight: self.normal(&[out_c, in_c, k, k], std), bias: Tensor::zeros(&[out_c]) }
    }

    fn fc(&mut self, out_d: usize, in_d: usize) -> FcLayer<Tensor> {
        let std = (2.0 / in_d as f64).sqrt();
        FcLayer { weight: self.normal(&[out_d, in_d], std), bias: Tensor::zeros(&[out_d]) }
    }

    fn encoder(&mut self, in_c: usize, widths: &[usize; 4]) -> Encoder<Tensor> {
        let mut stages = Vec::with_capacity(4);
        let mut c = in_c;
        for &w in widths {
            stages.push(self.conv(w, c, 3));
            c = w;
        }
        Encoder { stages }
    }

    fn style_block(&mut self, channels: usize, code_dim: usize) -> StyleBlock<Tensor> {
        let base_std = (2.0 / (channels * 9) as f64).sqrt();
        // the last MLP layer starts with bias 1 and near-zero weights so the
        // modulation scales open at ~1 and the block begins as a plain conv
        let mlp_out = FcLayer {
            weight: self.normal(&[channels, code_dim], 0.01),
            bias: Tensor::full(&[channels], 1.0),
        };
        StyleBlock {
            base: self.normal(&[channels, channels, 3, 3], base_std),
            mlp_hidden: self.fc(code_dim, code_dim),
            mlp_out,
        }
    }
}

/// Builds freshly initialized parameters for a configuration. Identical
/// configurations (including the seed) produce bit-identical parameters.
pub fn init_params(cfg: &DucoNetConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
    let mode = cfg.ablation_mode;

    let encoder = init.encoder(4, &cfg.encoder_widths);

    // decoder stage t consumes upsample(prev) ++ skip from encoder stage 3-t
    let mut decoder = Vec::with_capacity(3);
    let mut prev = cfg.encoder_widths[3];
    for t in 0..3 {
        let skip_w = cfg.encoder_widths[2 - t];
        decoder.push(init.conv(cfg.decoder_widths[t], prev + skip_w, 3));
        prev = cfg.decoder_widths[t];
    }
    let head = init.conv(3, cfg.decoder_widths[2], 1);

    let lab_in = mode.code_encoder_in_channels();
    let n_lab_enc = if mode.has_lab_skips() { 3 } else { mode.n_code_encoders() };
    let lab_encoders =
        (0..n_lab_enc).map(|_| init.encoder(lab_in, &cfg.encoder_widths)).collect::<Vec<_>>();
    let code_heads = (0..mode.n_code_encoders())
        .map(|_| init.fc(cfg.code_dim, cfg.encoder_widths[3]))
        .collect::<Vec<_>>();

    let cm_stages = if mode.blocks_per_stage() > 0 {
        (0..3)
            .map(|t| {
                let c = cfg.style_block_widths[t];
                let blocks = (0..mode.blocks_per_stage())
                    .map(|_| init.style_block(c, cfg.code_dim))
                    .collect::<Vec<_>>();
                let fusion = mode.has_fusion_head().then(|| init.conv(3, 3 * c, 1));
                CmStage { blocks, fusion }
            })
            .collect()
    } else {
        Vec::new()
    };

    let skip_merges = if mode.has_lab_skips() {
        (0..3)
            .map(|t| {
                let d = cfg.decoder_widths[t];
                init.conv(d, d + 3 * cfg.encoder_widths[2 - t], 1)
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(Model { encoder, decoder, head, lab_encoders, code_heads, cm_stages, skip_merges })
}
