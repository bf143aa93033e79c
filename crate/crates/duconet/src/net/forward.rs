//! Forward passes: the batched tape pass used by training, and the public
//! single-image operations built on the same helpers.
//!
//! Layout conventions: images travel as `[N,C,H,W]` tensors with planar
//! channels; masks as `[N,1,H,W]`; control codes as `[N,code_dim]` rows.

use crate::color::{self, Mask, RgbImage};
use crate::tensor::{ops, Tape, Tensor, Var};
use crate::{Error, Result};

use super::params::{CmStage, ConvLayer, Encoder, FcLayer, Model, ModelParams, StyleBlock};
use super::{AblationMode, ControlCodes, DucoNetConfig};

/// How a control-module stage combines its three styled feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Pixel-wise softmax weight maps from the 1x1 fusion head.
    Pix,
    /// Plain average of the three maps.
    Avg,
}

// ---------------------------------------------------------------------------
// batch assembly

pub(crate) struct BatchTensors {
    pub rgb: Tensor,
    pub mask: Tensor,
    pub lab_norm: Tensor,
}

/// Packs composites and masks into batched planar tensors, including the
/// normalized-Lab view of the composites.
pub(crate) fn batch_tensors(
    cfg: &DucoNetConfig,
    comps: &[&RgbImage],
    masks: &[&Mask],
) -> Result<BatchTensors> {
    if comps.is_empty() || comps.len() != masks.len() {
        return Err(Error::ShapeMismatch {
            op: "batch_tensors",
            detail: format!("{} images, {} masks", comps.len(), masks.len()),
        });
    }
    let s = cfg.input_size;
    let (n, hw) = (comps.len(), s * s);
    let mut rgb = Tensor::zeros(&[n, 3, s, s]);
    let mut mask = Tensor::zeros(&[n, 1, s, s]);
    let mut lab_norm = Tensor::zeros(&[n, 3, s, s]);
    for (i, (img, m)) in comps.iter().zip(masks).enumerate() {
        if img.height() != s || img.width() != s || m.height() != s || m.width() != s {
            return Err(Error::ShapeMismatch {
                op: "batch_tensors",
                detail: format!(
                    "sample {}: image {}x{}, mask {}x{}, config wants {0}x{0}; sizes must all be {}",
                    i,
                    img.height(),
                    img.width(),
                    m.height(),
                    m.width(),
                    s
                ),
            });
        }
        let base = i * 3 * hw;
        for (p, px) in img.pixels().chunks_exact(3).enumerate() {
            rgb.data_mut()[base + p] = px[0];
            rgb.data_mut()[base + hw + p] = px[1];
            rgb.data_mut()[base + 2 * hw + p] = px[2];
        }
        mask.data_mut()[i * hw..(i + 1) * hw].copy_from_slice(m.values());
        let planes = color::normalize_lab_channels(&color::rgb_to_lab(img)?);
        for (c, plane) in planes.iter().enumerate() {
            lab_norm.data_mut()[base + c * hw..base + (c + 1) * hw].copy_from_slice(plane);
        }
    }
    Ok(BatchTensors { rgb, mask, lab_norm })
}

// ---------------------------------------------------------------------------
// tape building blocks

fn conv_layer(tape: &mut Tape, x: Var, layer: &ConvLayer<Var>, padding: usize) -> Result<Var> {
    let y = tape.conv2d(x, layer.weight, 1, padding)?;
    tape.add_channel_bias(y, layer.bias)
}

/// Runs the four encoder stages and returns every stage's activation. The
/// first stage keeps resolution; each later stage first halves it with a 2x2
/// mean pool.
fn run_encoder(tape: &mut Tape, enc: &Encoder<Var>, x: Var, slope: f64) -> Result<Vec<Var>> {
    let mut feats = Vec::with_capacity(enc.stages.len());
    let mut cur = x;
    for (i, stage) in enc.stages.iter().enumerate() {
        if i > 0 {
            cur = tape.avg_pool2(cur)?;
        }
        cur = conv_layer(tape, cur, stage, 1)?;
        cur = tape.leaky_relu(cur, slope);
        feats.push(cur);
    }
    Ok(feats)
}

/// Encoder + global pool + code head: one control code per batch row.
fn encode_code(
    tape: &mut Tape,
    enc: &Encoder<Var>,
    head: &FcLayer<Var>,
    x: Var,
    slope: f64,
) -> Result<Var> {
    let feats = run_encoder(tape, enc, x, slope)?;
    let pooled = tape.avg_pool_global(*feats.last().expect("encoder has stages"))?;
    tape.fully_connected(pooled, head.weight, head.bias)
}

/// One dynamic convolution: code -> scales, modulate + demodulate the base
/// kernel per sample, convolve.
fn style_apply_var(
    tape: &mut Tape,
    blk: &StyleBlock<Var>,
    code: Var,
    x: Var,
    epsilon: f64,
    slope: f64,
) -> Result<Var> {
    let h = tape.fully_connected(code, blk.mlp_hidden.weight, blk.mlp_hidden.bias)?;
    let h = tape.leaky_relu(h, slope);
    let u = tape.fully_connected(h, blk.mlp_out.weight, blk.mlp_out.bias)?;
    let modulated = tape.kernel_modulate(blk.base, u)?;
    let kernels = tape.kernel_demodulate(modulated, epsilon)?;
    tape.conv2d_per_sample(x, kernels, 1)
}

/// 1x1 fusion head + channel softmax: three single-channel weight maps.
fn fuse_maps_var(tape: &mut Tape, styled: &[Var; 3], g: &ConvLayer<Var>) -> Result<[Var; 3]> {
    let cat = tape.concat_channels(styled)?;
    let logits = conv_layer(tape, cat, g, 0)?;
    let soft = tape.softmax_channels(logits)?;
    Ok([
        tape.slice_channels(soft, 0, 1)?,
        tape.slice_channels(soft, 1, 2)?,
        tape.slice_channels(soft, 2, 3)?,
    ])
}

/// Full control-module stage: style each branch, fuse, and blend so the
/// feature background (mask 0) passes through untouched.
fn apply_cm_var(
    tape: &mut Tape,
    stage: &CmStage<Var>,
    codes: &[Var],
    x: Var,
    mask_t: Var,
    epsilon: f64,
    slope: f64,
) -> Result<(Var, Option<[Var; 3]>)> {
    if stage.blocks.len() != codes.len() || stage.blocks.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "lab_cm_apply",
            detail: format!("{} style blocks, {} codes", stage.blocks.len(), codes.len()),
        });
    }
    let mut styled = Vec::with_capacity(stage.blocks.len());
    for (blk, &code) in stage.blocks.iter().zip(codes) {
        styled.push(style_apply_var(tape, blk, code, x, epsilon, slope)?);
    }
    let (fused, maps) = match (&styled[..], &stage.fusion) {
        ([one], None) => (*one, None),
        ([a, b, c], None) => {
            let ab = tape.add(*a, *b)?;
            let abc = tape.add(ab, *c)?;
            (tape.scale(abc, 1.0 / 3.0), None)
        }
        ([a, b, c], Some(g)) => {
            let maps = fuse_maps_var(tape, &[*a, *b, *c], g)?;
            let mut acc = tape.mul_channel_map(*a, maps[0])?;
            for (f, m) in [(*b, maps[1]), (*c, maps[2])] {
                let w = tape.mul_channel_map(f, m)?;
                acc = tape.add(acc, w)?;
            }
            (acc, Some(maps))
        }
        _ => {
            return Err(Error::ShapeMismatch {
                op: "lab_cm_apply",
                detail: format!(
                    "{} style blocks with fusion head = {}",
                    styled.len(),
                    stage.fusion.is_some()
                ),
            })
        }
    };
    let out = tape.mask_blend(fused, x, mask_t)?;
    Ok((out, maps))
}

// ---------------------------------------------------------------------------
// mask downsampling

fn area_downsample(values: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Result<Vec<f64>> {
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::ShapeMismatch {
            op: "downsample_mask",
            detail: format!("{}x{} does not divide into {}x{} blocks", h, w, th, tw),
        });
    }
    let (bh, bw) = (h / th, w / tw);
    let inv = 1.0 / (bh * bw) as f64;
    let mut out = vec![0.0; th * tw];
    for ty in 0..th {
        for tx in 0..tw {
            let mut s = 0.0;
            for dy in 0..bh {
                let row = (ty * bh + dy) * w + tx * bw;
                for dx in 0..bw {
                    s += values[row + dx];
                }
            }
            out[ty * tw + tx] = s * inv;
        }
    }
    Ok(out)
}

/// Area-average downsampling of a mask to `[1,1,target_h,target_w]`. The
/// source extent must be an integer multiple of the target extent.
pub fn downsample_mask(mask: &Mask, target_h: usize, target_w: usize) -> Result<Tensor> {
    let v = area_downsample(mask.values(), mask.height(), mask.width(), target_h, target_w)?;
    Tensor::new(&[1, 1, target_h, target_w], v)
}

fn downsample_mask_batch(mask: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (n, _, h, w) = mask.dims4("downsample_mask")?;
    let mut out = Tensor::zeros(&[n, 1, th, tw]);
    for i in 0..n {
        let v = area_downsample(&mask.data()[i * h * w..(i + 1) * h * w], h, w, th, tw)?;
        out.data_mut()[i * th * tw..(i + 1) * th * tw].copy_from_slice(&v);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// the batched forward pass

/// Where the control codes come from.
pub(crate) enum CodeSource<'a> {
    /// Computed from the model's own channel encoders.
    FromEncoders,
    /// Supplied externally and replicated across the batch.
    Given(&'a ControlCodes),
    /// Absent: control modules are skipped even if the mode has them.
    None,
}

pub(crate) struct ForwardVars {
    /// Harmonized images `[N,3,H,W]`, RGB in [0,1].
    pub output: Var,
    /// Post-control decoder features, one per stage.
    pub features: Vec<Var>,
    /// Weight maps per stage, present only under pixel fusion with codes.
    pub weight_maps: Vec<Option<[Var; 3]>>,
}

pub(crate) fn forward_batch(
    tape: &mut Tape,
    mv: &Model<Var>,
    cfg: &DucoNetConfig,
    batch: &BatchTensors,
    codes: CodeSource,
) -> Result<ForwardVars> {
    let mode = cfg.ablation_mode;
    let slope = cfg.leaky_slope;
    let n = batch.rgb.shape()[0];

    let rgb = tape.constant(batch.rgb.clone());
    let mask = tape.constant(batch.mask.clone());
    let lab_norm = tape.constant(batch.lab_norm.clone());
    let backbone_img = if mode == AblationMode::BackboneLab { lab_norm } else { rgb };

    // control codes, one [N, code_dim] row block per style branch
    let code_vars: Vec<Var> = match codes {
        CodeSource::None => Vec::new(),
        CodeSource::FromEncoders => {
            let mut vars = Vec::new();
            let single_channel = |tape: &mut Tape, c: usize| -> Result<Var> {
                let ch = tape.slice_channels(lab_norm, c, c + 1)?;
                tape.concat_channels(&[ch, mask])
            };
            match mode {
                AblationMode::WholeLabCm | AblationMode::WholeRgbCm => {
                    let img = if mode == AblationMode::WholeLabCm { lab_norm } else { rgb };
                    let x = tape.concat_channels(&[img, mask])?;
                    vars.push(encode_code(tape, &mv.lab_encoders[0], &mv.code_heads[0], x, slope)?);
                }
                AblationMode::SingleL | AblationMode::SingleA | AblationMode::SingleB => {
                    let c = match mode {
                        AblationMode::SingleL => 0,
                        AblationMode::SingleA => 1,
                        _ => 2,
                    };
                    let x = single_channel(tape, c)?;
                    vars.push(encode_code(tape, &mv.lab_encoders[0], &mv.code_heads[0], x, slope)?);
                }
                AblationMode::CmAvg | AblationMode::CmPix => {
                    for c in 0..3 {
                        let x = single_channel(tape, c)?;
                        vars.push(encode_code(
                            tape,
                            &mv.lab_encoders[c],
                            &mv.code_heads[c],
                            x,
                            slope,
                        )?);
                    }
                }
                _ => {}
            }
            vars
        }
        CodeSource::Given(cc) => {
            cc.validate(cfg.code_dim)?;
            let replicate = |tape: &mut Tape, v: &[f64]| {
                let mut t = Tensor::zeros(&[n, cfg.code_dim]);
                for i in 0..n {
                    t.data_mut()[i * cfg.code_dim..(i + 1) * cfg.code_dim].copy_from_slice(v);
                }
                tape.constant(t)
            };
            match mode {
                AblationMode::CmAvg | AblationMode::CmPix => {
                    vec![
                        replicate(tape, &cc.s_l),
                        replicate(tape, &cc.s_a),
                        replicate(tape, &cc.s_b),
                    ]
                }
                AblationMode::SingleA => vec![replicate(tape, &cc.s_a)],
                AblationMode::SingleB => vec![replicate(tape, &cc.s_b)],
                // single-code modes read the joint code from s_l
                AblationMode::SingleL | AblationMode::WholeLabCm | AblationMode::WholeRgbCm => {
                    vec![replicate(tape, &cc.s_l)]
                }
                _ => Vec::new(),
            }
        }
    };

    // multi-scale Lab features for the skip-connection ablation
    let lab_skip_feats: Vec<Vec<Var>> = if mode.has_lab_skips() {
        let mut all = Vec::with_capacity(3);
        for c in 0..3 {
            let ch = tape.slice_channels(lab_norm, c, c + 1)?;
            let x = tape.concat_channels(&[ch, mask])?;
            all.push(run_encoder(tape, &mv.lab_encoders[c], x, slope)?);
        }
        all
    } else {
        Vec::new()
    };

    let bb_in = tape.concat_channels(&[backbone_img, mask])?;
    let enc_feats = run_encoder(tape, &mv.encoder, bb_in, slope)?;

    let mut d = enc_feats[3];
    let mut features = Vec::with_capacity(3);
    let mut weight_maps = Vec::with_capacity(3);
    for t in 0..3 {
        d = tape.upsample_nearest(d, 2)?;
        d = tape.concat_channels(&[d, enc_feats[2 - t]])?;
        d = conv_layer(tape, d, &mv.decoder[t], 1)?;
        d = tape.leaky_relu(d, slope);

        if mode.has_lab_skips() {
            let cat = tape.concat_channels(&[
                d,
                lab_skip_feats[0][2 - t],
                lab_skip_feats[1][2 - t],
                lab_skip_feats[2][2 - t],
            ])?;
            d = conv_layer(tape, cat, &mv.skip_merges[t], 0)?;
        }

        if !mv.cm_stages.is_empty() && !code_vars.is_empty() {
            let sz = cfg.stage_size(t);
            let mt = downsample_mask_batch(&batch.mask, sz, sz)?;
            let mt = tape.constant(mt);
            let (styled, maps) =
                apply_cm_var(tape, &mv.cm_stages[t], &code_vars, d, mt, cfg.epsilon, slope)?;
            d = styled;
            weight_maps.push(maps);
        } else {
            weight_maps.push(None);
        }
        features.push(d);
    }

    let logits = conv_layer(tape, d, &mv.head, 0)?;
    let pred = tape.sigmoid(logits);
    let blended = tape.mask_blend(pred, backbone_img, mask)?;
    let output =
        if mode == AblationMode::BackboneLab { tape.lab_norm_to_rgb(blended)? } else { blended };
    Ok(ForwardVars { output, features, weight_maps })
}

/// Mean L1 between the model output for a batch of composites and the ground
/// truths, plus the parameter gradients in [`ModelParams::flatten`] order.
/// Parameters a sample's output does not depend on get zero gradients.
pub fn loss_and_gradients(
    cfg: &DucoNetConfig,
    params: &ModelParams,
    comps: &[&RgbImage],
    masks: &[&Mask],
    targets: &[&RgbImage],
) -> Result<(f64, Vec<Tensor>)> {
    cfg.validate()?;
    if targets.len() != comps.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_and_gradients",
            detail: format!("{} composites, {} targets", comps.len(), targets.len()),
        });
    }
    let batch = batch_tensors(cfg, comps, masks)?;
    let target = batch_tensors(cfg, targets, masks)?.rgb;
    let mut tape = Tape::new();
    let mv = params.bind(&mut tape, true);
    let fw = forward_batch(&mut tape, &mv, cfg, &batch, CodeSource::FromEncoders)?;
    let tgt = tape.constant(target);
    let loss = tape.l1_loss(fw.output, tgt)?;
    let grads = tape.backward(loss)?;
    let out = mv
        .flatten()
        .iter()
        .zip(params.flatten())
        .map(|((_, &var), (_, t))| match grads.grad(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        })
        .collect();
    Ok((tape.value(loss).item(), out))
}

fn tensor_to_rgb_image(t: &Tensor, sample: usize) -> Result<RgbImage> {
    let (_, c, h, w) = t.dims4("tensor_to_rgb_image")?;
    debug_assert_eq!(c, 3);
    let hw = h * w;
    let base = sample * 3 * hw;
    RgbImage::from_fn(h, w, |y, x| {
        let p = y * w + x;
        [t.data()[base + p], t.data()[base + hw + p], t.data()[base + 2 * hw + p]]
    })
}

// ---------------------------------------------------------------------------
// public single-image operations

/// Full forward dispatch for one composite: encoders (per the ablation mode),
/// backbone, control modules and final blending.
pub fn duconet_forward(
    composite: &RgbImage,
    mask: &Mask,
    params: &ModelParams,
    cfg: &DucoNetConfig,
) -> Result<RgbImage> {
    cfg.validate()?;
    let batch = batch_tensors(cfg, &[composite], &[mask])?;
    let mut tape = Tape::new();
    let mv = params.bind(&mut tape, false);
    let fw = forward_batch(&mut tape, &mv, cfg, &batch, CodeSource::FromEncoders)?;
    tensor_to_rgb_image(tape.value(fw.output), 0)
}

/// Like [`duconet_forward`] but also returns the pixel-fusion weight maps,
/// one `[A_L, A_a, A_b]` triple of `[1,1,s,s]` tensors per decoder stage.
/// Modes without a fusion head return an empty map list.
pub fn duconet_forward_with_maps(
    composite: &RgbImage,
    mask: &Mask,
    params: &ModelParams,
    cfg: &DucoNetConfig,
) -> Result<(RgbImage, Vec<[Tensor; 3]>)> {
    cfg.validate()?;
    let batch = batch_tensors(cfg, &[composite], &[mask])?;
    let mut tape = Tape::new();
    let mv = params.bind(&mut tape, false);
    let fw = forward_batch(&mut tape, &mv, cfg, &batch, CodeSource::FromEncoders)?;
    let image = tensor_to_rgb_image(tape.value(fw.output), 0)?;
    let maps = fw
        .weight_maps
        .iter()
        .flatten()
        .map(|m| [tape.value(m[0]).clone(), tape.value(m[1]).clone(), tape.value(m[2]).clone()])
        .collect();
    Ok((image, maps))
}

/// Backbone + control modules with externally supplied codes (`None` skips
/// the control modules entirely). Returns the harmonized image, the
/// post-control decoder features, and any pixel-fusion weight maps.
pub fn backbone_forward(
    rgb: &RgbImage,
    mask: &Mask,
    params: &ModelParams,
    codes: Option<&ControlCodes>,
    cfg: &DucoNetConfig,
) -> Result<(RgbImage, Vec<Tensor>, Vec<[Tensor; 3]>)> {
    cfg.validate()?;
    let batch = batch_tensors(cfg, &[rgb], &[mask])?;
    let mut tape = Tape::new();
    let mv = params.bind(&mut tape, false);
    let source = match codes {
        Some(c) => CodeSource::Given(c),
        None => CodeSource::None,
    };
    let fw = forward_batch(&mut tape, &mv, cfg, &batch, source)?;
    let image = tensor_to_rgb_image(tape.value(fw.output), 0)?;
    let features = fw.features.iter().map(|&v| tape.value(v).clone()).collect();
    let maps = fw
        .weight_maps
        .iter()
        .flatten()
        .map(|m| [tape.value(m[0]).clone(), tape.value(m[1]).clone(), tape.value(m[2]).clone()])
        .collect();
    Ok((image, features, maps))
}

/// Encodes one channel plane (plus the mask) into a control code.
pub fn encode_channel(
    channel_map: &Tensor,
    mask: &Mask,
    encoder: &Encoder<Tensor>,
    head: &FcLayer<Tensor>,
    cfg: &DucoNetConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let s = cfg.input_size;
    if channel_map.shape() != [s, s] || mask.height() != s || mask.width() != s {
        return Err(Error::ShapeMismatch {
            op: "encode_channel",
            detail: format!(
                "channel {:?}, mask {}x{}, config wants {}x{}",
                channel_map.shape(),
                mask.height(),
                mask.width(),
                s,
                s
            ),
        });
    }
    if channel_map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::OutOfRange {
            what: "channel_map",
            detail: "values must lie in [0,1]".into(),
        });
    }
    let mut x = Tensor::zeros(&[1, 2, s, s]);
    x.data_mut()[..s * s].copy_from_slice(channel_map.data());
    x.data_mut()[s * s..].copy_from_slice(mask.values());

    let mut tape = Tape::new();
    let enc = encoder.bind(&mut tape);
    let hd = head.bind(&mut tape);
    let xv = tape.constant(x);
    let code = encode_code(&mut tape, &enc, &hd, xv, cfg.leaky_slope)?;
    Ok(tape.value(code).data().to_vec())
}

/// Scales a base kernel `[O,I,k,k]` along its input-channel axis.
pub fn modulate_kernel(base: &Tensor, u: &[f64]) -> Result<Tensor> {
    let shape = base.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "modulate_kernel",
            detail: format!("expected [O,I,k,k], got {:?}", shape),
        });
    }
    let scales = Tensor::new(&[1, shape[1]], u.to_vec())?;
    let out = ops::kernel_modulate_forward(base, &scales)?;
    Tensor::new(&shape, out.into_data())
}

/// Rescales kernels so each output channel has near-unit energy:
/// `w / sqrt(sum w^2 + eps)` with the sum over input channels and taps.
/// Accepts `[O,I,k,k]` or batched `[N,O,I,k,k]`.
pub fn demodulate_kernel(kernels: &Tensor, epsilon: f64) -> Result<Tensor> {
    let shape = kernels.shape().to_vec();
    match shape.len() {
        4 => {
            let mut s = vec![1];
            s.extend_from_slice(&shape);
            let t = Tensor::new(&s, kernels.data().to_vec())?;
            let out = ops::kernel_demodulate_forward(&t, epsilon)?;
            Tensor::new(&shape, out.into_data())
        }
        5 => ops::kernel_demodulate_forward(kernels, epsilon),
        _ => Err(Error::ShapeMismatch {
            op: "demodulate_kernel",
            detail: format!("expected rank 4 or 5, got {:?}", shape),
        }),
    }
}

/// Applies one style block to a feature map, the same code for every sample.
pub fn style_block_apply(
    features: &Tensor,
    code: &[f64],
    params: &StyleBlock<Tensor>,
    epsilon: f64,
    slope: f64,
) -> Result<Tensor> {
    let (n, _, _, _) = features.dims4("style_block_apply")?;
    let d_s = params.mlp_hidden.weight.shape()[1];
    if code.len() != d_s {
        return Err(Error::ShapeMismatch {
            op: "style_block_apply",
            detail: format!("code length {}, expected {}", code.len(), d_s),
        });
    }
    let mut codes = Tensor::zeros(&[n, d_s]);
    for i in 0..n {
        codes.data_mut()[i * d_s..(i + 1) * d_s].copy_from_slice(code);
    }
    let mut tape = Tape::new();
    let blk = params.bind(&mut tape);
    let x = tape.constant(features.clone());
    let c = tape.constant(codes);
    let out = style_apply_var(&mut tape, &blk, c, x, epsilon, slope)?;
    Ok(tape.value(out).clone())
}

/// Fuses three styled maps into per-pixel weight maps: concat, 1x1 conv to 3
/// channels, softmax across those channels.
pub fn fuse_weight_maps(
    f_l: &Tensor,
    f_a: &Tensor,
    f_b: &Tensor,
    g: &ConvLayer<Tensor>,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let gv = g.bind(&mut tape);
    let fl = tape.constant(f_l.clone());
    let fa = tape.constant(f_a.clone());
    let fb = tape.constant(f_b.clone());
    let maps = fuse_maps_var(&mut tape, &[fl, fa, fb], &gv)?;
    Ok((
        tape.value(maps[0]).clone(),
        tape.value(maps[1]).clone(),
        tape.value(maps[2]).clone(),
    ))
}

/// One full control-module stage on a feature map: three styled branches,
/// fusion per `mode`, and feature-level background preservation under
/// `mask_t`.
pub fn lab_cm_apply(
    f_d: &Tensor,
    codes: &ControlCodes,
    stage: &CmStage<Tensor>,
    mask_t: &Tensor,
    mode: FusionMode,
    epsilon: f64,
    slope: f64,
) -> Result<Tensor> {
    let (n, _, h, w) = f_d.dims4("lab_cm_apply")?;
    let (mn, mc, mh, mw) = mask_t.dims4("lab_cm_apply")?;
    if (mn, mc, mh, mw) != (n, 1, h, w) {
        return Err(Error::ShapeMismatch {
            op: "lab_cm_apply",
            detail: format!("features {:?}, mask {:?}", f_d.shape(), mask_t.shape()),
        });
    }
    if stage.blocks.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "lab_cm_apply",
            detail: format!("stage has {} style blocks, expected 3", stage.blocks.len()),
        });
    }
    let d_s = stage.blocks[0].mlp_hidden.weight.shape()[1];
    codes.validate(d_s)?;
    if mode == FusionMode::Pix && stage.fusion.is_none() {
        return Err(Error::InvalidConfig("pixel fusion requires a fusion head".into()));
    }

    let mut tape = Tape::new();
    let mut st = stage.bind(&mut tape);
    if mode == FusionMode::Avg {
        st.fusion = None;
    }
    let replicate = |tape: &mut Tape, v: &[f64]| {
        let mut t = Tensor::zeros(&[n, d_s]);
        for i in 0..n {
            t.data_mut()[i * d_s..(i + 1) * d_s].copy_from_slice(v);
        }
        tape.constant(t)
    };
    let code_vars =
        [replicate(&mut tape, &codes.s_l), replicate(&mut tape, &codes.s_a), replicate(&mut tape, &codes.s_b)];
    let x = tape.constant(f_d.clone());
    let mt = tape.constant(mask_t.clone());
    let (out, _) = apply_cm_var(&mut tape, &st, &code_vars, x, mt, epsilon, slope)?;
    Ok(tape.value(out).clone())
}
