//! Tape-free forward passes for inference and evaluation.
//!
//! These mirror [`super::graph::ModelGraph`] operation for operation (with
//! dropout off) and share its convolution kernels, so values agree exactly
//! with a tape forward. Unlike the tape they allocate nothing beyond the
//! activations, which keeps full-scale decoding affordable.

use ndarray::{concatenate, ArrayD, Axis, IxDyn};

use super::{Conv, Lin, ModelConfig, ModelParams, ResBlock, ResTBlock};
use crate::autodiff::kernels::{
    avgpool2_ceil_forward, conv3d_forward, convt3d_forward, selu, sigmoid,
    upsample_nearest_forward,
};
use crate::autodiff::{view1, view2, view4, weight_matrix};

fn conv(x: &ArrayD<f64>, p: &Conv<ArrayD<f64>>, stride: usize, pad: usize) -> ArrayD<f64> {
    let k = p.w.shape()[2];
    conv3d_forward(view4(x), weight_matrix(&p.w), Some(view1(&p.b)), k, stride, pad).into_dyn()
}

fn convt(x: &ArrayD<f64>, p: &Conv<ArrayD<f64>>, out_sp: [usize; 3]) -> ArrayD<f64> {
    let k = p.w.shape()[2];
    convt3d_forward(view4(x), weight_matrix(&p.w), Some(view1(&p.b)), k, 2, 1, out_sp).into_dyn()
}

fn dense(p: &Lin<ArrayD<f64>>, x: &ArrayD<f64>) -> ArrayD<f64> {
    (view2(&p.w).dot(&view1(x)) + view1(&p.b)).into_dyn()
}

fn selu_map(x: ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(selu)
}

fn broadcast_ch(v: &[f64], sp: [usize; 3]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[v.len(), sp[0], sp[1], sp[2]]), |ix| v[ix[0]])
}

fn cat_embedding(x: &ArrayD<f64>, emb: &[f64], sp: [usize; 3]) -> ArrayD<f64> {
    let e = broadcast_ch(emb, sp);
    concatenate(Axis(0), &[x.view(), e.view()]).expect("concat")
}

fn flatten(x: &ArrayD<f64>) -> ArrayD<f64> {
    let n = x.len();
    x.view()
        .into_shape_with_order(IxDyn(&[n]))
        .expect("contiguous flatten")
        .to_owned()
}

fn res_block(x: &ArrayD<f64>, p: &ResBlock<ArrayD<f64>>) -> ArrayD<f64> {
    let h = selu_map(conv(x, &p.conv1, 2, 1));
    let h = selu_map(conv(&h, &p.conv2, 1, 1));
    let s = avgpool2_ceil_forward(view4(x)).into_dyn();
    let s = conv(&s, &p.skip, 1, 0);
    h + s
}

fn rest_block(x: &ArrayD<f64>, p: &ResTBlock<ArrayD<f64>>, out_sp: [usize; 3]) -> ArrayD<f64> {
    let h = selu_map(convt(x, &p.convt, out_sp));
    let h = selu_map(conv(&h, &p.conv, 1, 1));
    let s = upsample_nearest_forward(view4(x), out_sp).into_dyn();
    let s = conv(&s, &p.skip, 1, 0);
    h + s
}

/// B1_e output `f1` (post-SELU), shared by encoder and classifier tails.
pub fn b1_eval(params: &ModelParams, x: &ArrayD<f64>) -> ArrayD<f64> {
    selu_map(conv(x, &params.b1_e, 4, 3))
}

/// Encoder tail from `f1`; returns (μ, logvar) of length L_z.
pub fn encode_from_f1_eval(
    cfg: &ModelConfig,
    params: &ModelParams,
    f1: &ArrayD<f64>,
    emb: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let sh = cfg.ladder();
    let h = res_block(f1, &params.b2_e);
    let h = cat_embedding(&h, emb, sh.s2);
    let h = res_block(&h, &params.b3_e);
    let h = cat_embedding(&h, emb, sh.s3);
    let head = dense(&params.enc_head, &flatten(&h));
    let head = head.as_slice().expect("head layout");
    let lz = cfg.latent_size;
    (head[..lz].to_vec(), head[lz..2 * lz].to_vec())
}

/// Full encoder pass q(z|x,y).
pub fn encode_eval(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &ArrayD<f64>,
    emb: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let f1 = b1_eval(params, x);
    encode_from_f1_eval(cfg, params, &f1, emb)
}

/// Classifier tail from `f1`; returns class logits.
pub fn classify_from_f1_eval(params: &ModelParams, f1: &ArrayD<f64>) -> Vec<f64> {
    let h = res_block(f1, &params.b2_c);
    let h = res_block(&h, &params.b3_c);
    let h = selu_map(dense(&params.cls_fc1, &flatten(&h)));
    let logits = dense(&params.cls_fc2, &h);
    logits.as_slice().expect("logit layout").to_vec()
}

/// Full classifier pass q(y|x); returns class logits.
pub fn classify_eval(params: &ModelParams, x: &ArrayD<f64>) -> Vec<f64> {
    let f1 = b1_eval(params, x);
    classify_from_f1_eval(params, &f1)
}

/// Decoder pass p(x|y,z); returns channel logits of shape (M_x, s0).
pub fn decode_logits_eval(
    cfg: &ModelConfig,
    params: &ModelParams,
    z: &[f64],
    emb: &[f64],
) -> ArrayD<f64> {
    let sh = cfg.ladder();
    assert_eq!(z.len(), cfg.latent_size);
    assert_eq!(emb.len(), cfg.embedding_size);
    let zy: Vec<f64> = z.iter().chain(emb.iter()).copied().collect();
    let zy = ArrayD::from_shape_vec(IxDyn(&[zy.len()]), zy).expect("stem input");
    let h = selu_map(dense(&params.dec_fc, &zy));
    let h = h
        .into_shape_with_order(IxDyn(&[
            cfg.decoder_fc_channels,
            sh.s3[0],
            sh.s3[1],
            sh.s3[2],
        ]))
        .expect("stem reshape");

    let h = cat_embedding(&h, emb, sh.s3);
    let h = selu_map(convt(&h, &params.b1_d, sh.s2));
    let h = cat_embedding(&h, emb, sh.s2);
    let h = selu_map(convt(&h, &params.b2_d, sh.s1));
    let h = cat_embedding(&h, emb, sh.s1);
    let h = rest_block(&h, &params.b3_d, sh.t);
    let h = cat_embedding(&h, emb, sh.t);
    let h = rest_block(&h, &params.b4_d, sh.s0);
    let h = cat_embedding(&h, emb, sh.s0);
    conv(&h, &params.b5_d, 1, 1)
}

/// Decoder output as per-channel Bernoulli probabilities σ(logits).
pub fn decode_probs(
    cfg: &ModelConfig,
    params: &ModelParams,
    z: &[f64],
    emb: &[f64],
) -> ArrayD<f64> {
    decode_logits_eval(cfg, params, z, emb).mapv(sigmoid)
}
