//! Differentiable forward passes: the model assembled on a [`Tape`].
//!
//! Parameters are registered as tape leaves in the canonical [`Params::visit`]
//! order, so gradients can be reduced back onto arrays by position. The B1_e
//! output `f1` is computed once per record and shared between the encoder
//! tail and the classifier; callers that need that sharing use the
//! `*_from_f1` entry points.

use ndarray::ArrayD;
use rand_chacha::ChaCha12Rng;

use super::{LadderShapes, ModelConfig, ModelParams, Params, ResBlock, ResTBlock};
use crate::autodiff::{dropout_mask, NodeId, Tape};

/// Dropout behavior for one forward construction. `On` draws one mask per
/// dropout site, in forward order, from the supplied generator.
pub enum Dropout<'r> {
    Off,
    On { rng: &'r mut ChaCha12Rng, rate: f64 },
}

impl<'r> Dropout<'r> {
    pub fn on(rng: &'r mut ChaCha12Rng, rate: f64) -> Self {
        Dropout::On { rng, rate }
    }

    fn apply(&mut self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Dropout::Off => x,
            Dropout::On { rng, rate } => {
                let shape = tape.value(x).shape().to_vec();
                let mask = dropout_mask(&mut **rng, &shape, *rate);
                tape.dropout(x, mask)
            }
        }
    }
}

/// The model's parameters registered on a tape, plus the derived shape ladder.
pub struct ModelGraph {
    cfg: ModelConfig,
    shapes: LadderShapes,
    pub ids: Params<NodeId>,
}

impl ModelGraph {
    /// Register every parameter as a leaf on `tape`.
    pub fn new(tape: &mut Tape, cfg: &ModelConfig, params: &ModelParams) -> Self {
        let ids = params.map(&mut |a: &ArrayD<f64>| tape.leaf(a.clone()));
        Self { cfg: cfg.clone(), shapes: cfg.ladder(), ids }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn shapes(&self) -> &LadderShapes {
        &self.shapes
    }

    /// Parameter leaf ids with their canonical names, in [`Params::visit`]
    /// order.
    pub fn param_ids(&self) -> Vec<(String, NodeId)> {
        self.ids.visit().into_iter().map(|(n, id)| (n, *id)).collect()
    }

    /// Embedding row for a hard label.
    pub fn embed_hard(&self, tape: &mut Tape, class_index: usize) -> NodeId {
        tape.embed_row(self.ids.embedding, class_index)
    }

    /// Convex combination of embedding rows under `weights` (a length-M_y
    /// vector node, e.g. a relaxed one-hot sample).
    pub fn embed_soft(&self, tape: &mut Tape, weights: NodeId) -> NodeId {
        tape.embed_soft(self.ids.embedding, weights)
    }

    /// B1_e: stride-4 convolution, SELU, dropout. Output `f1` at s1.
    pub fn b1(&self, tape: &mut Tape, x: NodeId, drop: &mut Dropout) -> NodeId {
        let h = tape.conv3d(x, self.ids.b1_e.w, self.ids.b1_e.b, 4, 3);
        let h = tape.selu(h);
        drop.apply(tape, h)
    }

    /// Encoder tail from a shared `f1`: residual B2_e/B3_e with the label
    /// embedding concatenated to each block output, then the linear head.
    /// Returns (μ, logvar), each of length L_z, with no output activation.
    pub fn encode_from_f1(
        &self,
        tape: &mut Tape,
        f1: NodeId,
        emb: NodeId,
        drop: &mut Dropout,
    ) -> (NodeId, NodeId) {
        let h = self.res_block(tape, f1, &self.ids.b2_e, drop);
        let h = self.cat_embedding(tape, h, emb, self.shapes.s2);
        let h = self.res_block(tape, h, &self.ids.b3_e, drop);
        let h = self.cat_embedding(tape, h, emb, self.shapes.s3);
        let flat_len = (self.cfg.encoder_widths[2] + self.cfg.embedding_size)
            * LadderShapes::volume(self.shapes.s3);
        let flat = tape.reshape(h, &[flat_len]);
        let head = tape.linear(flat, self.ids.enc_head.w, self.ids.enc_head.b);
        let lz = self.cfg.latent_size;
        let mu = tape.slice_vec(head, 0, lz);
        let logvar = tape.slice_vec(head, lz, lz);
        (mu, logvar)
    }

    /// Full encoder pass q(z|x,y) from the input volume.
    pub fn encode(
        &self,
        tape: &mut Tape,
        x: NodeId,
        emb: NodeId,
        drop: &mut Dropout,
    ) -> (NodeId, NodeId) {
        let f1 = self.b1(tape, x, drop);
        self.encode_from_f1(tape, f1, emb, drop)
    }

    /// Classifier tail from a shared `f1`: residual B2_c/B3_c, then two dense
    /// layers. Returns unnormalized class logits of length M_y.
    pub fn classify_from_f1(&self, tape: &mut Tape, f1: NodeId, drop: &mut Dropout) -> NodeId {
        let h = self.res_block(tape, f1, &self.ids.b2_c, drop);
        let h = self.res_block(tape, h, &self.ids.b3_c, drop);
        let flat_len = self.cfg.classifier_widths[1] * LadderShapes::volume(self.shapes.s3);
        let flat = tape.reshape(h, &[flat_len]);
        let h = tape.linear(flat, self.ids.cls_fc1.w, self.ids.cls_fc1.b);
        let h = tape.selu(h);
        let h = drop.apply(tape, h);
        tape.linear(h, self.ids.cls_fc2.w, self.ids.cls_fc2.b)
    }

    /// Full classifier pass q(y|x) from the input volume.
    pub fn classify(&self, tape: &mut Tape, x: NodeId, drop: &mut Dropout) -> NodeId {
        let f1 = self.b1(tape, x, drop);
        self.classify_from_f1(tape, f1, drop)
    }

    /// Decoder pass p(x|y,z): returns channel logits of shape (M_x, s0).
    /// The label embedding joins z at the stem and is re-concatenated to
    /// every block input.
    pub fn decode(&self, tape: &mut Tape, z: NodeId, emb: NodeId, drop: &mut Dropout) -> NodeId {
        let sh = &self.shapes;
        let lz = self.cfg.latent_size;
        let el = self.cfg.embedding_size;
        let z4 = tape.reshape(z, &[lz, 1, 1, 1]);
        let e4 = tape.reshape(emb, &[el, 1, 1, 1]);
        let zy = tape.concat_ch(z4, e4);
        let zy = tape.reshape(zy, &[lz + el]);
        let h = tape.linear(zy, self.ids.dec_fc.w, self.ids.dec_fc.b);
        let h = tape.selu(h);
        let h = drop.apply(tape, h);
        let fc = self.cfg.decoder_fc_channels;
        let h = tape.reshape(h, &[fc, sh.s3[0], sh.s3[1], sh.s3[2]]);

        let h = self.cat_embedding(tape, h, emb, sh.s3);
        let h = tape.convt3d(h, self.ids.b1_d.w, self.ids.b1_d.b, 2, 1, sh.s2);
        let h = tape.selu(h);
        let h = drop.apply(tape, h);

        let h = self.cat_embedding(tape, h, emb, sh.s2);
        let h = tape.convt3d(h, self.ids.b2_d.w, self.ids.b2_d.b, 2, 1, sh.s1);
        let h = tape.selu(h);
        let h = drop.apply(tape, h);

        let h = self.cat_embedding(tape, h, emb, sh.s1);
        let h = self.rest_block(tape, h, &self.ids.b3_d, sh.t, drop);

        let h = self.cat_embedding(tape, h, emb, sh.t);
        let h = self.rest_block(tape, h, &self.ids.b4_d, sh.s0, drop);

        let h = self.cat_embedding(tape, h, emb, sh.s0);
        tape.conv3d(h, self.ids.b5_d.w, self.ids.b5_d.b, 1, 1)
    }

    fn cat_embedding(
        &self,
        tape: &mut Tape,
        x: NodeId,
        emb: NodeId,
        sp: [usize; 3],
    ) -> NodeId {
        let e = tape.broadcast_ch(emb, sp);
        tape.concat_ch(x, e)
    }

    fn res_block(
        &self,
        tape: &mut Tape,
        x: NodeId,
        p: &ResBlock<NodeId>,
        drop: &mut Dropout,
    ) -> NodeId {
        let h = tape.conv3d(x, p.conv1.w, p.conv1.b, 2, 1);
        let h = tape.selu(h);
        let h = drop.apply(tape, h);
        let h = tape.conv3d(h, p.conv2.w, p.conv2.b, 1, 1);
        let h = tape.selu(h);
        let h = drop.apply(tape, h);
        let s = tape.avgpool2_ceil(x);
        let s = tape.conv3d(s, p.skip.w, p.skip.b, 1, 0);
        tape.add(h, s)
    }

    fn rest_block(
        &self,
        tape: &mut Tape,
        x: NodeId,
        p: &ResTBlock<NodeId>,
        out_sp: [usize; 3],
        drop: &mut Dropout,
    ) -> NodeId {
        let h = tape.convt3d(x, p.convt.w, p.convt.b, 2, 1, out_sp);
        let h = tape.selu(h);
        let h = drop.apply(tape, h);
        let h = tape.conv3d(h, p.conv.w, p.conv.b, 1, 1);
        let h = tape.selu(h);
        let h = drop.apply(tape, h);
        let s = tape.upsample_nearest(x, out_sp);
        let s = tape.conv3d(s, p.skip.w, p.skip.b, 1, 0);
        tape.add(h, s)
    }
}
