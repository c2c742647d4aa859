//! The three parametric maps — encoder q(z|x,y), decoder p(x|y,z), and
//! classifier q(y|x) — assembled from 3D convolutional blocks, plus the label
//! embedding table.
//!
//! Layout summary (spatial shapes in [`LadderShapes`]):
//! - encoder: B1_e (kernel 7, stride 4) → residual B2_e, B3_e (stride 2 in
//!   the first convolution; skip = avgpool + 1×1 conv); the label embedding
//!   is concatenated channel-wise to the outputs of B2_e and B3_e; a linear
//!   head (a full-extent valid convolution, written as flatten + dense) emits
//!   μ ‖ logvar.
//! - classifier: consumes the activated B1_e output through residual B2_c,
//!   B3_c, then two dense layers.
//! - decoder: (z ‖ embedding) → dense → reshape; two transposed convolutions,
//!   two transposed residual blocks (skip = nearest-neighbor upsample + 1×1
//!   conv), and a final stride-1 convolution to channel logits. The embedding
//!   is concatenated to every block input, not to mid-block layers.
//!
//! SELU + dropout follow every layer except skip branches and the three
//! output layers (encoder head, classifier logits, decoder logits).

mod eval;
mod graph;

pub use eval::{
    b1_eval, classify_eval, classify_from_f1_eval, decode_logits_eval, decode_probs, encode_eval,
    encode_from_f1_eval,
};
pub use graph::{Dropout, ModelGraph};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::conv_out_shape;
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Spatial shape (d1, d2, d3) of preprocessed input volumes.
    pub input_shape: [usize; 3],
    /// Latent dimensionality L_z.
    pub latent_size: usize,
    /// Number of survival classes M_y.
    pub class_count: usize,
    /// One-hot channel count M_x.
    pub channel_count: usize,
    /// Label embedding width.
    pub embedding_size: usize,
    /// Output channels of B1_e, B2_e, B3_e.
    pub encoder_widths: [usize; 3],
    /// Channels of the dense decoder stem at the s3 grid.
    pub decoder_fc_channels: usize,
    /// Output channels of B1_d, B2_d, B3_d, B4_d.
    pub decoder_widths: [usize; 4],
    /// Output channels of B2_c, B3_c.
    pub classifier_widths: [usize; 2],
    /// Width of the classifier's penultimate dense layer.
    pub classifier_hidden: usize,
    /// Dropout probability in [0, 1).
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Configuration with every published hyperparameter verbatim and the
    /// unpublished widths chosen to land the parameter count at ≈ 2.7×10⁶.
    pub fn full_scale() -> Self {
        Self {
            input_shape: [73, 94, 64],
            latent_size: 32,
            class_count: 3,
            channel_count: 4,
            embedding_size: 16,
            encoder_widths: [16, 32, 64],
            decoder_fc_channels: 64,
            decoder_widths: [32, 16, 16, 16],
            classifier_widths: [32, 64],
            classifier_hidden: 144,
            dropout_rate: 0.2,
        }
    }

    /// Reduced geometry for end-to-end runs on a workstation.
    pub fn desk_scale() -> Self {
        Self {
            input_shape: [16, 16, 12],
            latent_size: 8,
            class_count: 3,
            channel_count: 4,
            embedding_size: 8,
            encoder_widths: [8, 12, 16],
            decoder_fc_channels: 16,
            decoder_widths: [12, 8, 8, 8],
            classifier_widths: [12, 16],
            classifier_hidden: 32,
            dropout_rate: 0.2,
        }
    }

    /// Smallest faithful geometry, for finite-difference and oracle tests.
    pub fn miniature() -> Self {
        Self {
            input_shape: [8, 8, 8],
            latent_size: 4,
            class_count: 3,
            channel_count: 4,
            embedding_size: 4,
            encoder_widths: [4, 6, 8],
            decoder_fc_channels: 8,
            decoder_widths: [8, 6, 6, 6],
            classifier_widths: [6, 8],
            classifier_hidden: 8,
            dropout_rate: 0.2,
        }
    }

    /// Check every field against its invariant.
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 12] = [
            ("input_shape[0]", self.input_shape[0]),
            ("input_shape[1]", self.input_shape[1]),
            ("input_shape[2]", self.input_shape[2]),
            ("latent_size", self.latent_size),
            ("class_count", self.class_count),
            ("channel_count", self.channel_count),
            ("embedding_size", self.embedding_size),
            ("decoder_fc_channels", self.decoder_fc_channels),
            ("classifier_hidden", self.classifier_hidden),
            ("encoder_widths[0]", self.encoder_widths[0]),
            ("encoder_widths[1]", self.encoder_widths[1]),
            ("encoder_widths[2]", self.encoder_widths[2]),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.decoder_widths.contains(&0) || self.classifier_widths.contains(&0) {
            return Err(Error::InvalidConfig("channel widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Spatial shapes along the encoder/decoder ladder.
    pub fn ladder(&self) -> LadderShapes {
        let s0 = self.input_shape;
        let s1 = conv_out_shape(s0, 7, 4, 3);
        let s2 = conv_out_shape(s1, 3, 2, 1);
        let s3 = conv_out_shape(s2, 3, 2, 1);
        let t = [s0[0].div_ceil(2), s0[1].div_ceil(2), s0[2].div_ceil(2)];
        LadderShapes { s0, s1, s2, s3, t }
    }
}

/// Spatial shapes at each stage: input s0, encoder stages s1–s3, and the
/// decoder's intermediate grid t between s1 and s0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LadderShapes {
    pub s0: [usize; 3],
    pub s1: [usize; 3],
    pub s2: [usize; 3],
    pub s3: [usize; 3],
    pub t: [usize; 3],
}

impl LadderShapes {
    /// Voxel count of a stage shape.
    pub fn volume(sp: [usize; 3]) -> usize {
        sp[0] * sp[1] * sp[2]
    }
}

/// Convolution layer parameters (weights + bias). For transposed layers the
/// weight is stored in adjoint-convolution orientation (Cin, Cout, k, k, k).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub w: T,
    pub b: T,
}

/// Dense layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Lin<T> {
    pub w: T,
    pub b: T,
}

/// Downsampling residual block: strided conv → conv, with avgpool + 1×1 skip.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
    pub skip: Conv<T>,
}

/// Upsampling residual block: transposed conv → conv, with nearest-neighbor
/// upsample + 1×1 skip.
#[derive(Debug, Clone, PartialEq)]
pub struct ResTBlock<T> {
    pub convt: Conv<T>,
    pub conv: Conv<T>,
    pub skip: Conv<T>,
}

/// The full parameter set, generic over the leaf payload so the same shape
/// describes arrays (`ModelParams`) and tape node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub embedding: T,
    pub b1_e: Conv<T>,
    pub b2_e: ResBlock<T>,
    pub b3_e: ResBlock<T>,
    pub enc_head: Lin<T>,
    pub b2_c: ResBlock<T>,
    pub b3_c: ResBlock<T>,
    pub cls_fc1: Lin<T>,
    pub cls_fc2: Lin<T>,
    pub dec_fc: Lin<T>,
    pub b1_d: Conv<T>,
    pub b2_d: Conv<T>,
    pub b3_d: ResTBlock<T>,
    pub b4_d: ResTBlock<T>,
    pub b5_d: Conv<T>,
}

/// Parameters as dense arrays.
pub type ModelParams = Params<ArrayD<f64>>;

macro_rules! visit_fields {
    ($self:ident, $out:ident, $push1:ident, $push2:ident) => {
        $push1!($out, "embedding", $self.embedding);
        $push2!($out, "b1_e", $self.b1_e);
        $push2!($out, "b2_e.conv1", $self.b2_e.conv1);
        $push2!($out, "b2_e.conv2", $self.b2_e.conv2);
        $push2!($out, "b2_e.skip", $self.b2_e.skip);
        $push2!($out, "b3_e.conv1", $self.b3_e.conv1);
        $push2!($out, "b3_e.conv2", $self.b3_e.conv2);
        $push2!($out, "b3_e.skip", $self.b3_e.skip);
        $push2!($out, "enc_head", $self.enc_head);
        $push2!($out, "b2_c.conv1", $self.b2_c.conv1);
        $push2!($out, "b2_c.conv2", $self.b2_c.conv2);
        $push2!($out, "b2_c.skip", $self.b2_c.skip);
        $push2!($out, "b3_c.conv1", $self.b3_c.conv1);
        $push2!($out, "b3_c.conv2", $self.b3_c.conv2);
        $push2!($out, "b3_c.skip", $self.b3_c.skip);
        $push2!($out, "cls_fc1", $self.cls_fc1);
        $push2!($out, "cls_fc2", $self.cls_fc2);
        $push2!($out, "dec_fc", $self.dec_fc);
        $push2!($out, "b1_d", $self.b1_d);
        $push2!($out, "b2_d", $self.b2_d);
        $push2!($out, "b3_d.convt", $self.b3_d.convt);
        $push2!($out, "b3_d.conv", $self.b3_d.conv);
        $push2!($out, "b3_d.skip", $self.b3_d.skip);
        $push2!($out, "b4_d.convt", $self.b4_d.convt);
        $push2!($out, "b4_d.conv", $self.b4_d.conv);
        $push2!($out, "b4_d.skip", $self.b4_d.skip);
        $push2!($out, "b5_d", $self.b5_d);
    };
}

impl<T> Params<T> {
    /// Leaves in canonical order as (name, value) pairs. This order defines
    /// checkpoint layout, optimizer state alignment, and gradient reduction.
    pub fn visit(&self) -> Vec<(String, &T)> {
        let mut out = Vec::with_capacity(53);
        macro_rules! push1 {
            ($o:ident, $name:expr, $l:expr) => {
                $o.push(($name.to_string(), &$l));
            };
        }
        macro_rules! push2 {
            ($o:ident, $name:expr, $l:expr) => {
                $o.push((concat_name($name, "w"), &$l.w));
                $o.push((concat_name($name, "b"), &$l.b));
            };
        }
        visit_fields!(self, out, push1, push2);
        out
    }

    /// Mutable variant of [`Params::visit`], same order.
    pub fn visit_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out: Vec<(String, &mut T)> = Vec::with_capacity(53);
        macro_rules! push1 {
            ($o:ident, $name:expr, $l:expr) => {
                $o.push(($name.to_string(), &mut $l));
            };
        }
        macro_rules! push2 {
            ($o:ident, $name:expr, $l:expr) => {
                $o.push((concat_name($name, "w"), &mut $l.w));
                $o.push((concat_name($name, "b"), &mut $l.b));
            };
        }
        visit_fields!(self, out, push1, push2);
        out
    }

    /// Map every leaf through `f`, preserving structure. `f` is applied in
    /// the canonical [`Params::visit`] order.
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Params<U> {
        let map_conv = |f: &mut dyn FnMut(&T) -> U, c: &Conv<T>| Conv { w: f(&c.w), b: f(&c.b) };
        let map_lin = |f: &mut dyn FnMut(&T) -> U, l: &Lin<T>| Lin { w: f(&l.w), b: f(&l.b) };
        Params {
            embedding: f(&self.embedding),
            b1_e: map_conv(f, &self.b1_e),
            b2_e: ResBlock {
                conv1: map_conv(f, &self.b2_e.conv1),
                conv2: map_conv(f, &self.b2_e.conv2),
                skip: map_conv(f, &self.b2_e.skip),
            },
            b3_e: ResBlock {
                conv1: map_conv(f, &self.b3_e.conv1),
                conv2: map_conv(f, &self.b3_e.conv2),
                skip: map_conv(f, &self.b3_e.skip),
            },
            enc_head: map_lin(f, &self.enc_head),
            b2_c: ResBlock {
                conv1: map_conv(f, &self.b2_c.conv1),
                conv2: map_conv(f, &self.b2_c.conv2),
                skip: map_conv(f, &self.b2_c.skip),
            },
            b3_c: ResBlock {
                conv1: map_conv(f, &self.b3_c.conv1),
                conv2: map_conv(f, &self.b3_c.conv2),
                skip: map_conv(f, &self.b3_c.skip),
            },
            cls_fc1: map_lin(f, &self.cls_fc1),
            cls_fc2: map_lin(f, &self.cls_fc2),
            dec_fc: map_lin(f, &self.dec_fc),
            b1_d: map_conv(f, &self.b1_d),
            b2_d: map_conv(f, &self.b2_d),
            b3_d: ResTBlock {
                convt: map_conv(f, &self.b3_d.convt),
                conv: map_conv(f, &self.b3_d.conv),
                skip: map_conv(f, &self.b3_d.skip),
            },
            b4_d: ResTBlock {
                convt: map_conv(f, &self.b4_d.convt),
                conv: map_conv(f, &self.b4_d.conv),
                skip: map_conv(f, &self.b4_d.skip),
            },
            b5_d: map_conv(f, &self.b5_d),
        }
    }
}

fn concat_name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

fn conv_shape(co: usize, ci: usize, k: usize) -> Vec<usize> {
    vec![co, ci, k, k, k]
}

impl ModelParams {
    /// All-zero parameters with shapes derived from `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let sh = cfg.ladder();
        let [e1, e2, e3] = cfg.encoder_widths;
        let [c1, c2] = cfg.classifier_widths;
        let [d1, d2, d3, d4] = cfg.decoder_widths;
        let mx = cfg.channel_count;
        let my = cfg.class_count;
        let emb = cfg.embedding_size;
        let lz = cfg.latent_size;
        let fc = cfg.decoder_fc_channels;
        let hid = cfg.classifier_hidden;
        let s3_vol = LadderShapes::volume(sh.s3);

        let zc = |co: usize, ci: usize, k: usize| Conv {
            w: ArrayD::zeros(IxDyn(&conv_shape(co, ci, k))),
            b: ArrayD::zeros(IxDyn(&[co])),
        };
        // Transposed layers store (Cin, Cout, k, k, k).
        let zt = |ci: usize, co: usize, k: usize| Conv {
            w: ArrayD::zeros(IxDyn(&conv_shape(ci, co, k))),
            b: ArrayD::zeros(IxDyn(&[co])),
        };
        let zl = |m: usize, n: usize| Lin {
            w: ArrayD::zeros(IxDyn(&[m, n])),
            b: ArrayD::zeros(IxDyn(&[m])),
        };
        let res = |ci: usize, co: usize| ResBlock {
            conv1: zc(co, ci, 3),
            conv2: zc(co, co, 3),
            skip: zc(co, ci, 1),
        };
        let rest = |ci: usize, co: usize| ResTBlock {
            convt: zt(ci, co, 3),
            conv: zc(co, co, 3),
            skip: zc(co, ci, 1),
        };

        Ok(Params {
            embedding: ArrayD::zeros(IxDyn(&[my, emb])),
            b1_e: zc(e1, mx, 7),
            b2_e: res(e1, e2),
            b3_e: res(e2 + emb, e3),
            enc_head: zl(2 * lz, (e3 + emb) * s3_vol),
            b2_c: res(e1, c1),
            b3_c: res(c1, c2),
            cls_fc1: zl(hid, c2 * s3_vol),
            cls_fc2: zl(my, hid),
            dec_fc: zl(fc * s3_vol, lz + emb),
            b1_d: zt(fc + emb, d1, 3),
            b2_d: zt(d1 + emb, d2, 3),
            b3_d: rest(d2 + emb, d3),
            b4_d: rest(d3 + emb, d4),
            b5_d: zc(mx, d4 + emb, 3),
        })
    }

    /// Seeded initialization: weights are zero-mean normal with scale
    /// 1/√(trailing-axes product) — the LeCun convention matching SELU — and
    /// the embedding table is standard normal. Biases start at zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(cfg)?;
        let mut rng = crate::rng::stream_rng(seed, crate::rng::STREAM_INIT);
        for (name, arr) in params.visit_mut() {
            if name.ends_with(".b") {
                continue;
            }
            let std = if name == "embedding" {
                1.0
            } else {
                let fan: usize = arr.shape()[1..].iter().product();
                1.0 / (fan as f64).sqrt()
            };
            for v in arr.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal) * std;
            }
        }
        Ok(params)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.visit().iter().map(|(_, a)| a.len()).sum()
    }

    /// True when every entry of every parameter is finite.
    pub fn all_finite(&self) -> bool {
        self.visit().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    /// Embedding row for a hard class label.
    pub fn embedding_row(&self, class_index: usize) -> Vec<f64> {
        self.embedding
            .index_axis(ndarray::Axis(0), class_index)
            .iter()
            .copied()
            .collect()
    }

    /// Convex combination of embedding rows: Σ_k weights[k] · row_k.
    pub fn embedding_mix(&self, weights: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.embedding.shape()[0], self.embedding.shape()[1]);
        assert_eq!(weights.len(), rows);
        let mut out = vec![0.0; cols];
        for (r, &wr) in weights.iter().enumerate() {
            for (c, slot) in out.iter_mut().enumerate() {
                *slot += wr * self.embedding[[r, c]];
            }
        }
        out
    }
}

/// Exact count of scalar parameters in θ ∪ φ for a configuration.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(ModelParams::zeros(cfg)?.param_count())
}
