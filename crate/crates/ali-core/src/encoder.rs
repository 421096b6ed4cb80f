//! The relighting encoder and the base (deterministic) decoder.
//!
//! The encoder maps an image to a hierarchy of intrinsic feature maps plus a
//! global lighting code: stride-2 convolutions produce one pre-activation
//! level per depth, and the code is a linear head over the pooled deepest
//! activation. The base decoder walks back up the hierarchy, injecting the
//! lighting code channelwise at every scale, and ends in a sigmoid so
//! outputs live in `[0,1]`.

use crate::error::{AliError, Result};
use crate::nn::{Conv2d, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};
use ndarray::{Array1, Array3, Array4, ArrayD, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture of the relighting encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels per level; one stride-2 convolution per entry.
    pub channels: Vec<usize>,
    /// Dimension of the global lighting code.
    pub code_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![16, 32, 64],
            code_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn n_levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(AliError::Config(
                "encoder needs at least two levels".into(),
            ));
        }
        if self.code_dim < 1 {
            return Err(AliError::Config("code_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial size of level `i` (0-based) for an `h x w` input.
    pub fn level_size(&self, i: usize, h: usize, w: usize) -> (usize, usize) {
        (h >> (i + 1), w >> (i + 1))
    }
}

/// Hierarchical lighting-invariant features of one image: level `i` has
/// shape `[C_i, H/2^(i+1), W/2^(i+1)]`.
#[derive(Clone, Debug)]
pub struct IntrinsicStack<F: Scalar> {
    pub levels: Vec<Array3<F>>,
}

impl<F: Scalar> IntrinsicStack<F> {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(AliError::Contract("intrinsic stack needs >= 2 levels".into()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.iter().any(|v| !v.is_finite()) {
                return Err(AliError::Contract(format!(
                    "intrinsic level {i} has non-finite entries"
                )));
            }
        }
        Ok(())
    }
}

/// Global lighting embedding of one image.
#[derive(Clone, Debug)]
pub struct LightingCode<F: Scalar> {
    pub vector: Array1<F>,
}

impl<F: Scalar> LightingCode<F> {
    pub fn validate(&self) -> Result<()> {
        if self.vector.iter().any(|v| !v.is_finite()) {
            return Err(AliError::Contract("lighting code has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Convert an `[H,W,3]` f64 image into a `[3,H,W]` tensor.
pub fn hwc_to_chw<F: Scalar>(img: &Array3<f64>) -> Array3<F> {
    let (h, w, _) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    Array3::from_shape_fn((3, h, w), |(c, i, j)| F::from_f64(img[[i, j, c]]))
}

/// Convert a `[3,H,W]` tensor back to an `[H,W,3]` f64 image.
pub fn chw_to_hwc<F: Scalar>(t: &Array3<F>) -> Array3<f64> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    Array3::from_shape_fn((h, w, 3), |(i, j, c)| t[[c, i, j]].to_f64())
}

/// Stack `[H,W,3]` images into a `[N,3,H,W]` batch tensor.
pub fn batch_from_images<F: Scalar>(imgs: &[Array3<f64>]) -> ArrayD<F> {
    assert!(!imgs.is_empty());
    let (h, w) = (imgs[0].shape()[0], imgs[0].shape()[1]);
    let mut out = Array4::<F>::zeros((imgs.len(), 3, h, w));
    for (n, img) in imgs.iter().enumerate() {
        assert_eq!((img.shape()[0], img.shape()[1]), (h, w), "image sizes differ");
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    out[[n, c, i, j]] = F::from_f64(img[[i, j, c]]);
                }
            }
        }
    }
    out.into_dyn()
}

/// Extract sample `n` of a `[N,3,H,W]` batch as an `[H,W,3]` f64 image.
pub fn image_from_batch<F: Scalar>(batch: &ArrayD<F>, n: usize) -> Array3<f64> {
    let s = batch.shape();
    let (h, w) = (s[2], s[3]);
    let view = batch.index_axis(Axis(0), n);
    Array3::from_shape_fn((h, w, 3), |(i, j, c)| view[[c, i, j]].to_f64())
}

/// The relighting encoder network; parameters live under `theta.`.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub cfg: EncoderConfig,
    convs: Vec<Conv2d>,
    code_head: Linear,
}

impl EncoderNet {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(Conv2d::new(&format!("theta.enc.conv{i}"), cin, c, 3, 2, 1));
            cin = c;
        }
        let code_head = Linear::new("theta.code", *cfg.channels.last().unwrap(), cfg.code_dim);
        Ok(EncoderNet {
            cfg: cfg.clone(),
            convs,
            code_head,
        })
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        for c in &self.convs {
            c.init(store, rng);
        }
        self.code_head.init(store, rng);
    }

    /// Batched forward pass: per-level pre-activation feature maps plus the
    /// `[N, d_L]` lighting codes.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        trainable: bool,
    ) -> Result<(Vec<Var>, Var)> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(AliError::Contract(format!(
                "encoder expects [N,3,H,W], got {shape:?}"
            )));
        }
        let depth = self.cfg.n_levels();
        let div = 1usize << depth;
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(AliError::Contract(format!(
                "resolution {}x{} not divisible by 2^{depth}",
                shape[2], shape[3]
            )));
        }
        let mut levels = Vec::with_capacity(depth);
        let mut h = x;
        for conv in &self.convs {
            let s = conv.forward(g, store, h, trainable)?;
            levels.push(s);
            h = g.silu(s);
        }
        let pooled = g.global_avg_pool(h);
        let code = self.code_head.forward(g, store, pooled, trainable)?;
        Ok((levels, code))
    }
}

/// Disentangle one image into its intrinsic stack and lighting code.
pub fn encode<F: Scalar>(
    image: &Array3<f64>,
    store: &ParamStore<F>,
    cfg: &EncoderConfig,
) -> Result<(IntrinsicStack<F>, LightingCode<F>)> {
    let net = EncoderNet::new(cfg)?;
    let mut g = Graph::<F>::new();
    let x = g.input(batch_from_images::<F>(std::slice::from_ref(image)));
    let (levels, code) = net.forward(&mut g, store, x, false)?;
    let stack = IntrinsicStack {
        levels: levels
            .iter()
            .map(|&v| {
                g.value(v)
                    .index_axis(Axis(0), 0)
                    .to_owned()
                    .into_dimensionality()
                    .unwrap()
            })
            .collect(),
    };
    let code = LightingCode {
        vector: g
            .value(code)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .unwrap(),
    };
    stack.validate()?;
    code.validate()?;
    Ok((stack, code))
}

/// The base decoder; parameters live under `phi.`.
///
/// Decodes a feature hierarchy (intrinsic or fused) plus a lighting code into
/// an image at the encoder's input resolution.
#[derive(Clone, Debug)]
pub struct BaseDecoderNet {
    cfg: EncoderConfig,
    blocks: Vec<(Conv2d, Linear)>,
    out_conv: Conv2d,
}

impl BaseDecoderNet {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let depth = ch.len();
        let mut blocks = Vec::new();
        // Deepest block keeps its width; shallower blocks consume the
        // upsampled previous output concatenated with that level's features.
        for i in (0..depth).rev() {
            let cin = if i == depth - 1 { ch[i] } else { ch[i + 1] + ch[i] };
            let conv = Conv2d::new(&format!("phi.dec.block{i}.conv"), cin, ch[i], 3, 1, 1);
            let inject = Linear::new(&format!("phi.dec.block{i}.code"), cfg.code_dim, ch[i]);
            blocks.push((conv, inject));
        }
        let out_conv = Conv2d::new("phi.dec.out", ch[0], 3, 3, 1, 1);
        Ok(BaseDecoderNet {
            cfg: cfg.clone(),
            blocks,
            out_conv,
        })
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        for (conv, inject) in &self.blocks {
            conv.init(store, rng);
            inject.init(store, rng);
        }
        self.out_conv.init(store, rng);
    }

    /// `levels[i]` are `[N,C_i,h_i,w_i]` (deepest last), `code` is `[N,d_L]`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        levels: &[Var],
        code: Var,
        trainable: bool,
    ) -> Result<Var> {
        let depth = self.cfg.n_levels();
        if levels.len() != depth {
            return Err(AliError::Contract(format!(
                "decoder got {} levels, expected {depth}",
                levels.len()
            )));
        }
        let mut h: Option<Var> = None;
        for (bi, (conv, inject)) in self.blocks.iter().enumerate() {
            let i = depth - 1 - bi; // level index, deepest first
            let input = match h {
                None => levels[i],
                Some(prev) => {
                    let s = g.value(levels[i]).shape().to_vec();
                    let up = g.upsample_bilinear(prev, s[2], s[3]);
                    g.concat_channels(&[up, levels[i]])
                }
            };
            let y = conv.forward(g, store, input, trainable)?;
            let inj = inject.forward(g, store, code, trainable)?;
            let y = g.add_channel_vec(y, inj);
            h = Some(g.silu(y));
        }
        let h = h.unwrap();
        let s = g.value(h).shape().to_vec();
        let up = g.upsample_bilinear(h, s[2] * 2, s[3] * 2);
        let y = self.out_conv.forward(g, store, up, trainable)?;
        Ok(g.sigmoid(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: vec![4, 8, 16],
            code_dim: 6,
        }
    }

    fn rand_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        use rand::Rng;
        let mut rng = stream(seed, "encoder/test-img");
        Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn encode_shapes_match_contract() {
        let cfg = EncoderConfig {
            channels: vec![16, 32, 64],
            code_dim: 32,
        };
        let net = EncoderNet::new(&cfg).unwrap();
        let mut store = ParamStore::<f32>::new();
        net.init(&mut store, &mut stream(0, "enc-init"));
        let img = rand_image(1, 64, 64);
        let (stack, code) = encode(&img, &store, &cfg).unwrap();
        assert_eq!(stack.levels[0].shape(), &[16, 32, 32]);
        assert_eq!(stack.levels[1].shape(), &[32, 16, 16]);
        assert_eq!(stack.levels[2].shape(), &[64, 8, 8]);
        assert_eq!(code.vector.len(), 32);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = tiny_cfg();
        let net = EncoderNet::new(&cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        net.init(&mut store, &mut stream(3, "enc-init"));
        let img = rand_image(2, 16, 16);
        let (s1, c1) = encode(&img, &store, &cfg).unwrap();
        let (s2, c2) = encode(&img, &store, &cfg).unwrap();
        for (a, b) in s1.levels.iter().zip(s2.levels.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(c1.vector, c2.vector);
    }

    #[test]
    fn encode_rejects_indivisible_resolution() {
        let cfg = tiny_cfg();
        let net = EncoderNet::new(&cfg).unwrap();
        let mut store = ParamStore::<f32>::new();
        net.init(&mut store, &mut stream(3, "enc-init"));
        let img = rand_image(2, 20, 20); // 20 not divisible by 8
        assert!(matches!(
            encode(&img, &store, &cfg),
            Err(AliError::Contract(_))
        ));
    }

    #[test]
    fn decode_round_trips_resolution() {
        let cfg = tiny_cfg();
        let enc = EncoderNet::new(&cfg).unwrap();
        let dec = BaseDecoderNet::new(&cfg).unwrap();
        let mut store = ParamStore::<f32>::new();
        let mut rng = stream(4, "enc-dec-init");
        enc.init(&mut store, &mut rng);
        dec.init(&mut store, &mut rng);
        for hw in [16usize, 32] {
            let imgs = vec![rand_image(5, hw, hw), rand_image(6, hw, hw)];
            let mut g = Graph::<f32>::new();
            let x = g.input(batch_from_images::<f32>(&imgs));
            let (levels, code) = enc.forward(&mut g, &store, x, false).unwrap();
            let out = dec.forward(&mut g, &store, &levels, code, false).unwrap();
            assert_eq!(g.value(out).shape(), &[2, 3, hw, hw]);
            assert!(g.value(out).iter().all(|v| (0.0..=1.0).contains(&v.to_f64())));
        }
    }

    #[test]
    fn hwc_chw_roundtrip() {
        let img = rand_image(9, 8, 6);
        let chw = hwc_to_chw::<f64>(&img);
        let back = chw_to_hwc(&chw);
        assert_eq!(img, back);
    }
}
