//! Frozen ViT-style encoder with prompt-token injection.
//!
//! Images are cut into non-overlapping patches, projected linearly and
//! offset by fixed sinusoidal position codes. A stack of pre-norm
//! transformer layers follows. At every injection layer the current prompt
//! rows (if any) are dropped and the fresh prompt matrix is prepended, so
//! the sequence entering that layer is `[P; z]`. Prompt rows carry no
//! position code. Downstream consumers only ever see the `N` patch rows.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::image::Raster;
use crate::nn::{truncated_normal, Parameters};
use crate::numcore::{Graph, Tensor, Var};
use crate::rng::{named_rng, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub injection_layers: BTreeSet<usize>,
    /// Multiplier on the `1/sqrt(fan_in)` init scale.
    pub init_gain: f64,
    pub ln_eps: f64,
    /// Fixed input normalization `(v - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
    /// Amplitude of the sinusoidal position codes.
    pub position_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// 64-pixel images, 8-pixel patches, 6 layers of width 64.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            num_layers: 6,
            num_heads: 4,
            mlp_ratio: 4.0,
            injection_layers: [0, 3].into(),
            init_gain: 1.0,
            ln_eps: 1e-6,
            pixel_mean: 0.5,
            pixel_std: 0.25,
            position_scale: 1.0,
        }
    }

    /// ViT-B/16 geometry at 224 pixels.
    pub fn full() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
            injection_layers: [0, 6].into(),
            init_gain: 1.0,
            ln_eps: 1e-6,
            pixel_mean: 0.5,
            pixel_std: 0.25,
            position_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if !(self.pixel_std > 0.0) || !self.pixel_mean.is_finite() || !(self.position_scale >= 0.0) {
            return bad(format!(
                "pixel std {} must be positive and position scale {} non-negative",
                self.pixel_std, self.position_scale
            ));
        }
        if self.num_layers == 0 || self.channels == 0 {
            return bad("layer and channel counts must be positive".into());
        }
        if self.mlp_ratio <= 0.0 || self.mlp_hidden() == 0 {
            return bad(format!("mlp ratio {} must be positive", self.mlp_ratio));
        }
        if let Some(&l) = self.injection_layers.iter().find(|&&l| l >= self.num_layers) {
            return bad(format!(
                "injection layer {l} outside [0, {})",
                self.num_layers
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Number of sequence rows entering layer `l` when `k` prompts are
    /// injected.
    pub fn rows_at_layer(&self, l: usize, k: usize) -> usize {
        let injected = k > 0 && self.injection_layers.iter().any(|&i| i <= l);
        self.num_patches() + if injected { k } else { 0 }
    }
}

/// Tokens with `prompt_count` leading prompt rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub prompt_count: usize,
}

impl TokenSequence {
    pub fn patch_tokens(&self) -> Result<Tensor> {
        let (r, d) = (self.tokens.rows(), self.tokens.cols());
        let data = self.tokens.data()[self.prompt_count * d..].to_vec();
        Tensor::new(&[r - self.prompt_count, d], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
}

impl EncoderLayer {
    fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.mlp_hidden();
        let std = |fan_in: usize| cfg.init_gain / (fan_in as f64).sqrt();
        Self {
            ln1_gain: Tensor::new(&[1, d], vec![1.0; d]).expect("shape"),
            ln1_bias: Tensor::zeros(&[1, d]),
            w_qkv: truncated_normal(rng, &[d, 3 * d], std(d)),
            b_qkv: Tensor::zeros(&[1, 3 * d]),
            w_out: truncated_normal(rng, &[d, d], std(d)),
            b_out: Tensor::zeros(&[1, d]),
            ln2_gain: Tensor::new(&[1, d], vec![1.0; d]).expect("shape"),
            ln2_bias: Tensor::zeros(&[1, d]),
            w_fc1: truncated_normal(rng, &[d, h], std(d)),
            b_fc1: Tensor::zeros(&[1, h]),
            w_fc2: truncated_normal(rng, &[h, d], std(h)),
            b_fc2: Tensor::zeros(&[1, d]),
        }
    }
}

impl Parameters for EncoderLayer {
    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_out,
            &self.b_out,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_fc1,
            &self.b_fc1,
            &self.w_fc2,
            &self.b_fc2,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_fc1,
            &mut self.b_fc1,
            &mut self.w_fc2,
            &mut self.b_fc2,
        ]
    }
}

/// The frozen encoder. None of its tensors ever requires gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub position: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

/// Fixed sinusoidal codes, `[n × d]`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[n, d], data).expect("positions shape")
}

/// Bound graph handles for one forward pass.
pub struct BackboneVars {
    layers: Vec<Vec<Var>>,
    norm: [Var; 2],
}

/// Output of a graph forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[N × D]` patch tokens after the final norm.
    pub tokens: Var,
    /// `[1 × D]` mean of the patch tokens.
    pub pooled: Var,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = named_rng(seed, "backbone");
        let (pd, d) = (cfg.patch_dim(), cfg.embed_dim);
        let patch_weight = truncated_normal(&mut rng, &[pd, d], cfg.init_gain / (pd as f64).sqrt());
        let layers = (0..cfg.num_layers)
            .map(|_| EncoderLayer::init(&cfg, &mut rng))
            .collect();
        let mut position = sinusoidal_positions(cfg.num_patches(), d);
        position.data_mut().iter_mut().for_each(|v| *v *= cfg.position_scale);
        Ok(Self {
            patch_weight,
            patch_bias: Tensor::zeros(&[1, d]),
            position,
            layers,
            norm_gain: Tensor::new(&[1, d], vec![1.0; d]).expect("shape"),
            norm_bias: Tensor::zeros(&[1, d]),
            cfg,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Rebuilds from stored tensors in [`Parameters::params`] order.
    pub fn from_tensors(cfg: BackboneConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut b = Self::new(cfg, 0)?;
        let expected = b.params().len();
        if tensors.len() != expected {
            return Err(Error::State(format!(
                "backbone section holds {} tensors, expected {expected}",
                tensors.len()
            )));
        }
        for (slot, t) in b.params_mut().into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::dim("backbone section", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        b.set_trainable(false);
        Ok(b)
    }

    /// `[N × P²c]` matrix of flattened patches in row-major grid order.
    pub fn patch_matrix(&self, image: &Raster) -> Result<Tensor> {
        let cfg = &self.cfg;
        if image.width() != cfg.image_size
            || image.height() != cfg.image_size
            || image.channels() != cfg.channels
        {
            return Err(Error::Config(format!(
                "image is {}×{}×{}, backbone expects {}×{}×{}",
                image.width(),
                image.height(),
                image.channels(),
                cfg.image_size,
                cfg.image_size,
                cfg.channels
            )));
        }
        let (g, p, c) = (cfg.grid(), cfg.patch_size, cfg.channels);
        let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            data.push((image.get(gx * p + px, gy * p + py, ch) - cfg.pixel_mean) / cfg.pixel_std);
                        }
                    }
                }
            }
        }
        Tensor::new(&[cfg.num_patches(), cfg.patch_dim()], data)
    }

    /// Linear patch projection without position codes.
    pub fn patch_embeddings(&self, image: &Raster) -> Result<Tensor> {
        let patches = self.patch_matrix(image)?;
        let mut g = Graph::new();
        let (x, w, b) = (
            g.constant(&patches),
            g.constant(&self.patch_weight),
            g.constant(&self.patch_bias),
        );
        let y = g.matmul(x, w)?;
        let y = g.add_row(y, b)?;
        Ok(g.to_tensor(y))
    }

    /// `z⁽⁰⁾`: projected patches plus position codes.
    pub fn patchify(&self, image: &Raster) -> Result<TokenSequence> {
        let mut tokens = self.patch_embeddings(image)?;
        tokens
            .data_mut()
            .iter_mut()
            .zip(self.position.data())
            .for_each(|(t, p)| *t += p);
        Ok(TokenSequence {
            tokens,
            prompt_count: 0,
        })
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BackboneVars {
        BackboneVars {
            layers: self
                .layers
                .iter()
                .map(|l| l.params().into_iter().map(|t| g.constant(t)).collect())
                .collect(),
            norm: [g.constant(&self.norm_gain), g.constant(&self.norm_bias)],
        }
    }

    fn layer_forward(&self, g: &mut Graph, vars: &BackboneVars, l: usize, x: Var) -> Result<Var> {
        let p = &vars.layers[l];
        let (d, heads, hd) = (self.cfg.embed_dim, self.cfg.num_heads, self.cfg.head_dim());
        let eps = self.cfg.ln_eps;

        let h = g.layernorm(x, p[0], p[1], eps)?;
        let qkv = g.matmul(h, p[2])?;
        let qkv = g.add_row(qkv, p[3])?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let q = g.slice_cols(qkv, head * hd, (head + 1) * hd)?;
            let k = g.slice_cols(qkv, d + head * hd, d + (head + 1) * hd)?;
            let v = g.slice_cols(qkv, 2 * d + head * hd, 2 * d + (head + 1) * hd)?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, v)?);
        }
        let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let o = g.matmul(o, p[4])?;
        let o = g.add_row(o, p[5])?;
        let x = g.add(x, o)?;

        let h = g.layernorm(x, p[6], p[7], eps)?;
        let m = g.matmul(h, p[8])?;
        let m = g.add_row(m, p[9])?;
        let m = g.gelu(m);
        let m = g.matmul(m, p[10])?;
        let m = g.add_row(m, p[11])?;
        g.add(x, m)
    }

    /// Runs the encoder from `z⁽⁰⁾` (a `[N × D]` var) with optional
    /// `[K × D]` prompts.
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        vars: &BackboneVars,
        z0: Var,
        prompts: Option<Var>,
    ) -> Result<Encoded> {
        let d = self.cfg.embed_dim;
        let n = self.cfg.num_patches();
        if g.shape(z0) != [n, d] {
            return Err(Error::dim("backbone input", g.shape(z0), &[n, d]));
        }
        let k = match prompts {
            Some(p) => {
                let s = g.shape(p);
                if s.len() != 2 || s[1] != d {
                    return Err(Error::dim("prompt width", s, &[d]));
                }
                s[0]
            }
            None => 0,
        };
        let mut x = z0;
        let mut prompt_rows = 0;
        for l in 0..self.cfg.num_layers {
            if let (Some(p), true) = (prompts, self.cfg.injection_layers.contains(&l)) {
                let patches = if prompt_rows > 0 {
                    g.slice_rows(x, prompt_rows, prompt_rows + n)?
                } else {
                    x
                };
                x = g.concat_rows(&[p, patches])?;
                prompt_rows = k;
            }
            debug_assert_eq!(g.shape(x)[0], self.cfg.rows_at_layer(l, k));
            x = self.layer_forward(g, vars, l, x)?;
        }
        if prompt_rows > 0 {
            x = g.slice_rows(x, prompt_rows, prompt_rows + n)?;
        }
        let tokens = g.layernorm(x, vars.norm[0], vars.norm[1], self.cfg.ln_eps)?;
        let pooled = g.mean_rows(tokens)?;
        Ok(Encoded { tokens, pooled })
    }

    /// Graph forward from an image.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &BackboneVars,
        image: &Raster,
        prompts: Option<Var>,
    ) -> Result<Encoded> {
        let z0 = self.patchify(image)?;
        let z0 = g.constant(&z0.tokens);
        self.forward_tokens(g, vars, z0, prompts)
    }

    /// Inference: `(final patch tokens [N×D], pooled [1×D])`.
    pub fn forward(&self, image: &Raster, prompts: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let p = prompts.map(|p| g.constant(p));
        let out = self.forward_graph(&mut g, &vars, image, p)?;
        Ok((g.to_tensor(out.tokens), g.to_tensor(out.pooled)))
    }

    /// Applies a single encoder layer to a token sequence.
    pub fn encoder_layer(&self, seq: &TokenSequence, layer_index: usize) -> Result<TokenSequence> {
        if layer_index >= self.cfg.num_layers {
            return Err(Error::Contract(format!(
                "layer {layer_index} outside [0, {})",
                self.cfg.num_layers
            )));
        }
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let x = g.constant(&seq.tokens);
        let y = self.layer_forward(&mut g, &vars, layer_index, x)?;
        Ok(TokenSequence {
            tokens: g.to_tensor(y),
            prompt_count: seq.prompt_count,
        })
    }

    /// Concatenated byte image of every tensor, for frozen-weight checks.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.params().iter().flat_map(|t| t.to_le_bytes()).collect()
    }
}

impl Parameters for Backbone {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.patch_weight, &self.patch_bias, &self.position];
        for l in &self.layers {
            v.extend(l.params());
        }
        v.push(&self.norm_gain);
        v.push(&self.norm_bias);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.patch_weight, &mut self.patch_bias, &mut self.position];
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v.push(&mut self.norm_gain);
        v.push(&mut self.norm_bias);
        v
    }
}
