//! Channel-attention residual encoder and its mirrored decoder.
//!
//! Encoder: head conv, four stages of (inverse pixel shuffle, `B` residual
//! channel-attention blocks, channel-changing conv), tail conv to the latent.
//! Decoder: head conv, four stages of (channel-changing conv, `B` blocks, pixel
//! shuffle), tail conv and a sigmoid.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::pixel_shuffle::{inverse_pixel_shuffle_var, pixel_shuffle_var};
use crate::tensor::Tensor;

pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub enc_channels: [usize; STAGES],
    pub dec_channels: [usize; STAGES],
    pub blocks_per_group: usize,
    pub latent_channels: usize,
    pub downsample: usize,
    pub se_reduction: usize,
    pub kernel_size: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            enc_channels: [32, 64, 128, 192],
            dec_channels: [192, 128, 64, 32],
            blocks_per_group: 6,
            latent_channels: 32,
            downsample: 2,
            se_reduction: 4,
            kernel_size: 3,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.enc_channels.iter().chain(&self.dec_channels).any(|&c| c == 0) {
            return bad("stage channel counts must be positive");
        }
        if self.blocks_per_group == 0 || self.latent_channels == 0 || self.downsample == 0 || self.se_reduction == 0 {
            return bad("blocks, latent channels, downsample factor and SE reduction must be positive");
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel size must be odd");
        }
        Ok(())
    }

    /// Total spatial reduction `d⁴`.
    pub fn spatial_factor(&self) -> usize {
        self.downsample.pow(STAGES as u32)
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> Result<[usize; 3]> {
        let f = self.spatial_factor();
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(shape_err(
                "encode",
                format!("image {height}x{width} not divisible by {f}"),
            ));
        }
        Ok([self.latent_channels, height / f, width / f])
    }

    fn enc_stage_out(&self, t: usize) -> usize {
        self.enc_channels[(t + 1).min(STAGES - 1)]
    }

    fn dec_stage_out(&self, t: usize) -> usize {
        self.dec_channels[(t + 1).min(STAGES - 1)]
    }

    fn reduced(&self, c: usize) -> usize {
        (c / self.se_reduction).max(1)
    }

    fn init_rcab<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) {
        let k = self.kernel_size;
        let r = self.reduced(c);
        store.init_conv(&format!("{prefix}.conv1"), &[c, c, k, k], rng);
        store.init_conv(&format!("{prefix}.conv2"), &[c, c, k, k], rng);
        store.init_conv(&format!("{prefix}.ca_reduce"), &[r, c, 1, 1], rng);
        store.init_conv(&format!("{prefix}.ca_expand"), &[c, r, 1, 1], rng);
    }

    /// Adds every encoder (`enc.*`) and decoder (`dec.*`) parameter to `store`.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.validate()?;
        let (k, d2) = (self.kernel_size, self.downsample * self.downsample);
        store.init_conv("enc.head", &[self.enc_channels[0], 3, k, k], rng);
        for t in 0..STAGES {
            let wide = self.enc_channels[t] * d2;
            for b in 0..self.blocks_per_group {
                self.init_rcab(store, &format!("enc.s{t}.b{b}"), wide, rng);
            }
            store.init_conv(&format!("enc.s{t}.proj"), &[self.enc_stage_out(t), wide, k, k], rng);
        }
        store.init_conv("enc.tail", &[self.latent_channels, self.enc_channels[STAGES - 1], k, k], rng);

        store.init_conv("dec.head", &[self.dec_channels[0], self.latent_channels, k, k], rng);
        for t in 0..STAGES {
            let wide = self.dec_stage_out(t) * d2;
            store.init_conv(&format!("dec.s{t}.proj"), &[wide, self.dec_channels[t], k, k], rng);
            for b in 0..self.blocks_per_group {
                self.init_rcab(store, &format!("dec.s{t}.b{b}"), wide, rng);
            }
        }
        store.init_conv("dec.tail", &[3, self.dec_channels[STAGES - 1], k, k], rng);
        Ok(())
    }
}

pub(crate) fn conv(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, padding: usize) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.conv2d(x, w, b, padding)
}

/// Squeeze-excitation gate in `(0, 1)^C` for a `[C, h, w]` map.
pub(crate) fn channel_gate(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let c = g.value(x).shape()[0];
    let pooled = g.global_avg_pool(x)?;
    let col = g.reshape(pooled, &[c, 1, 1])?;
    let squeezed = conv(g, store, &format!("{prefix}_reduce"), col, 0)?;
    let act = g.relu(squeezed)?;
    let expanded = conv(g, store, &format!("{prefix}_expand"), act, 0)?;
    let gate = g.sigmoid(expanded)?;
    g.reshape(gate, &[c])
}

/// Residual channel-attention block: `x + gate(branch) * branch`, `branch = conv(relu(conv(x)))`.
pub fn rcab_forward(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, kernel: usize) -> Result<Var> {
    let c = g.value(x).shape()[0];
    let expect = store
        .get(&format!("{prefix}.conv1.w"))
        .map(|t| t.shape()[1])
        .ok_or_else(|| Error::InvalidArgument(format!("unknown block {prefix}")))?;
    if expect != c {
        return Err(shape_err("rcab", format!("block {prefix} expects {expect} channels, got {c}")));
    }
    let pad = kernel / 2;
    let h = conv(g, store, &format!("{prefix}.conv1"), x, pad)?;
    let h = g.relu(h)?;
    let branch = conv(g, store, &format!("{prefix}.conv2"), h, pad)?;
    let gate = channel_gate(g, store, &format!("{prefix}.ca"), branch)?;
    let gated = g.scale_channels(branch, gate)?;
    g.add(x, gated)
}

/// `[3, H, W]` image to `[C, H/d⁴, W/d⁴]` latent.
pub fn encode_var(g: &mut Graph, store: &ParamStore, cfg: &CodecConfig, image: Var) -> Result<Var> {
    let s = g.value(image).shape().to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(shape_err("encode", format!("expected [3,H,W], got {s:?}")));
    }
    cfg.latent_shape(s[1], s[2])?;
    let pad = cfg.kernel_size / 2;
    let mut x = conv(g, store, "enc.head", image, pad)?;
    for t in 0..STAGES {
        x = inverse_pixel_shuffle_var(g, x, cfg.downsample)?;
        for b in 0..cfg.blocks_per_group {
            x = rcab_forward(g, store, &format!("enc.s{t}.b{b}"), x, cfg.kernel_size)?;
        }
        x = conv(g, store, &format!("enc.s{t}.proj"), x, pad)?;
    }
    conv(g, store, "enc.tail", x, pad)
}

/// `[C, h, w]` latent to `[3, h·d⁴, w·d⁴]` image in `(0, 1)`.
pub fn decode_var(g: &mut Graph, store: &ParamStore, cfg: &CodecConfig, latent: Var) -> Result<Var> {
    let s = g.value(latent).shape().to_vec();
    if s.len() != 3 || s[0] != cfg.latent_channels {
        return Err(shape_err(
            "decode",
            format!("expected [{}, h, w], got {s:?}", cfg.latent_channels),
        ));
    }
    let pad = cfg.kernel_size / 2;
    let mut x = conv(g, store, "dec.head", latent, pad)?;
    for t in 0..STAGES {
        x = conv(g, store, &format!("dec.s{t}.proj"), x, pad)?;
        for b in 0..cfg.blocks_per_group {
            x = rcab_forward(g, store, &format!("dec.s{t}.b{b}"), x, cfg.kernel_size)?;
        }
        x = pixel_shuffle_var(g, x, cfg.downsample)?;
    }
    let out = conv(g, store, "dec.tail", x, pad)?;
    g.sigmoid(out)
}

pub fn encode(image: &Tensor, cfg: &CodecConfig, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let z = encode_var(&mut g, store, cfg, x)?;
    Ok(g.value(z).clone())
}

/// Decodes and clamps to `[0, 1]`.
pub fn decode(latent: &Tensor, cfg: &CodecConfig, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let z = g.constant(latent.clone());
    let y = decode_var(&mut g, store, cfg, z)?;
    Ok(g.value(y).clamp(0.0, 1.0))
}
