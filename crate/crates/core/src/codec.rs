//! Image compression and decompression through a trained model.

use crate::arith::{decode_symbols, encode_symbols, ideal_bits};
use crate::container::{Container, GroupHeader};
use crate::context_model::{pmf_column, predict_pmf, SequentialContext};
use crate::error::{Error, Result};
use crate::metrics::bpp;
use crate::model::{ctx_prefix, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub levels: usize,
    pub channels: usize,
    pub symbols: usize,
    pub payload_bits: u64,
    /// Code length the model PMFs assign to the symbols.
    pub cross_entropy_bits: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressReport {
    pub height: usize,
    pub width: usize,
    pub groups: Vec<GroupReport>,
    /// Whole container, header included.
    pub total_bits: u64,
    pub bpp: f64,
}

impl CompressReport {
    pub fn payload_bits(&self) -> u64 {
        self.groups.iter().map(|g| g.payload_bits).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("image {}x{}\n", self.height, self.width);
        for (k, g) in self.groups.iter().enumerate() {
            s += &format!(
                "group {k}: q={} channels={} symbols={} payload_bits={} cross_entropy_bits={:.2}\n",
                g.levels, g.channels, g.symbols, g.payload_bits, g.cross_entropy_bits
            );
        }
        s += &format!("total_bits={} bpp={:.4}\n", self.total_bits, self.bpp);
        s
    }
}

pub struct Compressed {
    pub bytes: Vec<u8>,
    pub report: CompressReport,
    /// Encoder-side symbols per group, raster order.
    pub symbols: Vec<Vec<usize>>,
}

fn mu_table(model: &Model, g: usize) -> Result<Vec<f32>> {
    Ok(model.gmm(g)?.mu.iter().map(|&m| m as f32).collect())
}

pub fn compress(model: &Model, image: &Tensor) -> Result<Compressed> {
    model.check_image(image).map_err(|e| Error::Image(e.to_string()))?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h > u16::MAX as usize || w > u16::MAX as usize || model.channels() > 255 {
        return Err(Error::Image(format!("{h}x{w} image or {} channels exceed the container limits", model.channels())));
    }
    let (z, e) = model.latent(image)?;
    let perm = model.permutation(e.as_deref())?;
    let q = model.quantize(&z, &perm)?;
    let mut groups = Vec::with_capacity(model.num_groups());
    let mut reports = Vec::with_capacity(model.num_groups());
    for g in 0..model.num_groups() {
        let cfg = model.config.context(g);
        let pmf = predict_pmf(&q.symbols[g], &q.group_shapes[g], &cfg, &model.params, &ctx_prefix(g))?;
        let column = |i: usize, _: &[usize]| Ok(pmf_column(&pmf, i));
        let payload = encode_symbols(&q.symbols[g], column)?;
        reports.push(GroupReport {
            levels: cfg.levels,
            channels: q.group_shapes[g][0],
            symbols: q.symbols[g].len(),
            payload_bits: 8 * payload.len() as u64,
            cross_entropy_bits: ideal_bits(&q.symbols[g], column)?,
        });
        groups.push(GroupHeader {
            levels: cfg.levels as u8,
            channels: q.group_shapes[g][0] as u8,
            mu: mu_table(model, g)?,
            payload,
        });
    }
    let bytes = Container {
        height: h as u16,
        width: w as u16,
        permutation: perm.iter().map(|&p| p as u8).collect(),
        groups,
    }
    .to_bytes()?;
    let total_bits = 8 * bytes.len() as u64;
    Ok(Compressed {
        report: CompressReport {
            height: h,
            width: w,
            groups: reports,
            total_bits,
            bpp: bpp(total_bits, h, w),
        },
        bytes,
        symbols: q.symbols,
    })
}

pub struct Decompressed {
    pub image: Tensor,
    pub symbols: Vec<Vec<usize>>,
}

/// Checks the container header against the model before any decoding.
pub fn check_compatible(model: &Model, c: &Container) -> Result<()> {
    let sizes = model.config.group_sizes()?;
    if c.channels() != model.channels() || c.groups.len() != sizes.len() {
        return Err(Error::Incompatible(format!(
            "stream has {} channels in {} groups, model {} in {}",
            c.channels(),
            c.groups.len(),
            model.channels(),
            sizes.len()
        )));
    }
    for (g, hdr) in c.groups.iter().enumerate() {
        let levels = model.config.groups.levels()[g];
        if hdr.levels as usize != levels || hdr.channels as usize != sizes[g] {
            return Err(Error::Incompatible(format!(
                "group {g}: stream q={} C_g={}, model q={levels} C_g={}",
                hdr.levels, hdr.channels, sizes[g]
            )));
        }
        let mu = mu_table(model, g)?;
        if hdr.mu.iter().zip(&mu).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Incompatible(format!("group {g}: quantizer means differ from the checkpoint")));
        }
    }
    model.check_image(&Tensor::zeros(&[3, c.height as usize, c.width as usize]))
}

pub fn decompress(model: &Model, bytes: &[u8]) -> Result<Decompressed> {
    let c = Container::parse(bytes)?;
    check_compatible(model, &c)?;
    let [_, lh, lw] = model.config.codec.latent_shape(c.height as usize, c.width as usize)?;
    let mut symbols = Vec::with_capacity(c.groups.len());
    let mut shapes = Vec::with_capacity(c.groups.len());
    for (g, hdr) in c.groups.iter().enumerate() {
        let shape = [hdr.channels as usize, lh, lw];
        let mut ctx = SequentialContext::new(&model.config.context(g), &model.params, &ctx_prefix(g), shape)?;
        let n = shape.iter().product();
        let syms = decode_symbols(&hdr.payload, n, |i, prev| {
            if i > 0 {
                ctx.set_symbol(i - 1, prev[i - 1])?;
            }
            ctx.pmf_at(i)
        })?;
        symbols.push(syms);
        shapes.push(shape);
    }
    let perm: Vec<usize> = c.permutation.iter().map(|&p| p as usize).collect();
    let latent = model.dequantize(&symbols, &shapes, &perm)?;
    Ok(Decompressed {
        image: model.reconstruct(&latent)?,
        symbols,
    })
}
