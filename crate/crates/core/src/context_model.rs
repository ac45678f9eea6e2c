//! Per-group autoregressive entropy model over quantized symbols.
//!
//! A group's `[C_g, h, w]` symbol grid is treated as a 3D volume with the
//! channel axis as depth. Raster order is depth, then row, then column.
//! Type-A masked conv, `k` residual blocks of type-B convs, then a type-B
//! output conv producing `Q_g` logits per voxel.

use rand::Rng;

use crate::autodiff::kernels::masked_conv3d_at;
use crate::autodiff::{Graph, MaskType, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PMF_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Embedding {
    /// `s / (Q - 1) - 0.5` on a single input channel.
    #[default]
    Centered,
    /// `Q` indicator channels. Carries no gradient back to the encoder.
    OneHot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextModelConfig {
    pub filter_size: usize,
    pub hidden_channels: usize,
    pub residual_layers: usize,
    pub levels: usize,
    pub embedding: Embedding,
}

impl ContextModelConfig {
    pub fn new(levels: usize) -> Self {
        Self {
            filter_size: 3,
            hidden_channels: 64,
            residual_layers: 1,
            levels,
            embedding: Embedding::Centered,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filter_size.is_multiple_of(2) {
            return Err(Error::Config(format!("context filter size {} must be odd", self.filter_size)));
        }
        if self.hidden_channels == 0 || self.levels == 0 {
            return Err(Error::Config("context model needs positive width and levels".into()));
        }
        Ok(())
    }

    fn in_channels(&self) -> usize {
        match self.embedding {
            Embedding::Centered => 1,
            Embedding::OneHot => self.levels,
        }
    }

    /// Output layer starts at zero so the initial PMF is uniform.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<()> {
        self.validate()?;
        let (k, hc) = (self.filter_size, self.hidden_channels);
        store.init_conv(&format!("{prefix}.in"), &[hc, self.in_channels(), k, k, k], rng);
        for r in 0..self.residual_layers {
            store.init_conv(&format!("{prefix}.res{r}.a"), &[hc, hc, k, k, k], rng);
            store.init_conv(&format!("{prefix}.res{r}.b"), &[hc, hc, k, k, k], rng);
        }
        store.init_conv_zero(&format!("{prefix}.out"), &[self.levels, hc, k, k, k]);
        Ok(())
    }

    fn centered(&self, s: f64) -> f64 {
        if self.levels > 1 {
            s * (1.0 / (self.levels - 1) as f64) + -0.5
        } else {
            0.0
        }
    }
}

fn check_symbols(symbols: &[usize], shape: &[usize], q: usize) -> Result<()> {
    if shape.len() != 3 || shape.iter().product::<usize>() != symbols.len() || symbols.is_empty() {
        return Err(shape_err(
            "context_model",
            format!("{} symbols for grid {shape:?}", symbols.len()),
        ));
    }
    if let Some(p) = symbols.iter().position(|&s| s >= q) {
        return Err(Error::InvalidArgument(format!(
            "symbol {} at voxel {p} outside alphabet of {q}",
            symbols[p]
        )));
    }
    Ok(())
}

/// Network input `[in_channels, D, H, W]` for an integer symbol grid.
pub fn embed_symbols(symbols: &[usize], shape: &[usize], cfg: &ContextModelConfig) -> Result<Tensor> {
    check_symbols(symbols, shape, cfg.levels)?;
    let (n, q) = (symbols.len(), cfg.levels);
    let dims = [cfg.in_channels(), shape[0], shape[1], shape[2]];
    match cfg.embedding {
        Embedding::Centered => Tensor::new(&dims, symbols.iter().map(|&s| cfg.centered(s as f64)).collect()),
        Embedding::OneHot => {
            let mut data = vec![0.0; q * n];
            for (v, &s) in symbols.iter().enumerate() {
                data[s * n + v] = 1.0;
            }
            Tensor::new(&dims, data)
        }
    }
}

/// Centered embedding of a differentiable symbol index `[D, H, W]`.
pub fn centered_embedding_var(g: &mut Graph, index: Var, cfg: &ContextModelConfig) -> Result<Var> {
    let s = g.value(index).shape().to_vec();
    if s.len() != 3 {
        return Err(shape_err("context_model", format!("index grid {s:?}")));
    }
    let e = if cfg.levels > 1 {
        let scaled = g.mul_scalar(index, 1.0 / (cfg.levels - 1) as f64)?;
        g.add_scalar(scaled, -0.5)?
    } else {
        g.mul_scalar(index, 0.0)?
    };
    g.reshape(e, &[1, s[0], s[1], s[2]])
}

fn masked(g: &mut Graph, store: &ParamStore, name: &str, x: Var, mask: MaskType) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.masked_conv3d(x, w, b, mask)
}

/// Logits `[Q, D, H, W]` from an embedded input.
pub fn logits_var(g: &mut Graph, store: &ParamStore, prefix: &str, cfg: &ContextModelConfig, input: Var) -> Result<Var> {
    let h = masked(g, store, &format!("{prefix}.in"), input, MaskType::A)?;
    let mut h = g.relu(h)?;
    for r in 0..cfg.residual_layers {
        let t = masked(g, store, &format!("{prefix}.res{r}.a"), h, MaskType::B)?;
        let t = g.relu(t)?;
        let u = masked(g, store, &format!("{prefix}.res{r}.b"), t, MaskType::B)?;
        h = g.add(h, u)?;
    }
    masked(g, store, &format!("{prefix}.out"), h, MaskType::B)
}

/// Softmax over the symbol axis followed by `(p + 1e-9) / (1 + Q·1e-9)`.
pub fn pmf_from_logits_var(g: &mut Graph, logits: Var) -> Result<Var> {
    let q = g.value(logits).shape()[0];
    let p = g.softmax(logits, 0)?;
    let p = g.add_scalar(p, PMF_FLOOR)?;
    g.mul_scalar(p, 1.0 / (1.0 + q as f64 * PMF_FLOOR))
}

pub fn pmf_var(g: &mut Graph, store: &ParamStore, prefix: &str, cfg: &ContextModelConfig, input: Var) -> Result<Var> {
    let logits = logits_var(g, store, prefix, cfg, input)?;
    pmf_from_logits_var(g, logits)
}

/// PMF `[Q, D, H, W]` for every voxel of a symbol grid of `shape = [D, H, W]`.
pub fn predict_pmf(symbols: &[usize], shape: &[usize], cfg: &ContextModelConfig, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(embed_symbols(symbols, shape, cfg)?);
    let p = pmf_var(&mut g, store, prefix, cfg, x)?;
    Ok(g.value(p).clone())
}

/// `-Σ log2 pmf[symbol]` over the grid.
pub fn entropy_bits_var(g: &mut Graph, pmf: Var, symbols: &[usize]) -> Result<Var> {
    let picked = g.pick_axis0(pmf, symbols)?;
    let logs = g.log(picked)?;
    let total = g.sum(logs)?;
    g.mul_scalar(total, -std::f64::consts::LOG2_E)
}

pub fn entropy_loss(symbols: &[usize], pmf: &Tensor) -> Result<f64> {
    let q = pmf.shape()[0];
    let n = pmf.numel() / q;
    if symbols.len() != n {
        return Err(shape_err("entropy_loss", format!("{} symbols, PMF {:?}", symbols.len(), pmf.shape())));
    }
    let mut bits = 0.0;
    for (v, &s) in symbols.iter().enumerate() {
        if s >= q {
            return Err(Error::InvalidArgument(format!("symbol {s} outside alphabet of {q}")));
        }
        let p = pmf.data()[s * n + v];
        if !(p > 0.0) {
            return Err(Error::ZeroProbability { position: v, symbol: s });
        }
        bits -= p.log2();
    }
    Ok(bits)
}

/// PMF column of voxel `v` from a `[Q, ...]` tensor.
pub fn pmf_column(pmf: &Tensor, v: usize) -> Vec<f64> {
    let q = pmf.shape()[0];
    let n = pmf.numel() / q;
    (0..q).map(|s| pmf.data()[s * n + v]).collect()
}

struct Layer {
    w: Tensor,
    b: Tensor,
}

fn layer(store: &ParamStore, name: &str) -> Result<Layer> {
    let get = |s: &str| {
        store
            .get(&format!("{name}.{s}"))
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}.{s}")))
    };
    Ok(Layer { w: get("w")?, b: get("b")? })
}

/// Voxel-by-voxel evaluation for sequential decoding. Gives PMFs bit-identical
/// to [`predict_pmf`] while computing each voxel once per layer.
pub struct SequentialContext {
    cfg: ContextModelConfig,
    shape: [usize; 3],
    input: Tensor,
    first: Layer,
    blocks: Vec<(Layer, Layer)>,
    out: Layer,
    /// `hidden[0]` after the first layer, then per block its inner activation and output.
    hidden: Vec<Tensor>,
}

impl SequentialContext {
    pub fn new(cfg: &ContextModelConfig, store: &ParamStore, prefix: &str, shape: [usize; 3]) -> Result<Self> {
        cfg.validate()?;
        if shape.contains(&0) {
            return Err(shape_err("context_model", format!("grid {shape:?}")));
        }
        let blocks = (0..cfg.residual_layers)
            .map(|r| Ok((layer(store, &format!("{prefix}.res{r}.a"))?, layer(store, &format!("{prefix}.res{r}.b"))?)))
            .collect::<Result<Vec<_>>>()?;
        let hid = [cfg.hidden_channels, shape[0], shape[1], shape[2]];
        Ok(Self {
            input: Tensor::zeros(&[cfg.in_channels(), shape[0], shape[1], shape[2]]),
            first: layer(store, &format!("{prefix}.in"))?,
            out: layer(store, &format!("{prefix}.out"))?,
            hidden: vec![Tensor::zeros(&hid); 1 + 2 * blocks.len()],
            blocks,
            cfg: cfg.clone(),
            shape,
        })
    }

    fn voxel(&self, v: usize) -> (usize, usize, usize) {
        let [_, h, w] = self.shape;
        (v / (h * w), (v / w) % h, v % w)
    }

    /// Records the decoded symbol at raster position `v`.
    pub fn set_symbol(&mut self, v: usize, symbol: usize) -> Result<()> {
        if symbol >= self.cfg.levels {
            return Err(Error::CorruptStream(format!("symbol {symbol} outside alphabet")));
        }
        let n = self.shape.iter().product::<usize>();
        match self.cfg.embedding {
            Embedding::Centered => self.input.data_mut()[v] = self.cfg.centered(symbol as f64),
            Embedding::OneHot => self.input.data_mut()[symbol * n + v] = 1.0,
        }
        Ok(())
    }

    fn write(t: &mut Tensor, v: usize, vals: &[f64]) {
        let n = t.numel() / vals.len();
        for (c, &x) in vals.iter().enumerate() {
            t.data_mut()[c * n + v] = x;
        }
    }

    /// PMF at raster position `v`; every earlier symbol must already be set
    /// and every earlier position already queried.
    pub fn pmf_at(&mut self, v: usize) -> Result<Vec<f64>> {
        let at = self.voxel(v);
        let relu = |xs: Vec<f64>| xs.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let h = relu(masked_conv3d_at(&self.input, &self.first.w, &self.first.b, MaskType::A, at)?);
        Self::write(&mut self.hidden[0], v, &h);
        for (r, (a, b)) in self.blocks.iter().enumerate() {
            let t = relu(masked_conv3d_at(&self.hidden[2 * r], &a.w, &a.b, MaskType::B, at)?);
            Self::write(&mut self.hidden[2 * r + 1], v, &t);
            let u = masked_conv3d_at(&self.hidden[2 * r + 1], &b.w, &b.b, MaskType::B, at)?;
            let prev = pmf_column(&self.hidden[2 * r], v);
            let next: Vec<f64> = prev.iter().zip(&u).map(|(p, u)| p + u).collect();
            Self::write(&mut self.hidden[2 * r + 2], v, &next);
        }
        let last = self.hidden.last().unwrap();
        let logits = masked_conv3d_at(last, &self.out.w, &self.out.b, MaskType::B, at)?;
        let q = logits.len();
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[q, 1], logits)?);
        let p = pmf_from_logits_var(&mut g, l)?;
        Ok(g.value(p).data().to_vec())
    }
}
