//! Channel importance, grouping by importance and per-group quantization levels.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::network::channel_gate;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Parameter prefix of the squeeze-excitation importance branch.
pub const SE_PREFIX: &str = "se.gate";

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSpec {
    ratios: Vec<f64>,
    levels: Vec<usize>,
}

impl GroupSpec {
    pub fn new(ratios: Vec<f64>, levels: Vec<usize>) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(m));
        if ratios.is_empty() || ratios.len() != levels.len() {
            return bad(format!("{} ratios for {} level counts", ratios.len(), levels.len()));
        }
        if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return bad(format!("ratios must be positive, got {ratios:?}"));
        }
        let total: f64 = ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("ratios sum to {total}, expected 1"));
        }
        if levels.contains(&0) {
            return bad("quantization levels must be positive".into());
        }
        if levels.windows(2).any(|w| w[0] > w[1]) {
            return bad(format!("levels must be nondecreasing, got {levels:?}"));
        }
        Ok(Self { ratios, levels })
    }

    /// One group with `q` levels.
    pub fn single(q: usize) -> Result<Self> {
        Self::new(vec![1.0], vec![q])
    }

    pub fn num_groups(&self) -> usize {
        self.ratios.len()
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// `floor(C·r_g)`, with the leftover channels handed out one per group
    /// starting from the last group.
    pub fn group_sizes(&self, channels: usize) -> Result<Vec<usize>> {
        let g = self.num_groups();
        let mut sizes: Vec<usize> = self
            .ratios
            .iter()
            .map(|&r| (channels as f64 * r + 1e-9).floor() as usize)
            .collect();
        let assigned: usize = sizes.iter().sum();
        if assigned > channels {
            return Err(Error::Config(format!("ratios over-assign {channels} channels")));
        }
        let mut left = channels - assigned;
        let mut k = g;
        while left > 0 {
            k = if k == 0 { g - 1 } else { k - 1 };
            sizes[k] += 1;
            left -= 1;
        }
        if let Some(e) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!(
                "group {e} is empty with {channels} channels and ratios {:?}",
                self.ratios
            )));
        }
        Ok(sizes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ImportanceMode {
    Se,
    Re,
    #[default]
    Predefined,
}

impl ImportanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ImportanceMode::Se => "se",
            ImportanceMode::Re => "re",
            ImportanceMode::Predefined => "predefined",
        }
    }
}

impl std::str::FromStr for ImportanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" => Ok(Self::Se),
            "re" => Ok(Self::Re),
            "predefined" => Ok(Self::Predefined),
            _ => Err(Error::Config(format!("unknown importance mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelImportance {
    weights: Vec<f64>,
    /// `permutation[k]` is the original channel placed at sorted position `k`.
    permutation: Vec<usize>,
    mode: ImportanceMode,
}

impl ChannelImportance {
    pub fn new(weights: Vec<f64>, mode: ImportanceMode) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad importance vector {weights:?}")));
        }
        let mut permutation: Vec<usize> = (0..weights.len()).collect();
        permutation.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]));
        Ok(Self { weights, permutation, mode })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn mode(&self) -> ImportanceMode {
        self.mode
    }

    pub fn channels(&self) -> usize {
        self.weights.len()
    }
}

pub fn validate_permutation(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// `w_c = c` with 1-based channel numbers.
pub fn importance_predefined(channels: usize) -> Result<ChannelImportance> {
    ChannelImportance::new((1..=channels).map(|c| c as f64).collect(), ImportanceMode::Predefined)
}

pub fn init_se_params<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, reduction: usize, rng: &mut R) {
    let r = (channels / reduction.max(1)).max(1);
    store.init_conv(&format!("{SE_PREFIX}_reduce"), &[r, channels, 1, 1], rng);
    store.init_conv(&format!("{SE_PREFIX}_expand"), &[channels, r, 1, 1], rng);
}

/// Per-sample excitation `[C]` of a `[C, h, w]` latent.
pub fn se_excitation_var(g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
    channel_gate(g, store, SE_PREFIX, z)
}

/// Batch mean of the SE excitation over `[M, C, h, w]`.
pub fn importance_se(z_batch: &Tensor, store: &ParamStore) -> Result<ChannelImportance> {
    let s = z_batch.shape();
    if s.len() != 4 {
        return Err(shape_err("importance_se", format!("expected [M,C,h,w], got {s:?}")));
    }
    let (m, c) = (s[0], s[1]);
    let per = z_batch.numel() / m;
    let mut acc = vec![0.0; c];
    for i in 0..m {
        let zi = Tensor::new(&s[1..], z_batch.data()[i * per..(i + 1) * per].to_vec())?;
        let mut g = Graph::new();
        let v = g.constant(zi);
        let e = se_excitation_var(&mut g, store, v)?;
        for (a, &x) in acc.iter_mut().zip(g.value(e).data()) {
            *a += x;
        }
    }
    ChannelImportance::new(acc.into_iter().map(|a| a / m as f64).collect(), ImportanceMode::Se)
}

/// Reconstruction-error importance. `distortion(n, pruned)` returns
/// `1 - MS-SSIM` of image `n`, with latent channel `pruned` zeroed when set.
/// With `delta` the unpruned error of each image is subtracted.
pub fn importance_re<F>(channels: usize, num_images: usize, delta: bool, mut distortion: F) -> Result<ChannelImportance>
where
    F: FnMut(usize, Option<usize>) -> Result<f64>,
{
    if num_images == 0 {
        return Err(Error::InvalidArgument("reconstruction importance needs at least one image".into()));
    }
    let mut w = vec![0.0; channels];
    for n in 0..num_images {
        let base = if delta { distortion(n, None)? } else { 0.0 };
        for (c, wc) in w.iter_mut().enumerate() {
            *wc += distortion(n, Some(c))? - base;
        }
    }
    ChannelImportance::new(w.into_iter().map(|v| v / num_images as f64).collect(), ImportanceMode::Re)
}

fn check_split(z_shape: &[usize], perm: &[usize], sizes: &[usize]) -> Result<()> {
    validate_permutation(perm)?;
    let c = z_shape.first().copied().unwrap_or(0);
    if c != perm.len() || sizes.iter().sum::<usize>() != c {
        return Err(shape_err(
            "split_channels",
            format!("{c} channels, permutation of {}, group sizes {sizes:?}", perm.len()),
        ));
    }
    Ok(())
}

/// Reorders channels ascending by importance and cuts them into groups.
pub fn split_channels(z: &Tensor, perm: &[usize], sizes: &[usize]) -> Result<Vec<Tensor>> {
    check_split(z.shape(), perm, sizes)?;
    let sorted = z.index_select(perm)?;
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let part = sorted.narrow(start, n);
            start += n;
            part
        })
        .collect()
}

pub fn merge_channels(groups: &[Tensor], perm: &[usize]) -> Result<Tensor> {
    validate_permutation(perm)?;
    let refs: Vec<&Tensor> = groups.iter().collect();
    let cat = Tensor::concat(&refs)?;
    if cat.shape()[0] != perm.len() {
        return Err(shape_err(
            "merge_channels",
            format!("{} channels for a permutation of {}", cat.shape()[0], perm.len()),
        ));
    }
    cat.index_select(&inverse_permutation(perm))
}

pub fn split_channels_var(g: &mut Graph, z: Var, perm: &[usize], sizes: &[usize]) -> Result<Vec<Var>> {
    check_split(g.value(z).shape(), perm, sizes)?;
    let sorted = g.index_select(z, perm)?;
    let mut start = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        out.push(g.narrow(sorted, start, n)?);
        start += n;
    }
    Ok(out)
}

pub fn merge_channels_var(g: &mut Graph, groups: &[Var], perm: &[usize]) -> Result<Var> {
    validate_permutation(perm)?;
    let cat = g.concat(groups)?;
    if g.value(cat).shape()[0] != perm.len() {
        return Err(shape_err("merge_channels", "channel count differs from permutation"));
    }
    g.index_select(cat, &inverse_permutation(perm))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyBound {
    pub grouped_bits: f64,
    pub single_bits: f64,
    /// `Σ r_g log2 q_g`
    pub grouped_per_symbol: f64,
    /// `log2 Q`
    pub single_per_symbol: f64,
    pub satisfied: bool,
}

impl EntropyBound {
    /// One-line comparison of the per-symbol bounds, e.g. `2.2590 < 2.3219: satisfied`.
    pub fn verdict(&self) -> String {
        let (a, b) = (self.grouped_per_symbol, self.single_per_symbol);
        if (a - b).abs() <= 1e-12 {
            return "equal: not satisfied".to_string();
        }
        let op = if a < b { '<' } else { '>' };
        let status = if self.satisfied { "satisfied" } else { "not satisfied" };
        format!("{a:.4} {op} {b:.4}: {status}")
    }
}

/// Upper bounds on the latent code length, grouped versus one quantizer with `single_q` levels.
pub fn entropy_upper_bound(spec: &GroupSpec, channels: usize, height: usize, width: usize, single_q: usize) -> EntropyBound {
    let grouped_per_symbol: f64 = spec
        .ratios
        .iter()
        .zip(&spec.levels)
        .map(|(&r, &q)| r * (q as f64).log2())
        .sum();
    let single_per_symbol = (single_q as f64).log2();
    let n = (channels * height * width) as f64;
    EntropyBound {
        grouped_bits: n * grouped_per_symbol,
        single_bits: n * single_per_symbol,
        grouped_per_symbol,
        single_per_symbol,
        satisfied: grouped_per_symbol < single_per_symbol,
    }
}
