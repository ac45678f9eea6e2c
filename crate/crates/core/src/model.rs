//! The full codec: encoder, importance-ordered channel groups with their own
//! GMM quantizer and context model, and decoder.
//!
//! Parameter names: `enc.*`, `dec.*`, `gmm{g}.*`, `ctx{g}.*` and `se.*`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::context_model::{self, centered_embedding_var, embed_symbols, entropy_bits_var, pmf_var, Embedding};
use crate::controller::{
    self, importance_predefined, merge_channels, merge_channels_var, se_excitation_var, split_channels,
    split_channels_var, ChannelImportance, ImportanceMode,
};
use crate::error::{shape_err, Error, Result};
use crate::gmm::{gmm_nll_var, quantize_var, symbol_index_var, GmmParams, GmmVars, QuantizerMode};
use crate::network::{decode, decode_var, encode, encode_var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub fn gmm_prefix(g: usize) -> String {
    format!("gmm{g}")
}

pub fn ctx_prefix(g: usize) -> String {
    format!("ctx{g}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Ordering used when the mode is not SE. SE orders each batch by its own excitation.
    pub importance: ChannelImportance,
}

/// Quantized latent of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLatent {
    pub permutation: Vec<usize>,
    /// Per group: symbols in raster order and the `[C_g, h, w]` grid shape.
    pub symbols: Vec<Vec<usize>>,
    pub group_shapes: Vec<[usize; 3]>,
    /// Merged dequantized latent `[C, h, w]`.
    pub latent: Tensor,
}

/// Per-image terms of the training objective.
pub struct ForwardTerms {
    pub recon: Var,
    /// Per group entropy estimate in bits.
    pub entropy_bits: Vec<Var>,
    /// Per group GMM negative log-likelihood (nats).
    pub gmm_nll: Vec<Var>,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        config.codec.init_params(&mut params, rng)?;
        for (g, &q) in config.groups.levels().iter().enumerate() {
            GmmParams::init(q)?.store(&mut params, &gmm_prefix(g));
            config.context(g).init_params(&mut params, &ctx_prefix(g), rng)?;
        }
        if config.importance == ImportanceMode::Se {
            controller::init_se_params(&mut params, config.codec.latent_channels, config.codec.se_reduction, rng);
        }
        let importance = importance_predefined(config.codec.latent_channels)?;
        Ok(Self {
            config,
            params,
            importance,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.codec.latent_channels
    }

    pub fn num_groups(&self) -> usize {
        self.config.groups.num_groups()
    }

    pub fn gmm(&self, g: usize) -> Result<GmmParams> {
        GmmParams::load(&self.params, &gmm_prefix(g))
    }

    /// Encoder output, gated by the SE excitation in SE mode, and the excitation.
    pub fn latent(&self, image: &Tensor) -> Result<(Tensor, Option<Vec<f64>>)> {
        let z = encode(image, &self.config.codec, &self.params)?;
        if self.config.importance != ImportanceMode::Se {
            return Ok((z, None));
        }
        let mut g = Graph::new();
        let zv = g.constant(z);
        let e = se_excitation_var(&mut g, &self.params, zv)?;
        let gated = g.scale_channels(zv, e)?;
        Ok((g.value(gated).clone(), Some(g.value(e).data().to_vec())))
    }

    /// Channel order for a latent with the given excitation.
    pub fn permutation(&self, excitation: Option<&[f64]>) -> Result<Vec<usize>> {
        match excitation {
            Some(e) => Ok(ChannelImportance::new(e.to_vec(), ImportanceMode::Se)?.permutation().to_vec()),
            None => Ok(self.importance.permutation().to_vec()),
        }
    }

    /// Hard quantization of a `[C, h, w]` latent under `perm`.
    pub fn quantize(&self, z: &Tensor, perm: &[usize]) -> Result<QuantizedLatent> {
        let sizes = self.config.group_sizes()?;
        let parts = split_channels(z, perm, &sizes)?;
        let mut values = Vec::with_capacity(parts.len());
        let mut symbols = Vec::with_capacity(parts.len());
        let mut group_shapes = Vec::with_capacity(parts.len());
        for (g, part) in parts.iter().enumerate() {
            let (v, s) = self.gmm(g)?.quantize_tensor(part);
            let sh = part.shape();
            group_shapes.push([sh[0], sh[1], sh[2]]);
            values.push(v);
            symbols.push(s);
        }
        Ok(QuantizedLatent {
            permutation: perm.to_vec(),
            symbols,
            group_shapes,
            latent: merge_channels(&values, perm)?,
        })
    }

    /// Rebuilds the merged latent from decoded symbols.
    pub fn dequantize(&self, symbols: &[Vec<usize>], shapes: &[[usize; 3]], perm: &[usize]) -> Result<Tensor> {
        if symbols.len() != self.num_groups() || shapes.len() != symbols.len() {
            return Err(Error::Incompatible(format!(
                "{} symbol groups for a {}-group model",
                symbols.len(),
                self.num_groups()
            )));
        }
        let mut values = Vec::with_capacity(symbols.len());
        for (g, (syms, shape)) in symbols.iter().zip(shapes).enumerate() {
            let gmm = self.gmm(g)?;
            let data = syms.iter().map(|&s| gmm.dequantize(s)).collect::<Result<Vec<_>>>()?;
            values.push(Tensor::new(shape, data)?);
        }
        merge_channels(&values, perm)
    }

    pub fn reconstruct(&self, latent: &Tensor) -> Result<Tensor> {
        decode(latent, &self.config.codec, &self.params)
    }

    /// Full encode, hard quantize and decode of one image.
    pub fn roundtrip(&self, image: &Tensor) -> Result<(QuantizedLatent, Tensor)> {
        let (z, e) = self.latent(image)?;
        let perm = self.permutation(e.as_deref())?;
        let q = self.quantize(&z, &perm)?;
        let recon = self.reconstruct(&q.latent)?;
        Ok((q, recon))
    }

    /// Per-group PMFs `[Q_g, C_g, h, w]` of a quantized latent.
    pub fn group_pmfs(&self, q: &QuantizedLatent) -> Result<Vec<Tensor>> {
        (0..self.num_groups())
            .map(|g| {
                context_model::predict_pmf(&q.symbols[g], &q.group_shapes[g], &self.config.context(g), &self.params, &ctx_prefix(g))
            })
            .collect()
    }

    /// Graph version of [`Model::latent`]: `(z, excitation)`.
    pub fn latent_var(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<(Var, Option<Var>)> {
        let z = encode_var(g, store, &self.config.codec, image)?;
        if self.config.importance != ImportanceMode::Se {
            return Ok((z, None));
        }
        let e = se_excitation_var(g, store, z)?;
        Ok((g.scale_channels(z, e)?, Some(e)))
    }

    /// Quantization, rate and reconstruction terms for a latent under `perm`.
    pub fn terms_var(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        perm: &[usize],
        mode: QuantizerMode,
        detach_entropy: bool,
    ) -> Result<ForwardTerms> {
        let sizes = self.config.group_sizes()?;
        let parts = split_channels_var(g, z, perm, &sizes)?;
        let mut quantized = Vec::with_capacity(parts.len());
        let mut entropy_bits = Vec::with_capacity(parts.len());
        let mut gmm_nll = Vec::with_capacity(parts.len());
        for (k, &part) in parts.iter().enumerate() {
            let vars = GmmVars::bind(g, store, &gmm_prefix(k))?;
            let (_, symbols) = vars.params(g).quantize_tensor(g.value(part));
            quantized.push(quantize_var(g, part, &vars, mode)?);
            let cfg = self.config.context(k);
            let shape = g.value(part).shape().to_vec();
            let input = match cfg.embedding {
                Embedding::Centered => {
                    let idx = symbol_index_var(g, part, &vars, mode)?;
                    let idx = if detach_entropy { g.detach(idx)? } else { idx };
                    centered_embedding_var(g, idx, &cfg)?
                }
                Embedding::OneHot => g.constant(embed_symbols(&symbols, &shape, &cfg)?),
            };
            let pmf = pmf_var(g, store, &ctx_prefix(k), &cfg, input)?;
            entropy_bits.push(entropy_bits_var(g, pmf, &symbols)?);
            gmm_nll.push(gmm_nll_var(g, part, &vars)?);
        }
        let zhat = merge_channels_var(g, &quantized, perm)?;
        let recon = decode_var(g, store, &self.config.codec, zhat)?;
        Ok(ForwardTerms {
            recon,
            entropy_bits,
            gmm_nll,
        })
    }

    /// Checks that an image can pass through the codec.
    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_err("model", format!("expected [3,H,W] image, got {s:?}")));
        }
        self.config.codec.latent_shape(s[1], s[2]).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(mode: ImportanceMode) -> Model {
        let cfg = ModelConfig {
            importance: mode,
            ..ModelConfig::toy()
        };
        Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn parameter_groups_present() {
        let m = model(ImportanceMode::Se);
        for p in ["enc.head.w", "dec.tail.b", "gmm0.mu", "gmm2.sigma_raw", "ctx1.out.w", "se.gate_reduce.w"] {
            assert!(m.params.contains(p), "{p}");
        }
        assert!(!model(ImportanceMode::Predefined).params.contains("se.gate_reduce.w"));
        assert_eq!(m.gmm(2).unwrap().levels(), 7);
    }

    #[test]
    fn graph_forward_matches_plain_roundtrip() {
        for mode in [ImportanceMode::Predefined, ImportanceMode::Se] {
            let m = model(mode);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let img = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
            let (q, recon) = m.roundtrip(&img).unwrap();
            let mut g = Graph::new();
            let x = g.constant(img.clone());
            let (z, e) = m.latent_var(&mut g, &m.params, x).unwrap();
            let e = e.map(|e| g.value(e).data().to_vec());
            let perm = m.permutation(e.as_deref()).unwrap();
            assert_eq!(perm, q.permutation);
            let t = m.terms_var(&mut g, &m.params, z, &perm, QuantizerMode::StraightThrough, false).unwrap();
            assert_eq!(g.value(t.recon), &recon);

            let pmfs = m.group_pmfs(&q).unwrap();
            for (k, pmf) in pmfs.iter().enumerate() {
                let bits = context_model::entropy_loss(&q.symbols[k], pmf).unwrap();
                assert!((bits - g.value(t.entropy_bits[k]).item()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dequantize_inverts_quantize() {
        let m = model(ImportanceMode::Predefined);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
        let (q, _) = m.roundtrip(&img).unwrap();
        assert_eq!(q.symbols.iter().map(Vec::len).sum::<usize>(), 8 * 2 * 2);
        let back = m.dequantize(&q.symbols, &q.group_shapes, &q.permutation).unwrap();
        assert_eq!(back, q.latent);
        assert!(m.check_image(&Tensor::zeros(&[3, 24, 32])).is_err());
    }
}
