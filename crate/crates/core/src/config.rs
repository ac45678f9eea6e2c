//! Model and training configuration in a flat `key=value` text format.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! Missing keys keep their defaults, unknown keys are an error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::context_model::{ContextModelConfig, Embedding};
use crate::controller::{GroupSpec, ImportanceMode};
use crate::error::{Error, Result};
use crate::gmm::QuantizerMode;
use crate::network::CodecConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub groups: GroupSpec,
    /// Level count of the single-group reference quantizer in bound reports.
    pub single_levels: usize,
    pub ctx_hidden: usize,
    pub ctx_layers: usize,
    pub ctx_filter: usize,
    pub ctx_embedding: Embedding,
    pub importance: ImportanceMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            groups: GroupSpec::new(vec![0.25, 0.5, 0.25], vec![3, 5, 7]).expect("default groups"),
            single_levels: 5,
            ctx_hidden: 64,
            ctx_layers: 1,
            ctx_filter: 3,
            ctx_embedding: Embedding::Centered,
            importance: ImportanceMode::Predefined,
        }
    }
}

impl ModelConfig {
    /// Small widths used by tests and the desk-scale protocol.
    pub fn toy() -> Self {
        Self {
            codec: CodecConfig {
                enc_channels: [8, 16, 16, 16],
                dec_channels: [16, 16, 16, 8],
                blocks_per_group: 1,
                latent_channels: 8,
                ..CodecConfig::default()
            },
            ctx_hidden: 16,
            ..Self::default()
        }
    }

    pub fn context(&self, group: usize) -> ContextModelConfig {
        ContextModelConfig {
            filter_size: self.ctx_filter,
            hidden_channels: self.ctx_hidden,
            residual_layers: self.ctx_layers,
            levels: self.groups.levels()[group],
            embedding: self.ctx_embedding,
        }
    }

    pub fn group_sizes(&self) -> Result<Vec<usize>> {
        self.groups.group_sizes(self.codec.latent_channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        let sizes = self.group_sizes()?;
        if self.codec.latent_channels > 255 || self.groups.num_groups() > 255 {
            return Err(Error::Config("latent channels and groups must fit in a byte".into()));
        }
        if self.groups.levels().iter().any(|&q| q > 255) || sizes.iter().any(|&s| s > 255) {
            return Err(Error::Config("levels must fit in a byte".into()));
        }
        if self.single_levels == 0 {
            return Err(Error::Config("single_levels must be positive".into()));
        }
        for g in 0..self.groups.num_groups() {
            self.context(g).validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr_encoder: f64,
    pub lr_quantizer: f64,
    pub lr_entropy: f64,
    pub lr_decoder: f64,
    pub epochs: usize,
    /// Epochs at which every learning rate drops by a factor of five.
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub quantizer_mode: QuantizerMode,
    /// Stops the rate gradient at the quantized symbols.
    pub detach_entropy: bool,
    /// Reconstruction importance as the increase over the unpruned error.
    pub re_delta: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 128.0,
            beta: 0.001,
            lr_encoder: 1e-4,
            lr_quantizer: 1e-4,
            lr_entropy: 5e-5,
            lr_decoder: 1e-4,
            epochs: 400,
            milestones: vec![200, 300],
            batch_size: 32,
            seed: 0,
            quantizer_mode: QuantizerMode::StraightThrough,
            detach_entropy: false,
            re_delta: false,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule: 20 epochs of 8-image batches at ten times the base rates.
    pub fn toy() -> Self {
        Self {
            lr_encoder: 1e-3,
            lr_quantizer: 1e-3,
            lr_entropy: 5e-4,
            lr_decoder: 1e-3,
            epochs: 20,
            milestones: Vec::new(),
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_encoder, self.lr_quantizer, self.lr_entropy, self.lr_decoder];
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alpha must be positive and beta nonnegative".into()));
        }
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::Config("learning rates must be finite and nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be increasing".into()));
        }
        Ok(())
    }

    /// Multiplier `5^-k` after `k` milestones have passed at this (0-based) epoch.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        let mut s = 1.0;
        for _ in 0..passed {
            s /= 5.0;
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}"))))
        .collect()
}

fn one<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn four(key: &str, v: &str) -> Result<[usize; 4]> {
    list::<usize>(key, v)?
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected four values")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key {}", k.trim())));
            }
        }
        let mut c = Config::default();
        let (mut ratios, mut levels) = (c.model.groups.ratios().to_vec(), c.model.groups.levels().to_vec());
        for (k, v) in &kv {
            let (m, t) = (&mut c.model, &mut c.train);
            match k.as_str() {
                "enc_channels" => m.codec.enc_channels = four(k, v)?,
                "dec_channels" => m.codec.dec_channels = four(k, v)?,
                "blocks" => m.codec.blocks_per_group = one(k, v)?,
                "latent_channels" => m.codec.latent_channels = one(k, v)?,
                "downsample" => m.codec.downsample = one(k, v)?,
                "se_reduction" => m.codec.se_reduction = one(k, v)?,
                "kernel" => m.codec.kernel_size = one(k, v)?,
                "ratios" => ratios = list(k, v)?,
                "levels" => levels = list(k, v)?,
                "single_levels" => m.single_levels = one(k, v)?,
                "ctx_hidden" => m.ctx_hidden = one(k, v)?,
                "ctx_layers" => m.ctx_layers = one(k, v)?,
                "ctx_filter" => m.ctx_filter = one(k, v)?,
                "ctx_embedding" => {
                    m.ctx_embedding = match v.as_str() {
                        "centered" => Embedding::Centered,
                        "onehot" => Embedding::OneHot,
                        _ => return Err(Error::Config(format!("ctx_embedding: unknown {v:?}"))),
                    }
                }
                "importance" => m.importance = v.parse()?,
                "alpha" => t.alpha = one(k, v)?,
                "beta" => t.beta = one(k, v)?,
                "lr_encoder" => t.lr_encoder = one(k, v)?,
                "lr_quantizer" => t.lr_quantizer = one(k, v)?,
                "lr_entropy" => t.lr_entropy = one(k, v)?,
                "lr_decoder" => t.lr_decoder = one(k, v)?,
                "epochs" => t.epochs = one(k, v)?,
                "milestones" => t.milestones = if v.is_empty() { Vec::new() } else { list(k, v)? },
                "batch_size" => t.batch_size = one(k, v)?,
                "seed" => t.seed = one(k, v)?,
                "quantizer" => {
                    t.quantizer_mode = match v.as_str() {
                        "ste" => QuantizerMode::StraightThrough,
                        "soft" => QuantizerMode::Soft,
                        _ => return Err(Error::Config(format!("quantizer: unknown {v:?}"))),
                    }
                }
                "detach_entropy" => t.detach_entropy = flag(k, v)?,
                "re_delta" => t.re_delta = flag(k, v)?,
                _ => return Err(Error::Config(format!("unknown key {k}"))),
            }
        }
        c.model.groups = GroupSpec::new(ratios, levels)?;
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let (m, t, cd) = (&self.model, &self.train, &self.model.codec);
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("enc_channels", join(&cd.enc_channels));
        put("dec_channels", join(&cd.dec_channels));
        put("blocks", cd.blocks_per_group.to_string());
        put("latent_channels", cd.latent_channels.to_string());
        put("downsample", cd.downsample.to_string());
        put("se_reduction", cd.se_reduction.to_string());
        put("kernel", cd.kernel_size.to_string());
        put("ratios", join(m.groups.ratios()));
        put("levels", join(m.groups.levels()));
        put("single_levels", m.single_levels.to_string());
        put("ctx_hidden", m.ctx_hidden.to_string());
        put("ctx_layers", m.ctx_layers.to_string());
        put("ctx_filter", m.ctx_filter.to_string());
        put(
            "ctx_embedding",
            match m.ctx_embedding {
                Embedding::Centered => "centered",
                Embedding::OneHot => "onehot",
            }
            .into(),
        );
        put("importance", m.importance.as_str().into());
        put("alpha", t.alpha.to_string());
        put("beta", t.beta.to_string());
        put("lr_encoder", t.lr_encoder.to_string());
        put("lr_quantizer", t.lr_quantizer.to_string());
        put("lr_entropy", t.lr_entropy.to_string());
        put("lr_decoder", t.lr_decoder.to_string());
        put("epochs", t.epochs.to_string());
        put("milestones", join(&t.milestones));
        put("batch_size", t.batch_size.to_string());
        put("seed", t.seed.to_string());
        put(
            "quantizer",
            match t.quantizer_mode {
                QuantizerMode::StraightThrough => "ste",
                QuantizerMode::Soft => "soft",
            }
            .into(),
        );
        put("detach_entropy", t.detach_entropy.to_string());
        put("re_delta", t.re_delta.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_setting() {
        let c = Config::default();
        assert_eq!(c.model.codec.enc_channels, [32, 64, 128, 192]);
        assert_eq!(c.model.codec.dec_channels, [192, 128, 64, 32]);
        assert_eq!(c.model.codec.blocks_per_group, 6);
        assert_eq!(c.model.groups.levels(), &[3, 5, 7]);
        assert_eq!(c.train.alpha, 128.0);
        assert_eq!(c.train.beta, 0.001);
        assert_eq!(
            [c.train.lr_encoder, c.train.lr_quantizer, c.train.lr_entropy, c.train.lr_decoder],
            [1e-4, 1e-4, 5e-5, 1e-4]
        );
        assert_eq!(c.train.milestones, vec![200, 300]);
        assert_eq!(c.train.epochs, 400);
        assert_eq!(c.train.batch_size, 32);
    }

    #[test]
    fn text_roundtrip() {
        for c in [Config::default(), Config::toy()] {
            let text = c.to_text();
            assert_eq!(Config::parse(&text).unwrap(), c);
            assert_eq!(Config::parse(&text).unwrap().to_text(), text);
        }
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn parse_overrides_and_errors() {
        let c = Config::parse("# toy\nlatent_channels = 8\nlevels=2,5,8\nimportance=se\nmilestones=\n").unwrap();
        assert_eq!(c.model.codec.latent_channels, 8);
        assert_eq!(c.model.groups.levels(), &[2, 5, 8]);
        assert_eq!(c.model.importance, ImportanceMode::Se);
        assert!(c.train.milestones.is_empty());
        assert!(Config::parse("bogus=1").is_err());
        assert!(Config::parse("levels=7,5,3").is_err());
        assert!(Config::parse("alpha").is_err());
        assert!(Config::parse("alpha=1\nalpha=2").is_err());
        assert!(Config::parse("enc_channels=1,2").is_err());
        assert!(Config::parse("ratios=0.5,0.6").is_err());
    }

    #[test]
    fn lr_drops_by_five_at_each_milestone() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_scale(0), 1.0);
        assert_eq!(t.lr_scale(199), 1.0);
        assert_eq!(t.lr_scale(200), 0.2);
        assert_eq!(t.lr_scale(300), 0.2 / 5.0);
        assert_eq!(t.lr_scale(399), t.lr_scale(300));
    }
}
