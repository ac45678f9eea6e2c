//! Gaussian-mixture scalar quantizer.
//!
//! A latent value is quantized to the mixture mean with the largest
//! responsibility. Gradients come from the responsibility-weighted mean of the
//! component means, and the mixture itself is fit by minimizing the negative
//! log-likelihood of the latents.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Floor added to the softplus scale so responsibilities never collapse to a delta.
pub const SIGMA_MIN: f64 = 1e-3;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// How the quantizer behaves in the forward pass during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QuantizerMode {
    /// Hard means forward, soft gradients backward.
    #[default]
    StraightThrough,
    /// Soft responsibility-weighted means both ways.
    Soft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub pi_logits: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma_raw: Vec<f64>,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    // y + ln(1 - e^{-y})
    y + (-(-y).exp()).ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

impl GmmParams {
    /// `q` evenly spaced means on `[-1, 1]`, uniform weights, scale of half the spacing.
    pub fn init(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidArgument("quantization level must be positive".into()));
        }
        let mu: Vec<f64> = if q == 1 {
            vec![0.0]
        } else {
            (0..q).map(|j| -1.0 + 2.0 * j as f64 / (q - 1) as f64).collect()
        };
        let sigma = if q == 1 { 1.0 } else { 1.0 / (q - 1) as f64 };
        Self::from_moments(&vec![1.0 / q as f64; q], &mu, &vec![sigma; q])
    }

    /// Builds the unconstrained parameterization from weights, means and scales.
    pub fn from_moments(pi: &[f64], mu: &[f64], sigma: &[f64]) -> Result<Self> {
        let q = mu.len();
        if q == 0 || pi.len() != q || sigma.len() != q {
            return Err(shape_err("gmm", format!("pi {}, mu {q}, sigma {}", pi.len(), sigma.len())));
        }
        if pi.iter().any(|&p| p <= 0.0) || sigma.iter().any(|&s| s <= SIGMA_MIN) {
            return Err(Error::InvalidArgument(
                "mixture weights must be positive and scales above the floor".into(),
            ));
        }
        Ok(Self {
            pi_logits: pi.iter().map(|p| p.ln()).collect(),
            mu: mu.to_vec(),
            sigma_raw: sigma.iter().map(|&s| softplus_inv(s - SIGMA_MIN)).collect(),
        })
    }

    pub fn levels(&self) -> usize {
        self.mu.len()
    }

    pub fn pi(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.pi_logits);
        self.pi_logits.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.sigma_raw.iter().map(|&r| softplus(r) + SIGMA_MIN).collect()
    }

    fn log_pi(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.pi_logits);
        self.pi_logits.iter().map(|l| l - lse).collect()
    }

    /// `log(π_j N(z | μ_j, σ_j²))` for every component.
    pub fn log_joint(&self, z: f64) -> Vec<f64> {
        let (log_pi, sigma) = (self.log_pi(), self.sigma());
        self.log_joint_with(z, &log_pi, &sigma)
    }

    fn log_joint_with(&self, z: f64, log_pi: &[f64], sigma: &[f64]) -> Vec<f64> {
        (0..self.levels())
            .map(|j| {
                let d = (z - self.mu[j]) / sigma[j];
                log_pi[j] - HALF_LN_2PI - sigma[j].ln() - 0.5 * d * d
            })
            .collect()
    }

    /// Posterior component probabilities for `z`, computed in log space.
    pub fn responsibilities(&self, z: f64) -> Vec<f64> {
        softmax(&self.log_joint(z))
    }

    /// Index and value of the mean with the largest responsibility (ties to the lowest index).
    pub fn quantize_hard(&self, z: f64) -> (f64, usize) {
        let a = self.log_joint(z);
        let k = argmax(&a);
        (self.mu[k], k)
    }

    /// Responsibility-weighted mean of the component means.
    pub fn quantize_soft(&self, z: f64) -> f64 {
        self.responsibilities(z)
            .iter()
            .zip(&self.mu)
            .map(|(r, m)| r * m)
            .sum()
    }

    /// `-log Σ_q π_q N(z | μ_q, σ_q²)` for one value.
    pub fn nll(&self, z: f64) -> f64 {
        -log_sum_exp(&self.log_joint(z))
    }

    pub fn dequantize(&self, symbol: usize) -> Result<f64> {
        self.mu
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("symbol {symbol} outside alphabet of {}", self.levels())))
    }

    /// Hard quantization of every element.
    pub fn quantize_tensor(&self, z: &Tensor) -> (Tensor, Vec<usize>) {
        let (log_pi, sigma) = (self.log_pi(), self.sigma());
        let symbols: Vec<usize> = z
            .data()
            .iter()
            .map(|&v| argmax(&self.log_joint_with(v, &log_pi, &sigma)))
            .collect();
        let values = Tensor::new(z.shape(), symbols.iter().map(|&k| self.mu[k]).collect())
            .expect("same element count");
        (values, symbols)
    }

    pub fn store(&self, store: &mut ParamStore, prefix: &str) {
        store.insert(format!("{prefix}.pi_logits"), Tensor::from_slice(&self.pi_logits));
        store.insert(format!("{prefix}.mu"), Tensor::from_slice(&self.mu));
        store.insert(format!("{prefix}.sigma_raw"), Tensor::from_slice(&self.sigma_raw));
    }

    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| {
            store
                .get(&format!("{prefix}.{s}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Incompatible(format!("missing {prefix}.{s}")))
        };
        let p = Self {
            pi_logits: get("pi_logits")?,
            mu: get("mu")?,
            sigma_raw: get("sigma_raw")?,
        };
        if p.pi_logits.len() != p.mu.len() || p.sigma_raw.len() != p.mu.len() {
            return Err(Error::Incompatible(format!("{prefix}: inconsistent mixture sizes")));
        }
        Ok(p)
    }
}

fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn argmax(a: &[f64]) -> usize {
    let mut k = 0;
    for (j, &v) in a.iter().enumerate() {
        if v > a[k] {
            k = j;
        }
    }
    k
}

/// Soft quantizer baseline: `softmax(-t (z - c_j)²)`-weighted mean of `centers`.
pub fn soft_quantizer_reference(z: f64, centers: &[f64], temperature: f64) -> f64 {
    let logits: Vec<f64> = centers.iter().map(|c| -temperature * (z - c) * (z - c)).collect();
    softmax(&logits).iter().zip(centers).map(|(w, c)| w * c).sum()
}

/// Graph handles for one mixture's trainable parameters.
#[derive(Clone, Copy, Debug)]
pub struct GmmVars {
    pub pi_logits: Var,
    pub mu: Var,
    pub sigma_raw: Var,
}

impl GmmVars {
    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            pi_logits: g.param(store, &format!("{prefix}.pi_logits"))?,
            mu: g.param(store, &format!("{prefix}.mu"))?,
            sigma_raw: g.param(store, &format!("{prefix}.sigma_raw"))?,
        })
    }

    pub fn params(&self, g: &Graph) -> GmmParams {
        GmmParams {
            pi_logits: g.value(self.pi_logits).data().to_vec(),
            mu: g.value(self.mu).data().to_vec(),
            sigma_raw: g.value(self.sigma_raw).data().to_vec(),
        }
    }
}

/// What the forward pass reports per element.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Output {
    SoftValue,
    HardValue,
    SoftIndex,
    HardIndex,
}

fn from_inputs(inputs: &[&Tensor]) -> GmmParams {
    GmmParams {
        pi_logits: inputs[1].data().to_vec(),
        mu: inputs[2].data().to_vec(),
        sigma_raw: inputs[3].data().to_vec(),
    }
}

/// Accumulates `Σ_j dL/da_j · ∂a_j/∂(z, logits, μ, σ_raw)` for one element.
#[allow(clippy::too_many_arguments)]
fn chain_log_joint(
    p: &GmmParams,
    pi: &[f64],
    sigma: &[f64],
    z: f64,
    dl_da: &[f64],
    gz: &mut f64,
    glogit: &mut [f64],
    gmu: &mut [f64],
    gsraw: &mut [f64],
) {
    let total: f64 = dl_da.iter().sum();
    for j in 0..p.levels() {
        let s2 = sigma[j] * sigma[j];
        let d = z - p.mu[j];
        *gz -= dl_da[j] * d / s2;
        gmu[j] += dl_da[j] * d / s2;
        let da_dsigma = -1.0 / sigma[j] + d * d / (s2 * sigma[j]);
        gsraw[j] += dl_da[j] * da_dsigma * sigmoid(p.sigma_raw[j]);
        glogit[j] += dl_da[j] - pi[j] * total;
    }
}

fn check_inputs(g: &Graph, z: Var, v: &GmmVars) -> Result<usize> {
    let q = g.value(v.mu).numel();
    if g.value(v.pi_logits).numel() != q || g.value(v.sigma_raw).numel() != q {
        return Err(shape_err("gmm", "mixture parameter lengths differ"));
    }
    if !g.value(z).is_finite() {
        return Err(Error::NonFinite { op: "gmm" });
    }
    Ok(q)
}

fn record(g: &mut Graph, op: &'static str, z: Var, v: &GmmVars, out: Output) -> Result<Var> {
    check_inputs(g, z, v)?;
    let p = v.params(g);
    let zt = g.value(z);
    let value = zt.map(|x| {
        let r = p.responsibilities(x);
        match out {
            Output::SoftValue => r.iter().zip(&p.mu).map(|(r, m)| r * m).sum(),
            Output::SoftIndex => r.iter().enumerate().map(|(j, r)| j as f64 * r).sum(),
            Output::HardValue => p.quantize_hard(x).0,
            Output::HardIndex => p.quantize_hard(x).1 as f64,
        }
    });
    let index_output = matches!(out, Output::SoftIndex | Output::HardIndex);
    g.custom(
        op,
        &[z, v.pi_logits, v.mu, v.sigma_raw],
        value,
        Box::new(move |grad, inputs, _| {
            let p = from_inputs(inputs);
            let (pi, sigma) = (p.pi(), p.sigma());
            let q = p.levels();
            let mut gz = vec![0.0; inputs[0].numel()];
            let (mut gl, mut gm, mut gs) = (vec![0.0; q], vec![0.0; q], vec![0.0; q]);
            let mut dl_da = vec![0.0; q];
            for (i, (&x, &gi)) in inputs[0].data().iter().zip(grad.data()).enumerate() {
                let r = p.responsibilities(x);
                let targets: Vec<f64> = if index_output {
                    (0..q).map(|j| j as f64).collect()
                } else {
                    p.mu.clone()
                };
                let y: f64 = r.iter().zip(&targets).map(|(r, t)| r * t).sum();
                for j in 0..q {
                    dl_da[j] = gi * r[j] * (targets[j] - y);
                    if !index_output {
                        gm[j] += gi * r[j];
                    }
                }
                chain_log_joint(&p, &pi, &sigma, x, &dl_da, &mut gz[i], &mut gl, &mut gm, &mut gs);
            }
            Ok(vec![
                Tensor::new(inputs[0].shape(), gz)?,
                Tensor::new(&[q], gl)?,
                Tensor::new(&[q], gm)?,
                Tensor::new(&[q], gs)?,
            ])
        }),
    )
}

/// Soft quantization `Σ_j r_j μ_j`, differentiable in `z` and all mixture parameters.
pub fn quantize_soft_var(g: &mut Graph, z: Var, v: &GmmVars) -> Result<Var> {
    record(g, "gmm_soft", z, v, Output::SoftValue)
}

/// Hard means in the forward pass, soft-quantizer gradients in the backward pass.
pub fn quantize_ste_var(g: &mut Graph, z: Var, v: &GmmVars) -> Result<Var> {
    record(g, "gmm_ste", z, v, Output::HardValue)
}

pub fn quantize_var(g: &mut Graph, z: Var, v: &GmmVars, mode: QuantizerMode) -> Result<Var> {
    match mode {
        QuantizerMode::StraightThrough => quantize_ste_var(g, z, v),
        QuantizerMode::Soft => quantize_soft_var(g, z, v),
    }
}

/// Symbol index as a real: hard index forward (or soft `Σ_j j r_j` in soft mode),
/// soft-index gradient backward.
pub fn symbol_index_var(g: &mut Graph, z: Var, v: &GmmVars, mode: QuantizerMode) -> Result<Var> {
    match mode {
        QuantizerMode::StraightThrough => record(g, "gmm_index_ste", z, v, Output::HardIndex),
        QuantizerMode::Soft => record(g, "gmm_index_soft", z, v, Output::SoftIndex),
    }
}

/// Mixture negative log-likelihood summed over every element of `z` (natural log).
pub fn gmm_nll_var(g: &mut Graph, z: Var, v: &GmmVars) -> Result<Var> {
    check_inputs(g, z, v)?;
    let p = v.params(g);
    let total: f64 = g.value(z).data().iter().map(|&x| p.nll(x)).sum();
    g.custom(
        "gmm_nll",
        &[z, v.pi_logits, v.mu, v.sigma_raw],
        Tensor::scalar(total),
        Box::new(|grad, inputs, _| {
            let p = from_inputs(inputs);
            let (pi, sigma) = (p.pi(), p.sigma());
            let q = p.levels();
            let up = grad.item();
            let mut gz = vec![0.0; inputs[0].numel()];
            let (mut gl, mut gm, mut gs) = (vec![0.0; q], vec![0.0; q], vec![0.0; q]);
            for (i, &x) in inputs[0].data().iter().enumerate() {
                let dl_da: Vec<f64> = p.responsibilities(x).iter().map(|r| -up * r).collect();
                chain_log_joint(&p, &pi, &sigma, x, &dl_da, &mut gz[i], &mut gl, &mut gm, &mut gs);
            }
            Ok(vec![
                Tensor::new(inputs[0].shape(), gz)?,
                Tensor::new(&[q], gl)?,
                Tensor::new(&[q], gm)?,
                Tensor::new(&[q], gs)?,
            ])
        }),
    )
}
