//! Joint training under `α·(−MS-SSIM) + mean_g(bits_g) + β·mean_g(NLL_g)`,
//! Adam with per-component learning rates, and the channel pruning experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, TrainConfig};
use crate::context_model::entropy_loss;
use crate::controller::{importance_re, ChannelImportance, ImportanceMode};
use crate::error::{Error, Result};
use crate::gmm::GmmParams;
use crate::metrics::{ms_ssim, ms_ssim_db, ms_ssim_var, psnr};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// `−MS-SSIM`
    pub dis: f64,
    /// Mean over groups of the entropy estimate in bits.
    pub ent_bits: f64,
    /// Mean over groups of the GMM negative log-likelihood.
    pub gmm_nll: f64,
    pub ms_ssim: f64,
    /// Sum over groups of the entropy estimate in bits.
    pub total_bits: f64,
}

/// Per-group inputs of [`total_loss`].
pub struct GroupTerms<'a> {
    pub symbols: &'a [usize],
    pub pmf: &'a Tensor,
    pub gmm: &'a GmmParams,
    /// The group's unquantized latent.
    pub latent: &'a Tensor,
}

/// Evaluates the objective for one image without a graph.
pub fn total_loss(image: &Tensor, recon: &Tensor, groups: &[GroupTerms], alpha: f64, beta: f64) -> Result<LossBreakdown> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("loss needs at least one group".into()));
    }
    let ms = ms_ssim(image, recon)?;
    let mut bits = Vec::with_capacity(groups.len());
    let mut nll = Vec::with_capacity(groups.len());
    for t in groups {
        bits.push(entropy_loss(t.symbols, t.pmf)?);
        nll.push(t.latent.data().iter().map(|&z| t.gmm.nll(z)).sum::<f64>());
    }
    Ok(combine(alpha, beta, -ms, &bits, &nll))
}

fn combine(alpha: f64, beta: f64, dis: f64, bits: &[f64], nll: &[f64]) -> LossBreakdown {
    let g = bits.len() as f64;
    let total_bits: f64 = bits.iter().sum();
    let ent_bits = total_bits / g;
    let gmm_nll = nll.iter().sum::<f64>() / g;
    LossBreakdown {
        total: alpha * dis + ent_bits + beta * gmm_nll,
        dis,
        ent_bits,
        gmm_nll,
        ms_ssim: -dis,
        total_bits,
    }
}

/// Graph form of the objective for one image.
pub fn total_loss_var(g: &mut Graph, image: Var, recon: Var, bits: &[Var], nll: &[Var], alpha: f64, beta: f64) -> Result<Var> {
    if bits.is_empty() || bits.len() != nll.len() {
        return Err(Error::InvalidArgument(format!("{} rate terms, {} NLL terms", bits.len(), nll.len())));
    }
    let inv_g = 1.0 / bits.len() as f64;
    let ms = ms_ssim_var(g, image, recon)?;
    let mut loss = g.mul_scalar(ms, -alpha)?;
    for (&b, &n) in bits.iter().zip(nll) {
        let b = g.mul_scalar(b, inv_g)?;
        let n = g.mul_scalar(n, beta * inv_g)?;
        loss = g.add(loss, b)?;
        loss = g.add(loss, n)?;
    }
    Ok(loss)
}

/// Builds the mean objective over a batch of images. Returns the loss and
/// the per-image breakdowns read off the graph.
pub fn batch_loss_var(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    images: &[Tensor],
    tcfg: &TrainConfig,
) -> Result<(Var, Vec<LossBreakdown>)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut latents = Vec::with_capacity(images.len());
    let mut excitation: Option<Vec<f64>> = None;
    for img in images {
        model.check_image(img)?;
        let x = g.constant(img.clone());
        let (z, e) = model.latent_var(g, store, x)?;
        if let Some(e) = e {
            let acc = excitation.get_or_insert_with(|| vec![0.0; model.channels()]);
            for (a, v) in acc.iter_mut().zip(g.value(e).data()) {
                *a += v / images.len() as f64;
            }
        }
        latents.push((x, z));
    }
    let perm = model.permutation(excitation.as_deref())?;
    let mut loss: Option<Var> = None;
    let mut rows = Vec::with_capacity(images.len());
    for (x, z) in latents {
        let t = model.terms_var(g, store, z, &perm, tcfg.quantizer_mode, tcfg.detach_entropy)?;
        let l = total_loss_var(g, x, t.recon, &t.entropy_bits, &t.gmm_nll, tcfg.alpha, tcfg.beta)?;
        let ms = ms_ssim(g.value(x), g.value(t.recon))?;
        let bits: Vec<f64> = t.entropy_bits.iter().map(|&v| g.value(v).item()).collect();
        let nll: Vec<f64> = t.gmm_nll.iter().map(|&v| g.value(v).item()).collect();
        let mut row = combine(tcfg.alpha, tcfg.beta, -ms, &bits, &nll);
        row.total = g.value(l).item();
        rows.push(row);
        let l = g.mul_scalar(l, 1.0 / images.len() as f64)?;
        loss = Some(match loss {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok((loss.expect("nonempty batch"), rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Encoder,
    Quantizer,
    Entropy,
    Decoder,
}

pub fn component_of(name: &str) -> Component {
    if name.starts_with("gmm") {
        Component::Quantizer
    } else if name.starts_with("ctx") {
        Component::Entropy
    } else if name.starts_with("dec.") {
        Component::Decoder
    } else {
        Component::Encoder
    }
}

pub fn base_lr(tcfg: &TrainConfig, name: &str) -> f64 {
    match component_of(name) {
        Component::Encoder => tcfg.lr_encoder,
        Component::Quantizer => tcfg.lr_quantizer,
        Component::Entropy => tcfg.lr_entropy,
        Component::Decoder => tcfg.lr_decoder,
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update. Parameters without a gradient are treated as
/// having a zero gradient.
pub fn adam_step<F>(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, lr: F) -> Result<()>
where
    F: Fn(&str) -> f64,
{
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let p = params.get_mut(&name).expect("listed name");
        let zero;
        let gr = match grads.get(&name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(p.shape());
                &zero
            }
        };
        if gr.shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!("{name}: gradient {:?} for parameter {:?}", gr.shape(), p.shape()),
            });
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let rate = lr(&name);
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(gr.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            if rate != 0.0 {
                *pv -= rate * (*mv / c1) / ((*vv / c2).sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dis: f64,
    pub ent_bits: f64,
    pub gmm_nll: f64,
    pub ms_ssim: f64,
    pub est_bpp: f64,
}

pub const LOG_HEADER: &str = "epoch,loss,dis,ent_bits,gmm_nll,ms_ssim,est_bpp";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.loss, r.dis, r.ent_bits, r.gmm_nll, r.ms_ssim, r.est_bpp
        );
    }
    s
}

/// `1 − MS-SSIM` importance of each latent channel, zeroing it before quantization.
pub fn reconstruction_importance(model: &Model, images: &[Tensor], delta: bool) -> Result<ChannelImportance> {
    let latents = images.iter().map(|img| model.latent(img)).collect::<Result<Vec<_>>>()?;
    importance_re(model.channels(), images.len(), delta, |n, pruned| {
        let (z, e) = &latents[n];
        let z = match pruned {
            Some(c) => z.with_zeroed_channel(c)?,
            None => z.clone(),
        };
        let q = model.quantize(&z, &model.permutation(e.as_deref())?)?;
        Ok(1.0 - ms_ssim(&images[n], &model.reconstruct(&q.latent)?)?)
    })
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn check_dataset(images: &[Tensor], model: &Model) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    images.iter().try_for_each(|img| model.check_image(img))
}

/// Trains from a fresh initialization drawn from `config.train.seed`.
pub fn train(images: &[Tensor], config: &Config) -> Result<TrainOutcome> {
    train_with(images, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F>(images: &[Tensor], config: &Config, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog),
{
    config.train.validate()?;
    let tcfg = &config.train;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = Model::init(config.model.clone(), &mut rng)?;
    check_dataset(images, &model)?;
    let pixels = (images[0].shape()[1] * images[0].shape()[2]) as f64;
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        if model.config.importance == ImportanceMode::Re {
            model.importance = reconstruction_importance(&model, images, tcfg.re_delta)?;
        }
        order.shuffle(&mut rng);
        let scale = tcfg.lr_scale(epoch);
        let mut sums = EpochLog { epoch: epoch + 1, ..EpochLog::default() };
        for batch in order.chunks(tcfg.batch_size) {
            let imgs: Vec<Tensor> = batch.iter().map(|&i| images[i].clone()).collect();
            let mut g = Graph::new();
            let (loss, rows) = batch_loss_var(&mut g, &model, &model.params, &imgs, tcfg)?;
            let grads = g.backward(loss)?.into_param_map();
            adam_step(&mut model.params, &grads, &mut adam, |n| base_lr(tcfg, n) * scale)?;
            for r in rows {
                sums.loss += r.total;
                sums.dis += r.dis;
                sums.ent_bits += r.ent_bits;
                sums.gmm_nll += r.gmm_nll;
                sums.ms_ssim += r.ms_ssim;
                sums.est_bpp += r.total_bits / pixels;
            }
        }
        let n = images.len() as f64;
        let row = EpochLog {
            epoch: epoch + 1,
            loss: sums.loss / n,
            dis: sums.dis / n,
            ent_bits: sums.ent_bits / n,
            gmm_nll: sums.gmm_nll / n,
            ms_ssim: sums.ms_ssim / n,
            est_bpp: sums.est_bpp / n,
        };
        on_epoch(&row);
        log.push(row);
    }
    if model.config.importance == ImportanceMode::Re {
        model.importance = reconstruction_importance(&model, images, tcfg.re_delta)?;
    }
    let importance = match model.config.importance {
        ImportanceMode::Se => crate::controller::importance_se(&latent_batch(&model, images)?, &model.params)?
            .weights()
            .to_vec(),
        _ => model.importance.weights().to_vec(),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            epoch: tcfg.epochs as u64,
            rng_seed: tcfg.seed,
            rng_word_pos: rng.get_word_pos(),
            importance,
            params: model.params,
        },
        log,
    })
}

/// Ungated encoder outputs stacked to `[M, C, h, w]`.
fn latent_batch(model: &Model, images: &[Tensor]) -> Result<Tensor> {
    let zs = images
        .iter()
        .map(|img| crate::network::encode(img, &model.config.codec, &model.params))
        .collect::<Result<Vec<_>>>()?;
    let mut shape = vec![zs.len()];
    shape.extend_from_slice(zs[0].shape());
    Tensor::new(&shape, zs.into_iter().flat_map(Tensor::into_data).collect())
}

/// Mean objective and metrics of a model on a dataset, with hard quantization.
pub fn evaluate(model: &Model, images: &[Tensor], tcfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for img in images {
        let mut g = Graph::new();
        let (_, rows) = batch_loss_var(&mut g, model, &model.params, std::slice::from_ref(img), tcfg)?;
        let r = rows[0];
        acc.total += r.total;
        acc.dis += r.dis;
        acc.ent_bits += r.ent_bits;
        acc.gmm_nll += r.gmm_nll;
        acc.ms_ssim += r.ms_ssim;
        acc.total_bits += r.total_bits;
    }
    let n = images.len() as f64;
    Ok(LossBreakdown {
        total: acc.total / n,
        dis: acc.dis / n,
        ent_bits: acc.ent_bits / n,
        gmm_nll: acc.gmm_nll / n,
        ms_ssim: acc.ms_ssim / n,
        total_bits: acc.total_bits / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelInfluence {
    pub channel: usize,
    /// Baseline minus pruned PSNR, dB.
    pub psnr_loss_db: f64,
    /// Baseline minus pruned MS-SSIM in dB.
    pub msssim_loss_db: f64,
}

/// Zeroes each channel of the quantized latent in turn and averages the
/// resulting PSNR and MS-SSIM-dB drops over the images.
pub fn channel_influence_experiment(model: &Model, images: &[Tensor]) -> Result<Vec<ChannelInfluence>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no evaluation images".into()));
    }
    let c = model.channels();
    let mut out: Vec<ChannelInfluence> = (0..c)
        .map(|channel| ChannelInfluence {
            channel,
            psnr_loss_db: 0.0,
            msssim_loss_db: 0.0,
        })
        .collect();
    for img in images {
        let (q, recon) = model.roundtrip(img)?;
        if q.latent.shape()[0] != c {
            return Err(Error::Incompatible(format!("latent has {} channels, model {c}", q.latent.shape()[0])));
        }
        let base_psnr = psnr(img, &recon)?;
        let base_db = ms_ssim_db(ms_ssim(img, &recon)?)?;
        for row in out.iter_mut() {
            let pruned = model.reconstruct(&q.latent.with_zeroed_channel(row.channel)?)?;
            row.psnr_loss_db += base_psnr - psnr(img, &pruned)?;
            row.msssim_loss_db += base_db - ms_ssim_db(ms_ssim(img, &pruned)?)?;
        }
    }
    let n = images.len() as f64;
    for row in out.iter_mut() {
        row.psnr_loss_db /= n;
        row.msssim_loss_db /= n;
    }
    Ok(out)
}

pub const INFLUENCE_HEADER: &str = "channel,psnr_loss_db,msssim_loss_db";

pub fn influence_csv(rows: &[ChannelInfluence]) -> String {
    let mut s = format!("{INFLUENCE_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.channel, r.psnr_loss_db, r.msssim_loss_db);
    }
    s
}

/// Smooth random test image in `[0, 1]`: a few colored sinusoids plus flat shapes.
pub fn synthetic_image<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Tensor {
    let mut data = vec![0.0; 3 * height * width];
    let base: [f64; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let freq: f64 = rng.gen_range(0.05..0.35);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];
            (angle.cos() * freq, angle.sin() * freq, phase, amp)
        })
        .collect();
    let shapes: Vec<(f64, f64, f64, [f64; 3])> = (0..2)
        .map(|_| {
            let cy = rng.gen_range(0.0..height as f64);
            let cx = rng.gen_range(0.0..width as f64);
            let r = rng.gen_range(0.15..0.4) * height.min(width) as f64;
            let col = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            (cy, cx, r, col)
        })
        .collect();
    for y in 0..height {
        for x in 0..width {
            let mut px = base;
            for &(fx, fy, phase, amp) in &waves {
                let s = (fx * x as f64 + fy * y as f64 + phase).sin();
                for c in 0..3 {
                    px[c] += amp[c] * s;
                }
            }
            for &(cy, cx, r, col) in &shapes {
                if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) < r * r {
                    for c in 0..3 {
                        px[c] = 0.5 * px[c] + 0.5 * col[c];
                    }
                }
            }
            for c in 0..3 {
                data[(c * height + y) * width + x] = px[c].clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, height, width], data).expect("image shape")
}

pub fn synthetic_dataset(n: usize, height: usize, width: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synthetic_image(height, width, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_param_gradients, FdOptions};
    use crate::config::ModelConfig;
    use crate::gmm::QuantizerMode;
    use crate::model::ctx_prefix;

    fn tiny_config() -> Config {
        let mut c = Config::toy();
        c.model.codec.enc_channels = [4, 4, 4, 4];
        c.model.codec.dec_channels = [4, 4, 4, 4];
        c.model.ctx_hidden = 4;
        c.train.batch_size = 2;
        c.train.epochs = 2;
        c
    }

    #[test]
    fn uniform_perfect_reconstruction_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = synthetic_image(16, 16, &mut rng);
        let levels = [3usize, 5, 7];
        let counts = [8usize, 16, 8];
        let gmms: Vec<GmmParams> = levels.iter().map(|&q| GmmParams::init(q).unwrap()).collect();
        let syms: Vec<Vec<usize>> = counts.iter().map(|&n| vec![0; n]).collect();
        let pmfs: Vec<Tensor> = levels
            .iter()
            .zip(&counts)
            .map(|(&q, &n)| Tensor::full(&[q, n], 1.0 / q as f64))
            .collect();
        let lat: Vec<Tensor> = counts.iter().map(|&n| Tensor::zeros(&[n])).collect();
        let groups: Vec<GroupTerms> = (0..3)
            .map(|k| GroupTerms {
                symbols: &syms[k],
                pmf: &pmfs[k],
                gmm: &gmms[k],
                latent: &lat[k],
            })
            .collect();
        let b = total_loss(&img, &img, &groups, 128.0, 0.0).unwrap();
        let expect = -128.0 + (8.0 * 3f64.log2() + 16.0 * 5f64.log2() + 8.0 * 7f64.log2()) / 3.0;
        assert!((b.total - expect).abs() < 1e-9);
        assert!((b.total - (128.0 * b.dis + b.ent_bits + 0.0 * b.gmm_nll)).abs() < 1e-12);
        let one = total_loss(&img, &img, &groups[..1], 2.0, 0.5).unwrap();
        assert!((one.total - (2.0 * one.dis + one.ent_bits + 0.5 * one.gmm_nll)).abs() < 1e-12);
        assert!(total_loss(&img, &img, &[], 1.0, 1.0).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_slice(&[1.0, -2.0]));
        let mut st = AdamState::default();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_slice(&[0.5, 0.5]));
        adam_step(&mut p, &grads, &mut st, |_| 0.1).unwrap();
        let after_one = p.clone();
        let m0 = st.m["w"].data()[0];
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        adam_step(&mut p, &grads, &mut st, |_| 0.0).unwrap();
        assert_eq!(p, after_one);
        assert!((st.m["w"].data()[0] - 0.9 * m0).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_slice(&[0.0]));
        let mut st = AdamState::default();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_slice(&[3.0]));
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..2000 {
            adam_step(&mut p, &grads, &mut st, |_| 1e-3).unwrap();
            let now = p.get("w").unwrap().data()[0];
            step = prev - now;
            prev = now;
        }
        assert!((step - 1e-3).abs() < 1e-8, "{step}");
    }

    #[test]
    fn learning_rate_routing() {
        let t = TrainConfig::default();
        assert_eq!(base_lr(&t, "enc.head.w"), 1e-4);
        assert_eq!(base_lr(&t, "se.gate_reduce.w"), 1e-4);
        assert_eq!(base_lr(&t, "gmm1.mu"), 1e-4);
        assert_eq!(base_lr(&t, "ctx0.in.w"), 5e-5);
        assert_eq!(base_lr(&t, "dec.tail.b"), 1e-4);
    }

    #[test]
    fn training_is_reproducible_and_zero_lr_is_inert() {
        let c = tiny_config();
        let data = synthetic_dataset(3, 16, 16, 2);
        let a = train(&data, &c).unwrap();
        let b = train(&data, &c).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.log, b.log);
        assert!(log_csv(&a.log).starts_with(LOG_HEADER));

        let mut frozen = c.clone();
        frozen.train.lr_encoder = 0.0;
        frozen.train.lr_quantizer = 0.0;
        frozen.train.lr_entropy = 0.0;
        frozen.train.lr_decoder = 0.0;
        let f = train(&data, &frozen).unwrap();
        let init = Model::init(c.model.clone(), &mut ChaCha8Rng::seed_from_u64(c.train.seed)).unwrap();
        assert_eq!(f.checkpoint.params, init.params);
        assert!((f.log[0].loss - f.log[1].loss).abs() < 1e-12);
    }

    #[test]
    fn training_rejects_bad_data() {
        let c = tiny_config();
        assert!(train(&[], &c).is_err());
        assert!(train(&[Tensor::zeros(&[3, 20, 16])], &c).is_err());
    }

    #[test]
    fn importance_modes_train() {
        for mode in [ImportanceMode::Se, ImportanceMode::Re] {
            let mut c = tiny_config();
            c.model.importance = mode;
            c.train.epochs = 1;
            let data = synthetic_dataset(2, 16, 16, 3);
            let out = train(&data, &c).unwrap();
            let m = out.checkpoint.model().unwrap();
            assert_eq!(m.importance.mode(), mode);
            assert_eq!(m.importance.weights().len(), 8);
            assert!(m.roundtrip(&data[0]).is_ok());
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // Soft quantizer so the objective is smooth in every parameter.
        let c = tiny_config();
        let mut tcfg = c.train.clone();
        tcfg.quantizer_mode = QuantizerMode::Soft;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = Model::init(ModelConfig { ..c.model.clone() }, &mut rng).unwrap();
        // Non-zero output layers so the context model gradient is informative.
        for g in 0..3 {
            let name = format!("{}.out.w", ctx_prefix(g));
            let shape = model.params.get(&name).unwrap().shape().to_vec();
            model.params.insert(name, Tensor::rand_uniform(&shape, -0.3, 0.3, &mut rng));
        }
        let img = synthetic_image(16, 16, &mut rng);
        let names = ["enc.head.w", "enc.s1.b0.conv1.w", "enc.tail.b", "gmm0.mu", "gmm1.pi_logits", "gmm2.sigma_raw", "ctx1.in.w", "ctx2.out.w", "dec.s2.proj.w", "dec.tail.w"];
        let samples: Vec<(String, usize)> = names
            .iter()
            .flat_map(|n| {
                let len = model.params.get(n).unwrap().numel();
                (0..3).map(move |i| (n.to_string(), (i * 7 + 1) % len))
            })
            .collect();
        let rep = check_param_gradients(
            &model.params,
            |g, store| Ok(batch_loss_var(g, &model, store, std::slice::from_ref(&img), &tcfg)?.0),
            &samples,
            &FdOptions { tol: 1e-3, ..FdOptions::default() },
        )
        .unwrap();
        assert!(rep.passed, "{:?}", rep.elements.iter().filter(|e| e.rel_error > 1e-3).collect::<Vec<_>>());
    }

    #[test]
    fn pruning_an_all_zero_channel_changes_nothing() {
        let c = tiny_config();
        let mut model = Model::init(c.model.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        // Channel 0 always quantizes to an exact zero mean.
        let w = model.params.get("enc.tail.w").unwrap().clone();
        let mut w2 = w.clone();
        let per = w.numel() / w.shape()[0];
        w2.data_mut()[..per].iter_mut().for_each(|v| *v = 0.0);
        model.params.insert("enc.tail.w", w2);
        let gm = GmmParams::from_moments(&[1.0 / 3.0; 3], &[-1.0, 0.0, 1.0], &[0.5; 3]).unwrap();
        gm.store(&mut model.params, "gmm0");
        let data = synthetic_dataset(2, 16, 16, 6);
        let rows = channel_influence_experiment(&model, &data).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].psnr_loss_db, 0.0);
        assert_eq!(rows[0].msssim_loss_db, 0.0);
        assert!(influence_csv(&rows).starts_with(INFLUENCE_HEADER));
    }

    #[test]
    fn synthetic_images_in_range_and_seeded() {
        let a = synthetic_dataset(2, 32, 32, 9);
        assert_eq!(a, synthetic_dataset(2, 32, 32, 9));
        assert!(a.iter().all(|t| t.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert_ne!(a[0], a[1]);
    }
}
