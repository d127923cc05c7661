//! Optimizer, learning-rate schedule, patch sampling, the training loop and a
//! finite-difference gradient checker.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{GridImage, ImagePair};
use crate::error::{param_err, shape_err, Error, Result};
use crate::loss::{init_loss_params, LossConfig, LossTerms, Objective, NPS_PREFIX};
use crate::metrics::{metrics, DEFAULT_DATA_RANGE};
use crate::network::{ct_mamba_forward, denoise, init_params, Ctx, NetConfig};
use crate::params::{save_checkpoint, write_atomic, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patches_per_image: usize,
    pub patch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_start: 1e-3,
            lr_end: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
            batch_size: 8,
            patches_per_image: 4,
            patch_size: 64,
            epochs: 0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(param_err!("need lr_start >= lr_end > 0, got {} and {}", self.lr_start, self.lr_end));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(param_err!("{n} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(param_err!("eps must be positive and weight decay nonnegative"));
        }
        if self.batch_size == 0 || self.patches_per_image == 0 || self.patch_size == 0 {
            return Err(param_err!("batch size, patches per image and patch size must be >= 1"));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a trained model; stored in checkpoints as JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.train.patch_size % self.net.size_multiple() != 0 {
            return Err(param_err!(
                "patch size {} must be a multiple of {}",
                self.train.patch_size,
                self.net.size_multiple()
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| param_err!("bad run config: {e}"))
    }

    /// Fresh denoiser and loss-network parameters.
    pub fn init_store(&self) -> Result<ParamStore> {
        let mut store = init_params(&self.net, self.net.seed)?;
        init_loss_params(&mut store, &self.loss, self.net.seed.wrapping_add(1))?;
        Ok(store)
    }

    /// Lean settings that train on 64x64 phantoms on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.net.channels = 4;
        cfg.net.msc_scales = 2;
        cfg.net.czss.state_size = 4;
        cfg.net.czss.expansion = 1;
        cfg.loss.ufeature.base_channels = 4;
        cfg.train.patches_per_image = 1;
        cfg.train.batch_size = 8;
        cfg
    }
}

/// Cosine annealing from `lr_start` at step 0 to `lr_end` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(param_err!("step {step} beyond schedule of {total_steps}"));
    }
    if total_steps == 0 {
        return Ok(cfg.lr_start);
    }
    let t = step as f64 / total_steps as f64;
    Ok(cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads[i]` matches parameter `i` of the store.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(shape_err!("{} gradients for {} parameters", grads.len(), store.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(i).data_mut();
            if g.len() != p.len() {
                return Err(shape_err!("gradient {i} has {} values for {}", g.len(), p.len()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                p[k] -= lr * self.weight_decay * p[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Aligned LDCT/NDCT patches plus a key that seeds per-sample randomness.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub ldct: GridImage,
    pub ndct: GridImage,
    pub corner: (usize, usize),
    pub key: u64,
}

/// `count` random aligned crops of side `size`.
pub fn sample_patches(pair: &ImagePair, count: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PatchPair>> {
    let (h, w) = (pair.ldct.height, pair.ldct.width);
    if !pair.ldct.same_geometry(&pair.ndct) {
        return Err(shape_err!("pair {} is misaligned", pair.name));
    }
    if h < size || w < size {
        return Err(shape_err!("image {h}x{w} smaller than {size}x{size} patch"));
    }
    (0..count)
        .map(|_| {
            let top = rng.random_range(0..=h - size);
            let left = rng.random_range(0..=w - size);
            Ok(PatchPair {
                ldct: pair.ldct.crop(top, left, size, size)?,
                ndct: pair.ndct.crop(top, left, size, size)?,
                corner: (top, left),
                key: rng.random(),
            })
        })
        .collect()
}

/// Sum with values sorted first and Neumaier compensation, so the result does not
/// depend on the input order.
pub fn order_invariant_sum(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &v in vals.iter() {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

/// Loss terms and per-parameter gradients for one sample.
pub fn sample_gradients(
    store: &ParamStore,
    net: &NetConfig,
    objective: &Objective,
    sample: &PatchPair,
    epoch: usize,
    train_mode: bool,
) -> Result<(LossTerms, Vec<Tensor>)> {
    let (h, w) = (sample.ldct.height, sample.ldct.width);
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(sample.key);
    let mut ctx = if train_mode {
        Ctx::train(&mut tape, store, &mut rng)
    } else {
        Ctx::new(&mut tape, store, true)
    };
    let ld = ctx.tape.constant(Tensor::new(&[1, h, w], sample.ldct.to_f64())?);
    let nd = ctx.tape.constant(Tensor::new(&[1, h, w], sample.ndct.to_f64())?);
    let pred = ct_mamba_forward(&mut ctx, ld, net)?;
    let (px, py) = (sample.ldct.px as f64, sample.ldct.py as f64);
    let (loss, terms) = objective.total(&mut ctx, ld, nd, pred, epoch, px, py)?;
    if !terms.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at epoch {epoch}: l1 {} nps {} perceptual {}",
            terms.l1, terms.nps, terms.perceptual
        )));
    }
    let grads = tape.backward(loss)?;
    let mut out: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for (id, g) in grads.into_param_grads(|id| store.get(id).shape().to_vec()) {
        out[id] = g;
    }
    Ok((terms, out))
}

/// Batch-mean loss terms and gradients reduced independently of sample order.
pub fn batch_gradients(
    store: &ParamStore,
    net: &NetConfig,
    objective: &Objective,
    batch: &[PatchPair],
    epoch: usize,
) -> Result<(LossTerms, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(param_err!("empty batch"));
    }
    let per: Vec<(LossTerms, Vec<Tensor>)> = batch
        .iter()
        .map(|s| sample_gradients(store, net, objective, s, epoch, true))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut scratch = vec![0.0; batch.len()];
    let mut reduce = |f: &dyn Fn(usize) -> f64| {
        for (k, slot) in scratch.iter_mut().enumerate() {
            *slot = f(k);
        }
        order_invariant_sum(&mut scratch) / n
    };
    let terms = LossTerms {
        total: reduce(&|k| per[k].0.total),
        l1: reduce(&|k| per[k].0.l1),
        nps: reduce(&|k| per[k].0.nps),
        perceptual: reduce(&|k| per[k].0.perceptual),
    };
    let grads = (0..store.len())
        .map(|i| {
            (0..store.get(i).len())
                .map(|e| reduce(&|k| per[k].1[i].data()[e]))
                .collect()
        })
        .collect();
    Ok((terms, grads))
}

/// Forward, backward and one optimizer update on a batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    store: &mut ParamStore,
    opt: &mut AdamW,
    net: &NetConfig,
    objective: &Objective,
    batch: &[PatchPair],
    epoch: usize,
    lr: f64,
) -> Result<LossTerms> {
    let (terms, grads) = batch_gradients(store, net, objective, batch, epoch)?;
    opt.update(store, &grads, lr)?;
    Ok(terms)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l1: f64,
    pub nps: f64,
    pub perceptual: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,loss,l1,nps,perceptual,val_psnr,val_ssim";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.loss, r.l1, r.nps, r.perceptual, r.val_psnr, r.val_ssim
        );
    }
    s
}

/// Mean PSNR and SSIM of denoised validation images against their references.
pub fn evaluate(store: &ParamStore, net: &NetConfig, pairs: &[ImagePair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for pair in pairs {
        let (h, w) = (pair.ldct.height, pair.ldct.width);
        let out = denoise(store, net, &pair.ldct.to_f64(), h, w)?;
        let m = metrics(&pair.ndct.to_f64(), &out, h, w, DEFAULT_DATA_RANGE)?;
        p += m.psnr;
        s += m.ssim;
    }
    Ok((p / pairs.len() as f64, s / pairs.len() as f64))
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "metrics.csv";

/// Trains from scratch. With `out_dir`, writes `model.ckpt` (periodically and at
/// the end) and `metrics.csv` (after every epoch).
pub fn train_loop(train: &[ImagePair], val: &[ImagePair], cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let mut store = cfg.init_store()?;
    let objective = Objective::new(cfg.loss.clone())?;
    let mut opt = AdamW::new(tc, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let samples_per_epoch = train.len() * tc.patches_per_image;
    let steps_per_epoch = samples_per_epoch.div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;
    if tc.epochs > 0 && train.is_empty() {
        return Err(param_err!("no training pairs"));
    }
    let config_json = cfg.to_json();
    let save = |store: &ParamStore, log: &[EpochLog]| -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            save_checkpoint(&dir.join(CHECKPOINT_FILE), &config_json, store)?;
            write_atomic(&dir.join(LOG_FILE), log_csv(log).as_bytes())?;
        }
        Ok(())
    };
    let mut log = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut patches = Vec::with_capacity(samples_per_epoch);
        for &i in &order {
            patches.extend(sample_patches(&train[i], tc.patches_per_image, tc.patch_size, &mut rng)?);
        }
        let mut sums = [0.0f64; 4];
        let mut lr = tc.lr_start;
        for batch in patches.chunks(tc.batch_size) {
            lr = lr_at(step, total_steps, tc)?;
            let terms = train_step(&mut store, &mut opt, &cfg.net, &objective, batch, epoch, lr)?;
            let k = batch.len() as f64;
            sums[0] += terms.total * k;
            sums[1] += terms.l1 * k;
            sums[2] += terms.nps * k;
            sums[3] += terms.perceptual * k;
            step += 1;
        }
        let (val_psnr, val_ssim) = evaluate(&store, &cfg.net, val)?;
        let n = patches.len() as f64;
        let row = EpochLog {
            epoch,
            lr,
            loss: sums[0] / n,
            l1: sums[1] / n,
            nps: sums[2] / n,
            perceptual: sums[3] / n,
            val_psnr,
            val_ssim,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} l1 {:.6} nps {:.6} perc {:.6} val psnr {:.3}",
            row.loss,
            row.l1,
            row.nps,
            row.perceptual,
            row.val_psnr
        );
        log.push(row);
        let periodic = tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0;
        if periodic {
            save(&store, &log)?;
        } else if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            write_atomic(&dir.join(LOG_FILE), log_csv(&log).as_bytes())?;
        }
    }
    save(&store, &log)?;
    Ok(TrainOutcome { store, log })
}

/// Which part of the objective a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradObjective {
    /// The complete weighted objective with the NPS term active.
    Full,
    /// Pixel L1 and perceptual terms only.
    Smooth,
    L1Only,
    NpsOnly,
}

impl GradObjective {
    fn loss_config(self, base: &LossConfig) -> LossConfig {
        let mut c = base.clone();
        let w = &mut c.weights;
        match self {
            GradObjective::Full => {}
            GradObjective::Smooth => {
                w.gamma1 = 0.0;
                w.gamma2 = 0.0;
            }
            GradObjective::L1Only => {
                w.gamma1 = 0.0;
                w.gamma2 = 0.0;
                w.lambda3 = 0.0;
            }
            GradObjective::NpsOnly => {
                w.lambda1 = 0.0;
                w.lambda3 = 0.0;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Analytic and central-difference values at the worst entry.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub checked: usize,
    pub overall_max: f64,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub objective: GradObjective,
    pub step: f64,
    /// Combine central differences at `step` and `step / 2` into a fourth-order
    /// estimate.
    pub richardson: bool,
    pub min_samples: usize,
    pub size: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            objective: GradObjective::Full,
            step: 1e-3,
            richardson: true,
            min_samples: 200,
            size: 16,
        }
    }
}

/// Span of the random output-layer weights. Small enough that the prediction stays a
/// few HU from the input, so neither L1 term crosses a kink.
const PFFN_SPAN: f64 = 0.01;

/// Parameters that are nonzero everywhere, so every path carries gradient.
pub fn randomize_for_check(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..store.len() {
        let name = store.name(i).to_string();
        let t = store.get_mut(i);
        if name.starts_with("pffn.out") {
            for v in t.data_mut() {
                *v = rng.random_range(-PFFN_SPAN..PFFN_SPAN);
            }
        } else if name.ends_with(".b") && !name.ends_with("dt_proj.b") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }
}

/// A smooth `size x size` test pair whose residual noise stays well away from zero,
/// keeping the pixel L1 term away from its kinks.
pub fn check_pair(size: usize, seed: u64) -> Result<PatchPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nd = Vec::with_capacity(size * size);
    let mut ld = Vec::with_capacity(size * size);
    let (fa, fb) = (rng.random_range(0.2..0.5), rng.random_range(0.2..0.5));
    for i in 0..size {
        for j in 0..size {
            let v = 40.0 + 80.0 * ((i as f64) * fa).sin() * ((j as f64) * fb).cos();
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            nd.push(v);
            ld.push(v + sign * rng.random_range(40.0..80.0));
        }
    }
    Ok(PatchPair {
        ldct: GridImage::from_f64(size, size, 0.7, 0.7, &ld)?,
        ndct: GridImage::from_f64(size, size, 0.7, 0.7, &nd)?,
        corner: (0, 0),
        key: seed,
    })
}

/// Central-difference audit of the analytic gradients on a sampled parameter subset
/// covering every tensor.
pub fn grad_check(net: &NetConfig, loss: &LossConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradReport> {
    let run = RunConfig {
        net: NetConfig { seed, ..net.clone() },
        loss: opts.objective.loss_config(loss),
        train: TrainConfig::default(),
    };
    run.net.validate()?;
    let mut store = run.init_store()?;
    randomize_for_check(&mut store, seed ^ 0xfd);
    let objective = Objective::new(run.loss.clone())?;
    let epoch = run.loss.weights.nps_warmup_epochs;
    let sample = check_pair(opts.size, seed)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        Ok(sample_gradients(s, &run.net, &objective, &sample, epoch, false)?.0.total)
    };
    let (_, analytic) = sample_gradients(&store, &run.net, &objective, &sample, epoch, false)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let n_tensors = store.len();
    let per_tensor = opts.min_samples.div_ceil(n_tensors).max(1);
    let mut entries = Vec::with_capacity(n_tensors);
    let mut checked = 0;
    let mut overall: f64 = 0.0;
    for i in 0..n_tensors {
        let len = store.get(i).len();
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_tensor.min(len));
        let mut worst: f64 = 0.0;
        let mut worst_pair = (0.0, 0.0);
        for &k in &idx {
            let mut central = |h: f64| -> Result<f64> {
                let orig = store.get(i).data()[k];
                store.get_mut(i).data_mut()[k] = orig + h;
                let fp = eval(&store);
                store.get_mut(i).data_mut()[k] = orig - h;
                let fm = eval(&store);
                store.get_mut(i).data_mut()[k] = orig;
                Ok((fp? - fm?) / (2.0 * h))
            };
            let coarse = central(opts.step)?;
            let num = if opts.richardson {
                (4.0 * central(opts.step / 2.0)? - coarse) / 3.0
            } else {
                coarse
            };
            let a = analytic[i].data()[k];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            if rel >= worst {
                worst = rel;
                worst_pair = (a, num);
            }
        }
        checked += idx.len();
        overall = overall.max(worst);
        entries.push(GradEntry {
            name: store.name(i).to_string(),
            checked: idx.len(),
            max_rel_err: worst,
            worst: worst_pair,
        });
    }
    Ok(GradReport {
        entries,
        checked,
        overall_max: overall,
        params: store.numel(),
    })
}

/// Grad-check configuration that fits in 5000 parameters: one base channel, two
/// scales, a two-channel loss network.
pub fn toy_configs() -> (NetConfig, LossConfig) {
    let mut net = NetConfig {
        channels: 1,
        msc_scales: 2,
        fdam_basis: 3,
        ..NetConfig::default()
    };
    net.czss.state_size = 2;
    net.czss.expansion = 2;
    let mut loss = LossConfig::default();
    loss.ufeature.base_channels = 2;
    loss.refine_state = 2;
    (net, loss)
}

/// Names of loss-network parameters (used to check the warmup gate).
pub fn is_loss_param(name: &str) -> bool {
    name.starts_with(NPS_PREFIX)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, 100, &c).unwrap(), 1e-3);
        assert!((lr_at(100, 100, &c).unwrap() - 1e-6).abs() < 1e-18);
        assert!((lr_at(50, 100, &c).unwrap() - (1e-3 + 1e-6) / 2.0).abs() < 1e-15);
        assert!(lr_at(101, 100, &c).is_err());
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let cfg = TrainConfig::default();
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(0.5)).unwrap();
        let mut opt = AdamW::new(&cfg, &s);
        let (g, lr) = (0.3, 1e-2);
        opt.update(&mut s, &[vec![g]], lr).unwrap();
        // After bias correction m_hat = g and v_hat = g^2.
        let decayed = 0.5 - lr * 0.02 * 0.5;
        let expect = decayed - lr * g / (g.abs() + 1e-8);
        assert!((s.get(0).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn adamw_no_decay_no_gradient_is_fixed_point() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
        let before = s.clone();
        let mut opt = AdamW::new(&cfg, &s);
        for _ in 0..3 {
            opt.update(&mut s, &[vec![0.0; 3]], 1e-2).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn patches_are_aligned_and_seeded() {
        let ld = GridImage::new(80, 70, 1.0, 1.0, (0..5600).map(|v| v as f32).collect()).unwrap();
        let nd = GridImage::new(80, 70, 1.0, 1.0, (0..5600).map(|v| -(v as f32)).collect()).unwrap();
        let pair = ImagePair {
            name: "a".into(),
            ldct: ld,
            ndct: nd,
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = sample_patches(&pair, 4, 64, &mut r1).unwrap();
        assert_eq!(a, sample_patches(&pair, 4, 64, &mut r2).unwrap());
        for p in &a {
            assert!(p.ldct.data.iter().zip(&p.ndct.data).all(|(x, y)| *x == -*y));
            let (t, l) = p.corner;
            assert_eq!(p.ldct.data[0], (t * 70 + l) as f32);
        }
        let small = pair.ldct.crop(0, 0, 64, 64).unwrap();
        let full = ImagePair {
            name: "b".into(),
            ldct: small.clone(),
            ndct: small,
        };
        for p in sample_patches(&full, 4, 64, &mut r1).unwrap() {
            assert_eq!(p.corner, (0, 0));
        }
        assert!(sample_patches(&full, 1, 65, &mut r1).is_err());
    }

    #[test]
    fn order_invariant_sum_ignores_permutation() {
        let mut a = vec![1e16, 1.0, -1e16, 3.5, 1e-8, -2.25];
        let mut b = vec![-2.25, 1e-8, 3.5, -1e16, 1.0, 1e16];
        assert_eq!(order_invariant_sum(&mut a).to_bits(), order_invariant_sum(&mut b).to_bits());
        let mut c = vec![1e16, 1.0, -1e16];
        assert_eq!(order_invariant_sum(&mut c), 1.0);
    }

    #[test]
    fn toy_fits_parameter_budget() {
        let (net, loss) = toy_configs();
        let run = RunConfig {
            net,
            loss,
            train: TrainConfig::default(),
        };
        let n = run.init_store().unwrap().numel();
        assert!(n <= 5000, "toy has {n} parameters");
    }
}
