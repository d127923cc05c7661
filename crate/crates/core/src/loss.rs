//! Training objective: pixel L1, the deep radial-NPS loss with its shared
//! u-shaped feature extractor, and a frozen random-pyramid perceptual term.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{param_err, shape_err, Result};
use crate::network::{Ctx, Init};
use crate::nps::RadialLayout;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Prefix of every loss-network parameter in the store.
pub const NPS_PREFIX: &str = "nps.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UFeatureConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for UFeatureConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
        }
    }
}

impl UFeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(param_err!("u-feature depth and channels must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lambda3: f64,
    pub nps_warmup_epochs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            gamma1: 1e-4,
            gamma2: 1e-2,
            lambda3: 1e-2,
            nps_warmup_epochs: 10,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("lambda1", self.lambda1),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(param_err!("loss weight {n} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn nps_enabled(&self) -> bool {
        self.gamma1 > 0.0 || self.gamma2 > 0.0
    }
}

/// How noise images are turned into features before the NPS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    /// u-feature net and radial refinement trained with the denoiser.
    Joint,
    /// Same networks, parameters held fixed.
    Frozen,
    /// Raw noise, no refinement.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub ufeature: UFeatureConfig,
    pub phi: PhiMode,
    /// State size of the radial-curve refinement scan.
    pub refine_state: usize,
    /// HU per unit for the pixel and perceptual terms.
    pub image_scale: f64,
    /// HU per unit for noise images entering the feature net.
    pub noise_scale: f64,
    pub detrend: bool,
    pub perceptual_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            ufeature: UFeatureConfig::default(),
            phi: PhiMode::Joint,
            refine_state: 4,
            image_scale: 1000.0,
            noise_scale: 100.0,
            detrend: true,
            perceptual_seed: 0x5eed,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.ufeature.validate()?;
        if self.refine_state == 0 {
            return Err(param_err!("refine_state must be >= 1"));
        }
        if !(self.image_scale > 0.0 && self.noise_scale > 0.0) {
            return Err(param_err!("image and noise scales must be positive"));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        match self.phi {
            PhiMode::Identity => 1,
            _ => self.ufeature.base_channels,
        }
    }
}

fn ufeature_channels(cfg: &UFeatureConfig, level: usize) -> usize {
    cfg.base_channels << level
}

/// Adds the u-feature net and refinement parameters under [`NPS_PREFIX`].
pub fn init_loss_params(store: &mut ParamStore, cfg: &LossConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    if cfg.phi == PhiMode::Identity {
        return Ok(());
    }
    let mut init = Init::new(store, seed);
    let u = &cfg.ufeature;
    init.conv("nps.enc0", u.base_channels, 1, 3, true)?;
    for l in 1..=u.depth {
        init.conv(
            &format!("nps.enc{l}"),
            ufeature_channels(u, l),
            ufeature_channels(u, l - 1),
            3,
            true,
        )?;
    }
    for l in (0..u.depth).rev() {
        let cin = ufeature_channels(u, l + 1) + ufeature_channels(u, l);
        init.conv(&format!("nps.dec{l}"), ufeature_channels(u, l), cin, 3, true)?;
    }
    init.ssm("nps.refine", u.base_channels, cfg.refine_state, 1)?;
    Ok(())
}

/// Fixed 3x3 box filter applied per channel.
fn box_filter(tape: &mut Tape, x: Var) -> Result<Var> {
    let c = tape.value(x).shape()[0];
    let w = tape.constant(Tensor::full(&[c, 1, 3, 3], 1.0 / 9.0));
    tape.conv2d(x, w, None, 1, 1, c)
}

/// U-shaped feature extractor on a `[1, H, W]` noise image; skips carry
/// box-filtered encoder features. Output is `[base_channels, H, W]`.
pub fn u_feature_forward(ctx: &mut Ctx<'_>, noise: Var, cfg: &UFeatureConfig) -> Result<Var> {
    cfg.validate()?;
    let (c, h, w) = ctx.tape.value(noise).chw()?;
    let m = 1 << cfg.depth;
    if c != 1 || h % m != 0 || w % m != 0 {
        return Err(shape_err!("u-feature net needs a [1, H, W] input with H, W divisible by {m}, got {:?}", ctx.tape.value(noise).shape()));
    }
    let mut skips = Vec::with_capacity(cfg.depth + 1);
    let e = ctx.conv(noise, "nps.enc0", 1, 1, true)?;
    let mut cur = ctx.tape.silu(e);
    for l in 1..=cfg.depth {
        skips.push(cur);
        let p = ctx.tape.avg_pool2(cur)?;
        let e = ctx.conv(p, &format!("nps.enc{l}"), 1, 1, true)?;
        cur = ctx.tape.silu(e);
    }
    for l in (0..cfg.depth).rev() {
        let up = ctx.tape.upsample2(cur)?;
        let skip = box_filter(ctx.tape, skips[l])?;
        let cat = ctx.tape.concat(&[up, skip])?;
        let d = ctx.conv(cat, &format!("nps.dec{l}"), 1, 1, true)?;
        cur = ctx.tape.silu(d);
    }
    Ok(cur)
}

/// Radial NPS of each feature channel, optionally refined by a selective scan
/// running from low to high frequency. Returns `[C, bins]`.
fn radial_features(ctx: &mut Ctx<'_>, noise: Var, cfg: &LossConfig, layout: &Rc<RadialLayout>, px: f64, py: f64) -> Result<Var> {
    let feats = match cfg.phi {
        PhiMode::Identity => noise,
        _ => u_feature_forward(ctx, noise, &cfg.ufeature)?,
    };
    let nps = ctx.tape.nps2d(feats, px, py, cfg.detrend)?;
    let radial = ctx.tape.radialize(nps, layout.clone())?;
    if cfg.phi == PhiMode::Identity {
        return Ok(radial);
    }
    let shape = ctx.tape.value(radial).shape().to_vec();
    let (c, nb) = (shape[0], shape[1]);
    let seq = ctx.tape.reshape(radial, &[c, 1, nb])?;
    let order = Rc::new((0..nb).collect::<Vec<_>>());
    let refined = ctx.selective_ssm(seq, "nps.refine", &[order])?;
    let refined = ctx.tape.reshape(refined, &[c, nb])?;
    ctx.tape.add(radial, refined)
}

/// Deep NPS loss between reference noise `ldct - ndct` and predicted noise
/// `ldct - pred` (all `[1, H, W]` in HU).
pub fn deep_nps_loss(
    ctx: &mut Ctx<'_>,
    ldct: Var,
    ndct: Var,
    pred: Var,
    cfg: &LossConfig,
    px: f64,
    py: f64,
) -> Result<Var> {
    let w = &cfg.weights;
    if w.gamma1 < 0.0 || w.gamma2 < 0.0 {
        return Err(param_err!("NPS weights must be nonnegative"));
    }
    let s = ctx.tape.value(ldct).shape().to_vec();
    if ctx.tape.value(ndct).shape() != s || ctx.tape.value(pred).shape() != s {
        return Err(shape_err!("noise pair images differ in shape"));
    }
    if !w.nps_enabled() {
        return Ok(ctx.tape.constant(Tensor::scalar(0.0)));
    }
    let (_, h, wd) = ctx.tape.value(ldct).chw()?;
    let layout = Rc::new(RadialLayout::new(h, wd, px, py, None)?);
    let k = 1.0 / cfg.noise_scale;
    let gt = ctx.tape.sub(ldct, ndct)?;
    let gt = ctx.tape.scale(gt, k);
    let pr = ctx.tape.sub(ldct, pred)?;
    let pr = ctx.tape.scale(pr, k);
    let freeze = cfg.phi == PhiMode::Frozen;
    let prev = ctx.freeze_prefix(freeze.then(|| NPS_PREFIX.to_string()));
    let r_gt = radial_features(ctx, gt, cfg, &layout, px, py);
    let r_pr = r_gt.and_then(|g| Ok((g, radial_features(ctx, pr, cfg, &layout, px, py)?)));
    ctx.freeze_prefix(prev);
    let (r_gt, r_pr) = r_pr?;

    let diff = ctx.tape.sub(r_gt, r_pr)?;
    let ad = ctx.tape.abs(diff);
    let l1 = ctx.tape.mean(ad);
    let l1 = ctx.tape.scale(l1, w.gamma1);

    let c = ctx.tape.value(r_gt).shape()[0];
    let mut corr: Option<Var> = None;
    for ch in 0..c {
        let a = ctx.tape.slice_channels(r_gt, ch, 1)?;
        let b = ctx.tape.slice_channels(r_pr, ch, 1)?;
        let rho = ctx.tape.pearson(a, b)?;
        let neg = ctx.tape.scale(rho, -1.0);
        let term = ctx.tape.add_scalar(neg, 1.0);
        corr = Some(match corr {
            Some(acc) => ctx.tape.add(acc, term)?,
            None => term,
        });
    }
    let corr = corr.ok_or_else(|| shape_err!("no feature channels"))?;
    let corr = ctx.tape.scale(corr, w.gamma2 / c as f64);
    ctx.tape.add(l1, corr)
}

/// Mean absolute difference.
pub fn l1_loss(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
    let d = tape.sub(y_hat, y)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Frozen, seed-determined 4-stage stride-2 convolutional pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct Perceptual {
    weights: Vec<Tensor>,
}

pub const PERCEPTUAL_WIDTHS: [usize; 4] = [8, 16, 16, 16];

impl Perceptual {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 1;
        let weights = PERCEPTUAL_WIDTHS
            .iter()
            .map(|&co| {
                let bound = (3.0 / (cin * 9) as f64).sqrt();
                let data = (0..co * cin * 9).map(|_| rng.random_range(-bound..bound)).collect();
                let t = Tensor::new(&[co, cin, 3, 3], data).expect("pyramid weight shape");
                cin = co;
                t
            })
            .collect();
        Self { weights }
    }

    fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.weights.len());
        let mut cur = x;
        for w in &self.weights {
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(cur, wv, None, 2, 1, 1)?;
            cur = tape.silu(y);
            out.push(cur);
        }
        Ok(out)
    }

    /// Sum over stages of the L2 norm of the feature difference.
    pub fn loss(&self, tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
        if tape.value(y).shape() != tape.value(y_hat).shape() {
            return Err(shape_err!("perceptual inputs differ in shape"));
        }
        let fy = self.features(tape, y)?;
        let fh = self.features(tape, y_hat)?;
        let mut total: Option<Var> = None;
        for (a, b) in fy.into_iter().zip(fh) {
            let d = tape.sub(a, b)?;
            let n = tape.norm2(d);
            total = Some(match total {
                Some(t) => tape.add(t, n)?,
                None => n,
            });
        }
        Ok(total.expect("four stages"))
    }
}

/// Scalar values of the objective's terms (unweighted except `total`).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    /// Weighted deep NPS term (its weights are part of the term); 0 during warmup.
    pub nps: f64,
    pub perceptual: f64,
}

/// The full objective with its frozen perceptual pyramid.
#[derive(Clone, Debug)]
pub struct Objective {
    pub cfg: LossConfig,
    perceptual: Perceptual,
}

impl Objective {
    pub fn new(cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        let perceptual = Perceptual::new(cfg.perceptual_seed);
        Ok(Self { cfg, perceptual })
    }

    pub fn nps_active(&self, epoch: usize) -> bool {
        epoch >= self.cfg.weights.nps_warmup_epochs && self.cfg.weights.nps_enabled()
    }

    /// `lambda1 * L1 + [epoch >= warmup] * deep NPS + lambda3 * perceptual`.
    #[allow(clippy::too_many_arguments)]
    pub fn total(
        &self,
        ctx: &mut Ctx<'_>,
        ldct: Var,
        ndct: Var,
        pred: Var,
        epoch: usize,
        px: f64,
        py: f64,
    ) -> Result<(Var, LossTerms)> {
        let w = &self.cfg.weights;
        let k = 1.0 / self.cfg.image_scale;
        let yn = ctx.tape.scale(ndct, k);
        let pn = ctx.tape.scale(pred, k);
        let l1 = l1_loss(ctx.tape, yn, pn)?;
        let mut terms = LossTerms {
            l1: ctx.tape.value(l1).item(),
            ..LossTerms::default()
        };
        let mut total = ctx.tape.scale(l1, w.lambda1);
        if self.nps_active(epoch) {
            let nps = deep_nps_loss(ctx, ldct, ndct, pred, &self.cfg, px, py)?;
            terms.nps = ctx.tape.value(nps).item();
            total = ctx.tape.add(total, nps)?;
        }
        if w.lambda3 > 0.0 {
            let p = self.perceptual.loss(ctx.tape, yn, pn)?;
            terms.perceptual = ctx.tape.value(p).item();
            let p = ctx.tape.scale(p, w.lambda3);
            total = ctx.tape.add(total, p)?;
        }
        terms.total = ctx.tape.value(total).item();
        Ok((total, terms))
    }
}

/// Plain-value L1 between two images.
pub fn l1_value(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(shape_err!("l1 inputs of {} and {} values", y.len(), y_hat.len()));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (b - a).abs()).sum::<f64>() / y.len() as f64)
}

/// Plain-value perceptual surrogate between two `h x w` images.
pub fn perceptual_surrogate(y: &[f64], y_hat: &[f64], h: usize, w: usize, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(&[1, h, w], y.to_vec())?);
    let b = tape.constant(Tensor::new(&[1, h, w], y_hat.to_vec())?);
    let l = Perceptual::new(seed).loss(&mut tape, a, b)?;
    Ok(tape.value(l).item())
}

/// Plain-value deep NPS loss with the given loss parameters.
#[allow(clippy::too_many_arguments)]
pub fn deep_nps_value(
    store: &ParamStore,
    cfg: &LossConfig,
    ldct: &[f64],
    ndct: &[f64],
    pred: &[f64],
    h: usize,
    w: usize,
    px: f64,
    py: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, false);
    let mk = |ctx: &mut Ctx<'_>, d: &[f64]| -> Result<Var> { Ok(ctx.tape.constant(Tensor::new(&[1, h, w], d.to_vec())?)) };
    let (a, b, c) = (mk(&mut ctx, ldct)?, mk(&mut ctx, ndct)?, mk(&mut ctx, pred)?);
    let l = deep_nps_loss(&mut ctx, a, b, c, cfg, px, py)?;
    Ok(tape.value(l).item())
}
