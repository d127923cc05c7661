//! The denoiser: progressive feature extraction, a Haar split into four bands,
//! Fourier gating on the low band, cross-band high-frequency fusion, a multi-scale
//! stack of Z-scan state-space blocks per band, fusion and a global residual.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{param_err, shape_err, Error, Result};
use crate::fft::signed_index;
use crate::params::ParamStore;
use crate::scan_order::{four_paths, ScanKind};
use crate::ssm::softplus_inverse;
use crate::tensor::Tensor;

/// Hyperparameters of one Z-scan state-space block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CzssConfig {
    pub channels: usize,
    pub state_size: usize,
    pub drop_path_rate: f64,
    pub expansion: usize,
    /// Rank of the step-size projection; 0 picks `ceil(inner / 16)`.
    pub dt_rank: usize,
}

impl Default for CzssConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            state_size: 8,
            drop_path_rate: 0.0,
            expansion: 2,
            dt_rank: 0,
        }
    }
}

impl CzssConfig {
    pub fn inner(&self) -> usize {
        self.expansion * self.channels
    }

    pub fn rank(&self) -> usize {
        if self.dt_rank > 0 {
            self.dt_rank
        } else {
            self.inner().div_ceil(16).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.state_size == 0 || self.expansion == 0 {
            return Err(param_err!("block channels, state size and expansion must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(param_err!("drop path rate {} outside [0, 1)", self.drop_path_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Base feature width `C`.
    pub channels: usize,
    /// Number of resolutions per band stack (1 to 3): C, 4C, 16C channels.
    pub msc_scales: usize,
    pub czss_blocks: usize,
    /// Block hyperparameters; `channels` is overridden per scale.
    pub czss: CzssConfig,
    pub scan: ScanKind,
    /// Radial hat functions parameterizing the low-band spectral gains.
    pub fdam_basis: usize,
    /// HU per network unit; inputs are divided by it and the residual multiplied.
    pub hu_scale: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            msc_scales: 3,
            czss_blocks: 1,
            czss: CzssConfig::default(),
            scan: ScanKind::Zigzag,
            fdam_basis: 6,
            hu_scale: 1000.0,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.czss_blocks == 0 {
            return Err(param_err!("channels and blocks per scale must be >= 1"));
        }
        if !(1..=3).contains(&self.msc_scales) {
            return Err(param_err!("msc_scales must be 1, 2 or 3, got {}", self.msc_scales));
        }
        if self.fdam_basis < 2 {
            return Err(param_err!("fdam_basis must be >= 2"));
        }
        if !(self.hu_scale > 0.0 && self.hu_scale.is_finite()) {
            return Err(param_err!("hu_scale must be positive"));
        }
        self.czss.validate()
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.msc_scales.max(2)
    }

    pub fn czss_at(&self, scale: usize) -> CzssConfig {
        CzssConfig {
            channels: self.channels << (2 * scale),
            ..self.czss.clone()
        }
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(shape_err!("input {h}x{w} must be a nonzero multiple of {m} in both dims"));
        }
        Ok(())
    }
}

pub const BANDS: [&str; 4] = ["ll", "lh", "hl", "hh"];

/// Parameter initializer writing into a store.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Fan-in scaled uniform weights `[co, ci/groups, k, k]` and optional zero bias.
    pub fn conv(&mut self, name: &str, co: usize, ci_per_group: usize, k: usize, bias: bool) -> Result<()> {
        let fan_in = (ci_per_group * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = co * ci_per_group * k * k;
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.add(format!("{name}.w"), Tensor::new(&[co, ci_per_group, k, k], data)?)?;
        if bias {
            self.store.add(format!("{name}.b"), Tensor::zeros(&[co]))?;
        }
        Ok(())
    }

    pub fn zero_conv(&mut self, name: &str, co: usize, ci: usize, k: usize) -> Result<()> {
        self.store.add(format!("{name}.w"), Tensor::zeros(&[co, ci, k, k]))?;
        self.store.add(format!("{name}.b"), Tensor::zeros(&[co]))?;
        Ok(())
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.store.add(format!("{name}.g"), Tensor::full(&[c], 1.0))?;
        self.store.add(format!("{name}.b"), Tensor::zeros(&[c]))?;
        Ok(())
    }

    /// Input-dependent projections and dynamics of a selective scan over `d` channels.
    pub fn ssm(&mut self, name: &str, d: usize, n: usize, rank: usize) -> Result<()> {
        self.conv(&format!("{name}.x_proj"), rank + 2 * n, d, 1, false)?;
        self.conv(&format!("{name}.dt_proj"), d, rank, 1, false)?;
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let dt_bias = (0..d)
            .map(|_| softplus_inverse(self.rng.random_range(lo..hi).exp()))
            .collect();
        self.store.add(format!("{name}.dt_proj.b"), Tensor::new(&[d], dt_bias)?)?;
        let a_log = (0..n).map(|i| ((i + 1) as f64).ln()).collect();
        self.store.add(format!("{name}.a_log"), Tensor::new(&[n], a_log)?)?;
        self.store.add(format!("{name}.d_skip"), Tensor::full(&[d], 1.0))?;
        Ok(())
    }

    fn czss(&mut self, name: &str, cfg: &CzssConfig) -> Result<()> {
        let (c, d) = (cfg.channels, cfg.inner());
        self.conv(&format!("{name}.res1"), c, c, 3, true)?;
        self.conv(&format!("{name}.res2"), c, c, 3, true)?;
        self.layer_norm(&format!("{name}.ln1"), c)?;
        self.conv(&format!("{name}.lin_in"), d, c, 1, true)?;
        self.conv(&format!("{name}.dw"), d, 1, 3, true)?;
        self.ssm(&format!("{name}.ssm"), d, cfg.state_size, cfg.rank())?;
        self.layer_norm(&format!("{name}.ln2"), d)?;
        self.conv(&format!("{name}.lin_out"), c, d, 1, true)?;
        Ok(())
    }

    fn hfen(&mut self, name: &str, cin: usize, c: usize) -> Result<()> {
        self.conv(&format!("{name}.local"), c, cin, 3, true)?;
        self.conv(&format!("{name}.pooled"), c, cin, 3, true)?;
        self.conv(&format!("{name}.fuse"), c, 2 * c, 1, true)?;
        Ok(())
    }
}

/// Builds every learnable tensor of the denoiser.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed);
    let c = cfg.channels;
    init.conv("pfen.c1", c, 1, 3, true)?;
    init.conv("pfen.c2", c, c, 3, true)?;
    init.conv("pfen.fuse", c, c + 1, 1, true)?;
    let theta = vec![softplus_inverse(1.0); c * cfg.fdam_basis];
    init.store
        .add("fdam.theta", Tensor::new(&[c, cfg.fdam_basis, 1, 1], theta)?)?;
    init.hfen("hfen.d", 2 * c, c)?;
    init.hfen("hfen.h", c, c)?;
    init.hfen("hfen.v", c, c)?;
    for band in BANDS {
        for s in 0..cfg.msc_scales {
            let bc = cfg.czss_at(s);
            for b in 0..cfg.czss_blocks {
                init.czss(&format!("msc.{band}.s{s}.b{b}"), &bc)?;
            }
        }
    }
    init.conv("pffn.c1", c, 2 * c, 3, true)?;
    init.zero_conv("pffn.out", 1, c, 3)?;
    Ok(store)
}

/// Forward-pass context: which store to read, whether parameters are
/// differentiable leaves, and the DropPath random stream in training mode.
pub struct Ctx<'t> {
    pub tape: &'t mut Tape,
    store: &'t ParamStore,
    grads: bool,
    drop_rng: Option<&'t mut ChaCha8Rng>,
    frozen: Option<String>,
    orders: HashMap<(ScanKind, usize, usize), Rc<Vec<Rc<Vec<usize>>>>>,
}

impl<'t> Ctx<'t> {
    /// Evaluation context; parameters still receive gradients when `grads` is set.
    pub fn new(tape: &'t mut Tape, store: &'t ParamStore, grads: bool) -> Self {
        Self {
            tape,
            store,
            grads,
            drop_rng: None,
            frozen: None,
            orders: HashMap::new(),
        }
    }

    /// Training context: DropPath draws from `rng`.
    pub fn train(tape: &'t mut Tape, store: &'t ParamStore, rng: &'t mut ChaCha8Rng) -> Self {
        Self {
            drop_rng: Some(rng),
            ..Self::new(tape, store, true)
        }
    }

    pub fn is_train(&self) -> bool {
        self.drop_rng.is_some()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Parameters whose names start with `prefix` become constants; returns the
    /// previous setting.
    pub fn freeze_prefix(&mut self, prefix: Option<String>) -> Option<String> {
        std::mem::replace(&mut self.frozen, prefix)
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| param_err!("missing parameter {name}"))?;
        let frozen = self.frozen.as_deref().is_some_and(|f| name.starts_with(f));
        Ok(if self.grads && !frozen {
            self.tape.param(id, self.store.get(id))
        } else {
            self.tape.constant(self.store.get(id).clone())
        })
    }

    pub fn conv(&mut self, x: Var, name: &str, pad: usize, groups: usize, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = if bias {
            Some(self.p(&format!("{name}.b"))?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, 1, pad, groups)
    }

    pub fn layer_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.g"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.tape.layer_norm(x, g, b)
    }

    fn four_orders(&mut self, kind: ScanKind, h: usize, w: usize) -> Result<Rc<Vec<Rc<Vec<usize>>>>> {
        if let Some(o) = self.orders.get(&(kind, h, w)) {
            return Ok(o.clone());
        }
        let paths = four_paths(kind, h, w)?;
        let o: Rc<Vec<Rc<Vec<usize>>>> = Rc::new(paths.iter().map(|p| Rc::new(p.flat_indices())).collect());
        self.orders.insert((kind, h, w), o.clone());
        Ok(o)
    }

    /// Selective state-space core over `u: [D, ..]`: input-dependent B, C and step
    /// sizes, one scan per order sharing those parameters, averaged, plus skip.
    pub fn selective_ssm(&mut self, u: Var, name: &str, orders: &[Rc<Vec<usize>>]) -> Result<Var> {
        let n = self.store.by_name(&format!("{name}.a_log")).map(Tensor::len).unwrap_or(0);
        let xdbl = self.conv(u, &format!("{name}.x_proj"), 0, 1, false)?;
        let rank = self.tape.value(xdbl).shape()[0] - 2 * n;
        let dt_in = self.tape.slice_channels(xdbl, 0, rank)?;
        let bm = self.tape.slice_channels(xdbl, rank, n)?;
        let cm = self.tape.slice_channels(xdbl, rank + n, n)?;
        let dt_pre = self.conv(dt_in, &format!("{name}.dt_proj"), 0, 1, true)?;
        let dt = self.tape.softplus(dt_pre);
        let a_log = self.p(&format!("{name}.a_log"))?;
        let ea = self.tape.exp(a_log);
        let a = self.tape.scale(ea, -1.0);
        let mut acc: Option<Var> = None;
        for order in orders {
            let y = self.tape.selective_scan(u, dt, a, bm, cm, order.clone())?;
            acc = Some(match acc {
                Some(s) => self.tape.add(s, y)?,
                None => y,
            });
        }
        let sum = acc.ok_or_else(|| param_err!("selective scan needs at least one order"))?;
        let mean = self.tape.scale(sum, 1.0 / orders.len() as f64);
        let d_skip = self.p(&format!("{name}.d_skip"))?;
        let skip = self.tape.mul_channel(u, d_skip)?;
        self.tape.add(mean, skip)
    }
}

/// Two-level feature extraction with the raw image appended before a 1x1 fusion.
pub fn pfen_forward(ctx: &mut Ctx<'_>, image: Var) -> Result<Var> {
    let (c, _, _) = ctx.tape.value(image).chw()?;
    if c != 1 || ctx.tape.value(image).ndim() != 3 {
        return Err(shape_err!("feature extraction expects a [1, H, W] image, got {:?}", ctx.tape.value(image).shape()));
    }
    let f1 = ctx.conv(image, "pfen.c1", 1, 1, true)?;
    let f1 = ctx.tape.silu(f1);
    let f2 = ctx.conv(f1, "pfen.c2", 1, 1, true)?;
    let f2 = ctx.tape.silu(f2);
    let cat = ctx.tape.concat(&[f2, image])?;
    ctx.conv(cat, "pfen.fuse", 0, 1, true)
}

/// Residual block, norm, linear, depthwise conv, SiLU, four-path Z-scan SSM, norm,
/// SiLU, linear with DropPath, added back to the residual stream.
pub fn czss_forward(ctx: &mut Ctx<'_>, x: Var, name: &str, cfg: &CzssConfig, kind: ScanKind) -> Result<Var> {
    let (c, h, w) = ctx.tape.value(x).chw()?;
    if c != cfg.channels {
        return Err(shape_err!("block {name} expects {} channels, got {c}", cfg.channels));
    }
    let r1 = ctx.conv(x, &format!("{name}.res1"), 1, 1, true)?;
    let r1 = ctx.tape.silu(r1);
    let r2 = ctx.conv(r1, &format!("{name}.res2"), 1, 1, true)?;
    let res = ctx.tape.add(x, r2)?;

    let drop = match ctx.drop_rng.as_deref_mut() {
        Some(rng) if cfg.drop_path_rate > 0.0 => Some(rng.random::<f64>() < cfg.drop_path_rate),
        _ => None,
    };
    if drop == Some(true) {
        return Ok(res);
    }

    let n1 = ctx.layer_norm(res, &format!("{name}.ln1"))?;
    let u0 = ctx.conv(n1, &format!("{name}.lin_in"), 0, 1, true)?;
    let d = cfg.inner();
    let u1 = ctx.conv(u0, &format!("{name}.dw"), 1, d, true)?;
    let u = ctx.tape.silu(u1);
    let orders = ctx.four_orders(kind, h, w)?;
    let y = ctx.selective_ssm(u, &format!("{name}.ssm"), &orders)?;
    let n2 = ctx.layer_norm(y, &format!("{name}.ln2"))?;
    let s = ctx.tape.silu(n2);
    let mut o = ctx.conv(s, &format!("{name}.lin_out"), 0, 1, true)?;
    if drop == Some(false) {
        o = ctx.tape.scale(o, 1.0 / (1.0 - cfg.drop_path_rate));
    }
    let out = ctx.tape.add(res, o)?;
    if !ctx.tape.value(out).is_finite() {
        return Err(Error::NonFinite(format!("block {name}")));
    }
    Ok(out)
}

/// Per-band multi-scale stack: scale `s` runs at `H/2^s x W/2^s` with `4^s C`
/// channels via space-to-depth; results are summed at full resolution.
pub fn msc_mamba_forward(ctx: &mut Ctx<'_>, x: Var, band: &str, cfg: &NetConfig) -> Result<Var> {
    let (_, h, w) = ctx.tape.value(x).chw()?;
    let m = 1 << (cfg.msc_scales - 1);
    if h % m != 0 || w % m != 0 {
        return Err(shape_err!("band {h}x{w} is not divisible by {m}"));
    }
    let mut cur = x;
    let mut total: Option<Var> = None;
    for s in 0..cfg.msc_scales {
        if s > 0 {
            cur = ctx.tape.space_to_depth(cur)?;
        }
        let bc = cfg.czss_at(s);
        for b in 0..cfg.czss_blocks {
            cur = czss_forward(ctx, cur, &format!("msc.{band}.s{s}.b{b}"), &bc, cfg.scan)?;
        }
        let mut up = cur;
        for _ in 0..s {
            up = ctx.tape.depth_to_space(up)?;
        }
        total = Some(match total {
            Some(t) => ctx.tape.add(t, up)?,
            None => up,
        });
    }
    total.ok_or_else(|| param_err!("no scales"))
}

fn hfen(ctx: &mut Ctx<'_>, x: Var, name: &str) -> Result<Var> {
    let a = ctx.conv(x, &format!("{name}.local"), 1, 1, true)?;
    let a = ctx.tape.silu(a);
    let p = ctx.tape.avg_pool2(x)?;
    let b = ctx.conv(p, &format!("{name}.pooled"), 1, 1, true)?;
    let b = ctx.tape.silu(b);
    let b = ctx.tape.upsample2(b)?;
    let cat = ctx.tape.concat(&[a, b])?;
    ctx.conv(cat, &format!("{name}.fuse"), 0, 1, true)
}

/// Cross-band fusion: the diagonal band absorbs the horizontal and vertical ones
/// and feeds each of them back.
pub fn hfen_fuse(ctx: &mut Ctx<'_>, lh: Var, hl: Var, hh: Var) -> Result<(Var, Var, Var)> {
    let s = ctx.tape.value(lh).shape().to_vec();
    if ctx.tape.value(hl).shape() != s || ctx.tape.value(hh).shape() != s {
        return Err(shape_err!("high bands differ in shape"));
    }
    let lhhl = ctx.tape.concat(&[lh, hl])?;
    let to_d = hfen(ctx, lhhl, "hfen.d")?;
    let to_h = hfen(ctx, hh, "hfen.h")?;
    let to_v = hfen(ctx, hh, "hfen.v")?;
    let hh2 = ctx.tape.add(hh, to_d)?;
    let lh2 = ctx.tape.add(lh, to_h)?;
    let hl2 = ctx.tape.add(hl, to_v)?;
    Ok((lh2, hl2, hh2))
}

/// Radial hat functions on the half spectrum, `[K, 1, H * (W/2 + 1)]`; they sum to 1
/// at every frequency.
pub fn fdam_basis(k: usize, h: usize, w: usize) -> Tensor {
    let half = w / 2 + 1;
    let mut data = vec![0.0; k * h * half];
    let rmax = 0.5f64.sqrt();
    for u in 0..h {
        let fu = signed_index(u, h) / h as f64;
        for v in 0..half {
            let fv = v as f64 / w as f64;
            let rho = ((fu * fu + fv * fv).sqrt() / rmax).min(1.0);
            let pos = rho * (k - 1) as f64;
            for j in 0..k {
                data[j * h * half + u * half + v] = (1.0 - (pos - j as f64).abs()).max(0.0);
            }
        }
    }
    Tensor::new(&[k, 1, h * half], data).expect("basis shape")
}

/// Frequency-domain gating of the low band with learned radial gains.
pub fn fdam_forward(ctx: &mut Ctx<'_>, x: Var, cfg: &NetConfig) -> Result<Var> {
    let (c, h, w) = ctx.tape.value(x).chw()?;
    let basis = ctx.tape.constant(fdam_basis(cfg.fdam_basis, h, w));
    let theta = ctx.p("fdam.theta")?;
    let pre = ctx.tape.conv2d(basis, theta, None, 1, 0, 1)?;
    let gains = ctx.tape.softplus(pre);
    let gains = ctx.tape.reshape(gains, &[c, h, w / 2 + 1])?;
    ctx.tape.fourier_gate(x, gains)
}

/// Full denoiser on a `[1, H, W]` image in HU; returns the denoised image in HU.
pub fn ct_mamba_forward(ctx: &mut Ctx<'_>, ldct: Var, cfg: &NetConfig) -> Result<Var> {
    let (_, h, w) = ctx.tape.value(ldct).chw()?;
    cfg.check_input(h, w)?;
    let c = cfg.channels;
    let x = ctx.tape.scale(ldct, 1.0 / cfg.hu_scale);
    let feat = pfen_forward(ctx, x)?;
    let bands = ctx.tape.dwt2(feat)?;
    let ll = ctx.tape.slice_channels(bands, 0, c)?;
    let lh = ctx.tape.slice_channels(bands, c, c)?;
    let hl = ctx.tape.slice_channels(bands, 2 * c, c)?;
    let hh = ctx.tape.slice_channels(bands, 3 * c, c)?;

    let ll = fdam_forward(ctx, ll, cfg)?;
    let ll = msc_mamba_forward(ctx, ll, "ll", cfg)?;
    let (lh, hl, hh) = hfen_fuse(ctx, lh, hl, hh)?;
    let lh = msc_mamba_forward(ctx, lh, "lh", cfg)?;
    let hl = msc_mamba_forward(ctx, hl, "hl", cfg)?;
    let hh = msc_mamba_forward(ctx, hh, "hh", cfg)?;

    let merged = ctx.tape.concat(&[ll, lh, hl, hh])?;
    let spatial = ctx.tape.idwt2(merged)?;
    let cat = ctx.tape.concat(&[spatial, feat])?;
    let f = ctx.conv(cat, "pffn.c1", 1, 1, true)?;
    let f = ctx.tape.silu(f);
    let proj = ctx.conv(f, "pffn.out", 1, 1, true)?;
    let resid = ctx.tape.scale(proj, cfg.hu_scale);
    let out = ctx.tape.add(ldct, resid)?;
    if !ctx.tape.value(out).is_finite() {
        return Err(Error::NonFinite("denoiser output".into()));
    }
    Ok(out)
}

/// Evaluation-mode denoising of one `h x w` image in HU.
pub fn denoise(store: &ParamStore, cfg: &NetConfig, image: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, false);
    let x = ctx.tape.constant(Tensor::new(&[1, h, w], image.to_vec())?);
    let y = ct_mamba_forward(&mut ctx, x, cfg)?;
    Ok(tape.value(y).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy() -> NetConfig {
        NetConfig {
            channels: 2,
            msc_scales: 2,
            czss: CzssConfig {
                state_size: 2,
                expansion: 1,
                ..CzssConfig::default()
            },
            fdam_basis: 3,
            ..NetConfig::default()
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..h * w).map(|_| rng.random_range(-200.0..200.0)).collect()
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = NetConfig::default();
        let a = init_params(&cfg, 3).unwrap();
        let b = init_params(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        assert_ne!(a, init_params(&cfg, 4).unwrap());
    }

    #[test]
    fn a_init_and_step_bias() {
        let cfg = NetConfig {
            czss: CzssConfig {
                state_size: 4,
                ..CzssConfig::default()
            },
            ..NetConfig::default()
        };
        let s = init_params(&cfg, 1).unwrap();
        let a_log = s.by_name("msc.ll.s0.b0.ssm.a_log").unwrap();
        let a: Vec<f64> = a_log.data().iter().map(|v| -v.exp()).collect();
        for (got, want) in a.iter().zip([-1.0, -2.0, -3.0, -4.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        for (name, t) in s.iter().filter(|(n, _)| n.ends_with("dt_proj.b")) {
            for &b in t.data() {
                let dt = crate::ssm::softplus(b);
                assert!((1e-3..=1e-1).contains(&dt), "{name}: {dt}");
            }
        }
        assert_eq!(s.by_name("pffn.out.w").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn output_equals_input_at_init() {
        let cfg = toy();
        let s = init_params(&cfg, 5).unwrap();
        let img = image(16, 16, 1);
        let out = denoise(&s, &cfg, &img, 16, 16).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn rejects_bad_sizes() {
        let cfg = NetConfig::default();
        let s = init_params(&cfg, 0).unwrap();
        assert!(denoise(&s, &cfg, &[0.0; 12 * 16], 12, 16).is_err());
        assert!(cfg.check_input(16, 24).is_ok());
    }

    #[test]
    fn block_shapes_preserved() {
        let cfg = NetConfig::default();
        let s = init_params(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &s, false);
        let x = ctx.tape.constant(Tensor::new(&[8, 16, 16], image(16, 16 * 8, 2)).unwrap());
        let y = czss_forward(&mut ctx, x, "msc.ll.s0.b0", &cfg.czss_at(0), ScanKind::Zigzag).unwrap();
        assert_eq!(ctx.tape.value(y).shape(), &[8, 16, 16]);
        let x = ctx.tape.constant(Tensor::new(&[8, 32, 32], image(32, 32 * 8, 3)).unwrap());
        let y = msc_mamba_forward(&mut ctx, x, "lh", &cfg).unwrap();
        assert_eq!(ctx.tape.value(y).shape(), &[8, 32, 32]);
    }

    #[test]
    fn fdam_basis_partitions_unity() {
        let b = fdam_basis(6, 8, 10);
        let cells = 8 * 6;
        for i in 0..cells {
            let s: f64 = (0..6).map(|k| b.data()[k * cells + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
