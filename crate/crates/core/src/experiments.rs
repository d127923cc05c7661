//! Inference on arbitrary sizes, noise-texture evaluation on uniform ROIs and the
//! scan-order and NPS-loss ablations.

use std::path::Path;

use serde::Serialize;

use crate::data::{simulate_low_dose, synth_phantom, GridImage, ImagePair, NoiseModel, PhantomSpec};
use crate::error::{param_err, Result};
use crate::metrics::{metrics, Metrics, DEFAULT_DATA_RANGE};
use crate::network::{denoise, NetConfig};
use crate::nps::{nps2d, radialize};
use crate::params::{load_checkpoint, ParamStore};
use crate::scan_order::ScanKind;
use crate::train::{train_loop, RunConfig};

/// Index of `i` (possibly past the end) after mirror reflection without edge repeat.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Extends an `h x w` image to `ph x pw` by reflecting across the bottom and right edges.
pub fn reflect_pad(img: &[f64], h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(ph * pw);
    for i in 0..ph {
        let r = reflect(i, h);
        out.extend((0..pw).map(|j| img[r * w + reflect(j, w)]));
    }
    out
}

/// Denoises an image of any size: pads reflectively to the network's size multiple,
/// runs the network and crops back.
pub fn denoise_image(store: &ParamStore, net: &NetConfig, img: &GridImage) -> Result<GridImage> {
    let (h, w) = (img.height, img.width);
    let m = net.size_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = reflect_pad(&img.to_f64(), h, w, ph, pw);
    let out = denoise(store, net, &padded, ph, pw)?;
    let cropped: Vec<f64> = (0..h).flat_map(|i| out[i * pw..i * pw + w].iter().copied()).collect();
    GridImage::from_f64(h, w, img.px, img.py, &cropped)
}

/// Reads a checkpoint written by training and rebuilds its configuration and weights.
pub fn load_model(path: &Path) -> Result<(RunConfig, ParamStore)> {
    let ckpt = load_checkpoint(path)?;
    let cfg = RunConfig::from_json(&ckpt.config_json)?;
    let mut store = cfg.init_store()?;
    let matched = store.load_matching(&ckpt.records)?;
    if matched != store.len() {
        return Err(param_err!(
            "{} holds {matched} of the {} tensors the model needs",
            path.display(),
            store.len()
        ));
    }
    Ok((cfg, store))
}

/// Mean metrics of `f(pair)` against the NDCT images.
fn mean_metrics(pairs: &[ImagePair], mut f: impl FnMut(&ImagePair) -> Result<GridImage>) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(param_err!("no evaluation pairs"));
    }
    let mut acc = Metrics {
        psnr: 0.0,
        ssim: 0.0,
        rmse: 0.0,
    };
    for p in pairs {
        let out = f(p)?;
        let m = metrics(&p.ndct.to_f64(), &out.to_f64(), out.height, out.width, DEFAULT_DATA_RANGE)?;
        acc.psnr += m.psnr;
        acc.ssim += m.ssim;
        acc.rmse += m.rmse;
    }
    let n = pairs.len() as f64;
    Ok(Metrics {
        psnr: acc.psnr / n,
        ssim: acc.ssim / n,
        rmse: acc.rmse / n,
    })
}

/// Mean metrics of the noisy inputs.
pub fn input_metrics(pairs: &[ImagePair]) -> Result<Metrics> {
    mean_metrics(pairs, |p| Ok(p.ldct.clone()))
}

/// Mean metrics of the denoised inputs.
pub fn model_metrics(store: &ParamStore, net: &NetConfig, pairs: &[ImagePair]) -> Result<Metrics> {
    mean_metrics(pairs, |p| denoise_image(store, net, &p.ldct))
}

/// Water-like disks degraded at `dose_fraction`, for noise-texture measurements.
pub fn uniform_roi_pairs(count: usize, size: usize, dose_fraction: f64, seed: u64, model: &NoiseModel) -> Result<Vec<ImagePair>> {
    let nd = synth_phantom(&PhantomSpec::uniform_disk(size, 0.0))?;
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(7919).wrapping_add(i as u64);
            Ok(ImagePair {
                name: format!("roi_{i:04}.ctg"),
                ldct: simulate_low_dose(&nd, dose_fraction, s, model)?,
                ndct: nd.clone(),
            })
        })
        .collect()
}

fn radial_curve(noise: &[f64], n: usize, px: f64, py: f64) -> Result<Vec<f64>> {
    Ok(radialize(&nps2d(noise, n, n, px, py, true)?)?.values)
}

/// Mean over ROIs of the bin-averaged absolute gap between the radial NPS of the
/// removed noise (LDCT - prediction) and of the true noise (LDCT - NDCT), measured
/// in a centered `roi x roi` window.
pub fn nps_distance(store: &ParamStore, net: &NetConfig, pairs: &[ImagePair], roi: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(param_err!("no ROI pairs"));
    }
    let mut total = 0.0;
    for p in pairs {
        let (h, w) = (p.ldct.height, p.ldct.width);
        if roi > h || roi > w {
            return Err(param_err!("ROI {roi} larger than {h}x{w} image"));
        }
        let pred = denoise_image(store, net, &p.ldct)?;
        let (top, left) = ((h - roi) / 2, (w - roi) / 2);
        let crop = |g: &GridImage| g.crop(top, left, roi, roi).map(|c| c.to_f64());
        let (ld, nd, pr) = (crop(&p.ldct)?, crop(&p.ndct)?, crop(&pred)?);
        let reference: Vec<f64> = ld.iter().zip(&nd).map(|(a, b)| a - b).collect();
        let removed: Vec<f64> = ld.iter().zip(&pr).map(|(a, b)| a - b).collect();
        let (px, py) = (p.ldct.px as f64, p.ldct.py as f64);
        let r_ref = radial_curve(&reference, roi, px, py)?;
        let r_rem = radial_curve(&removed, roi, px, py)?;
        total += r_ref.iter().zip(&r_rem).map(|(a, b)| (a - b).abs()).sum::<f64>() / r_ref.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanAblationRow {
    pub scan: ScanKind,
    pub metrics: Metrics,
}

pub const SCAN_VARIANTS: [ScanKind; 3] = [ScanKind::Zigzag, ScanKind::Serpentine, ScanKind::RowMajor];

/// Trains one model per scan order with otherwise identical settings and evaluates
/// each on `val`. Checkpoints go to `out_dir/<scan>/` when given.
pub fn ablate_scan(train: &[ImagePair], val: &[ImagePair], base: &RunConfig, out_dir: Option<&Path>) -> Result<Vec<ScanAblationRow>> {
    SCAN_VARIANTS
        .iter()
        .map(|&scan| {
            let mut cfg = base.clone();
            cfg.net.scan = scan;
            let dir = out_dir.map(|d| d.join(scan.to_string()));
            let out = train_loop(train, val, &cfg, dir.as_deref())?;
            Ok(ScanAblationRow {
                scan,
                metrics: model_metrics(&out.store, &cfg.net, val)?,
            })
        })
        .collect()
}

pub fn scan_report_csv(rows: &[ScanAblationRow]) -> String {
    let mut s = String::from("scan,psnr,ssim,rmse\n");
    for r in rows {
        s.push_str(&format!("{},{:.4},{:.6},{:.4}\n", r.scan, r.metrics.psnr, r.metrics.ssim, r.metrics.rmse));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NpsAblation {
    pub with_nps: f64,
    pub without_nps: f64,
    pub with_metrics: Metrics,
    pub without_metrics: Metrics,
}

/// Trains with and without the deep NPS term from the same seed, then compares the
/// radial-NPS distance on `rois`.
pub fn ablate_nps(
    train: &[ImagePair],
    val: &[ImagePair],
    rois: &[ImagePair],
    roi: usize,
    base: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<NpsAblation> {
    let mut without = base.clone();
    without.loss.weights.gamma1 = 0.0;
    without.loss.weights.gamma2 = 0.0;
    let a = train_loop(train, val, base, out_dir.map(|d| d.join("with_nps")).as_deref())?;
    let b = train_loop(train, val, &without, out_dir.map(|d| d.join("without_nps")).as_deref())?;
    Ok(NpsAblation {
        with_nps: nps_distance(&a.store, &base.net, rois, roi)?,
        without_nps: nps_distance(&b.store, &base.net, rois, roi)?,
        with_metrics: model_metrics(&a.store, &base.net, val)?,
        without_metrics: model_metrics(&b.store, &base.net, val)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors_edges() {
        let img = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let p = reflect_pad(&img, 2, 3, 3, 5);
        assert_eq!(p, vec![1.0, 2.0, 3.0, 2.0, 1.0, 4.0, 5.0, 6.0, 5.0, 4.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(reflect_pad(&[7.0], 1, 1, 2, 2), vec![7.0; 4]);
    }

    #[test]
    fn odd_sizes_denoise_to_identity_at_init() {
        let mut cfg = RunConfig::default();
        cfg.net.channels = 2;
        cfg.net.msc_scales = 2;
        cfg.net.czss.state_size = 2;
        cfg.net.czss.expansion = 1;
        let store = cfg.init_store().unwrap();
        let data: Vec<f32> = (0..13 * 10).map(|v| (v as f32) * 3.0 - 100.0).collect();
        let img = GridImage::new(13, 10, 0.7, 0.7, data).unwrap();
        let out = denoise_image(&store, &cfg.net, &img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn identity_denoiser_leaves_nps_gap() {
        let rois = uniform_roi_pairs(2, 32, 0.25, 1, &NoiseModel::default()).unwrap();
        let mut cfg = RunConfig::default();
        cfg.net.channels = 2;
        cfg.net.msc_scales = 2;
        let store = cfg.init_store().unwrap();
        // At init the network returns its input, so it removes no noise at all.
        let d = nps_distance(&store, &cfg.net, &rois, 16).unwrap();
        assert!(d > 0.0);
        assert!(rois.iter().all(|p| p.ldct != p.ndct));
    }
}
