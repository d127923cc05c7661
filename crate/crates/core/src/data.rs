//! Grid images and the CTG1 file format, ellipse phantoms, and image-domain
//! low-dose degradation with spectrally shaped, attenuation-weighted noise.
//!
//! CTG1 (little-endian): `"CTG1"`, u32 height, u32 width, f32 px, f32 py, then
//! `height * width` f32 values row-major in HU.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::fft;
use crate::params::write_atomic;

pub const GRID_MAGIC: [u8; 4] = *b"CTG1";
const HEADER_LEN: usize = 20;
pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 3000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GridImage {
    pub height: usize,
    pub width: usize,
    pub px: f32,
    pub py: f32,
    pub data: Vec<f32>,
}

impl GridImage {
    pub fn new(height: usize, width: usize, px: f32, py: f32, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("grid dims must be >= 1, got {height}x{width}"));
        }
        if !(px > 0.0 && py > 0.0 && px.is_finite() && py.is_finite()) {
            return Err(param_err!("pixel pitch must be positive, got {px} x {py}"));
        }
        if data.len() != height * width {
            return Err(shape_err!("{height}x{width} grid with {} values", data.len()));
        }
        Ok(Self {
            height,
            width,
            px,
            py,
            data,
        })
    }

    pub fn from_f64(height: usize, width: usize, px: f32, py: f32, data: &[f64]) -> Result<Self> {
        Self::new(height, width, px, py, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn same_geometry(&self, other: &GridImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Rectangular crop starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<GridImage> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(shape_err!(
                "crop {h}x{w} at ({top}, {left}) outside {}x{}",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(h * w);
        for r in top..top + h {
            data.extend_from_slice(&self.data[r * self.width + left..r * self.width + left + w]);
        }
        GridImage::new(h, w, self.px, self.py, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        buf.extend_from_slice(&GRID_MAGIC);
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&self.px.to_le_bytes());
        buf.extend_from_slice(&self.py.to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: buf.len(),
            });
        }
        if buf[..4] != GRID_MAGIC {
            return Err(Error::BadMagic {
                expected: GRID_MAGIC,
                found: [buf[0], buf[1], buf[2], buf[3]],
            });
        }
        if buf.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: buf.len(),
            });
        }
        let word = |i: usize| [buf[i], buf[i + 1], buf[i + 2], buf[i + 3]];
        let height = u32::from_le_bytes(word(4)) as usize;
        let width = u32::from_le_bytes(word(8)) as usize;
        let px = f32::from_le_bytes(word(12));
        let py = f32::from_le_bytes(word(16));
        let expected = HEADER_LEN + 4 * height * width;
        if buf.len() != expected {
            return Err(Error::Truncated {
                expected,
                actual: buf.len(),
            });
        }
        let data: Vec<f32> = buf[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid payload".into()));
        }
        GridImage::new(height, width, px, py, data)
    }
}

pub fn read_grid(path: &Path) -> Result<GridImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    GridImage::decode(&bytes).map_err(|e| match e {
        Error::Shape(m) => Error::Shape(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_grid(img: &GridImage, path: &Path) -> Result<()> {
    write_atomic(path, &img.encode())
}

/// One ellipse in normalized coordinates: the image spans [-1, 1] on both axes,
/// x to the right, y downward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub axes: [f64; 2],
    #[serde(default)]
    pub rotation_deg: f64,
    pub hu: f64,
}

/// Extra ellipses drawn from `PhantomSpec::seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomEllipses {
    pub count: usize,
    pub hu_range: [f64; 2],
    pub axis_range: [f64; 2],
    /// Centers are drawn inside [-extent, extent] on both axes.
    pub extent: f64,
}

impl Default for RandomEllipses {
    fn default() -> Self {
        Self {
            count: 0,
            hu_range: [-100.0, 300.0],
            axis_range: [0.05, 0.3],
            extent: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_pitch")]
    pub px: f32,
    #[serde(default = "default_pitch")]
    pub py: f32,
    #[serde(default = "default_background")]
    pub background: f64,
    #[serde(default)]
    pub ellipses: Vec<Ellipse>,
    #[serde(default)]
    pub random: Option<RandomEllipses>,
    #[serde(default)]
    pub seed: u64,
}

fn default_pitch() -> f32 {
    0.7
}

fn default_background() -> f64 {
    -1000.0
}

fn check_hu(v: f64, what: &str) -> Result<()> {
    if !(HU_MIN..=HU_MAX).contains(&v) {
        return Err(param_err!("{what} HU {v} outside [{HU_MIN}, {HU_MAX}]"));
    }
    Ok(())
}

impl PhantomSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: PathBuf::from(path),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(shape_err!("phantom size must be >= 1"));
        }
        if !(self.px > 0.0 && self.py > 0.0) {
            return Err(param_err!("phantom pitch must be positive"));
        }
        check_hu(self.background, "background")?;
        for (i, e) in self.ellipses.iter().enumerate() {
            check_hu(e.hu, &format!("ellipse {i}"))?;
            if e.center.iter().any(|c| !(-1.0..=1.0).contains(c)) {
                return Err(param_err!("ellipse {i} center {:?} outside [-1, 1]", e.center));
            }
            if e.axes.iter().any(|a| !(*a > 0.0 && *a <= 2.0)) {
                return Err(param_err!("ellipse {i} axes {:?} must lie in (0, 2]", e.axes));
            }
            if !e.rotation_deg.is_finite() {
                return Err(param_err!("ellipse {i} rotation is not finite"));
            }
        }
        if let Some(r) = &self.random {
            check_hu(r.hu_range[0], "random range")?;
            check_hu(r.hu_range[1], "random range")?;
            if r.hu_range[0] > r.hu_range[1] || !(r.axis_range[0] > 0.0 && r.axis_range[0] <= r.axis_range[1] && r.axis_range[1] <= 2.0) {
                return Err(param_err!("random ellipse ranges are inverted or out of bounds"));
            }
            if !(0.0..=1.0).contains(&r.extent) {
                return Err(param_err!("random extent {} outside [0, 1]", r.extent));
            }
        }
        Ok(())
    }

    /// All ellipses in drawing order, random ones after the explicit list.
    pub fn all_ellipses(&self) -> Vec<Ellipse> {
        let mut out = self.ellipses.clone();
        if let Some(r) = &self.random {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for _ in 0..r.count {
                let c = [
                    rng.random_range(-r.extent..=r.extent),
                    rng.random_range(-r.extent..=r.extent),
                ];
                let axes = [
                    rng.random_range(r.axis_range[0]..=r.axis_range[1]),
                    rng.random_range(r.axis_range[0]..=r.axis_range[1]),
                ];
                out.push(Ellipse {
                    center: c,
                    axes,
                    rotation_deg: rng.random_range(0.0..180.0),
                    hu: rng.random_range(r.hu_range[0]..=r.hu_range[1]),
                });
            }
        }
        out
    }

    /// A body-like phantom: air, a water-equivalent body ellipse and random inserts.
    pub fn random_body(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0d1);
        let body = Ellipse {
            center: [0.0, 0.0],
            axes: [rng.random_range(0.75..0.9), rng.random_range(0.6..0.8)],
            rotation_deg: rng.random_range(-10.0..10.0),
            hu: rng.random_range(0.0..60.0),
        };
        Self {
            height: size,
            width: size,
            px: default_pitch(),
            py: default_pitch(),
            background: -1000.0,
            ellipses: vec![body],
            random: Some(RandomEllipses {
                count: rng.random_range(3..=7),
                hu_range: [-120.0, 400.0],
                axis_range: [0.06, 0.3],
                extent: 0.45,
            }),
            seed,
        }
    }

    /// A uniform disk filling most of the field, for noise measurements.
    pub fn uniform_disk(size: usize, hu: f64) -> Self {
        Self {
            height: size,
            width: size,
            px: default_pitch(),
            py: default_pitch(),
            background: -1000.0,
            ellipses: vec![Ellipse {
                center: [0.0, 0.0],
                axes: [0.9, 0.9],
                rotation_deg: 0.0,
                hu,
            }],
            random: None,
            seed: 0,
        }
    }
}

/// Rasterizes the spec; later ellipses overwrite earlier ones.
pub fn synth_phantom(spec: &PhantomSpec) -> Result<GridImage> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut data = vec![spec.background; h * w];
    for e in spec.all_ellipses() {
        let (s, c) = e.rotation_deg.to_radians().sin_cos();
        for i in 0..h {
            let y = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
            for j in 0..w {
                let x = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
                let (dx, dy) = (x - e.center[0], y - e.center[1]);
                let u = (dx * c + dy * s) / e.axes[0];
                let v = (-dx * s + dy * c) / e.axes[1];
                if u * u + v * v <= 1.0 {
                    data[i * w + j] = e.hu;
                }
            }
        }
    }
    GridImage::from_f64(h, w, spec.px, spec.py, &data)
}

/// Parameters of the image-domain low-dose model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Full-dose-equivalent noise level in HU at unit weight.
    pub sigma: f64,
    /// Variance weight `clamp(w0 + w1 * HU, w_min, w_max)`.
    pub w0: f64,
    pub w1: f64,
    pub w_min: f64,
    pub w_max: f64,
    /// Radial frequency (cycles/pixel) where the noise spectrum peaks.
    pub peak_frequency: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma: 20.0,
            w0: 1.0,
            w1: 5e-4,
            w_min: 0.25,
            w_max: 3.0,
            peak_frequency: 0.15,
        }
    }
}

impl NoiseModel {
    pub fn weight(&self, hu: f64) -> f64 {
        (self.w0 + self.w1 * hu).clamp(self.w_min, self.w_max)
    }

    /// Target noise spectrum shape: zero at DC, rising to a peak, then falling.
    pub fn spectrum_shape(&self, r: f64) -> f64 {
        let t = r / self.peak_frequency;
        t * (1.0 - t).exp()
    }
}

/// Unit-variance (in expectation) noise with the model's spectral shape.
pub fn shaped_noise(h: usize, w: usize, model: &NoiseModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..h * w)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    fft::fft2(&mut buf, h, w);
    let mut filt = vec![0.0; h * w];
    for u in 0..h {
        let fu = fft::signed_index(u, h) / h as f64;
        for v in 0..w {
            let fv = fft::signed_index(v, w) / w as f64;
            filt[u * w + v] = model.spectrum_shape((fu * fu + fv * fv).sqrt());
        }
    }
    let mean_s = filt.iter().sum::<f64>() / (h * w) as f64;
    let norm = if mean_s > 0.0 { 1.0 / mean_s } else { 0.0 };
    for (z, s) in buf.iter_mut().zip(&filt) {
        *z *= (s * norm).sqrt();
    }
    fft::ifft2_unnormalized(&mut buf, h, w);
    let k = 1.0 / (h * w) as f64;
    buf.iter().map(|z| z.re * k).collect()
}

/// Adds correlated noise with variance `sigma^2 (1/f - 1) w(HU)`; `f = 1` returns
/// the input unchanged.
pub fn simulate_low_dose(ndct: &GridImage, dose_fraction: f64, seed: u64, model: &NoiseModel) -> Result<GridImage> {
    if !(dose_fraction > 0.0 && dose_fraction <= 1.0) {
        return Err(param_err!("dose fraction {dose_fraction} outside (0, 1]"));
    }
    if dose_fraction == 1.0 {
        return Ok(ndct.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = shaped_noise(ndct.height, ndct.width, model, &mut rng);
    let amp = model.sigma * (1.0 / dose_fraction - 1.0).sqrt();
    let data: Vec<f64> = ndct
        .data
        .iter()
        .zip(&noise)
        .map(|(&v, n)| {
            let v = v as f64;
            v + amp * model.weight(v).sqrt() * n
        })
        .collect();
    GridImage::from_f64(ndct.height, ndct.width, ndct.px, ndct.py, &data)
}

/// Aligned low-dose / normal-dose pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub ldct: GridImage,
    pub ndct: GridImage,
}

/// Loads `dir/ldct/*.ctg` and `dir/ndct/*.ctg`, matched by file name, sorted by name.
pub fn load_pairs(dir: &Path) -> Result<Vec<ImagePair>> {
    let ld_dir = dir.join("ldct");
    let entries = fs::read_dir(&ld_dir).map_err(|e| Error::io(format!("listing {}", ld_dir.display()), e))?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(format!("listing {}", ld_dir.display()), e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.ends_with(".ctg") {
            names.push(name);
        }
    }
    names.sort();
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        let ldct = read_grid(&ld_dir.join(&name))?;
        let ndct = read_grid(&dir.join("ndct").join(&name))?;
        if !ldct.same_geometry(&ndct) {
            return Err(shape_err!("pair {name}: ldct and ndct sizes differ"));
        }
        pairs.push(ImagePair { name, ldct, ndct });
    }
    Ok(pairs)
}

/// Writes pairs into the layout read by [`load_pairs`].
pub fn save_pairs(dir: &Path, pairs: &[ImagePair]) -> Result<()> {
    for sub in ["ldct", "ndct"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    for p in pairs {
        write_grid(&p.ldct, &dir.join("ldct").join(&p.name))?;
        write_grid(&p.ndct, &dir.join("ndct").join(&p.name))?;
    }
    Ok(())
}

/// Body phantoms degraded at `dose_fraction`; names are `pair_{index:04}.ctg`.
pub fn make_dataset(count: usize, size: usize, dose_fraction: f64, seed: u64, model: &NoiseModel) -> Result<Vec<ImagePair>> {
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let ndct = synth_phantom(&PhantomSpec::random_body(size, s))?;
            let ldct = simulate_low_dose(&ndct, dose_fraction, s ^ 0x10d05e, model)?;
            Ok(ImagePair {
                name: format!("pair_{i:04}.ctg"),
                ldct,
                ndct,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk_spec() -> PhantomSpec {
        PhantomSpec {
            height: 32,
            width: 32,
            px: 0.5,
            py: 0.5,
            background: -1000.0,
            ellipses: vec![Ellipse {
                center: [0.0, 0.0],
                axes: [0.5, 0.5],
                rotation_deg: 0.0,
                hu: 50.0,
            }],
            random: None,
            seed: 0,
        }
    }

    #[test]
    fn phantom_examples() {
        let mut s = disk_spec();
        let img = synth_phantom(&s).unwrap();
        assert_eq!(img.data[16 * 32 + 16], 50.0);
        assert_eq!(img.data[0], -1000.0);
        s.ellipses.clear();
        assert!(synth_phantom(&s).unwrap().data.iter().all(|&v| v == -1000.0));
        s.background = 3500.0;
        assert!(synth_phantom(&s).is_err());
        let mut s = disk_spec();
        s.ellipses[0].hu = -1200.0;
        assert!(synth_phantom(&s).is_err());
    }

    #[test]
    fn later_ellipses_overwrite() {
        let mut s = disk_spec();
        s.ellipses.push(Ellipse {
            center: [0.0, 0.0],
            axes: [0.2, 0.2],
            rotation_deg: 0.0,
            hu: 300.0,
        });
        let img = synth_phantom(&s).unwrap();
        assert_eq!(img.data[16 * 32 + 16], 300.0);
        assert_eq!(img.data[16 * 32 + 16 + 6], 50.0);
    }

    #[test]
    fn random_phantoms_are_seeded() {
        let a = synth_phantom(&PhantomSpec::random_body(32, 9)).unwrap();
        let b = synth_phantom(&PhantomSpec::random_body(32, 9)).unwrap();
        let c = synth_phantom(&PhantomSpec::random_body(32, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r#"{"height": 8, "width": 8, "ellipses": [{"center": [0, 0], "axes": [0.5, 0.5], "hu": 40}],
                       "random": {"count": 2}, "seed": 4}"#;
        let s: PhantomSpec = serde_json::from_str(json).unwrap();
        assert_eq!(s.px, 0.7);
        assert_eq!(s.background, -1000.0);
        assert_eq!(s.all_ellipses().len(), 3);
    }

    #[test]
    fn grid_round_trip_and_errors() {
        let img = GridImage::new(2, 3, 0.7, 0.5, vec![0.0, -0.0, f32::MIN_POSITIVE / 4.0, 1e30, -3.5, 7.0]).unwrap();
        let bytes = img.encode();
        let back = GridImage::decode(&bytes).unwrap();
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back, img);
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"CTG2");
        assert!(matches!(GridImage::decode(&bad), Err(Error::BadMagic { .. })));
        match GridImage::decode(&bytes[..bytes.len() - 4]) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, 20 + 24);
                assert_eq!(actual, 40);
            }
            other => panic!("{other:?}"),
        }
        let mut nan = bytes.clone();
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(GridImage::decode(&nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn grid_file_io() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ctg");
        let img = synth_phantom(&disk_spec()).unwrap();
        write_grid(&img, &p).unwrap();
        assert_eq!(read_grid(&p).unwrap(), img);
        assert!(read_grid(&dir.path().join("missing.ctg")).is_err());
    }

    #[test]
    fn full_dose_is_identity_and_seeded() {
        let img = synth_phantom(&disk_spec()).unwrap();
        let m = NoiseModel::default();
        assert_eq!(simulate_low_dose(&img, 1.0, 3, &m).unwrap(), img);
        assert_eq!(simulate_low_dose(&img, 0.25, 3, &m).unwrap(), simulate_low_dose(&img, 0.25, 3, &m).unwrap());
        assert_ne!(simulate_low_dose(&img, 0.25, 3, &m).unwrap(), simulate_low_dose(&img, 0.25, 4, &m).unwrap());
        assert!(simulate_low_dose(&img, 0.0, 3, &m).is_err());
        assert!(simulate_low_dose(&img, 1.5, 3, &m).is_err());
    }

    fn uniform(size: usize, hu: f32) -> GridImage {
        GridImage::new(size, size, 0.7, 0.7, vec![hu; size * size]).unwrap()
    }

    #[test]
    fn noise_variance_scales_with_dose() {
        // 10^4 pixels per realization, several realizations per dose.
        let m = NoiseModel::default();
        let img = uniform(100, 0.0);
        let var = |f: f64| {
            let mut acc = 0.0;
            for s in 0..8 {
                let ld = simulate_low_dose(&img, f, 100 + s, &m).unwrap();
                acc += ld.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / ld.data.len() as f64;
            }
            acc / 8.0
        };
        let (v25, v50) = (var(0.25), var(0.5));
        let expect = m.sigma * m.sigma * m.weight(0.0);
        assert!((v50 / expect - 1.0).abs() < 0.1, "f=0.5 variance {v50} vs {expect}");
        assert!((v25 / (3.0 * v50) - 1.0).abs() < 0.1, "ratio {}", v25 / v50);
    }

    #[test]
    fn noise_mean_is_zero_over_uniform_region() {
        let img = uniform(128, 40.0);
        let ld = simulate_low_dose(&img, 0.25, 5, &NoiseModel::default()).unwrap();
        let mean = ld.data.iter().map(|&v| v as f64 - 40.0).sum::<f64>() / ld.data.len() as f64;
        assert!(mean.abs() < 0.5, "mean {mean}");
    }

    #[test]
    fn noise_spectrum_rises_then_falls() {
        let m = NoiseModel::default();
        assert_eq!(m.spectrum_shape(0.0), 0.0);
        assert!(m.spectrum_shape(0.05) < m.spectrum_shape(0.15));
        assert!(m.spectrum_shape(0.45) < m.spectrum_shape(0.15));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = shaped_noise(64, 64, &m, &mut rng);
        let radial = crate::nps::radialize(&crate::nps::nps2d(&n, 64, 64, 1.0, 1.0, false).unwrap()).unwrap();
        let peak = radial
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(peak > 2 && peak < 20, "peak bin {peak}");
    }

    #[test]
    fn dataset_layout_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = make_dataset(3, 16, 0.25, 1, &NoiseModel::default()).unwrap();
        save_pairs(dir.path(), &pairs).unwrap();
        assert_eq!(load_pairs(dir.path()).unwrap(), pairs);
    }

    proptest! {
        #[test]
        fn grid_round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let n = vals.len();
            let img = GridImage::new(1, n, 1.0, 1.0, vals).unwrap();
            let back = GridImage::decode(&img.encode()).unwrap();
            prop_assert!(back.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
