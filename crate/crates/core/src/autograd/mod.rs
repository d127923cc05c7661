//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Every op records its inputs and whatever forward state its adjoint needs. Image
//! ops use `[C, H, W]` tensors; scalars are one-element tensors.

pub mod kernels;

use std::rc::Rc;

use rustfft::num_complex::Complex64;

use crate::error::{shape_err, Error, Result};
use crate::fft;
use crate::nps::{pearson_stats, RadialLayout};
use crate::ssm::{scan_backward, scan_forward, sigmoid, softplus, ScanBuffers};
use crate::tensor::Tensor;
use crate::wavelet::{gain_index, gate_plane, haar_forward, haar_inverse};
use kernels::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a learnable tensor (its index in the parameter store).
pub type ParamId = usize;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Silu(Var),
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Norm2(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    MulChannel { x: Var, s: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dwt2(Var),
    Idwt2(Var),
    SpaceToDepth(Var),
    DepthToSpace(Var),
    AvgPool2(Var),
    Upsample2(Var),
    FourierGate { x: Var, gains: Var, spectra: Vec<Vec<Complex64>> },
    Nps2d { x: Var, scale: f64, detrend: bool, spectra: Vec<Vec<Complex64>> },
    Radialize { x: Var, layout: Rc<RadialLayout> },
    Pearson { a: Var, b: Var },
    SelectiveScan { u: Var, delta: Var, a: Var, b: Var, c: Var, order: Rc<Vec<usize>>, states: Vec<f64> },
    Opaque { name: String, inputs: Vec<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for a single backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.grads[v.0].as_ref())
    }

    /// Parameter gradients in registration order; untouched parameters get zeros.
    pub fn into_param_grads(mut self, shapes: impl Fn(ParamId) -> Vec<usize>) -> Vec<(ParamId, Tensor)> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|(id, v)| {
                let g = self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&shapes(id)));
                (id, g)
            })
            .collect()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked by caller")
}

fn chw3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err!("{what} expects [C, H, W], got {:?}", t.shape())),
    }
}

fn even_hw(h: usize, w: usize, what: &str) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(shape_err!("{what} needs even spatial dims, got {h}x{w}"));
    }
    Ok(())
}

/// Band-major wavelet split: channels `[LL(C), LH(C), HL(C), HH(C)]` at half size.
fn dwt_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let band = (h / 2) * (w / 2);
    let mut out = vec![0.0; 4 * c * band];
    let (ll, rest) = out.split_at_mut(c * band);
    let (lh, rest) = rest.split_at_mut(c * band);
    let (hl, hh) = rest.split_at_mut(c * band);
    for ch in 0..c {
        let r = ch * band..(ch + 1) * band;
        haar_forward(
            &x[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            [&mut ll[r.clone()], &mut lh[r.clone()], &mut hl[r.clone()], &mut hh[r]],
        );
    }
    out
}

/// Inverse of [`dwt_forward`]; `h`, `w` describe the full-size output.
fn dwt_inverse(y: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let band = (h / 2) * (w / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let at = |k: usize| &y[(k * c + ch) * band..(k * c + ch + 1) * band];
        haar_inverse([at(0), at(1), at(2), at(3)], h / 2, w / 2, &mut out[ch * h * w..(ch + 1) * h * w]);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.rg(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a registered parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers parameter `id`, reusing the existing leaf if it is already on the tape.
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    /// A node computed outside the tape; gradients reaching it are an error.
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Tensor) -> Var {
        let rg = self.any_rg(inputs);
        self.push(
            value,
            Op::Opaque {
                name: name.to_string(),
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let value = zip_map(self.value(a), self.value(b), f);
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| k * v, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v + k, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::silu, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Euclidean norm of all elements.
    pub fn norm2(&mut self, x: Var) -> Var {
        let n = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.rg(x);
        self.push(Tensor::scalar(n), Op::Norm2(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.shape()[1..] != tail[..] {
                return Err(shape_err!("concat: {:?} does not match trailing dims {:?}", t.shape(), tail));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = self.any_rg(xs);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(xs.to_vec()), rg))
    }

    /// Channels `start..start + len` along the leading axis.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let lead = t.shape()[0];
        if start + len > lead || len == 0 {
            return Err(shape_err!("slice {start}..{} of {lead} channels", start + len));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::SliceChannels { x, start }, rg))
    }

    /// `y[c, ..] = x[c, ..] * s[c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (t, sv) = (self.value(x), self.value(s));
        let lead = t.shape()[0];
        if sv.len() != lead {
            return Err(shape_err!("channel scale of {} for {} channels", sv.len(), lead));
        }
        let inner = t.len() / lead;
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv.data()[i / inner])
            .collect();
        let value = Tensor::new(t.shape(), data)?;
        let rg = self.any_rg(&[x, s]);
        Ok(self.push(value, Op::MulChannel { x, s }, rg))
    }

    /// 2D convolution of `x: [Ci, H, W]` with `w: [Co, Ci/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (ci, h, wd) = chw3(self.value(x), "conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let [co, cig, k, k2] = ws[..] else {
            return Err(shape_err!("conv2d weight must be 4D, got {:?}", ws));
        };
        if groups == 0 || ci % groups != 0 || co % groups != 0 || cig * groups != ci || k != k2 || stride == 0 {
            return Err(shape_err!("conv2d weight {:?} incompatible with {ci} channels in {groups} groups", ws));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err!("conv2d kernel {k} larger than padded {h}x{wd} input"));
        }
        if let Some(b) = b {
            if self.value(b).len() != co {
                return Err(shape_err!("conv2d bias has {} entries for {co} outputs", self.value(b).len()));
            }
        }
        let geom = ConvGeom {
            c_in: ci,
            h,
            w: wd,
            c_out: co,
            k,
            stride,
            pad,
            groups,
        };
        let (ho, wo) = geom.out_hw();
        let y = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.any_rg(&ins);
        Ok(self.push(Tensor::new(&[co, ho, wo], y)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Layer norm over channels at each site of a `[C, ...]` tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.shape()[0];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err!("layer norm affine params do not match {c} channels"));
        }
        let p = t.len() / c;
        let (y, xhat, rstd) =
            kernels::layer_norm_forward(t.data(), c, p, self.value(gamma).data(), self.value(beta).data());
        let value = Tensor::new(t.shape(), y)?;
        let rg = self.any_rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Per-channel Haar split `[C, H, W] -> [4C, H/2, W/2]` in band-major order LL, LH, HL, HH.
    pub fn dwt2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw3(self.value(x), "dwt2")?;
        even_hw(h, w, "dwt2")?;
        let y = dwt_forward(self.value(x).data(), c, h, w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[4 * c, h / 2, w / 2], y)?, Op::Dwt2(x), rg))
    }

    /// Inverse of [`Tape::dwt2`].
    pub fn idwt2(&mut self, x: Var) -> Result<Var> {
        let (c4, bh, bw) = chw3(self.value(x), "idwt2")?;
        if c4 % 4 != 0 {
            return Err(shape_err!("idwt2 needs a multiple of 4 channels, got {c4}"));
        }
        let y = dwt_inverse(self.value(x).data(), c4 / 4, 2 * bh, 2 * bw);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c4 / 4, 2 * bh, 2 * bw], y)?, Op::Idwt2(x), rg))
    }

    pub fn space_to_depth(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw3(self.value(x), "space_to_depth")?;
        even_hw(h, w, "space_to_depth")?;
        let y = kernels::space_to_depth(self.value(x).data(), c, h, w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[4 * c, h / 2, w / 2], y)?, Op::SpaceToDepth(x), rg))
    }

    pub fn depth_to_space(&mut self, x: Var) -> Result<Var> {
        let (c4, h, w) = chw3(self.value(x), "depth_to_space")?;
        if c4 % 4 != 0 {
            return Err(shape_err!("depth_to_space needs a multiple of 4 channels, got {c4}"));
        }
        let y = kernels::depth_to_space(self.value(x).data(), c4 / 4, 2 * h, 2 * w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c4 / 4, 2 * h, 2 * w], y)?, Op::DepthToSpace(x), rg))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw3(self.value(x), "avg_pool2")?;
        even_hw(h, w, "avg_pool2")?;
        let y = kernels::avg_pool2(self.value(x).data(), c, h, w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c, h / 2, w / 2], y)?, Op::AvgPool2(x), rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw3(self.value(x), "upsample2")?;
        let y = kernels::upsample2(self.value(x).data(), c, h, w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c, 2 * h, 2 * w], y)?, Op::Upsample2(x), rg))
    }

    /// Per-channel spectral gating; `gains` is `[C, H, W/2 + 1]`.
    pub fn fourier_gate(&mut self, x: Var, gains: Var) -> Result<Var> {
        let (c, h, w) = chw3(self.value(x), "fourier_gate")?;
        let half = h * (w / 2 + 1);
        if self.value(gains).len() != c * half {
            return Err(shape_err!(
                "fourier gate gains have {} values, expected {c}x{}",
                self.value(gains).len(),
                half
            ));
        }
        let mut out = Vec::with_capacity(c * h * w);
        let mut spectra = Vec::with_capacity(c);
        for ch in 0..c {
            let g = &self.value(gains).data()[ch * half..(ch + 1) * half];
            let (y, spec) = gate_plane(self.value(x).channel(ch), h, w, g);
            out.extend(y);
            spectra.push(spec);
        }
        let rg = self.any_rg(&[x, gains]);
        Ok(self.push(Tensor::new(&[c, h, w], out)?, Op::FourierGate { x, gains, spectra }, rg))
    }

    /// Per-channel 2D noise power spectrum `pitch_area / (H W) * |DFT|^2`.
    pub fn nps2d(&mut self, x: Var, px: f64, py: f64, detrend: bool) -> Result<Var> {
        let (c, h, w) = chw3(self.value(x), "nps2d")?;
        crate::nps::check_pitch(px, py)?;
        let scale = px * py / (h * w) as f64;
        let mut out = Vec::with_capacity(c * h * w);
        let mut spectra = Vec::with_capacity(c);
        for ch in 0..c {
            let mut plane = self.value(x).channel(ch).to_vec();
            if detrend {
                let m = plane.iter().sum::<f64>() / plane.len() as f64;
                plane.iter_mut().for_each(|v| *v -= m);
            }
            let spec = fft::fft2_real(&plane, h, w);
            out.extend(spec.iter().map(|z| scale * z.norm_sqr()));
            spectra.push(spec);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[c, h, w], out)?,
            Op::Nps2d {
                x,
                scale,
                detrend,
                spectra,
            },
            rg,
        ))
    }

    /// Annular averaging of each `[H, W]` channel into `[C, bins]`.
    pub fn radialize(&mut self, x: Var, layout: Rc<RadialLayout>) -> Result<Var> {
        let (c, h, w) = chw3(self.value(x), "radialize")?;
        if layout.bin_of.len() != h * w {
            return Err(shape_err!("radial layout covers {} cells, map has {}", layout.bin_of.len(), h * w));
        }
        let nb = layout.counts.len();
        let mut out = Vec::with_capacity(c * nb);
        for ch in 0..c {
            out.extend(layout.average(self.value(x).channel(ch)));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c, nb], out)?, Op::Radialize { x, layout }, rg))
    }

    /// Pearson correlation of two equal-length tensors. Degenerate inputs (zero
    /// variance) yield exactly 1, so a `1 - rho` term vanishes, with zero gradient.
    pub fn pearson(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || ta.len() < 2 {
            return Err(shape_err!("pearson needs two equal sequences of length >= 2, got {} and {}", ta.len(), tb.len()));
        }
        let st = pearson_stats(ta.data(), tb.data());
        let rho = if st.degenerate {
            log::warn!("degenerate radial curve in correlation term; treating it as perfectly correlated");
            1.0
        } else {
            st.rho
        };
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(Tensor::scalar(rho), Op::Pearson { a, b }, rg))
    }

    /// Selective scan in grid layout. `u`, `delta`: `[D, ..]` over `P` positions,
    /// `a`: `[N]`, `b`, `c`: `[N, ..]` over the same positions; `order` visits positions.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, order: Rc<Vec<usize>>) -> Result<Var> {
        let ut = self.value(u);
        let d = ut.shape()[0];
        let p = ut.len() / d;
        let n = self.value(a).len();
        if self.value(delta).shape() != ut.shape()
            || self.value(b).len() != n * p
            || self.value(c).len() != n * p
            || order.len() != p
        {
            return Err(shape_err!(
                "selective scan shapes: u {:?}, delta {:?}, a {}, b {}, c {}, order {}",
                ut.shape(),
                self.value(delta).shape(),
                n,
                self.value(b).len(),
                self.value(c).len(),
                order.len()
            ));
        }
        let rg = self.any_rg(&[u, delta, a, b, c]);
        let bufs = ScanBuffers {
            u: ut.data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            order: &order,
            channels: d,
            positions: p,
        };
        let (y, states) = scan_forward(&bufs, rg);
        let value = Tensor::new(ut.shape(), y)?;
        Ok(self.push(
            value,
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                order,
                states,
            },
            rg,
        ))
    }

    /// Reverse sweep from the one-element node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        let g = Tensor::new(self.value(v).shape(), data).expect("adjoint matches input shape");
        self.acc(grads, v, g);
    }

    fn like(&self, v: Var, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(v).data().iter().zip(g.data()).map(|(&x, &gy)| f(x, gy)).collect()
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.map(|v| -v));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = self.like(*b, &g, |y, gy| y * gy);
                    self.acc_data(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = self.like(*a, &g, |x, gy| x * gy);
                    self.acc_data(grads, *b, d);
                }
            }
            Op::Scale(x, k) => self.acc(grads, *x, g.map(|v| k * v)),
            Op::AddScalar(x) => self.acc(grads, *x, g),
            Op::Exp(x) => {
                let d = node.value.data().iter().zip(gd).map(|(y, gy)| y * gy).collect();
                self.acc_data(grads, *x, d);
            }
            Op::Silu(x) => {
                let d = self.like(*x, &g, |v, gy| kernels::silu_grad(v) * gy);
                self.acc_data(grads, *x, d);
            }
            Op::Softplus(x) => {
                let d = self.like(*x, &g, |v, gy| sigmoid(v) * gy);
                self.acc_data(grads, *x, d);
            }
            Op::Abs(x) => {
                // Subgradient 0 at the kink.
                let d = self.like(*x, &g, |v, gy| if v > 0.0 { gy } else if v < 0.0 { -gy } else { 0.0 });
                self.acc_data(grads, *x, d);
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.acc(grads, *x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                self.acc(grads, *x, Tensor::full(t.shape(), gd[0] / t.len() as f64));
            }
            Op::Norm2(x) => {
                let n = node.value.item();
                let k = if n > 0.0 { gd[0] / n } else { 0.0 };
                self.acc(grads, *x, self.value(*x).map(|v| k * v));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.reshape(&shape)?);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if self.rg(x) {
                        self.acc_data(grads, x, gd[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SliceChannels { x, start } => {
                let t = self.value(*x);
                let inner = t.len() / t.shape()[0];
                let mut d = vec![0.0; t.len()];
                d[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                self.acc_data(grads, *x, d);
            }
            Op::MulChannel { x, s } => {
                let (t, sv) = (self.value(*x), self.value(*s));
                let inner = t.len() / sv.len();
                if self.rg(*x) {
                    let d = gd.iter().enumerate().map(|(i, gy)| gy * sv.data()[i / inner]).collect();
                    self.acc_data(grads, *x, d);
                }
                if self.rg(*s) {
                    let mut d = vec![0.0; sv.len()];
                    for (i, (gy, xv)) in gd.iter().zip(t.data()).enumerate() {
                        d[i / inner] += gy * xv;
                    }
                    self.acc_data(grads, *s, d);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.rg(*x).then(|| vec![0.0; self.value(*x).len()]);
                let mut dw = self.rg(*w).then(|| vec![0.0; self.value(*w).len()]);
                kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(d) = dx {
                    self.acc_data(grads, *x, d);
                }
                if let Some(d) = dw {
                    self.acc_data(grads, *w, d);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let plane = gd.len() / geom.c_out;
                        let d = (0..geom.c_out).map(|c| gd[c * plane..(c + 1) * plane].iter().sum()).collect();
                        self.acc_data(grads, *b, d);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).len();
                let p = gd.len() / c;
                let mut dx = self.rg(*x).then(|| vec![0.0; gd.len()]);
                let mut dg = self.rg(*gamma).then(|| vec![0.0; c]);
                let mut db = self.rg(*beta).then(|| vec![0.0; c]);
                kernels::layer_norm_backward(
                    gd,
                    xhat,
                    rstd,
                    self.value(*gamma).data(),
                    c,
                    p,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                    if let Some(d) = d {
                        self.acc_data(grads, v, d);
                    }
                }
            }
            Op::Dwt2(x) => {
                let (c, h, w) = chw3(self.value(*x), "dwt2")?;
                self.acc_data(grads, *x, dwt_inverse(gd, c, h, w));
            }
            Op::Idwt2(x) => {
                let (c, h, w) = chw3(&node.value, "idwt2")?;
                self.acc_data(grads, *x, dwt_forward(gd, c, h, w));
            }
            Op::SpaceToDepth(x) => {
                let (c, h, w) = chw3(self.value(*x), "space_to_depth")?;
                self.acc_data(grads, *x, kernels::depth_to_space(gd, c, h, w));
            }
            Op::DepthToSpace(x) => {
                let (c, h, w) = chw3(&node.value, "depth_to_space")?;
                self.acc_data(grads, *x, kernels::space_to_depth(gd, c, h, w));
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = chw3(self.value(*x), "avg_pool2")?;
                let mut d = vec![0.0; c * h * w];
                kernels::avg_pool2_backward(gd, c, h, w, &mut d);
                self.acc_data(grads, *x, d);
            }
            Op::Upsample2(x) => {
                let (c, h, w) = chw3(self.value(*x), "upsample2")?;
                let mut d = vec![0.0; c * h * w];
                kernels::upsample2_backward(gd, c, h, w, &mut d);
                self.acc_data(grads, *x, d);
            }
            Op::FourierGate { x, gains, spectra } => {
                let (c, h, w) = chw3(&node.value, "fourier_gate")?;
                let half = h * (w / 2 + 1);
                let gv = self.value(*gains).data();
                let mut dx = Vec::with_capacity(c * h * w);
                let mut dg = vec![0.0; c * half];
                let inv_n = 1.0 / (h * w) as f64;
                for ch in 0..c {
                    let gplane = &gd[ch * h * w..(ch + 1) * h * w];
                    let gains_c = &gv[ch * half..(ch + 1) * half];
                    // The real gate is self-adjoint.
                    let (back, gspec) = gate_plane(gplane, h, w, gains_c);
                    if self.rg(*x) {
                        dx.extend(back);
                    }
                    if self.rg(*gains) {
                        let xs = &spectra[ch];
                        for u in 0..h {
                            for v in 0..w {
                                let k = u * w + v;
                                dg[ch * half + gain_index(u, v, h, w)] += (xs[k] * gspec[k].conj()).re * inv_n;
                            }
                        }
                    }
                }
                if self.rg(*x) {
                    self.acc_data(grads, *x, dx);
                }
                if self.rg(*gains) {
                    self.acc_data(grads, *gains, dg);
                }
            }
            Op::Nps2d {
                x,
                scale,
                detrend,
                spectra,
            } => {
                let (c, h, w) = chw3(&node.value, "nps2d")?;
                let mut dx = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    let gplane = &gd[ch * h * w..(ch + 1) * h * w];
                    let mut buf: Vec<Complex64> = spectra[ch].iter().zip(gplane).map(|(z, gp)| z * *gp).collect();
                    fft::ifft2_unnormalized(&mut buf, h, w);
                    let mut d: Vec<f64> = buf.iter().map(|z| 2.0 * scale * z.re).collect();
                    if *detrend {
                        let m = d.iter().sum::<f64>() / d.len() as f64;
                        d.iter_mut().for_each(|v| *v -= m);
                    }
                    dx.extend(d);
                }
                self.acc_data(grads, *x, dx);
            }
            Op::Radialize { x, layout } => {
                let nb = layout.counts.len();
                let cells = layout.bin_of.len();
                let c = gd.len() / nb;
                let mut dx = Vec::with_capacity(c * cells);
                for ch in 0..c {
                    let gc = &gd[ch * nb..(ch + 1) * nb];
                    dx.extend(layout.bin_of.iter().map(|&k| gc[k] / layout.counts[k] as f64));
                }
                self.acc_data(grads, *x, dx);
            }
            Op::Pearson { a, b } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let st = pearson_stats(ta, tb);
                let n = ta.len();
                if st.degenerate {
                    return Ok(());
                }
                let rho = st.rho;
                let root = (st.saa * st.sbb).sqrt();
                let gy = gd[0];
                let da: Vec<f64> = (0..n)
                    .map(|i| {
                        let (xa, xb) = (ta[i] - st.mean_a, tb[i] - st.mean_b);
                        gy * (xb / root - rho * xa / st.saa)
                    })
                    .collect();
                let db: Vec<f64> = (0..n)
                    .map(|i| {
                        let (xa, xb) = (ta[i] - st.mean_a, tb[i] - st.mean_b);
                        gy * (xa / root - rho * xb / st.sbb)
                    })
                    .collect();
                self.acc_data(grads, *a, da);
                self.acc_data(grads, *b, db);
            }
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                order,
                states,
            } => {
                let ut = self.value(*u);
                let d = ut.shape()[0];
                let bufs = ScanBuffers {
                    u: ut.data(),
                    delta: self.value(*delta).data(),
                    a: self.value(*a).data(),
                    b: self.value(*b).data(),
                    c: self.value(*c).data(),
                    order,
                    channels: d,
                    positions: ut.len() / d,
                };
                let sg = scan_backward(&bufs, states, gd);
                self.acc_data(grads, *u, sg.u);
                self.acc_data(grads, *delta, sg.delta);
                self.acc_data(grads, *a, sg.a);
                self.acc_data(grads, *b, sg.b);
                self.acc_data(grads, *c, sg.c);
            }
            Op::Opaque { name, inputs } => {
                if self.any_rg(inputs) {
                    return Err(Error::UnsupportedOp(name.clone()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
