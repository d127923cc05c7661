//! State space model primitives: zero-order-hold discretization and the three
//! execution forms (recurrence, structured causal convolution, input-selective scan).
//!
//! The selective scan kernel here is shared with the gradient tape, which calls
//! [`scan_forward`] and [`scan_backward`] directly on grid-laid-out buffers.

use nalgebra::DMatrix;

use crate::error::{param_err, shape_err, Error, Result};

/// Below this `|ΔA|` the ZOH factor `(e^z - 1)/z` is evaluated by its Taylor series.
pub const ZOH_TAYLOR_THRESHOLD: f64 = 1e-6;

/// The derivative of the ZOH factor loses accuracy faster, so its series takes over earlier.
const ZOH_DERIVATIVE_THRESHOLD: f64 = 1e-2;

/// Default state size for the scans used inside the network.
pub const DEFAULT_STATE_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum StateMatrix {
    /// Diagonal entries of `A`.
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

impl StateMatrix {
    pub fn size(&self) -> usize {
        match self {
            StateMatrix::Diagonal(d) => d.len(),
            StateMatrix::Full(m) => m.nrows(),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            StateMatrix::Diagonal(d) => d.iter().all(|v| v.is_finite()),
            StateMatrix::Full(m) => m.iter().all(|v| v.is_finite()),
        }
    }

    /// `out = self * h`
    fn apply(&self, h: &[f64], out: &mut [f64]) {
        match self {
            StateMatrix::Diagonal(d) => {
                for ((o, &a), &x) in out.iter_mut().zip(d).zip(h) {
                    *o = a * x;
                }
            }
            StateMatrix::Full(m) => {
                let n = m.nrows();
                for (i, o) in out.iter_mut().enumerate().take(n) {
                    *o = (0..n).map(|j| m[(i, j)] * h[j]).sum();
                }
            }
        }
    }

    /// Dense copy, mostly for comparisons in tests.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            StateMatrix::Diagonal(d) => DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d.clone())),
            StateMatrix::Full(m) => m.clone(),
        }
    }
}

/// Continuous-time parameters `h' = A h + B x`, `y = C h` with step size `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmContinuous {
    pub a: StateMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

impl SsmContinuous {
    pub fn new(a: StateMatrix, b: Vec<f64>, c: Vec<f64>, delta: f64) -> Result<Self> {
        let s = Self { a, b, c, delta };
        s.validate()?;
        Ok(s)
    }

    pub fn diagonal(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, delta: f64) -> Result<Self> {
        Self::new(StateMatrix::Diagonal(a), b, c, delta)
    }

    pub fn state_size(&self) -> usize {
        self.a.size()
    }

    fn validate(&self) -> Result<()> {
        let n = self.a.size();
        if n == 0 {
            return Err(param_err!("state size must be at least 1"));
        }
        if let StateMatrix::Full(m) = &self.a {
            if m.ncols() != n {
                return Err(shape_err!("A must be square, got {}x{}", m.nrows(), m.ncols()));
            }
        }
        if self.b.len() != n || self.c.len() != n {
            return Err(shape_err!(
                "B and C must have {} entries, got {} and {}",
                n,
                self.b.len(),
                self.c.len()
            ));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(param_err!("step size must be finite and positive, got {}", self.delta));
        }
        if !self.a.is_finite()
            || !self.b.iter().chain(&self.c).all(|v| v.is_finite())
        {
            return Err(param_err!("non-finite SSM parameters"));
        }
        Ok(())
    }
}

/// Discrete parameters `h_k = Ā h_{k-1} + B̄ x_k`, `y_k = C h_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmDiscrete {
    pub a_bar: StateMatrix,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
}

impl SsmDiscrete {
    pub fn new(a_bar: StateMatrix, b_bar: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let n = a_bar.size();
        if n == 0 || b_bar.len() != n || c.len() != n {
            return Err(shape_err!(
                "inconsistent discrete SSM shapes: N={}, |B̄|={}, |C|={}",
                n,
                b_bar.len(),
                c.len()
            ));
        }
        if let StateMatrix::Full(m) = &a_bar {
            if m.ncols() != n {
                return Err(shape_err!("Ā must be square"));
            }
        }
        if !a_bar.is_finite() || !b_bar.iter().chain(&c).all(|v| v.is_finite()) {
            return Err(param_err!("non-finite discrete SSM parameters"));
        }
        Ok(Self { a_bar, b_bar, c })
    }

    pub fn state_size(&self) -> usize {
        self.a_bar.size()
    }
}

/// Causal convolution kernel `(C B̄, C Ā B̄, ..., C Ā^{L-1} B̄)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmKernel {
    k: Vec<f64>,
}

impl SsmKernel {
    pub fn values(&self) -> &[f64] {
        &self.k
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }
}

/// `(e^z - 1) / z`, continuous at zero.
#[inline]
pub fn zoh_factor(z: f64) -> f64 {
    if z.abs() < ZOH_TAYLOR_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// `d/dz (e^z - 1) / z`.
#[inline]
pub fn zoh_factor_derivative(z: f64) -> f64 {
    if z.abs() < ZOH_DERIVATIVE_THRESHOLD {
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0)))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Zero-order-hold discretization: `Ā = exp(ΔA)`, `B̄ = (ΔA)^{-1}(exp(ΔA) - I) ΔB`.
pub fn discretize_zoh(cont: &SsmContinuous) -> Result<SsmDiscrete> {
    cont.validate()?;
    let delta = cont.delta;
    let (a_bar, b_bar) = match &cont.a {
        StateMatrix::Diagonal(a) => {
            let a_bar = a.iter().map(|&ai| (delta * ai).exp()).collect();
            let b_bar = a
                .iter()
                .zip(&cont.b)
                .map(|(&ai, &bi)| zoh_factor(delta * ai) * delta * bi)
                .collect();
            (StateMatrix::Diagonal(a_bar), b_bar)
        }
        StateMatrix::Full(a) => {
            // exp([[ΔA, ΔB], [0, 0]]) = [[Ā, B̄], [0, 1]], which needs no inverse of A.
            let n = a.nrows();
            let mut aug = DMatrix::<f64>::zeros(n + 1, n + 1);
            for i in 0..n {
                for j in 0..n {
                    aug[(i, j)] = delta * a[(i, j)];
                }
                aug[(i, n)] = delta * cont.b[i];
            }
            let e = aug.exp();
            let a_bar = e.view((0, 0), (n, n)).into_owned();
            let b_bar = (0..n).map(|i| e[(i, n)]).collect();
            (StateMatrix::Full(a_bar), b_bar)
        }
    };
    SsmDiscrete::new(a_bar, b_bar, cont.c.clone())
        .map_err(|_| Error::NonFinite("ZOH discretization".into()))
}

/// Runs `h_k = Ā h_{k-1} + B̄ x_k`, `y_k = C h_k` over the sequence.
pub fn scan_recurrent(disc: &SsmDiscrete, x: &[f64], h0: Option<&[f64]>) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = disc.state_size();
    let mut h = match h0 {
        Some(h0) if h0.len() != n => {
            return Err(shape_err!("initial state has {} entries, expected {}", h0.len(), n))
        }
        Some(h0) => h0.to_vec(),
        None => vec![0.0; n],
    };
    let mut next = vec![0.0; n];
    let mut y = Vec::with_capacity(x.len());
    for &xk in x {
        disc.a_bar.apply(&h, &mut next);
        for ((hn, &nx), &b) in h.iter_mut().zip(&next).zip(&disc.b_bar) {
            *hn = nx + b * xk;
        }
        y.push(h.iter().zip(&disc.c).map(|(a, b)| a * b).sum());
    }
    Ok(y)
}

/// Builds the length-`len` convolution kernel by propagating `B̄` through `Ā`.
pub fn build_kernel(disc: &SsmDiscrete, len: usize) -> Result<SsmKernel> {
    if len == 0 {
        return Err(param_err!("kernel length must be at least 1"));
    }
    let n = disc.state_size();
    let mut state = disc.b_bar.clone();
    let mut next = vec![0.0; n];
    let mut k = Vec::with_capacity(len);
    for j in 0..len {
        k.push(state.iter().zip(&disc.c).map(|(a, b)| a * b).sum());
        if j + 1 < len {
            disc.a_bar.apply(&state, &mut next);
            std::mem::swap(&mut state, &mut next);
        }
    }
    Ok(SsmKernel { k })
}

/// Causal convolution `y_k = Σ_{j≤k} K_j x_{k-j}`.
pub fn apply_kernel(kernel: &SsmKernel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != kernel.len() {
        return Err(shape_err!(
            "kernel length {} does not match sequence length {}",
            kernel.len(),
            x.len()
        ));
    }
    let k = &kernel.k;
    Ok((0..x.len())
        .map(|i| (0..=i).map(|j| k[j] * x[i - j]).sum())
        .collect())
}

/// Input-dependent projections of a selective scan over `D` channels with state size `N`.
///
/// For every step `t`: `B_t = W_B x_t + b_B`, `C_t = W_C x_t + b_C` and
/// `Δ_t = softplus(W_Δ x_t + b_Δ)` (one step size per channel). All channels share
/// the diagonal state matrix `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams {
    /// Diagonal of the shared state matrix, length `N`.
    pub a: Vec<f64>,
    /// `N x D`, row-major.
    pub w_b: Vec<f64>,
    pub b_b: Vec<f64>,
    /// `N x D`, row-major.
    pub w_c: Vec<f64>,
    pub b_c: Vec<f64>,
    /// `D x D`, row-major.
    pub w_delta: Vec<f64>,
    pub b_delta: Vec<f64>,
}

impl SelectiveParams {
    /// Input-independent projections: `B_t = b`, `C_t = c` and `Δ_t = delta` for all steps.
    pub fn constant(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, delta: f64, channels: usize) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(param_err!("step size must be positive"));
        }
        let n = a.len();
        Ok(Self {
            w_b: vec![0.0; n * channels],
            b_b: b,
            w_c: vec![0.0; n * channels],
            b_c: c,
            w_delta: vec![0.0; channels * channels],
            b_delta: vec![softplus_inverse(delta); channels],
            a,
        })
    }

    pub fn state_size(&self) -> usize {
        self.a.len()
    }

    pub fn channels(&self) -> usize {
        self.b_delta.len()
    }

    fn validate(&self) -> Result<()> {
        let (n, d) = (self.state_size(), self.channels());
        if n == 0 || d == 0 {
            return Err(param_err!("state size and channel count must be at least 1"));
        }
        let ok = self.w_b.len() == n * d
            && self.w_c.len() == n * d
            && self.b_b.len() == n
            && self.b_c.len() == n
            && self.w_delta.len() == d * d;
        if !ok {
            return Err(shape_err!("selective projections inconsistent with N={n}, D={d}"));
        }
        let all = [&self.a, &self.w_b, &self.b_b, &self.w_c, &self.b_c, &self.w_delta, &self.b_delta];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(param_err!("non-finite selective scan parameters"));
        }
        Ok(())
    }
}

/// Buffers for one selective scan in grid layout: channel-major `u[d * P + p]`,
/// visited in the order given by `order` (a permutation of `0..P`).
pub(crate) struct ScanBuffers<'a> {
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub order: &'a [usize],
    pub channels: usize,
    pub positions: usize,
}

pub(crate) struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Forward selective scan. Returns `y` in grid layout and, if requested, every
/// hidden state laid out as `[step][channel][state]`.
pub(crate) fn scan_forward(s: &ScanBuffers<'_>, keep_states: bool) -> (Vec<f64>, Vec<f64>) {
    let (d_ch, p_len, n) = (s.channels, s.positions, s.a.len());
    let steps = s.order.len();
    let mut y = vec![0.0; d_ch * p_len];
    let mut h = vec![0.0; d_ch * n];
    let mut states = if keep_states {
        Vec::with_capacity(steps * d_ch * n)
    } else {
        Vec::new()
    };
    let mut bt = vec![0.0; n];
    let mut ct = vec![0.0; n];
    for &p in s.order {
        for k in 0..n {
            bt[k] = s.b[k * p_len + p];
            ct[k] = s.c[k * p_len + p];
        }
        for d in 0..d_ch {
            let dt = s.delta[d * p_len + p];
            let ut = s.u[d * p_len + p];
            let hd = &mut h[d * n..(d + 1) * n];
            let mut acc = 0.0;
            for k in 0..n {
                let z = dt * s.a[k];
                let em1 = z.exp_m1();
                let psi = if z.abs() < ZOH_TAYLOR_THRESHOLD {
                    dt * (1.0 + z / 2.0 + z * z / 6.0)
                } else {
                    dt * em1 / z
                };
                hd[k] = (em1 + 1.0) * hd[k] + psi * bt[k] * ut;
                acc += ct[k] * hd[k];
            }
            y[d * p_len + p] = acc;
        }
        if keep_states {
            states.extend_from_slice(&h);
        }
    }
    (y, states)
}

/// Reverse-time adjoint of [`scan_forward`].
pub(crate) fn scan_backward(s: &ScanBuffers<'_>, states: &[f64], gy: &[f64]) -> ScanGrads {
    let (d_ch, p_len, n) = (s.channels, s.positions, s.a.len());
    let mut g = ScanGrads {
        u: vec![0.0; d_ch * p_len],
        delta: vec![0.0; d_ch * p_len],
        a: vec![0.0; n],
        b: vec![0.0; n * p_len],
        c: vec![0.0; n * p_len],
    };
    let mut carry = vec![0.0; d_ch * n];
    let mut bt = vec![0.0; n];
    let mut ct = vec![0.0; n];
    let mut dbt = vec![0.0; n];
    let mut dct = vec![0.0; n];
    let zeros = vec![0.0; d_ch * n];
    let stride = d_ch * n;
    for t in (0..s.order.len()).rev() {
        let p = s.order[t];
        for k in 0..n {
            bt[k] = s.b[k * p_len + p];
            ct[k] = s.c[k * p_len + p];
            dbt[k] = 0.0;
            dct[k] = 0.0;
        }
        let h_t = &states[t * stride..(t + 1) * stride];
        let h_prev = if t > 0 {
            &states[(t - 1) * stride..t * stride]
        } else {
            &zeros[..]
        };
        for d in 0..d_ch {
            let gyd = gy[d * p_len + p];
            let dt = s.delta[d * p_len + p];
            let ut = s.u[d * p_len + p];
            let mut du = 0.0;
            let mut ddt = 0.0;
            for k in 0..n {
                let idx = d * n + k;
                dct[k] += gyd * h_t[idx];
                let gh = carry[idx] + gyd * ct[k];
                let a = s.a[k];
                let z = dt * a;
                let em1 = z.exp_m1();
                let abar = em1 + 1.0;
                let psi = if z.abs() < ZOH_TAYLOR_THRESHOLD {
                    dt * (1.0 + z / 2.0 + z * z / 6.0)
                } else {
                    dt * em1 / z
                };
                let d_abar = gh * h_prev[idx];
                let d_psi = gh * ut * bt[k];
                du += gh * psi * bt[k];
                dbt[k] += gh * ut * psi;
                ddt += d_abar * a * abar + d_psi * abar;
                g.a[k] += d_abar * dt * abar + d_psi * dt * dt * zoh_factor_derivative(z);
                carry[idx] = gh * abar;
            }
            g.u[d * p_len + p] += du;
            g.delta[d * p_len + p] += ddt;
        }
        for k in 0..n {
            g.b[k * p_len + p] += dbt[k];
            g.c[k * p_len + p] += dct[k];
        }
    }
    g
}

/// Selective scan over an `L x D` row-major sequence; output has the same shape.
pub fn selective_scan(sel: &SelectiveParams, x: &[f64], len: usize) -> Result<Vec<f64>> {
    sel.validate()?;
    let (n, d) = (sel.state_size(), sel.channels());
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    if x.len() != len * d {
        return Err(shape_err!("input has {} values, expected {}x{}", x.len(), len, d));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("selective scan input".into()));
    }
    // Projections, written straight into grid layout (channel-major, step-minor).
    let mut u = vec![0.0; d * len];
    let mut delta = vec![0.0; d * len];
    let mut b = vec![0.0; n * len];
    let mut c = vec![0.0; n * len];
    for t in 0..len {
        let xt = &x[t * d..(t + 1) * d];
        for (ch, &v) in xt.iter().enumerate() {
            u[ch * len + t] = v;
        }
        for k in 0..n {
            let row_b = &sel.w_b[k * d..(k + 1) * d];
            let row_c = &sel.w_c[k * d..(k + 1) * d];
            b[k * len + t] = sel.b_b[k] + row_b.iter().zip(xt).map(|(w, v)| w * v).sum::<f64>();
            c[k * len + t] = sel.b_c[k] + row_c.iter().zip(xt).map(|(w, v)| w * v).sum::<f64>();
        }
        for ch in 0..d {
            let row = &sel.w_delta[ch * d..(ch + 1) * d];
            let pre = sel.b_delta[ch] + row.iter().zip(xt).map(|(w, v)| w * v).sum::<f64>();
            delta[ch * len + t] = softplus(pre);
        }
    }
    let order: Vec<usize> = (0..len).collect();
    let buffers = ScanBuffers {
        u: &u,
        delta: &delta,
        a: &sel.a,
        b: &b,
        c: &c,
        order: &order,
        channels: d,
        positions: len,
    };
    let (y_grid, _) = scan_forward(&buffers, false);
    let mut y = vec![0.0; len * d];
    for t in 0..len {
        for ch in 0..d {
            y[t * d + ch] = y_grid[ch * len + t];
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("selective scan output".into()));
    }
    Ok(y)
}
