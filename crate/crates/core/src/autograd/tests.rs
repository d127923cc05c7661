use super::*;
use crate::nps::{RadialBins, RadialLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Compares analytic gradients of `sum(f(inputs) * probe)` against central
/// differences for every input element; returns the worst relative error.
fn fd_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
        let y = f(&mut t, &vs);
        t.value(y).shape().to_vec()
    };
    let probe = random(&probe_shape, &mut rng, -1.0, 1.0);
    let eval = |xs: &[Tensor]| -> (f64, Option<Vec<Tensor>>, Tape, Vec<Var>) {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.input(x.clone())).collect();
        let y = f(&mut t, &vs);
        let p = t.constant(probe.clone());
        let m = t.mul(y, p).unwrap();
        let s = t.sum(m);
        (t.value(s).item(), None, t, vec![s])
    };
    let (_, _, tape, s) = eval(inputs);
    let grads = tape.backward(s[0]).unwrap();
    let analytic: Vec<Tensor> = (0..inputs.len())
        .map(|i| {
            grads
                .wrt(Var(i))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()))
        })
        .collect();
    // Entries far below the largest gradient are judged against that scale, since
    // central differences cannot resolve them relatively.
    let floor = analytic.iter().map(Tensor::max_abs).fold(1e-8, f64::max) * 1e-3;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        for k in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[k] += h;
            let fp = eval(&xs).0;
            xs[i].data_mut()[k] -= 2.0 * h;
            let fm = eval(&xs).0;
            let num = (fp - fm) / (2.0 * h);
            let a = analytic[i].data()[k];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn quadratic_gradient_is_parameter() {
    let p = Tensor::new(&[3], vec![1.5, -2.0, 0.25]).unwrap();
    let mut t = Tape::new();
    let v = t.param(0, &p);
    let sq = t.mul(v, v).unwrap();
    let s = t.sum(sq);
    let l = t.scale(s, 0.5);
    let g = t.backward(l).unwrap();
    assert_eq!(g.param(0).unwrap(), &p);
}

#[test]
fn abs_subgradient_at_zero_is_zero() {
    let mut t = Tape::new();
    let y = t.constant(Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
    let p = t.param(0, &Tensor::zeros(&[2]));
    let yh = t.add(y, p).unwrap();
    let d = t.sub(yh, y).unwrap();
    let a = t.abs(d);
    let l = t.mean(a);
    let g = t.backward(l).unwrap();
    assert_eq!(g.param(0).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn params_are_deduplicated() {
    let p = Tensor::scalar(2.0);
    let mut t = Tape::new();
    let a = t.param(7, &p);
    let b = t.param(7, &p);
    assert_eq!(a, b);
    let m = t.mul(a, b).unwrap();
    let g = t.backward(m).unwrap();
    assert_eq!(g.param(7).unwrap().item(), 4.0);
}

#[test]
fn opaque_node_in_gradient_path_is_an_error() {
    let mut t = Tape::new();
    let x = t.input(Tensor::scalar(1.0));
    let o = t.opaque("external_filter", &[x], Tensor::scalar(2.0));
    let err = t.backward(o).err().unwrap();
    assert!(matches!(err, Error::UnsupportedOp(ref n) if n == "external_filter"));
    // A constant-only opaque node is fine.
    let c = t.constant(Tensor::scalar(1.0));
    let o2 = t.opaque("const_only", &[c], Tensor::scalar(3.0));
    let s = t.add(o2, x).unwrap();
    assert!(t.backward(s).is_ok());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(&[2]));
    assert!(t.backward(x).is_err());
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3], &mut rng, -2.0, 2.0);
    let b = random(&[2, 3], &mut rng, -2.0, 2.0);
    let worst = fd_check(
        &[a, b],
        |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[1]).unwrap();
            let m = t.mul(d, v[1]).unwrap();
            let e = t.exp(m);
            let si = t.silu(e);
            let sp = t.softplus(v[0]);
            let k = t.scale(sp, -0.7);
            let k = t.add_scalar(k, 0.3);
            let q = t.add(si, k).unwrap();
            let ab = t.abs(v[1]);
            t.mul(q, ab).unwrap()
        },
        1e-6,
    );
    assert!(worst < 1e-6, "worst {worst}");
}

#[test]
fn reductions_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[4, 2], &mut rng, -1.0, 1.0);
    let worst = fd_check(
        &[a],
        |t, v| {
            let n = t.norm2(v[0]);
            let m = t.mean(v[0]);
            let s = t.sum(v[0]);
            let x = t.mul(n, m).unwrap();
            t.add(x, s).unwrap()
        },
        1e-6,
    );
    assert!(worst < 1e-6, "worst {worst}");
}

#[test]
fn shape_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 4, 4], &mut rng, -1.0, 1.0);
    let b = random(&[1, 4, 4], &mut rng, -1.0, 1.0);
    let s = random(&[3], &mut rng, -1.0, 1.0);
    let worst = fd_check(
        &[a, b, s],
        |t, v| {
            let c = t.concat(&[v[0], v[1]]).unwrap();
            let c = t.mul_channel(c, v[2]).unwrap();
            let c = t.mul(c, c).unwrap();
            let sd = t.space_to_depth(c).unwrap();
            let sl = t.slice_channels(sd, 2, 8).unwrap();
            let ds = t.depth_to_space(sl).unwrap();
            let p = t.avg_pool2(ds).unwrap();
            let u = t.upsample2(p).unwrap();
            let r = t.reshape(u, &[2, 16]).unwrap();
            t.reshape(r, &[2, 4, 4]).unwrap()
        },
        1e-6,
    );
    assert!(worst < 1e-6, "worst {worst}");
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (ci, co, k, stride, pad, groups) in [(2, 3, 3, 1, 1, 1), (4, 4, 3, 1, 1, 4), (2, 2, 3, 2, 1, 1), (3, 2, 1, 1, 0, 1)] {
        let x = random(&[ci, 5, 6], &mut rng, -1.0, 1.0);
        let w = random(&[co, ci / groups, k, k], &mut rng, -1.0, 1.0);
        let b = random(&[co], &mut rng, -1.0, 1.0);
        let worst = fd_check(
            &[x, w, b],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad, groups).unwrap();
                t.mul(y, y).unwrap()
            },
            1e-6,
        );
        assert!(worst < 1e-6, "conv ({ci},{co},{k},{stride},{pad},{groups}) worst {worst}");
    }
}

#[test]
fn layer_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 2, 2], &mut rng, -1.0, 1.0);
    let g = random(&[3], &mut rng, 0.5, 1.5);
    let b = random(&[3], &mut rng, -0.5, 0.5);
    let worst = fd_check(&[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(), 1e-6);
    assert!(worst < 1e-5, "worst {worst}");
}

#[test]
fn wavelet_ops_match_finite_differences_and_invert() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 4, 6], &mut rng, -1.0, 1.0);
    let worst = fd_check(
        &[x.clone()],
        |t, v| {
            let d = t.dwt2(v[0]).unwrap();
            let sq = t.mul(d, d).unwrap();
            t.idwt2(sq).unwrap()
        },
        1e-6,
    );
    assert!(worst < 1e-6, "worst {worst}");
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let d = t.dwt2(v).unwrap();
    let r = t.idwt2(d).unwrap();
    for (a, b) in t.value(r).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn dwt2_band_layout_matches_plain_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 4, 4], &mut rng, -1.0, 1.0);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let d = t.dwt2(v).unwrap();
    let y = t.value(d);
    for ch in 0..2 {
        let bands = crate::wavelet::dwt2(x.channel(ch), 4, 4).unwrap();
        let expect = [&bands.ll, &bands.lh, &bands.hl, &bands.hh];
        for (k, band) in expect.iter().enumerate() {
            assert_eq!(y.channel(k * 2 + ch), band.as_slice());
        }
    }
}

#[test]
fn fourier_gate_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (h, w) in [(4, 4), (3, 5), (4, 6)] {
        let x = random(&[2, h, w], &mut rng, -1.0, 1.0);
        let g = random(&[2, h, w / 2 + 1], &mut rng, 0.2, 1.5);
        let worst = fd_check(&[x, g], |t, v| t.fourier_gate(v[0], v[1]).unwrap(), 1e-6);
        assert!(worst < 1e-6, "{h}x{w} worst {worst}");
    }
}

#[test]
fn nps_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let layout = Rc::new(RadialLayout::new(8, 8, 0.5, 0.5, None).unwrap());
    for detrend in [false, true] {
        let x = random(&[2, 8, 8], &mut rng, -1.0, 1.0);
        let l = layout.clone();
        let worst = fd_check(
            &[x],
            move |t, v| {
                let n = t.nps2d(v[0], 0.5, 0.5, detrend).unwrap();
                t.radialize(n, l.clone()).unwrap()
            },
            1e-6,
        );
        assert!(worst < 1e-5, "detrend {detrend} worst {worst}");
    }
    // Explicit bins also cover non-square maps.
    let x = random(&[1, 4, 6], &mut rng, -1.0, 1.0);
    let lay = Rc::new(
        RadialLayout::new(4, 6, 1.0, 1.0, Some(RadialBins { count: 3, spacing: 0.25 })).unwrap(),
    );
    let worst = fd_check(
        &[x],
        move |t, v| {
            let n = t.nps2d(v[0], 1.0, 1.0, true).unwrap();
            t.radialize(n, lay.clone()).unwrap()
        },
        1e-6,
    );
    assert!(worst < 1e-5, "worst {worst}");
}

#[test]
fn pearson_matches_finite_differences_and_plain_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random(&[6], &mut rng, -1.0, 1.0);
    let b = random(&[6], &mut rng, -1.0, 1.0);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let r = t.pearson(va, vb).unwrap();
    let plain = crate::nps::pearson(a.data(), b.data()).unwrap();
    assert!((t.value(r).item() - plain).abs() < 1e-14);
    let worst = fd_check(&[a, b], |t, v| t.pearson(v[0], v[1]).unwrap(), 1e-6);
    assert!(worst < 1e-5, "worst {worst}");
}

#[test]
fn pearson_degenerate_is_one_with_zero_gradient() {
    let mut t = Tape::new();
    let a = t.input(Tensor::full(&[4], 2.0));
    let b = t.input(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let r = t.pearson(a, b).unwrap();
    assert_eq!(t.value(r).item(), 1.0);
    let g = t.backward(r).unwrap();
    assert!(g.wrt(a).is_none_or(|g| g.max_abs() == 0.0));
    assert!(g.wrt(b).is_none_or(|g| g.max_abs() == 0.0));
}

#[test]
fn selective_scan_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, h, w, n) = (2, 3, 3, 3);
    let u = random(&[d, h, w], &mut rng, -1.0, 1.0);
    let dl = random(&[d, h, w], &mut rng, 0.05, 0.8);
    let a = random(&[n], &mut rng, -2.0, -0.2);
    let b = random(&[n, h, w], &mut rng, -1.0, 1.0);
    let c = random(&[n, h, w], &mut rng, -1.0, 1.0);
    let order = Rc::new(
        crate::scan_order::ScanOrder::generate(crate::scan_order::ScanKind::Zigzag, h, w)
            .unwrap()
            .flat_indices(),
    );
    let worst = fd_check(
        &[u, dl, a, b, c],
        move |t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], order.clone()).unwrap(),
        1e-6,
    );
    assert!(worst < 1e-5, "worst {worst}");
}
