use cmivtp_numerics::gradcheck::finite_diff_check;
use cmivtp_numerics::{NumericsError, RoiBox, Rng, Tape, Tensor};

const H: f64 = 1e-5;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

/// Weighted sum with fixed pseudo-random weights so that every output
/// coordinate carries a distinct upstream gradient.
fn probe(tape: &mut Tape, v: cmivtp_numerics::Var, seed: u64) -> cmivtp_numerics::Var {
    let shape = tape.shape(v).to_vec();
    let w = random(&mut Rng::new(seed), &shape);
    let w = tape.constant(w);
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

fn check_instances(name: &str, tol: f64, mut make: impl FnMut(&mut Rng, u64) -> f64) {
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let mut rng = Rng::new(1000 + i);
        worst = worst.max(make(&mut rng, i));
    }
    assert!(worst < tol, "{name}: max relative error {worst:e}");
}

// ---------------------------------------------------------------- matmul

#[test]
fn matmul_identity_and_projector() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = t.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.matmul(i2, m).unwrap();
    assert_eq!(t.data(y), &[1.0, 2.0, 3.0, 4.0]);

    let p = t.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let b = t.constant(Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let y = t.matmul(p, b).unwrap();
    assert_eq!(t.data(y), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        NumericsError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn matmul_gradients() {
    check_instances("matmul", 1e-6, |rng, i| {
        let b = random(rng, &[4, 2]);
        let x = random(rng, &[3, 4]);
        let r = finite_diff_check(
            |t, v| {
                let bv = t.constant(b.clone());
                let y = t.matmul(v, bv)?;
                Ok(if i == 0 { t.sum(y) } else { probe(t, y, i) })
            },
            &x,
            H,
        )
        .unwrap();
        let r2 = finite_diff_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let y = t.matmul(xv, v)?;
                Ok(probe(t, y, i))
            },
            &b,
            H,
        )
        .unwrap();
        r.max_rel_error.max(r2.max_rel_error)
    });
}

// ---------------------------------------------------------------- conv2d

#[test]
fn conv2d_scalar_kernel_scales() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::filled(&[1, 3, 3], 1.0));
    let k = t.constant(Tensor::filled(&[1, 1, 1, 1], 2.0));
    let y = t.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 3]);
    assert!(t.data(y).iter().all(|&v| v == 2.0));
}

#[test]
fn conv2d_impulse_reproduces_flipped_kernel() {
    let mut x = Tensor::zeros(&[1, 5, 5]);
    x.data_mut()[2 * 5 + 2] = 1.0;
    let kdata: Vec<f64> = (1..=9).map(f64::from).collect();
    let mut t = Tape::new();
    let xv = t.constant(x);
    let kv = t.constant(Tensor::new(&[1, 1, 3, 3], kdata.clone()).unwrap());
    let y = t.conv2d(xv, kv, None, 1, 1).unwrap();
    let out = t.data(y);
    for a in 0..3 {
        for b in 0..3 {
            // cross-correlation: out[i][j] = k[3-i][3-j] around the impulse
            assert_eq!(out[(1 + a) * 5 + (1 + b)], kdata[(2 - a) * 3 + (2 - b)]);
        }
    }
    assert_eq!(out[0], 0.0);
}

#[test]
fn conv2d_output_size_and_kernel_too_large() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 7, 6]));
    let k = t.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let y = t.conv2d(x, k, None, 2, 1).unwrap();
    // ⌊(7+2−3)/2⌋+1 = 4, ⌊(6+2−3)/2⌋+1 = 3
    assert_eq!(t.shape(y), &[4, 4, 3]);

    let small = t.constant(Tensor::zeros(&[2, 3, 3]));
    let big = t.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let err = t.conv2d(small, big, None, 1, 0).unwrap_err();
    assert!(t.conv2d(small, big, None, 1, 1).is_ok());
    assert!(matches!(err, NumericsError::KernelTooLarge { .. }));
}

#[test]
fn conv2d_gradients() {
    check_instances("conv2d", 1e-5, |rng, i| {
        let stride = 1 + (i as usize % 2);
        let pad = i as usize % 2;
        let x = random(rng, &[2, 5, 5]);
        let k = random(rng, &[3, 2, 3, 3]);
        let b = random(rng, &[3]);
        let rx = finite_diff_check(
            |t, v| {
                let kv = t.constant(k.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(v, kv, Some(bv), stride, pad)?;
                Ok(probe(t, y, i))
            },
            &x,
            H,
        )
        .unwrap();
        let rk = finite_diff_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let y = t.conv2d(xv, v, None, stride, pad)?;
                Ok(probe(t, y, i))
            },
            &k,
            H,
        )
        .unwrap();
        let rb = finite_diff_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let kv = t.constant(k.clone());
                let y = t.conv2d(xv, kv, Some(v), stride, pad)?;
                Ok(probe(t, y, i))
            },
            &b,
            H,
        )
        .unwrap();
        rx.max_rel_error.max(rk.max_rel_error).max(rb.max_rel_error)
    });
}

// ---------------------------------------------------------------- softmax

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let s = t.softmax(a);
    assert_close(t.data(s), &[1.0 / 3.0; 3], 1e-15);

    let a = t.constant(Tensor::vector(vec![1000.0, 0.0]));
    let s = t.softmax(a);
    assert!(t.value(s).is_finite());
    assert!((t.data(s)[0] - 1.0).abs() < 1e-300_f64.max(f64::EPSILON));
    assert!(t.data(s)[1] < 1e-300);

    let a = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = t.softmax(a);
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let direct: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
    assert_close(t.data(s), &direct, 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = Rng::new(5);
    for _ in 0..20 {
        let x = Tensor::new(&[4, 7], (0..28).map(|_| rng.uniform_in(-30.0, 30.0)).collect()).unwrap();
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.softmax(v);
        for row in t.data(s).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_gradients() {
    check_instances("softmax", 1e-6, |rng, i| {
        let x = random(rng, &[3, 4]);
        finite_diff_check(
            |t, v| {
                let s = t.softmax(v);
                Ok(probe(t, s, i))
            },
            &x,
            H,
        )
        .unwrap()
        .max_rel_error
    });
}

#[test]
fn softmax_cross_section_composite_self_test() {
    // log-sum of a softmax slice: exercises softmax, slice, row_norm together
    let mut rng = Rng::new(77);
    let x = random(&mut rng, &[3, 5]);
    let r = finite_diff_check(
        |t, v| {
            let s = t.softmax(v);
            let col = t.slice_cols(s, 1, 3)?;
            let n = t.row_norm(col)?;
            Ok(t.sum(n))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

// ---------------------------------------------------------------- layer norm

fn ln(t: &mut Tape, x: Tensor) -> Vec<f64> {
    let d = *x.shape().last().unwrap();
    let xv = t.constant(x);
    let g = t.constant(Tensor::filled(&[d], 1.0));
    let b = t.constant(Tensor::zeros(&[d]));
    let y = t.layer_norm(xv, g, b).unwrap();
    t.data(y).to_vec()
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    assert_eq!(ln(&mut t, Tensor::filled(&[1, 4], 3.3)), vec![0.0; 4]);
    let y = ln(&mut t, Tensor::vector(vec![1.0, -1.0]));
    assert_close(&y, &[1.0, -1.0], 1e-5);

    let mut rng = Rng::new(9);
    for _ in 0..20 {
        let x = Tensor::vector((0..16).map(|_| rng.uniform_in(-5.0, 5.0)).collect());
        let var_in = {
            let d = x.data();
            let m = d.iter().sum::<f64>() / 16.0;
            d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0
        };
        let y = ln(&mut t, x);
        let mean = y.iter().sum::<f64>() / 16.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        // unit variance up to the ε inside the square root
        assert!((var - var_in / (var_in + 1e-5)).abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-6 * (1.0 + 1.0 / var_in));
    }
}

#[test]
fn layer_norm_gradients() {
    check_instances("layer_norm", 1e-5, |rng, i| {
        let x = random(rng, &[3, 6]);
        let g = random(rng, &[6]);
        let b = random(rng, &[6]);
        let rx = finite_diff_check(
            |t, v| {
                let gv = t.constant(g.clone());
                let bv = t.constant(b.clone());
                let y = t.layer_norm(v, gv, bv)?;
                Ok(probe(t, y, i))
            },
            &x,
            H,
        )
        .unwrap();
        let rg = finite_diff_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let bv = t.constant(b.clone());
                let y = t.layer_norm(xv, v, bv)?;
                Ok(probe(t, y, i))
            },
            &g,
            H,
        )
        .unwrap();
        rx.max_rel_error.max(rg.max_rel_error)
    });
}

// ---------------------------------------------------------------- roi align

fn roi(t: &mut Tape, fmap: Tensor, b: RoiBox, p: usize, scale: f64) -> Vec<f64> {
    let f = t.constant(fmap);
    let y = t.roi_align(f, b, p, scale).unwrap();
    t.data(y).to_vec()
}

#[test]
fn roi_align_constant_field() {
    let mut t = Tape::new();
    for b in [
        RoiBox::new(0.0, 0.0, 8.0, 8.0),
        RoiBox::new(1.3, 2.2, 5.1, 3.9),
        RoiBox::new(-3.0, -1.0, 20.0, 30.0),
    ] {
        let out = roi(&mut t, Tensor::filled(&[2, 4, 4], 3.0), b, 7, 0.5);
        assert_eq!(out.len(), 2 * 49);
        assert!(out.iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }
    assert_eq!(t.roi_degenerate_count(), 0);
}

#[test]
fn roi_align_full_box_on_ramp_hits_cell_centers() {
    // f(row, col) = col + 10·row on a 4×4 map; P = 2 bins of 2×2 pixels.
    // Bin centers sit at continuous (1,1), (3,1), (1,3), (3,3), i.e. pixel
    // index coordinates (0.5, 0.5) … where the bilinear ramp equals
    // 0.5 + 10·0.5 = 5.5, 2.5 + 5 = 7.5, 0.5 + 25 = 25.5, 27.5.
    let data: Vec<f64> = (0..16).map(|i| (i % 4) as f64 + 10.0 * (i / 4) as f64).collect();
    let mut t = Tape::new();
    let out = roi(
        &mut t,
        Tensor::new(&[1, 4, 4], data).unwrap(),
        RoiBox::new(0.0, 0.0, 4.0, 4.0),
        2,
        1.0,
    );
    assert_close(&out, &[5.5, 7.5, 25.5, 27.5], 1e-12);
}

#[test]
fn roi_align_degenerate_box_samples_center() {
    let data: Vec<f64> = (0..16).map(|i| (i % 4) as f64).collect();
    let mut t = Tape::new();
    let out = roi(
        &mut t,
        Tensor::new(&[1, 4, 4], data).unwrap(),
        RoiBox::new(2.0, 1.0, 2.0, 3.0),
        3,
        1.0,
    );
    // center (2, 2) → index u = 1.5 → ramp value 1.5
    assert!(out.iter().all(|&v| (v - 1.5).abs() < 1e-12));
    assert_eq!(t.roi_degenerate_count(), 1);
}

#[test]
fn roi_align_gradients() {
    check_instances("roi_align", 1e-5, |rng, i| {
        let f = random(rng, &[2, 5, 6]);
        let x0 = rng.uniform_in(-2.0, 8.0);
        let y0 = rng.uniform_in(-2.0, 8.0);
        let b = RoiBox::new(x0, y0, x0 + rng.uniform_in(0.5, 10.0), y0 + rng.uniform_in(0.5, 10.0));
        finite_diff_check(
            |t, v| {
                let y = t.roi_align(v, b, 3, 0.5)?;
                Ok(probe(t, y, i))
            },
            &f,
            H,
        )
        .unwrap()
        .max_rel_error
    });
}

// ---------------------------------------------------------------- elementwise & shape ops

#[test]
fn elementwise_and_shape_gradients() {
    check_instances("elementwise", 1e-5, |rng, i| {
        let x = random(rng, &[4, 6]);
        let other = random(rng, &[4, 6]);
        let bias = random(rng, &[6]);
        let scal = random(rng, &[1]);
        let r = finite_diff_check(
            |t, v| {
                let o = t.constant(other.clone());
                let b = t.constant(bias.clone());
                let s = t.constant(scal.clone());
                let a1 = t.add(v, o)?;
                let a2 = t.mul(a1, v)?;
                let a3 = t.sub(a2, o)?;
                let a4 = t.add_bias(a3, b)?;
                let a5 = t.sigmoid(a4);
                let a6 = t.tanh(v);
                let a7 = t.exp(a6);
                let a8 = t.mul_scalar(a7, s)?;
                let a9 = t.clamp(v, -0.5, 0.5);
                let c = t.concat(&[a5, a8, a9])?;
                let sl = t.slice(c, 2, 9)?;
                let tr = t.transpose(sl)?;
                let cc = t.concat_cols(&[tr, tr])?;
                let sc = t.slice_cols(cc, 1, 10)?;
                let rs = t.reshape(sc, &[9, 6])?;
                let mr = t.mean_rows(rs)?;
                let sq = t.scale(mr, 3.0);
                let rn = t.row_norm(a5)?;
                let r1 = probe(t, sq, i);
                let r2 = t.mean(rn);
                let r3 = t.add(r1, r2)?;
                let relu_in = t.add_scalar(v, 0.05);
                let relu = t.relu(relu_in);
                let r4 = probe(t, relu, i + 1);
                t.add(r3, r4)
            },
            &x,
            H,
        )
        .unwrap();
        r.max_rel_error
    });
}

#[test]
fn mul_scalar_and_pool_gradients() {
    check_instances("mul_scalar/pool", 1e-5, |rng, i| {
        let x = random(rng, &[3, 4, 4]);
        let s = random(rng, &[1]);
        let r1 = finite_diff_check(
            |t, v| {
                let sv = t.constant(s.clone());
                let y = t.mul_scalar(v, sv)?;
                let p = t.global_avg_pool(y)?;
                Ok(probe(t, p, i))
            },
            &x,
            H,
        )
        .unwrap();
        let r2 = finite_diff_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let y = t.mul_scalar(xv, v)?;
                Ok(probe(t, y, i))
            },
            &s,
            H,
        )
        .unwrap();
        r1.max_rel_error.max(r2.max_rel_error)
    });
}

// ---------------------------------------------------------------- backward

#[test]
fn backward_linear_and_quadratic() {
    let w = Tensor::vector(vec![1.0, -2.0, 0.5]).with_requires_grad(true);
    let mut t = Tape::new();
    let v = t.leaf(w.clone());
    let s = t.sum(v);
    t.backward(s).unwrap();
    assert_eq!(t.grad(v).unwrap(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let v = t.leaf(w);
    let sq = t.mul(v, v).unwrap();
    let s = t.sum(sq);
    t.backward(s).unwrap();
    assert_eq!(t.grad(v).unwrap(), &[2.0, -4.0, 1.0]);

    // repeated backward accumulates
    t.backward(s).unwrap();
    assert_eq!(t.grad(v).unwrap(), &[4.0, -8.0, 2.0]);
    t.zero_grads();
    assert!(t.grad(v).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let v = t.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
    assert_eq!(t.backward(v), Err(NumericsError::NonScalarLoss(vec![2])));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let v = t.leaf(Tensor::vector(vec![3.0, 4.0]).with_requires_grad(true));
    let p = t.mul(c, v).unwrap();
    let s = t.sum(p);
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
    assert_eq!(t.grad(v).unwrap(), &[1.0, 2.0]);
}

#[test]
fn branch_signature_tracks_relu_and_clamp_regions() {
    let sig = |vals: Vec<f64>| {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(vals));
        let r = t.relu(v);
        t.clamp(r, 0.0, 1.0);
        t.branch_signature()
    };
    assert_eq!(sig(vec![0.5, -1.0]), sig(vec![0.25, -3.0]));
    assert_ne!(sig(vec![0.5, -1.0]), sig(vec![0.5, 1.0]));
    assert_ne!(sig(vec![0.5, -1.0]), sig(vec![1.5, -1.0]));
    assert_eq!(Tape::new().branch_signature(), 0);
}
