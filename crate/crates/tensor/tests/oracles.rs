use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slc_tensor::{ConvSpec, Tape, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct sliding-window convolution.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, p: usize, d: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.nchw().unwrap();
    let (o, _, k, _) = w.nchw().unwrap();
    let ho = (h + 2 * p - d * (k - 1) - 1) / s + 1;
    let wo = (wd + 2 * p - d * (k - 1) - 1) / s + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for i in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky * d) as isize - p as isize;
                                let ix = (ox * s + kx * d) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[i, ic, iy as usize, ix as usize]) * w.at(&[oc, ic, ky, kx]);
                                }
                            }
                        }
                    }
                    out[((i * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, ho, wo], out).unwrap()
}

/// Scatter-add definition of a transposed convolution.
fn scatter_conv_transpose(x: &Tensor<f64>, w: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.nchw().unwrap();
    let (_, o, k, _) = w.nchw().unwrap();
    let (ho, wo) = ((h - 1) * s + k, (wd - 1) * s + k);
    let mut out = vec![0.0; n * o * ho * wo];
    for i in 0..n {
        for ic in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.at(&[i, ic, y, xx]);
                    for oc in 0..o {
                        for ky in 0..k {
                            for kx in 0..k {
                                out[((i * o + oc) * ho + y * s + ky) * wo + xx * s + kx] += v * w.at(&[ic, oc, ky, kx]);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, o, ho, wo], out).unwrap()
}

#[test]
fn conv2d_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, None, ConvSpec::new(1, 0, 2)).unwrap();
    let oracle = naive_conv(&x, &w, None, 1, 0, 2);
    assert_eq!(tape.shape(y), oracle.shape());
    assert!(tape.value(y).max_abs_diff(&oracle) < 1e-6);
}

#[test]
fn conv2d_oracle_over_geometry_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (k, s, p, d) in [(1, 1, 0, 1), (1, 2, 0, 1), (3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 3, 3), (3, 2, 2, 2), (5, 1, 2, 1), (2, 2, 0, 1)] {
        let x = random(&[2, 2, 9, 7], &mut rng);
        let w = random(&[3, 2, k, k], &mut rng);
        let b = random(&[3], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), ConvSpec::new(s, p, d)).unwrap();
        let oracle = naive_conv(&x, &w, Some(&b), s, p, d);
        assert_eq!(tape.shape(y), oracle.shape(), "k{k} s{s} p{p} d{d}");
        assert!(tape.value(y).max_abs_diff(&oracle) < 1e-12, "k{k} s{s} p{p} d{d}");
    }
}

#[test]
fn conv_transpose_matches_scatter_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 1, 2, 2], &mut rng);
    let w = random(&[1, 1, 2, 2], &mut rng);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv_transpose2d(xv, wv, None, 2).unwrap();
    let oracle = scatter_conv_transpose(&x, &w, 2);
    assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    assert!(tape.value(y).max_abs_diff(&oracle) < 1e-12);

    for (k, s) in [(3, 2), (2, 1), (3, 3)] {
        let x = random(&[2, 3, 4, 3], &mut rng);
        let w = random(&[3, 2, k, k], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv_transpose2d(xv, wv, None, s).unwrap();
        assert!(tape.value(y).max_abs_diff(&scatter_conv_transpose(&x, &w, s)) < 1e-12);
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (k, s) in [(2, 2), (3, 2), (3, 1)] {
        // conv: (1,4,H,W) -> (1,3,h,w) with kernel (3,4,k,k); transpose uses the same kernel.
        let x = random(&[2, 4, 9, 9], &mut rng);
        let w = random(&[3, 4, k, k], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let cx = tape.conv2d(xv, wv, None, ConvSpec::new(s, 0, 1)).unwrap();
        let y = random(tape.shape(cx), &mut rng);
        // Kernel (O=3, C=4) read as a transposed-conv kernel (Cin=3, Cout=4).
        let yv = tape.constant(y.clone());
        let ty = tape.conv_transpose2d(yv, wv, None, s).unwrap();
        let lhs = tape.value(cx).dot(&y);
        // Transposed output may be smaller than x when stride does not tile it.
        let (_, _, th, tw) = tape.value(ty).nchw().unwrap();
        let mut rhs = 0.0;
        for i in 0..2 {
            for c in 0..4 {
                for r in 0..th {
                    for q in 0..tw {
                        rhs += x.at(&[i, c, r, q]) * tape.value(ty).at(&[i, c, r, q]);
                    }
                }
            }
        }
        assert!((lhs - rhs).abs() < 1e-6, "k{k} s{s}: {lhs} vs {rhs}");
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&[5, 7], &mut rng);
    let b = random(&[7, 3], &mut rng);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(av, bv).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let expect: f64 = (0..7).map(|l| a.at(&[i, l]) * b.at(&[l, j])).sum();
            assert!((tape.value(c).at(&[i, j]) - expect).abs() < 1e-9);
        }
    }
    let eye = Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
    let x = random(&[2, 4], &mut rng);
    let (ev, xv) = (tape.constant(eye), tape.constant(x.clone()));
    let y = tape.matmul(ev, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn bmm_transposed_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random(&[3, 4, 5], &mut rng);
    let b = random(&[3, 6, 5], &mut rng);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.bmm(av, bv, true).unwrap();
    assert_eq!(tape.shape(c), &[3, 4, 6]);
    for t in 0..3 {
        for i in 0..4 {
            for j in 0..6 {
                let expect: f64 = (0..5).map(|l| a.at(&[t, i, l]) * b.at(&[t, j, l])).sum();
                assert!((tape.value(c).at(&[t, i, j]) - expect).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        values in proptest::collection::vec(-30.0f64..30.0, 12),
        shift in -500.0f64..500.0,
        axis in 0usize..2,
    ) {
        let mut tape = Tape::new();
        let x = Tensor::new(&[3, 4], values.clone()).unwrap();
        let shifted = Tensor::new(&[3, 4], values.iter().map(|v| v + shift).collect()).unwrap();
        let (xv, sv) = (tape.constant(x), tape.constant(shifted));
        let (y, ys) = (tape.softmax(xv, axis).unwrap(), tape.softmax(sv, axis).unwrap());
        let y = tape.value(y);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0 && v <= 1.0));
        let (outer, len) = if axis == 0 { (4, 3) } else { (3, 4) };
        for o in 0..outer {
            let total: f64 = (0..len).map(|j| if axis == 0 { y.at(&[j, o]) } else { y.at(&[o, j]) }).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
        prop_assert!(y.max_abs_diff(tape.value(ys)) < 1e-9);
    }

    #[test]
    fn permute_roundtrip(perm_idx in 0usize..24, seed in any::<u64>()) {
        let mut perms = Vec::new();
        for a in 0..4 { for b in 0..4 { for c in 0..4 { for d in 0..4 {
            let p = [a, b, c, d];
            let mut s = p; s.sort();
            if s == [0, 1, 2, 3] { perms.push(p); }
        }}}}
        let perm = perms[perm_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let mut inv = [0; 4];
        for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.permute(xv, &perm).unwrap();
        let z = tape.permute(y, &inv).unwrap();
        prop_assert_eq!(tape.value(z), &x);
    }
}
