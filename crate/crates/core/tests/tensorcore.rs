use tivode::{Error, Tape64, Tensor64};
use tivode_testkit::{central_diff, random_vec, rel_error, FD_STEP};

const SEEDS: u64 = 20;

/// `Σ out ⊙ R` for a fixed pseudo-random `R`, so every output element
/// carries a distinct weight into the scalar.
fn weighted_sum(tape: &Tape64, out: &Tensor64, seed: u64) -> Tensor64 {
    let r = Tensor64::new(out.shape(), random_vec(seed ^ 0xabcd, out.numel(), 1.0)).unwrap();
    tape.sum(&tape.mul(out, &r).unwrap())
}

/// Largest relative error between tape gradients and central differences
/// over every input of `f`.
fn grad_check<F>(shapes: &[&[usize]], seed: u64, f: F) -> f64
where
    F: Fn(&Tape64, &[Tensor64]) -> Tensor64,
{
    let inputs: Vec<Tensor64> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n = s.iter().product();
            Tensor64::new(s, random_vec(seed * 31 + i as u64, n, 1.0)).unwrap()
        })
        .collect();
    let tape = Tape64::new();
    let leaves: Vec<Tensor64> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &leaves);
    let loss = weighted_sum(&tape, &out, seed);
    let grads = tape.backward(&loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf).to_vec();
        let numeric = central_diff(
            |x| {
                let t = Tape64::inference();
                let mut ins = inputs.clone();
                ins[i] = Tensor64::new(inputs[i].shape(), x.to_vec()).unwrap();
                let out = f(&t, &ins);
                weighted_sum(&t, &out, seed).item()
            },
            inputs[i].data(),
            FD_STEP,
        );
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

fn assert_grad<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&Tape64, &[Tensor64]) -> Tensor64,
{
    for seed in 0..SEEDS {
        let err = grad_check(shapes, seed, &f);
        assert!(err < 1e-4, "{name}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn matmul_identity_and_hand_case() {
    let t = Tape64::inference();
    let b = Tensor64::new(&[3, 2], random_vec(1, 6, 1.0)).unwrap();
    assert_eq!(t.matmul(&Tensor64::eye(3), &b).unwrap(), b);
    let a = Tensor64::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let v = Tensor64::from_f64(&[2, 1], &[0.0, 1.0]).unwrap();
    assert_eq!(t.matmul(&a, &v).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let t = Tape64::inference();
    let err = t
        .matmul(&Tensor64::zeros(&[2, 3]), &Tensor64::zeros(&[2, 3]))
        .unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
}

#[test]
fn grad_matmul() {
    assert_grad("matmul", &[&[3, 4], &[4, 2]], |t, x| t.matmul(&x[0], &x[1]).unwrap());
}

#[test]
fn grad_of_sum_of_product_wrt_left_factor() {
    // d/dA sum(A·B) = 1·Bᵀ: every row equals the row sums of B.
    let a = Tensor64::new(&[2, 3], random_vec(3, 6, 1.0)).unwrap();
    let b = Tensor64::new(&[3, 4], random_vec(4, 12, 1.0)).unwrap();
    let tape = Tape64::new();
    let al = tape.leaf(&a);
    let loss = tape.sum(&tape.matmul(&al, &b).unwrap());
    let g = tape.backward(&loss).unwrap().wrt(&al);
    let numeric = central_diff(
        |x| {
            let t = Tape64::inference();
            let a = Tensor64::new(&[2, 3], x.to_vec()).unwrap();
            t.sum(&t.matmul(&a, &b).unwrap()).item()
        },
        a.data(),
        FD_STEP,
    );
    assert!(rel_error(g.data(), &numeric) < 1e-4);
}

#[test]
fn conv_identity_kernel_and_zero_input() {
    let t = Tape64::inference();
    let x = Tensor64::new(&[2, 1, 4, 5], random_vec(9, 40, 1.0)).unwrap();
    let w = Tensor64::full(&[1, 1, 1, 1], 1.0);
    assert_eq!(t.conv2d(&x, &w, 1, 0).unwrap(), x);
    let w = Tensor64::new(&[3, 1, 3, 3], random_vec(2, 27, 1.0)).unwrap();
    let y = t.conv2d(&Tensor64::zeros(&[1, 1, 5, 5]), &w, 1, 1).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert_eq!(y.shape(), &[1, 3, 5, 5]);
}

#[test]
fn conv_output_size_and_tiling_errors() {
    let t = Tape64::inference();
    let x = Tensor64::zeros(&[1, 1, 32, 32]);
    let w = Tensor64::zeros(&[4, 1, 4, 4]);
    assert_eq!(t.conv2d(&x, &w, 2, 1).unwrap().shape(), &[1, 4, 16, 16]);
    // (32 + 2 - 3) / 2 is not an integer.
    let w3 = Tensor64::zeros(&[4, 1, 3, 3]);
    assert!(matches!(t.conv2d(&x, &w3, 2, 1), Err(Error::Dimension { .. })));
    assert!(matches!(t.conv2d(&x, &w3, 0, 1), Err(Error::Dimension { .. })));
    let big = Tensor64::zeros(&[1, 1, 40, 40]);
    assert!(t.conv2d(&x, &big, 1, 0).is_err());
}

#[test]
fn conv_matches_direct_loop() {
    let t = Tape64::inference();
    let (c, h, w, o, k) = (2, 5, 6, 3, 3);
    let x = Tensor64::new(&[1, c, h, w], random_vec(11, c * h * w, 1.0)).unwrap();
    let wt = Tensor64::new(&[o, c, k, k], random_vec(12, o * c * k * k, 1.0)).unwrap();
    let y = t.conv2d(&x, &wt, 1, 1).unwrap();
    for oc in 0..o {
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = 0.0;
                for ic in 0..c {
                    for i in 0..k {
                        for j in 0..k {
                            let (yy, xx) = (oy as isize + i as isize - 1, ox as isize + j as isize - 1);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                acc += x.data()[(ic * h + yy as usize) * w + xx as usize]
                                    * wt.data()[((oc * c + ic) * k + i) * k + j];
                            }
                        }
                    }
                }
                let got = y.data()[(oc * h + oy) * w + ox];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn grad_conv2d() {
    assert_grad("conv2d", &[&[1, 2, 5, 5], &[3, 2, 3, 3]], |t, x| {
        t.conv2d(&x[0], &x[1], 1, 1).unwrap()
    });
    assert_grad("conv2d strided", &[&[2, 2, 6, 6], &[3, 2, 4, 4]], |t, x| {
        t.conv2d(&x[0], &x[1], 2, 1).unwrap()
    });
    assert_grad("conv2d pointwise", &[&[2, 3, 4, 4], &[2, 3, 1, 1]], |t, x| {
        t.conv2d(&x[0], &x[1], 1, 0).unwrap()
    });
}

#[test]
fn attention_single_key_and_identical_keys() {
    let t = Tape64::inference();
    let q = Tensor64::new(&[3, 4], random_vec(1, 12, 1.0)).unwrap();
    let k = Tensor64::new(&[1, 4], random_vec(2, 4, 1.0)).unwrap();
    let v = Tensor64::from_f64(&[1, 2], &[0.5, -2.0]).unwrap();
    let out = t.scaled_dot_attention(&q, &k, &v, None).unwrap();
    for row in out.data().chunks(2) {
        assert!((row[0] - 0.5).abs() < 1e-15 && (row[1] + 2.0).abs() < 1e-15);
    }
    let key = random_vec(3, 4, 1.0);
    let k = Tensor64::new(&[3, 4], key.repeat(3)).unwrap();
    let v = Tensor64::new(&[3, 2], random_vec(4, 6, 1.0)).unwrap();
    let out = t.scaled_dot_attention(&q, &k, &v, None).unwrap();
    for j in 0..2 {
        let mean = (0..3).map(|i| v.data()[i * 2 + j]).sum::<f64>() / 3.0;
        for i in 0..3 {
            assert!((out.data()[i * 2 + j] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one_and_zero_dim_errors() {
    let t = Tape64::inference();
    let q = Tensor64::new(&[4, 3], random_vec(1, 12, 2.0)).unwrap();
    let k = Tensor64::new(&[5, 3], random_vec(2, 15, 2.0)).unwrap();
    let v = Tensor64::new(&[5, 2], random_vec(3, 10, 2.0)).unwrap();
    let mask = [true, true, false, true, false];
    let (_, w) = t.attention_with_weights(&q, &k, &v, Some(&mask)).unwrap();
    for row in w.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[2], 0.0);
        assert_eq!(row[4], 0.0);
    }
    let z = Tensor64::zeros(&[2, 0]);
    assert!(matches!(
        t.scaled_dot_attention(&z, &z, &Tensor64::zeros(&[2, 1]), None),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn grad_attention() {
    assert_grad("attention", &[&[3, 4], &[5, 4], &[5, 2]], |t, x| {
        t.scaled_dot_attention(&x[0], &x[1], &x[2], None).unwrap()
    });
    let mask = [true, false, true, true, false];
    assert_grad("masked attention", &[&[3, 4], &[5, 4], &[5, 2]], |t, x| {
        t.scaled_dot_attention(&x[0], &x[1], &x[2], Some(&mask)).unwrap()
    });
}

#[test]
fn group_norm_constant_and_unit_variance() {
    let t = Tape64::inference();
    let y = t.group_norm(&Tensor64::full(&[2, 4, 3, 3], 0.7), 2, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let x = Tensor64::new(&[2, 4, 5, 5], random_vec(5, 200, 3.0)).unwrap();
    let y = t.group_norm(&x, 2, 1e-5).unwrap();
    for block in y.data().chunks(50) {
        let mean = block.iter().sum::<f64>() / 50.0;
        let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-12);
        assert!((1.0 - 1e-3..=1.0 + 1e-3).contains(&var), "{var}");
    }
    assert!(matches!(t.group_norm(&x, 3, 1e-5), Err(Error::Dimension { .. })));
}

#[test]
fn grad_group_norm() {
    assert_grad("group_norm", &[&[2, 4, 3, 3]], |t, x| t.group_norm(&x[0], 2, 1e-5).unwrap());
}

#[test]
fn grad_elementwise_and_activations() {
    assert_grad("add", &[&[3, 4], &[3, 4]], |t, x| t.add(&x[0], &x[1]).unwrap());
    assert_grad("sub", &[&[3, 4], &[3, 4]], |t, x| t.sub(&x[0], &x[1]).unwrap());
    assert_grad("mul", &[&[3, 4], &[3, 4]], |t, x| t.mul(&x[0], &x[1]).unwrap());
    assert_grad("tanh", &[&[3, 4]], |t, x| t.tanh(&x[0]));
    assert_grad("silu", &[&[3, 4]], |t, x| t.silu(&x[0]));
    assert_grad("sigmoid", &[&[3, 4]], |t, x| t.sigmoid(&x[0]));
    assert_grad("softmax", &[&[3, 4]], |t, x| t.softmax(&x[0], None).unwrap());
    assert_grad("mean", &[&[3, 4]], |t, x| t.mean(&x[0]));
}

#[test]
fn grad_structural_primitives() {
    assert_grad("concat", &[&[2, 3, 2], &[2, 1, 2]], |t, x| t.concat(&[&x[0], &x[1]], 1).unwrap());
    assert_grad("narrow", &[&[2, 5, 2]], |t, x| t.narrow(&x[0], 1, 1, 3).unwrap());
    assert_grad("reshape", &[&[2, 6]], |t, x| t.reshape(&x[0], &[3, 4]).unwrap());
    assert_grad("flatten", &[&[2, 3]], |t, x| t.flatten(&x[0]).unwrap());
    assert_grad("permute", &[&[2, 3, 4]], |t, x| t.permute(&x[0], &[2, 0, 1]).unwrap());
    assert_grad("upsample", &[&[1, 2, 3, 3]], |t, x| t.upsample(&x[0], 2).unwrap());
    assert_grad("broadcast_add", &[&[2, 3, 4], &[3]], |t, x| {
        t.broadcast_add(&x[0], &x[1], 1).unwrap()
    });
    assert_grad("broadcast_mul", &[&[2, 3, 4], &[4]], |t, x| {
        t.broadcast_mul(&x[0], &x[1], 2).unwrap()
    });
    assert_grad("embedding", &[&[5, 3]], |t, x| t.embedding(&x[0], &[4, 0, 4, 2]).unwrap());
}

#[test]
fn backward_trivial_roots() {
    let tape = Tape64::new();
    let x = tape.leaf(&Tensor64::scalar(3.0));
    assert_eq!(tape.backward(&x).unwrap().wrt(&x).data(), &[1.0]);

    let tape = Tape64::new();
    let x = tape.leaf(&Tensor64::new(&[4], random_vec(1, 4, 1.0)).unwrap());
    let loss = tape.sum(&tape.scale(&x, 2.0));
    assert_eq!(tape.backward(&loss).unwrap().wrt(&x).data(), &[2.0; 4]);

    let err = tape.backward(&x).err().unwrap();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn composite_conv_norm_attention_graph() {
    let f = |t: &Tape64, x: &[Tensor64]| {
        let y = t.conv2d(&x[0], &x[1], 1, 1).unwrap();
        let y = t.silu(&t.group_norm(&y, 2, 1e-5).unwrap());
        // [1, 4, 3, 3] -> tokens [9, 4]
        let tok = t
            .transpose(&t.reshape(&y, &[4, 9]).unwrap())
            .unwrap();
        t.scaled_dot_attention(&tok, &x[2], &x[3], None).unwrap()
    };
    assert_grad("composite", &[&[1, 2, 3, 3], &[4, 2, 3, 3], &[5, 4], &[5, 3]], f);
}

#[test]
fn shared_subexpressions_accumulate() {
    let x0 = Tensor64::new(&[5], random_vec(7, 5, 1.0)).unwrap();
    // shared: y = tanh(x); loss = sum(y*y + y)
    let tape = Tape64::new();
    let x = tape.leaf(&x0);
    let y = tape.tanh(&x);
    let loss = tape.sum(&tape.add(&tape.mul(&y, &y).unwrap(), &y).unwrap());
    let shared = tape.backward(&loss).unwrap().wrt(&x);
    // unshared: the same expression with tanh recomputed for each use
    let tape = Tape64::new();
    let x = tape.leaf(&x0);
    let (a, b, c) = (tape.tanh(&x), tape.tanh(&x), tape.tanh(&x));
    let loss = tape.sum(&tape.add(&tape.mul(&a, &b).unwrap(), &c).unwrap());
    let unshared = tape.backward(&loss).unwrap().wrt(&x);
    assert!(shared.max_abs_diff(&unshared).unwrap() < 1e-15);
}

#[test]
fn stop_gradient_is_identity_forward_and_blocks_backward() {
    let tape = Tape64::new();
    let x = tape.leaf(&Tensor64::new(&[3], random_vec(8, 3, 1.0)).unwrap());
    let s = tape.stop_gradient(&x);
    assert!(s.bit_eq(&x));
    let loss = tape.sum(&tape.add(&tape.scale(&s, 5.0), &x).unwrap());
    assert_eq!(tape.backward(&loss).unwrap().wrt(&x).data(), &[1.0; 3]);
}

#[test]
fn inference_tape_records_nothing() {
    let tape = Tape64::inference();
    let x = tape.leaf(&Tensor64::zeros(&[2, 2]));
    let y = tape.tanh(&tape.matmul(&x, &x).unwrap());
    assert!(!y.is_tracked());
    assert!(tape.is_empty());
}

#[test]
fn untracked_inputs_are_not_recorded() {
    let tape = Tape64::new();
    let c = Tensor64::zeros(&[2, 2]);
    let _ = tape.tanh(&tape.matmul(&c, &c).unwrap());
    assert!(tape.is_empty());
}

#[test]
fn f32_kernels_agree_with_f64() {
    let xs = random_vec(1, 2 * 3 * 5 * 5, 1.0);
    let ws = random_vec(2, 4 * 3 * 3 * 3, 1.0);
    let t64 = Tape64::inference();
    let y64 = t64
        .conv2d(
            &Tensor64::new(&[2, 3, 5, 5], xs.clone()).unwrap(),
            &Tensor64::new(&[4, 3, 3, 3], ws.clone()).unwrap(),
            1,
            1,
        )
        .unwrap();
    let t32 = tivode::Tape::<f32>::inference();
    let y32 = t32
        .conv2d(
            &tivode::Tensor::<f32>::new(&[2, 3, 5, 5], xs.iter().map(|&v| v as f32).collect()).unwrap(),
            &tivode::Tensor::<f32>::new(&[4, 3, 3, 3], ws.iter().map(|&v| v as f32).collect()).unwrap(),
            1,
            1,
        )
        .unwrap();
    for (a, b) in y64.data().iter().zip(y32.data()) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}
