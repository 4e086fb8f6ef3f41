use tivode::checkpoint::Checkpoint;
use tivode::nn::{keyed_rng, Bound};
use tivode::vqvae::{grid_to_sites, pretrain_epoch, vq_loss, Codebook, CodebookMode, VqConfig, VqTrainConfig, VqTrainer, VqVae};
use tivode::{Error, Tape64, Tensor64};
use tivode_testkit::{brute_force_argmin, central_diff_at, kmeans_m_step, random_vec, rel_error, FD_STEP};

fn small() -> VqConfig {
    VqConfig {
        codebook_size: 8,
        code_dim: 4,
        width1: 4,
        width2: 8,
        groups: 2,
        ..VqConfig::default()
    }
}

fn image(seed: u64, b: usize, side: usize) -> Tensor64 {
    let v = random_vec(seed, b * side * side, 0.5).into_iter().map(|x| x + 0.5).collect();
    Tensor64::new(&[b, 1, side, side], v).unwrap()
}

type LossFn = dyn Fn(&VqVae<f64>, &Tape64, &Bound<f64>) -> Tensor64;

/// Tape gradients of `loss` against central differences on a few entries of
/// every parameter whose name starts with `prefix`.
fn check_params(model: &VqVae<f64>, prefix: &str, loss: &LossFn) {
    let tape = Tape64::new();
    let b = model.params.bind(&tape);
    let grads = tape.backward(&loss(model, &tape, &b)).unwrap();
    let analytic = model.params.gradients(&b, &grads);
    let mut checked = 0;
    for (id, g) in analytic {
        let name = model.params.name(id).to_string();
        if !name.starts_with(prefix) {
            continue;
        }
        let base = model.params.get(id).to_vec();
        let idx: Vec<usize> = (0..base.len()).step_by((base.len() / 5).max(1)).take(5).collect();
        let numeric = central_diff_at(
            |x| {
                let mut probe = model.clone();
                let shape = probe.params.get(id).shape().to_vec();
                probe.params.set(id, Tensor64::new(&shape, x.to_vec()).unwrap()).unwrap();
                let t = Tape64::inference();
                let b = probe.params.bind(&t);
                loss(&probe, &t, &b).item()
            },
            &base,
            &idx,
            FD_STEP,
        );
        let picked: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        let err = rel_error(&picked, &numeric);
        assert!(err < 1e-4, "{name}: relative error {err:e}");
        checked += 1;
    }
    assert!(checked > 0, "no parameters under {prefix}");
}

#[test]
fn encode_shapes_and_divisibility() {
    let model = VqVae::<f64>::new(small(), 1).unwrap();
    let z = model.encode_frames(&image(1, 2, 32)).unwrap();
    assert_eq!(z.shape(), &[2, 4, 8, 8]);
    let err = model.encode_frames(&image(1, 1, 30)).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }), "{err}");
}

#[test]
fn identical_images_give_identical_latents() {
    let model = VqVae::<f64>::new(small(), 2).unwrap();
    let x = image(5, 1, 16);
    let both = Tensor64::stack(&[x.clone(), x.clone()]).unwrap();
    let z = model.encode_frames(&both).unwrap();
    assert_eq!(z.index_outer(0).unwrap().data(), z.index_outer(1).unwrap().data());
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let model = VqVae::<f64>::new(small(), 3).unwrap();
    let x = image(7, 2, 8);
    check_params(&model, "enc.", &move |m, t, b| t.sum(&m.encode(t, b, &x).unwrap()));
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let model = VqVae::<f64>::new(small(), 4).unwrap();
    let z = Tensor64::new(&[1, 4, 2, 2], random_vec(9, 16, 1.0)).unwrap();
    let r = Tensor64::new(&[1, 1, 8, 8], random_vec(10, 64, 1.0)).unwrap();
    check_params(&model, "dec.", &move |m, t, b| {
        let x = m.decode(t, b, &z).unwrap();
        t.sum(&t.mul(&x, &r).unwrap())
    });
}

#[test]
fn decode_range_is_unit_interval() {
    let model = VqVae::<f64>::new(small(), 5).unwrap();
    let z = Tensor64::new(&[2, 4, 3, 3], random_vec(11, 72, 50.0)).unwrap();
    let tape = Tape64::inference();
    let x = model.decode(&tape, &model.params.bind(&tape), &z).unwrap();
    assert_eq!(x.shape(), &[2, 1, 12, 12]);
    assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let bad = Tensor64::zeros(&[1, 3, 2, 2]);
    assert!(model.decode(&tape, &model.params.bind(&tape), &bad).is_err());
}

fn two_code_book() -> Codebook<f64> {
    Codebook::from_vectors(Tensor64::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap(), 0.99).unwrap()
}

fn site(a: f64, b: f64) -> Tensor64 {
    Tensor64::new(&[1, 2, 1, 1], vec![a, b]).unwrap()
}

#[test]
fn quantize_hand_cases_and_tie_break() {
    let cb = two_code_book();
    let tape = Tape64::inference();
    let q = cb.quantize(&tape, &site(0.1, 0.2), &cb.vectors).unwrap();
    assert_eq!(q.indices, vec![0]);
    assert_eq!(q.z_q.data(), &[0.0, 0.0]);
    let q = cb.quantize(&tape, &site(0.5, 0.5), &cb.vectors).unwrap();
    assert_eq!(q.indices, vec![0], "equidistant site goes to the lowest index");
    let q = cb.quantize(&tape, &site(0.9, 0.7), &cb.vectors).unwrap();
    assert_eq!(q.indices, vec![1]);
    assert_eq!(q.z_q.data(), &[1.0, 1.0]);
    let wrong = Tensor64::zeros(&[1, 3, 1, 1]);
    assert!(matches!(cb.quantize(&tape, &wrong, &cb.vectors), Err(Error::Dimension { .. })));
}

/// Sites `[k, n]` laid out as a `[1, n, k, 1]` latent grid.
fn sites_to_grid(sites: &[f64], k: usize, n: usize) -> Tensor64 {
    let mut g = vec![0.0; k * n];
    for i in 0..k {
        for j in 0..n {
            g[j * k + i] = sites[i * n + j];
        }
    }
    Tensor64::new(&[1, n, k, 1], g).unwrap()
}

#[test]
fn quantize_is_idempotent_on_code_vectors() {
    let v = random_vec(3, 48, 1.0);
    let cb = Codebook::from_vectors(Tensor64::new(&[16, 3], v.clone()).unwrap(), 0.9).unwrap();
    let grid = sites_to_grid(&v, 16, 3);
    assert_eq!(cb.assign(&grid).unwrap(), (0..16).collect::<Vec<_>>());
    let q = cb.quantize(&Tape64::inference(), &grid, &cb.vectors).unwrap();
    assert_eq!(q.z_q.data(), grid.data(), "z_q equals the code vectors exactly");
}

#[test]
fn assignment_matches_brute_force_on_random_sites() {
    for seed in 0..3 {
        let (k, n, count) = (32, 5, 1000);
        let v = random_vec(seed, k * n, 1.0);
        let cb = Codebook::from_vectors(Tensor64::new(&[k, n], v.clone()).unwrap(), 0.9).unwrap();
        let sites = random_vec(seed + 50, count * n, 1.3);
        let got = cb.assign(&sites_to_grid(&sites, count, n)).unwrap();
        let rows = |x: &[f64]| x.chunks(n).map(<[f64]>::to_vec).collect::<Vec<_>>();
        assert_eq!(got, brute_force_argmin(&rows(&sites), &rows(&v)));
    }
}

#[test]
fn straight_through_gradient_is_upstream_gradient() {
    let cb = Codebook::from_vectors(Tensor64::new(&[4, 2], random_vec(1, 8, 1.0)).unwrap(), 0.9).unwrap();
    let z = Tensor64::new(&[1, 2, 3, 3], random_vec(2, 18, 1.0)).unwrap();
    let tape = Tape64::new();
    let leaf = tape.leaf(&z);
    let q = cb.quantize(&tape, &leaf, &cb.vectors).unwrap();
    let r = Tensor64::new(&[1, 2, 3, 3], random_vec(3, 18, 1.0)).unwrap();
    let loss = tape.sum(&tape.mul(&tape.tanh(&q.z_q), &r).unwrap());
    let g = tape.backward(&loss).unwrap();
    // d loss / d z_q evaluated at the code values.
    let expected: Vec<f64> = q.z_q.data().iter().zip(r.data()).map(|(c, r)| r * (1.0 - c.tanh().powi(2))).collect();
    let got = g.wrt(&leaf).to_vec();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn vq_loss_hand_case_and_zero_cases() {
    let tape = Tape64::inference();
    let z_e = site(0.5, 0.0);
    let codes = site(0.0, 0.0);
    let x = Tensor64::new(&[1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let l = vq_loss(&tape, &x, &x, &z_e, &codes, 0.25, CodebookMode::Ema).unwrap();
    assert!((l.commit.item() - 0.03125).abs() < 1e-15);
    assert!((l.align.item() - 0.125).abs() < 1e-15);
    assert_eq!(l.recon.item(), 0.0);
    assert!((l.total.item() - 0.03125).abs() < 1e-15, "align is monitored only under EMA");
    let g = vq_loss(&tape, &x, &x, &z_e, &codes, 0.25, CodebookMode::Gradient).unwrap();
    assert!((g.total.item() - 0.15625).abs() < 1e-15);
    let zero = vq_loss(&tape, &x, &x, &codes, &codes, 0.25, CodebookMode::Gradient).unwrap();
    assert_eq!(zero.total.item(), 0.0);
    let no_beta = vq_loss(&tape, &x, &x, &z_e, &codes, 0.0, CodebookMode::Ema).unwrap();
    assert_eq!(no_beta.commit.item(), 0.0);
    assert!(vq_loss(&tape, &x, &x, &z_e, &codes, -1.0, CodebookMode::Ema).is_err());
}

#[test]
fn commitment_gradient_reaches_encoder_only() {
    let tape = Tape64::new();
    let z_e = tape.leaf(&site(0.5, -0.25));
    let codes = tape.leaf(&site(0.0, 0.0));
    let x = Tensor64::zeros(&[1, 1, 1, 1]);
    let l = vq_loss(&tape, &x, &x, &z_e, &codes, 0.25, CodebookMode::Ema).unwrap();
    let g = tape.backward(&l.total).unwrap();
    // d/dz of 0.25 * mean((z - c)^2) over 2 components = 0.25 * (z - c).
    assert_eq!(g.wrt(&z_e).data(), &[0.125, -0.0625]);
    assert_eq!(g.wrt(&codes).data(), &[0.0, 0.0]);
}

#[test]
fn ema_decay_zero_is_kmeans_m_step() {
    let (k, n, count) = (12, 3, 400);
    let v = random_vec(4, k * n, 1.0);
    let mut cb = Codebook::from_vectors(Tensor64::new(&[k, n], v.clone()).unwrap(), 0.0).unwrap();
    let sites = random_vec(5, count * n, 1.0);
    let grid = sites_to_grid(&sites, count, n);
    let idx = cb.assign(&grid).unwrap();
    cb.ema_update(&grid, &idx, &mut keyed_rng(0, 0, 0)).unwrap();
    let rows = |x: &[f64]| x.chunks(n).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let oracle = kmeans_m_step(&rows(&sites), &idx, &rows(&v));
    for c in 0..k {
        if idx.contains(&c) {
            for (a, b) in cb.vector(c).iter().zip(&oracle[c]) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn ema_vectors_equal_sums_over_counts() {
    let mut cb = Codebook::from_vectors(Tensor64::new(&[6, 2], random_vec(6, 12, 1.0)).unwrap(), 0.9).unwrap();
    for step in 0..5 {
        let grid = Tensor64::new(&[1, 2, 5, 5], random_vec(10 + step, 50, 1.0)).unwrap();
        let idx = cb.assign(&grid).unwrap();
        cb.ema_update(&grid, &idx, &mut keyed_rng(0, 0, step)).unwrap();
        for c in 0..6 {
            let denom = cb.ema_counts[c].max(cb.eps_count);
            for j in 0..2 {
                assert_eq!(cb.vector(c)[j], cb.ema_sums[c * 2 + j] / denom);
            }
        }
    }
}

#[test]
fn unassigned_code_keeps_its_value() {
    let mut cb = two_code_book();
    let grid = Tensor64::new(&[1, 2, 2, 1], vec![0.1, -0.1, 0.2, 0.0]).unwrap();
    let idx = cb.assign(&grid).unwrap();
    assert_eq!(idx, vec![0, 0]);
    cb.ema_update(&grid, &idx, &mut keyed_rng(0, 0, 0)).unwrap();
    assert_eq!(cb.vector(1), &[1.0, 1.0]);
}

#[test]
fn repeated_ema_updates_converge_to_cluster_means() {
    let means = [[-1.0, 0.5], [2.0, -1.5]];
    let mut rng_sites = Vec::new();
    let noise = random_vec(8, 200 * 2, 0.2);
    for i in 0..200 {
        let m = means[i % 2];
        rng_sites.push(m[0] + noise[2 * i]);
        rng_sites.push(m[1] + noise[2 * i + 1]);
    }
    let grid = sites_to_grid(&rng_sites, 200, 2);
    let rows: Vec<Vec<f64>> = rng_sites.chunks(2).map(<[f64]>::to_vec).collect();
    let mut cb = Codebook::from_vectors(Tensor64::new(&[2, 2], vec![-0.5, 0.0, 0.5, 0.0]).unwrap(), 0.9).unwrap();
    for step in 0..300 {
        let idx = cb.assign(&grid).unwrap();
        cb.ema_update(&grid, &idx, &mut keyed_rng(0, 0, step)).unwrap();
    }
    let idx = cb.assign(&grid).unwrap();
    let oracle = kmeans_m_step(&rows, &idx, &[vec![0.0; 2], vec![0.0; 2]]);
    for c in 0..2 {
        for j in 0..2 {
            assert!((cb.vector(c)[j] - oracle[c][j]).abs() < 1e-3);
        }
    }
}

#[test]
fn dead_codes_are_reseeded_from_the_batch() {
    let mut cb = Codebook::from_vectors(Tensor64::new(&[3, 1], vec![0.0, 10.0, 20.0]).unwrap(), 0.5).unwrap();
    cb.dead_patience = 3;
    let grid = Tensor64::new(&[1, 1, 4, 1], vec![0.1, -0.1, 0.2, 0.05]).unwrap();
    for step in 0..40 {
        let idx = cb.assign(&grid).unwrap();
        cb.ema_update(&grid, &idx, &mut keyed_rng(1, 2, step)).unwrap();
    }
    for c in 1..3 {
        assert!(cb.vector(c)[0].abs() < 1.0, "code {c} was not reseeded: {}", cb.vector(c)[0]);
    }
}

#[test]
fn pretraining_reduces_reconstruction_error_and_is_deterministic() {
    let samples: Vec<Tensor64> = (0..4)
        .flat_map(|i| {
            let s = tivode::shapesdata::make_sample(i, 1, 4, 16, 16).unwrap();
            (0..4).map(move |f| s.frame(f)).collect::<Vec<_>>()
        })
        .collect();
    let cfg = VqTrainConfig {
        epochs: 3,
        batch_size: 8,
        ..VqTrainConfig::default()
    };
    let run = || {
        let mut model = VqVae::<f64>::new(small(), 9).unwrap();
        let mut tr = VqTrainer::new(cfg).unwrap();
        let stats: Vec<_> = (0..6).map(|_| pretrain_epoch(&mut model, &mut tr, &samples).unwrap()).collect();
        (model, tr, stats)
    };
    let (model, tr, stats) = run();
    assert!(stats.last().unwrap().recon < stats[0].recon);
    assert!(stats.iter().all(|s| s.usage_entropy > 0.0));
    let (again, tr2, _) = run();
    let bytes = |m: &VqVae<f64>| {
        let mut ck = Checkpoint::new();
        m.save_into(&mut ck, "");
        ck.to_bytes().unwrap()
    };
    assert_eq!(bytes(&model), bytes(&again));
    assert_eq!(tr.log, tr2.log);
}

#[test]
fn pretraining_resume_matches_unbroken_run() {
    let samples: Vec<Tensor64> = (0..3).map(|i| tivode::shapesdata::make_sample(i, 1, 2, 8, 8).unwrap().frame(1)).collect();
    let cfg = VqTrainConfig {
        batch_size: 2,
        ..VqTrainConfig::default()
    };
    let mut a = VqVae::<f64>::new(small(), 1).unwrap();
    let mut ta = VqTrainer::new(cfg).unwrap();
    pretrain_epoch(&mut a, &mut ta, &samples).unwrap();
    let mut ck = Checkpoint::new();
    a.save_into(&mut ck, "m.");
    ta.save_into(&mut ck);
    let ck = Checkpoint::read_from(ck.to_bytes().unwrap().as_slice()).unwrap();
    pretrain_epoch(&mut a, &mut ta, &samples).unwrap();

    let mut b = VqVae::<f64>::new(small(), 77).unwrap();
    b.load_from(&ck, "m.").unwrap();
    let mut tb = VqTrainer::restore(cfg, &ck).unwrap();
    pretrain_epoch(&mut b, &mut tb, &samples).unwrap();
    assert_eq!(ta.log[ta.log.len() - 2..], tb.log[..]);
    assert_eq!(a.codebook.vectors.data(), b.codebook.vectors.data());
    for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn sites_follow_grid_order() {
    let z = Tensor64::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(grid_to_sites(&z).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
}
