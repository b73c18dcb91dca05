use mixlab_core::attention::{
    draw_orthogonal_features, favor_attention, favor_mixer, positive_feature_map, rotate_at, softmax_attention,
    softmax_mixer, QkvTriple, RopeConfig,
};
use mixlab_core::blocks::{block_forward, layer_norm_apply, BlockStack, BlockStackConfig, MixerKind};
use mixlab_core::diagnostics::{approximation_error_curve, locality_mass, numerical_rank, pairwise_l2_histogram};
use mixlab_core::mixer::{apply_mixer, check_structure, MatrixMixer, MixerClass, DEFAULT_RANK_TOL};
use mixlab_core::ssm::{
    bimamba_apply, bimamba_channelwise, bimamba_mixer, hydra_apply, hydra_channelwise, hydra_mixer, ssm_channelwise,
    ssm_mixer, ssm_scan, ssm_states, BiMambaParams, BiMambaWeights, HydraParams, HydraWeights, ScanParams,
    SelectiveWeights,
};
use mixlab_core::{FeatureSequence, MixRng};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Random scan parameters; roughly one step in five gets a decay of exactly 1.
fn scan_params(t: usize, n: usize, rng: &mut MixRng) -> ScanParams {
    let (mut a, b, c, delta) = ScanParams::random(t, n, rng).unwrap().into_parts();
    for v in a.iter_mut() {
        if rng.uniform(0.0, 1.0) < 0.2 {
            *v = 1.0;
        }
    }
    ScanParams::new(a, b, c, delta).unwrap()
}

/// `c_iᵀ b_j Π_{k=j+1..=i} a_k` by direct enumeration.
fn brute_semiseparable(p: &ScanParams) -> Array2<f64> {
    let t = p.len();
    let mut m = Array2::zeros((t, t));
    for i in 0..t {
        for j in 0..=i {
            let mut decay = 1.0;
            for k in j + 1..=i {
                decay *= p.a()[k];
            }
            m[[i, j]] = p.c().row(i).dot(&p.b().row(j)) * decay;
        }
    }
    m
}

/// Backward counterpart: `c_iᵀ b_j Π_{k=i..j-1} a_k` for `i <= j`.
fn brute_backward(p: &ScanParams) -> Array2<f64> {
    let t = p.len();
    let mut m = Array2::zeros((t, t));
    for i in 0..t {
        for j in i..t {
            let mut decay = 1.0;
            for k in i..j {
                decay *= p.a()[k];
            }
            m[[i, j]] = p.c().row(i).dot(&p.b().row(j)) * decay;
        }
    }
    m
}

fn matvec(m: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    m.dot(&Array1::from(x.to_vec())).to_vec()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn seq(t: usize, d: usize, rng: &mut MixRng) -> FeatureSequence {
    FeatureSequence::new(rng.normal_matrix(t, d, 1.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ssm_scan_matches_mixer(seed in any::<u64>(), t in 1usize..=32, n in 1usize..=8) {
        let mut rng = MixRng::new(seed);
        let p = scan_params(t, n, &mut rng);
        let scale = rng.uniform(0.1, 5.0);
        let x = rng.normal_vector(t, scale).to_vec();
        let mixer = ssm_mixer(&p).unwrap();
        let via_mixer = apply_mixer(&mixer, &FeatureSequence::from_channel(&x).unwrap()).unwrap().channel(0).to_vec();
        let scan = ssm_scan(&p, &x).unwrap();
        prop_assert!(close(&scan, &via_mixer, 1e-9));
        prop_assert!(close(&scan, &matvec(&brute_semiseparable(&p), &x), 1e-9));
    }

    #[test]
    fn bimamba_apply_matches_mixer(seed in any::<u64>(), t in 1usize..=32, n in 1usize..=8) {
        let mut rng = MixRng::new(seed);
        let p = BiMambaParams::new(scan_params(t, n, &mut rng), scan_params(t, n, &mut rng)).unwrap();
        let scale = rng.uniform(0.1, 5.0);
        let x = rng.normal_vector(t, scale).to_vec();
        let y = bimamba_apply(&p, &x).unwrap();
        let mixer = bimamba_mixer(&p).unwrap();
        let via_mixer = apply_mixer(&mixer, &FeatureSequence::from_channel(&x).unwrap()).unwrap().channel(0).to_vec();
        prop_assert!(close(&y, &via_mixer, 1e-9));
        let brute = brute_semiseparable(&p.fwd) + brute_backward(&p.bwd);
        prop_assert!(close(&y, &matvec(&brute, &x), 1e-9));
    }

    #[test]
    fn hydra_apply_matches_mixer(seed in any::<u64>(), t in 1usize..=32, n in 1usize..=8) {
        let mut rng = MixRng::new(seed);
        let diag = rng.normal_vector(t, 1.0);
        let p = HydraParams::new(scan_params(t, n, &mut rng), scan_params(t, n, &mut rng), diag.clone()).unwrap();
        let scale = rng.uniform(0.1, 5.0);
        let x = rng.normal_vector(t, scale).to_vec();
        let y = hydra_apply(&p, &x).unwrap();
        let mixer = hydra_mixer(&p).unwrap();
        let via_mixer = apply_mixer(&mixer, &FeatureSequence::from_channel(&x).unwrap()).unwrap().channel(0).to_vec();
        prop_assert!(close(&y, &via_mixer, 1e-9));

        let fwd = brute_semiseparable(&p.fwd);
        let bwd = brute_backward(&p.bwd);
        let brute = Array2::from_shape_fn((t, t), |(i, j)| {
            if i > j { fwd[[i - 1, j]] } else if i == j { diag[i] } else { bwd[[i + 1, j]] }
        });
        prop_assert!(close(&y, &matvec(&brute, &x), 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn apply_mixer_is_linear(seed in any::<u64>(), t in 1usize..=16, d in 1usize..=4, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = MixRng::new(seed);
        let m = MatrixMixer::new(rng.normal_matrix(t, t, 1.0), MixerClass::Dense).unwrap();
        let x1 = rng.normal_matrix(t, d, 1.0);
        let x2 = rng.normal_matrix(t, d, 1.0);
        let combo = FeatureSequence::new(&x1 * alpha + &x2 * beta).unwrap();
        let lhs = apply_mixer(&m, &combo).unwrap().into_inner();
        let y1 = apply_mixer(&m, &FeatureSequence::new(x1).unwrap()).unwrap().into_inner();
        let y2 = apply_mixer(&m, &FeatureSequence::new(x2).unwrap()).unwrap().into_inner();
        let rhs = &y1 * alpha + &y2 * beta;
        let scale = alpha.abs() * max_abs(y1.iter().copied()) + beta.abs() * max_abs(y2.iter().copied()) + f64::MIN_POSITIVE;
        prop_assert!(max_abs((&lhs - &rhs).iter().copied()) <= 1e-12 * scale);
    }

    #[test]
    fn scans_are_linear_in_input(seed in any::<u64>(), t in 1usize..=32, n in 1usize..=8, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = MixRng::new(seed);
        let p = HydraParams::new(scan_params(t, n, &mut rng), scan_params(t, n, &mut rng), rng.normal_vector(t, 1.0)).unwrap();
        let x1 = rng.normal_vector(t, 1.0);
        let x2 = rng.normal_vector(t, 1.0);
        let combo = (&x1 * alpha + &x2 * beta).to_vec();
        let y1 = hydra_apply(&p, &x1.to_vec()).unwrap();
        let y2 = hydra_apply(&p, &x2.to_vec()).unwrap();
        let y = hydra_apply(&p, &combo).unwrap();
        let scale = alpha.abs() * max_abs(y1.iter().copied()) + beta.abs() * max_abs(y2.iter().copied()) + 1.0;
        for i in 0..t {
            prop_assert!((y[i] - (alpha * y1[i] + beta * y2[i])).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn structure_classes_hold(seed in any::<u64>(), t in 2usize..=20, n in 1usize..=6) {
        let mut rng = MixRng::new(seed);
        let fwd = scan_params(t, n, &mut rng);
        let bwd = scan_params(t, n, &mut rng);
        let ssm = ssm_mixer(&fwd).unwrap();
        prop_assert!(check_structure(&ssm, MixerClass::Semiseparable(n), DEFAULT_RANK_TOL).unwrap().holds());
        let bi = bimamba_mixer(&BiMambaParams::new(fwd.clone(), bwd.clone()).unwrap()).unwrap();
        prop_assert!(check_structure(&bi, MixerClass::Quasiseparable(n), DEFAULT_RANK_TOL).unwrap().holds());
        let hy = hydra_mixer(&HydraParams::new(fwd, bwd, rng.normal_vector(t, 1.0)).unwrap()).unwrap();
        prop_assert!(check_structure(&hy, MixerClass::Quasiseparable(n), DEFAULT_RANK_TOL).unwrap().holds());
        prop_assert!(!check_structure(&hy, MixerClass::Semiseparable(n), DEFAULT_RANK_TOL).unwrap().holds());
    }

    #[test]
    fn favor_mixer_is_low_rank(seed in any::<u64>(), t in 2usize..=24, d in 1usize..=6, r in 1usize..=12) {
        let mut rng = MixRng::new(seed);
        let s = (d as f64).powf(-0.25);
        let q = rng.normal_matrix(t, d, s);
        let k = rng.normal_matrix(t, d, s);
        let m = favor_mixer(q.view(), k.view(), &draw_orthogonal_features(d, r, seed ^ 1).unwrap()).unwrap();
        prop_assert!(check_structure(&m, MixerClass::LowRank(r), DEFAULT_RANK_TOL).unwrap().holds());
        prop_assert!(numerical_rank(&m, DEFAULT_RANK_TOL).unwrap() <= r.min(t));
    }

    #[test]
    fn attention_rows_are_probability_vectors(seed in any::<u64>(), t in 1usize..=24, d in 1usize..=8, r in 1usize..=32) {
        let mut rng = MixRng::new(seed);
        let q = rng.normal_matrix(t, d, 1.0);
        let k = rng.normal_matrix(t, d, 1.0);
        let sm = softmax_mixer(q.view(), k.view()).unwrap();
        let fm = favor_mixer(q.view(), k.view(), &draw_orthogonal_features(d, r, seed).unwrap()).unwrap();
        for m in [&sm, &fm] {
            for row in m.matrix().rows() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), t in 1usize..=16, d in 1usize..=6) {
        let mut rng = MixRng::new(seed);
        let q = rng.normal_matrix(t, d, 0.7);
        let k = rng.normal_matrix(t, d, 0.7);
        let v = rng.normal_matrix(t, d, 1.0);
        let mut perm: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            let j = (rng.uniform(0.0, 1.0) * (i + 1) as f64) as usize;
            perm.swap(i, j.min(i));
        }
        let permute = |m: &Array2<f64>| Array2::from_shape_fn(m.dim(), |(i, c)| m[[perm[i], c]]);
        let base = QkvTriple::new(q.clone(), k.clone(), v.clone()).unwrap();
        let moved = QkvTriple::new(permute(&q), permute(&k), permute(&v)).unwrap();
        let omega = draw_orthogonal_features(d, 16, seed).unwrap();
        let pairs = [
            (softmax_attention(&base).unwrap(), softmax_attention(&moved).unwrap()),
            (favor_attention(&base, &omega).unwrap(), favor_attention(&moved, &omega).unwrap()),
        ];
        for (y, y_moved) in pairs {
            let expect = permute(&y.into_inner());
            prop_assert!(max_abs((&expect - &y_moved.into_inner()).iter().copied()) <= 1e-12);
        }
    }

    #[test]
    fn rope_depends_only_on_offset(q0 in -3.0f64..3.0, q1 in -3.0f64..3.0, k0 in -3.0f64..3.0, k1 in -3.0f64..3.0) {
        let cfg = RopeConfig::new(10_000.0, 2).unwrap();
        let dot_at = |tq: usize, tk: usize| {
            let mut q = [q0, q1];
            let mut k = [k0, k1];
            rotate_at(&mut q, tq, &cfg);
            rotate_at(&mut k, tk, &cfg);
            q[0] * k[0] + q[1] * k[1]
        };
        prop_assert!((dot_at(0, 3) - dot_at(5, 8)).abs() <= 1e-12);
    }

    #[test]
    fn hydra_diagonal_ignores_off_diagonal_parameters(seed in any::<u64>(), t in 2usize..=16, n in 1usize..=6, which in 0usize..6) {
        let mut rng = MixRng::new(seed);
        let fwd = scan_params(t, n, &mut rng);
        let bwd = scan_params(t, n, &mut rng);
        let diag = rng.normal_vector(t, 1.0);
        let base = hydra_mixer(&HydraParams::new(fwd.clone(), bwd.clone(), diag.clone()).unwrap()).unwrap();

        let perturb = |p: &ScanParams, part: usize, rng: &mut MixRng| {
            let (mut a, mut b, mut c, delta) = p.clone().into_parts();
            match part {
                0 => b += &rng.normal_matrix(t, n, 1.0),
                1 => c += &rng.normal_matrix(t, n, 1.0),
                _ => a.mapv_inplace(|v| v * 0.5),
            }
            ScanParams::new(a, b, c, delta).unwrap()
        };
        let (f2, b2) = if which < 3 { (perturb(&fwd, which, &mut rng), bwd) } else { (fwd, perturb(&bwd, which - 3, &mut rng)) };
        let moved = hydra_mixer(&HydraParams::new(f2, b2, diag).unwrap()).unwrap();
        for i in 0..t {
            prop_assert_eq!(base.get(i, i).to_bits(), moved.get(i, i).to_bits());
        }
    }

    #[test]
    fn bimamba_diagonal_follows_forward_b(seed in any::<u64>(), t in 1usize..=16, n in 1usize..=6) {
        let mut rng = MixRng::new(seed);
        let fwd = scan_params(t, n, &mut rng);
        let bwd = scan_params(t, n, &mut rng);
        let base = bimamba_mixer(&BiMambaParams::new(fwd.clone(), bwd.clone()).unwrap()).unwrap();
        let (a, b, c, delta) = fwd.into_parts();
        let bumped = ScanParams::new(a, &b + &rng.normal_matrix(t, n, 1.0), c, delta).unwrap();
        let moved = bimamba_mixer(&BiMambaParams::new(bumped, bwd).unwrap()).unwrap();
        prop_assert!((0..t).any(|i| base.get(i, i) != moved.get(i, i)));
    }

    #[test]
    fn scan_states_stay_bounded(seed in any::<u64>(), t in 1usize..=64, n in 1usize..=8) {
        let mut rng = MixRng::new(seed);
        let p = scan_params(t, n, &mut rng);
        let x = rng.uniform_vector(t, -1.0, 1.0).to_vec();
        let h = ssm_states(&p, &x).unwrap();
        let mut bound = 0.0f64;
        for s in 0..t {
            for j in 0..n {
                bound = bound.max((p.b()[[s, j]] * x[s]).abs());
            }
        }
        prop_assert!(h.iter().all(|v| v.is_finite() && v.abs() <= bound * t as f64 * (1.0 + 1e-12)));
    }

    #[test]
    fn channelwise_scans_match_single_channel(seed in any::<u64>(), t in 1usize..=16, d in 1usize..=4, n in 1usize..=4) {
        let mut rng = MixRng::new(seed);
        let x = seq(t, d, &mut rng);
        let sel = SelectiveWeights::random(d, n, &mut rng);
        let bi = BiMambaWeights::random(d, n, &mut rng);
        let hy = HydraWeights::random(d, n, &mut rng);
        let y_ssm = ssm_channelwise(&x, &sel).unwrap();
        let y_bi = bimamba_channelwise(&x, &bi).unwrap();
        let y_hy = hydra_channelwise(&x, &hy).unwrap();
        let p_ssm = mixlab_core::ssm::selective_parameterize(&x, &sel).unwrap();
        let p_bi = bi.params(&x).unwrap();
        for c in 0..d {
            let xc = x.channel(c).to_vec();
            prop_assert_eq!(y_ssm.channel(c).to_vec(), ssm_scan(&p_ssm, &xc).unwrap());
            prop_assert_eq!(y_bi.channel(c).to_vec(), bimamba_apply(&p_bi, &xc).unwrap());
            prop_assert_eq!(y_hy.channel(c).to_vec(), hydra_apply(&hy.channel_params(&x, c).unwrap(), &xc).unwrap());
        }
    }

    #[test]
    fn histogram_counts_every_pair(seed in any::<u64>(), t in 1usize..=24, bins in 1usize..=60) {
        let m = MatrixMixer::new(MixRng::new(seed).normal_matrix(t, t, 1.0), MixerClass::Dense).unwrap();
        let h = pairwise_l2_histogram(&m, bins).unwrap();
        prop_assert_eq!(h.total, (t * (t - 1) / 2) as u64);
        prop_assert_eq!(h.counts.iter().sum::<u64>(), h.total);
        prop_assert!(h.bin_edges.windows(2).all(|e| e[0] < e[1]));
    }

    #[test]
    fn locality_grows_to_one(seed in any::<u64>(), t in 1usize..=24) {
        let m = MatrixMixer::new(MixRng::new(seed).normal_matrix(t, t, 1.0), MixerClass::Dense).unwrap();
        let profile: Vec<f64> = (0..t + 2).map(|w| locality_mass(&m, w)).collect();
        prop_assert!(profile.windows(2).all(|p| p[0] <= p[1] + 1e-15));
        prop_assert!(profile[t - 1..].iter().all(|&v| v == 1.0));
        prop_assert!(profile.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn blocks_preserve_shape_and_zeroed_blocks_reduce_to_layer_norm(seed in any::<u64>(), t in 1usize..=12, kind_index in 0usize..4) {
        let kind = MixerKind::ALL[kind_index];
        let mut cfg = BlockStackConfig::new(8, 2, kind);
        cfg.num_heads = 2;
        cfg.num_features = 8;
        cfg.state_size = 4;
        let mut stack = BlockStack::random(cfg, seed).unwrap();
        let x = seq(t, 8, &mut MixRng::new(seed ^ 0x55));
        let block = &stack.blocks()[0];
        prop_assert_eq!(block_forward(&x, block).unwrap().view().dim(), (t, 8));
        stack.zero_projections();
        let block = &stack.blocks()[0];
        let expect = layer_norm_apply(&x, block.norm.scale.view(), block.norm.shift.view()).unwrap();
        prop_assert_eq!(block_forward(&x, block).unwrap(), expect);
    }
}

#[test]
fn favor_features_estimate_the_exponential_kernel() {
    let mut rng = MixRng::new(2024);
    for _ in 0..20 {
        let mut q = rng.normal_vector(2, 1.0);
        let mut k = rng.normal_vector(2, 1.0);
        q /= q.dot(&q).sqrt().max(1.0);
        k /= k.dot(&k).sqrt().max(1.0);
        let mut sum = 0.0;
        for seed in 0..32 {
            let omega = draw_orthogonal_features(2, 1024, seed).unwrap();
            let fq = positive_feature_map(q.view().insert_axis(ndarray::Axis(0)), &omega).unwrap().unshifted().unwrap();
            let fk = positive_feature_map(k.view().insert_axis(ndarray::Axis(0)), &omega).unwrap().unshifted().unwrap();
            sum += fq.row(0).dot(&fk.row(0));
        }
        let estimate = sum / 32.0;
        let exact = q.dot(&k).exp();
        assert!((estimate - exact).abs() <= 0.05 * exact, "estimate {estimate} vs {exact}");
    }
}

#[test]
fn more_features_approximate_softmax_better() {
    let s = 8f64.powf(-0.25);
    let seeds: Vec<u64> = (0..32).collect();
    for trial in 0..5 {
        let mut rng = MixRng::stream(31, trial);
        let q = rng.normal_matrix(16, 8, s);
        let k = rng.normal_matrix(16, 8, s);
        let curve = approximation_error_curve(q.view(), k.view(), &[16, 1024], &seeds).unwrap();
        assert!(curve[1].1 < curve[0].1, "{curve:?}");
    }
}

#[test]
fn softmax_mixer_is_generically_full_rank() {
    let full = (0..100u64)
        .filter(|&trial| {
            let mut rng = MixRng::stream(4242, trial);
            let s = 16f64.powf(-0.25);
            let q = rng.normal_matrix(48, 16, s);
            let k = rng.normal_matrix(48, 16, s);
            numerical_rank(&softmax_mixer(q.view(), k.view()).unwrap(), DEFAULT_RANK_TOL).unwrap() == 48
        })
        .count();
    assert!(full >= 99, "{full}/100 full rank");
}

#[test]
fn channelwise_scans_match_single_channel_across_chunks() {
    let mut rng = MixRng::new(808);
    let (t, d, n) = (600, 3, 4);
    let x = seq(t, d, &mut rng);
    let sel = SelectiveWeights::random(d, n, &mut rng);
    let bi = BiMambaWeights::random(d, n, &mut rng);
    let hy = HydraWeights::random(d, n, &mut rng);
    let y_ssm = ssm_channelwise(&x, &sel).unwrap();
    let y_bi = bimamba_channelwise(&x, &bi).unwrap();
    let y_hy = hydra_channelwise(&x, &hy).unwrap();
    let p_ssm = mixlab_core::ssm::selective_parameterize(&x, &sel).unwrap();
    let p_bi = bi.params(&x).unwrap();
    for c in 0..d {
        let xc = x.channel(c).to_vec();
        assert_eq!(y_ssm.channel(c).to_vec(), ssm_scan(&p_ssm, &xc).unwrap());
        assert_eq!(y_bi.channel(c).to_vec(), bimamba_apply(&p_bi, &xc).unwrap());
        assert_eq!(y_hy.channel(c).to_vec(), hydra_apply(&hy.channel_params(&x, c).unwrap(), &xc).unwrap());
    }
}

#[test]
fn streamed_favor_matches_materialized_mixer_across_chunks() {
    let mut rng = MixRng::new(909);
    let (t, d) = (700, 8);
    // Widely varying key norms force the running rescale to kick in.
    let mut k = rng.normal_matrix(t, d, 0.6);
    for (i, mut row) in k.rows_mut().into_iter().enumerate() {
        row *= 1.0 + (i % 300) as f64 / 100.0;
    }
    let q = rng.normal_matrix(t, d, 0.6);
    let v = rng.normal_matrix(t, d, 1.0);
    let omega = draw_orthogonal_features(d, 32, 5).unwrap();
    let streamed = favor_attention(&QkvTriple::new(q.clone(), k.clone(), v.clone()).unwrap(), &omega).unwrap();
    let mixer = favor_mixer(q.view(), k.view(), &omega).unwrap();
    let dense = apply_mixer(&mixer, &FeatureSequence::new(v).unwrap()).unwrap();
    let err = max_abs((&streamed.into_inner() - &dense.into_inner()).iter().copied());
    assert!(err <= 1e-10, "{err}");
}
