//! Minimal differentiable tensor engine: NCHW dense tensors, a reverse-mode
//! tape with the handful of operations the detector needs, parameters with
//! SGD, binary I/O and finite-difference checking.

mod dense;
pub mod gradcheck;
pub mod io;
pub mod kernels;
mod param;
mod scalar;
mod tape;

pub use dense::Tensor;
pub use param::{Init, ParamId, ParamSet, Parameter, Sgd};
pub use scalar::Scalar;
pub use tape::{BnConfig, BnStats, Fault, Gradients, Mode, Tape, Var};

#[cfg(test)]
mod tests {
    use super::gradcheck::{finite_diff_check, CheckOptions};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv_identity_kernel() {
        let mut t = Tape::<f64>::new();
        let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let xv = t.leaf(x.clone(), false);
        let k = t.leaf(Tensor::ones(&[1, 1, 1, 1]), false);
        let y = t.conv2d(xv, k, None, 1, 0).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn conv_constant_window_sums() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[1, 1, 3, 3], 2.0), false);
        let k = t.leaf(Tensor::ones(&[1, 1, 3, 3]), false);
        let y = t.conv2d(x, k, None, 1, 1).unwrap();
        let v = t.value(y);
        assert_eq!(v.at4(0, 0, 1, 1), 18.0);
        for (yy, xx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(v.at4(0, 0, yy, xx), 8.0);
        }
        assert_eq!(v.at4(0, 0, 0, 1), 12.0);
    }

    #[test]
    fn conv_shape_and_channel_contract() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::zeros(&[2, 4, 8, 8]), false);
        let w = t.leaf(Tensor::zeros(&[6, 4, 3, 3]), false);
        let y = t.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 6, 8, 8]);
        let bad = t.leaf(Tensor::zeros(&[6, 3, 3, 3]), false);
        assert!(matches!(
            t.conv2d(x, bad, None, 1, 1),
            Err(crate::Error::Contract { op: "conv2d", .. })
        ));
    }

    #[test]
    fn conv_output_shape_grid() {
        let mut t = Tape::<f32>::new();
        for h in [3usize, 5, 8, 9] {
            for stride in 1..=3 {
                for padding in 0..=2 {
                    for k in [1usize, 3] {
                        if h + 2 * padding < k {
                            continue;
                        }
                        let x = t.leaf(Tensor::zeros(&[1, 2, h, h + 1]), false);
                        let w = t.leaf(Tensor::zeros(&[3, 2, k, k]), false);
                        let y = t.conv2d(x, w, None, stride, padding).unwrap();
                        let ho = (h + 2 * padding - k) / stride + 1;
                        let wo = (h + 1 + 2 * padding - k) / stride + 1;
                        assert_eq!(t.value(y).shape(), &[1, 3, ho, wo]);
                    }
                }
            }
        }
    }

    fn channel_moments(t: &Tensor<f64>, c: usize) -> (f64, f64) {
        let [n, _, h, w] = t.dims4().unwrap();
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..h).flat_map(move |y| (0..w).map(move |x| (b, y, x))))
            .map(|(b, y, x)| t.at4(b, c, y, x))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn batchnorm_train_normalises() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::randn(&[3, 2, 4, 4], 3.0, &mut rng(1)).map(|v| v + 7.0), false);
        let g = t.leaf(Tensor::ones(&[2]), false);
        let b = t.leaf(Tensor::zeros(&[2]), false);
        let mut stats = BnStats::new(2);
        let cfg = BnConfig { momentum: 0.1, eps: 1e-12 };
        let y = t.batch_norm(x, g, b, &mut stats, cfg, Mode::Train).unwrap();
        for c in 0..2 {
            let (m, v) = channel_moments(t.value(y), c);
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5, "{m} {v}");
        }
        // running stats moved towards the batch mean
        assert!(stats.running_mean[0] > 0.5);
    }

    #[test]
    fn batchnorm_affine_identity() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng(2)), false);
        let ones = t.leaf(Tensor::ones(&[1]), false);
        let zero = t.leaf(Tensor::zeros(&[1]), false);
        let cfg = BnConfig { momentum: 0.1, eps: 1e-12 };
        let norm = t.batch_norm(x, ones, zero, &mut BnStats::new(1), cfg, Mode::Train).unwrap();
        let g = t.leaf(Tensor::full(&[1], 2.0), false);
        let b = t.leaf(Tensor::full(&[1], 3.0), false);
        let y = t.batch_norm(norm, g, b, &mut BnStats::new(1), cfg, Mode::Train).unwrap();
        let (m, v) = channel_moments(t.value(y), 0);
        assert!((m - 3.0).abs() < 1e-6);
        assert!((v.sqrt() - 2.0).abs() < 1e-5);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[1, 1, 2, 2], 5.0), false);
        let g = t.leaf(Tensor::ones(&[1]), false);
        let b = t.leaf(Tensor::zeros(&[1]), false);
        let mut stats = BnStats {
            running_mean: vec![5.0],
            running_var: vec![4.0],
        };
        let cfg = BnConfig { momentum: 0.1, eps: 1e-12 };
        let y = t.batch_norm(x, g, b, &mut stats, cfg, Mode::Eval).unwrap();
        assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(stats.running_mean, vec![5.0]);
        let bad = BnConfig { momentum: 0.1, eps: 0.0 };
        assert!(t.batch_norm(x, g, b, &mut stats, bad, Mode::Eval).is_err());
    }

    #[test]
    fn batchnorm_train_needs_two_values() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::ones(&[1, 1, 1, 1]), false);
        let g = t.leaf(Tensor::ones(&[1]), false);
        let b = t.leaf(Tensor::zeros(&[1]), false);
        let r = t.batch_norm(x, g, b, &mut BnStats::new(1), BnConfig::default(), Mode::Train);
        assert!(r.is_err());
    }

    #[test]
    fn relu_definition_and_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        // subgradient at zero is zero
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[4], -3.0), true);
        let y = t.relu(x);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_layout_and_errors() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap(), true);
        let b = t.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![3.0, 4.0]).unwrap(), true);
        let c = t.concat_channels(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);

        let x = t.leaf(Tensor::zeros(&[2, 8, 4, 4]), false);
        let y = t.leaf(Tensor::zeros(&[2, 8, 4, 4]), false);
        let xy = t.concat_channels(x, y).unwrap();
        assert_eq!(t.value(xy).shape(), &[2, 16, 4, 4]);
        let z = t.leaf(Tensor::zeros(&[2, 8, 4, 3]), false);
        assert!(t.concat_channels(x, z).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::randn(&[2, 3], 1.0, &mut rng(4)), false);
        let m = t.mean_of(&[x]).unwrap();
        assert_eq!(t.value(m), t.value(x));
        let zero = t.leaf(Tensor::zeros(&[2, 3]), false);
        let s = t.add(x, zero).unwrap();
        assert_eq!(t.value(s).data(), t.value(x).data());
        assert!(t.mean_of(&[]).is_err());
        let a = t.leaf(Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), false);
        let b = t.leaf(Tensor::from_vec(&[2], vec![0.0, 5.0]).unwrap(), false);
        let mx = t.maximum(a, b).unwrap();
        assert_eq!(t.value(mx).data(), &[1.0, 5.0]);
        let sc = t.mul_scalar(a, -0.5);
        assert_eq!(t.value(sc).data(), &[-0.5, 1.0]);
    }

    #[test]
    fn mean_of_list_matches_naive_sum() {
        let mut r = rng(5);
        let mut t = Tape::<f64>::new();
        let xs: Vec<Var> = (0..6)
            .map(|_| t.leaf(Tensor::randn(&[1, 2, 3, 3], 1.0, &mut r), false))
            .collect();
        let m = t.mean_of(&xs).unwrap();
        for i in 0..18 {
            let naive = xs.iter().map(|&x| t.value(x).data()[i]).sum::<f64>() / 6.0;
            assert!((t.value(m).data()[i] - naive).abs() <= 1e-12);
        }
        let mut rev = xs.clone();
        rev.reverse();
        let m2 = t.mean_of(&rev).unwrap();
        assert!(t.value(m).max_abs_diff(t.value(m2)) <= 1e-15);
    }

    #[test]
    fn loss_reference_values() {
        let mut t = Tape::<f64>::new();
        let l = t.leaf(Tensor::zeros(&[1]), false);
        let bce = t.sigmoid_bce(l, &[1.0]).unwrap();
        assert!((t.value(bce).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let p = t.leaf(Tensor::from_vec(&[2, 4], vec![0.5; 8]).unwrap(), false);
        let sl = t.smooth_l1(p, &[0.5; 8], &[true, true]).unwrap();
        assert_eq!(t.value(sl).data()[0], 0.0);

        let u = t.leaf(Tensor::zeros(&[1, 3]), false);
        let ce = t.softmax_ce(u, &[Some(2)]).unwrap();
        assert!((t.value(ce).data()[0] - 3f64.ln()).abs() < 1e-12);

        let big = t.leaf(Tensor::from_vec(&[2], vec![1e4, -1e4]).unwrap(), false);
        let stable = t.sigmoid_bce(big, &[1.0, 0.0]).unwrap();
        assert!(t.value(stable).data()[0].abs() < 1e-12);
        let huge = t.leaf(Tensor::from_vec(&[1, 2], vec![1e4, -1e4]).unwrap(), false);
        let ce = t.softmax_ce(huge, &[Some(1)]).unwrap();
        assert!((t.value(ce).data()[0] - 2e4).abs() < 1e-6);
        assert!(t.sigmoid_bce(l, &[0.5]).is_err());
        assert!(t.softmax_ce(u, &[Some(3)]).is_err());
    }

    #[test]
    fn anchor_rows_layout() {
        // 2 slots of depth 3 over a 1x2 grid
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_vec(&[1, 6, 1, 2], data).unwrap(), false);
        let r = t.anchor_rows(x, 3).unwrap();
        assert_eq!(t.value(r).shape(), &[1, 4, 3]);
        // row 0 = cell 0 slot 0 = channels 0..3 at x=0
        assert_eq!(&t.value(r).data()[0..3], &[0.0, 2.0, 4.0]);
        // row 1 = cell 0 slot 1 = channels 3..6 at x=0
        assert_eq!(&t.value(r).data()[3..6], &[6.0, 8.0, 10.0]);
        // row 2 = cell 1 slot 0
        assert_eq!(&t.value(r).data()[6..9], &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn non_finite_gradient_names_the_op() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[2], f64::INFINITY), true);
        let y = t.relu(x);
        let l = t.dot(y, &[1.0, 1.0]).unwrap();
        let s = t.mul_scalar(l, f64::NAN);
        let err = t.backward(s).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains("dot"), "{err}");
    }

    fn random_case(r: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
        use rand::Rng;
        (
            r.random_range(1..3),
            r.random_range(1..4),
            r.random_range(3..7),
            r.random_range(3..7),
        )
    }

    /// Twenty random small shapes per differentiable op.
    #[test]
    fn all_ops_match_finite_differences() {
        let mut r = rng(11);
        let opts = CheckOptions::default();
        for case in 0..20 {
            let (n, c, h, w) = random_case(&mut r);
            let x = Tensor::<f64>::randn(&[n, c, h, w], 1.0, &mut r);
            let x2 = Tensor::<f64>::randn(&[n, c, h, w], 1.0, &mut r);
            let proj = Tensor::<f64>::randn(&[n, c, h, w], 1.0, &mut r);
            let stride = 1 + case % 2;
            let wt = Tensor::<f64>::randn(&[2, c, 3, 3], 0.5, &mut r);
            let bias = Tensor::<f64>::randn(&[2], 0.5, &mut r);
            let g = Tensor::<f64>::uniform(&[c], 0.5, 1.5, &mut r);
            let b = Tensor::<f64>::randn(&[c], 0.5, &mut r);
            let ho = (h + 2 - 3) / stride + 1;
            let wo = (w + 2 - 3) / stride + 1;
            let cproj = Tensor::<f64>::randn(&[n, 2, ho, wo], 1.0, &mut r);
            let pd = proj.data().to_vec();
            let mut reports = vec![
                finite_diff_check("conv2d", &[x.clone(), wt, bias], opts, |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
                    t.dot(y, cproj.data())
                }),
                finite_diff_check("relu", std::slice::from_ref(&x), opts, |t, v| {
                    let y = t.relu(v[0]);
                    t.dot(y, &pd)
                }),
                finite_diff_check("add", &[x.clone(), x2.clone()], opts, |t, v| {
                    let y = t.add(v[0], v[1])?;
                    t.dot(y, &pd)
                }),
                finite_diff_check("mean_of_list", &[x.clone(), x2.clone()], opts, |t, v| {
                    let y = t.mean_of(v)?;
                    let y = t.mul_scalar(y, 1.7);
                    t.dot(y, &pd)
                }),
                finite_diff_check("maximum", &[x.clone(), x2.clone()], opts, |t, v| {
                    let y = t.maximum(v[0], v[1])?;
                    t.dot(y, &pd)
                }),
                finite_diff_check("concat_channels", &[x.clone(), x2.clone()], opts, |t, v| {
                    let y = t.concat_channels(v[0], v[1])?;
                    let w: Vec<f64> = (0..t.value(y).len()).map(|i| (i as f64 * 0.37).sin()).collect();
                    t.dot(y, &w)
                }),
                finite_diff_check("sigmoid_bce", std::slice::from_ref(&x), opts, |t, v| {
                    let tg: Vec<f64> = (0..pd.len()).map(|i| (i % 2) as f64).collect();
                    t.sigmoid_bce(v[0], &tg)
                }),
                finite_diff_check("softmax_ce", std::slice::from_ref(&x), opts, |t, v| {
                    let rows = t.value(v[0]).len() / w;
                    let labels: Vec<Option<usize>> =
                        (0..rows).map(|i| (i % 3 != 1).then_some(i % w)).collect();
                    t.softmax_ce(v[0], &labels)
                }),
                finite_diff_check("smooth_l1", &[x.clone().map(|v| v * 2.0)], opts, |t, v| {
                    let rows = t.value(v[0]).len() / w;
                    let sel: Vec<bool> = (0..rows).map(|i| i % 2 == 0).collect();
                    t.smooth_l1(v[0], x2.data(), &sel)
                }),
            ];
            if n * h * w >= 2 {
                for mode in [Mode::Train, Mode::Eval] {
                    reports.push(finite_diff_check(
                        "batchnorm2d",
                        &[x.clone(), g.clone(), b.clone()],
                        opts,
                        |t, v| {
                            let mut stats = BnStats {
                                running_mean: vec![0.3; c],
                                running_var: vec![1.7; c],
                            };
                            let y = t.batch_norm(v[0], v[1], v[2], &mut stats, BnConfig::default(), mode)?;
                            t.dot(y, &pd)
                        },
                    ));
                }
            }
            for rep in reports {
                assert!(rep.passed, "case {case}: {rep:?}");
            }
        }
    }
}
