use std::sync::Arc;

use nalgebra::Point3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shootseg::nn::*;
use shootseg::vib::correlation_node;
use shootseg::Error;

const SEEDS: u64 = 20;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

fn targets(rng: &mut impl Rng, rows: usize, classes: usize) -> Arc<Vec<(usize, usize)>> {
    Arc::new((0..rows).map(|r| (r, rng.random_range(0..classes))).collect())
}

fn offset_targets(rng: &mut impl Rng, rows: usize) -> Arc<Vec<(usize, [f64; 3])>> {
    Arc::new(
        (0..rows)
            .filter_map(|r| rng.random_bool(0.7).then(|| (r, [0, 1, 2].map(|_| rng.random_range(-3.0..3.0)))))
            .collect(),
    )
}

fn random_neighborhood(rng: &mut impl Rng, n: usize) -> Arc<Neighborhood> {
    let lists = (0..n)
        .map(|i| {
            let mut l: Vec<usize> = (0..n).filter(|&j| j == i || rng.random_bool(0.3)).collect();
            l.sort_unstable();
            l
        })
        .collect();
    Arc::new(Neighborhood::from_lists(lists))
}

fn assert_passes(report: GradCheckReport, what: &str) {
    assert!(report.checked > 0, "{what}: nothing checked");
    assert!(
        report.max_rel_error < TOL,
        "{what}: max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        input_dim: 6,
        hidden_dim: 6,
        blocks: 2,
        output_dim: 5,
        aggregation_radius: 2.5,
        voxel_size: 1.0,
        coord_scale: 5.0,
    }
}

fn random_points(rng: &mut impl Rng, n: usize, extent: f64) -> (Vec<Point3<f64>>, Vec<[f64; 3]>) {
    let coords = (0..n)
        .map(|_| Point3::new(rng.random_range(-extent..extent), rng.random_range(-extent..extent), rng.random_range(0.0..extent)))
        .collect();
    let colors = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    (coords, colors)
}

/// Perturbs every parameter so gammas, betas and zero-initialized weights
/// take generic values.
fn jitter_params(params: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

mod matrix {
    use super::*;

    #[test]
    fn products_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 1.0]]);
        let ab = a.matmul(&b);
        assert_eq!(ab, Matrix::from_rows(&[vec![-1.0, 7.5], vec![-1.0, 18.0]]));
        assert_eq!(a.transpose().matmul_tn(&b), ab);
        assert_eq!(a.matmul_nt(&b.transpose()), ab);
    }

    #[test]
    fn column_sums_and_select() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(a.column_sums(), vec![9.0, 12.0]);
        assert_eq!(a.select_rows(&[2, 0]), Matrix::from_rows(&[vec![5.0, 6.0], vec![1.0, 2.0]]));
        assert_eq!(a.sum(), 21.0);
        assert_eq!(a.frobenius_sq(), 91.0);
    }
}

mod gradients {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        // CE of a single row against itself reduces to a smooth function of w.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        let w = p.add("w", rand_matrix(&mut rng, 3, 2, 1.0));
        let x = rand_matrix(&mut rng, 4, 3, 1.0);
        let t = targets(&mut rng, 4, 2);
        let r = grad_check(&p, STEP, |g| {
            let xi = g.input(x.clone());
            let wn = g.param(w);
            let y = g.matmul(xi, wn);
            g.cross_entropy(y, t.clone())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn relu_kinks_are_excluded() {
        let mut p = ParamStore::new();
        let x = p.add("x", Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 2.0]]));
        let t = Arc::new(vec![(0, 0), (1, 1)]);
        let r = grad_check(&p, STEP, |g| {
            let n = g.param(x);
            let y = g.relu(n);
            g.cross_entropy(y, t.clone())
        })
        .unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < TOL);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut p = ParamStore::new();
        let x = p.add("x", Matrix::from_rows(&[vec![f64::INFINITY, 0.0]]));
        let err = grad_check(&p, STEP, |g| {
            let n = g.param(x);
            g.cross_entropy(n, Arc::new(vec![(0, 1)]))
        });
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn linear_layers() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::new();
            let x = p.add("x", rand_matrix(&mut rng, 7, 4, 1.0));
            let w = p.add("w", rand_matrix(&mut rng, 4, 3, 1.0));
            let b = p.add("b", rand_matrix(&mut rng, 1, 3, 1.0));
            let v = p.add("v", rand_matrix(&mut rng, 7, 3, 1.0));
            let t = targets(&mut rng, 3, 3);
            let s = rng.random_range(-2.0..2.0);
            let r = grad_check(&p, STEP, |g| {
                let (x, w, b, v) = (g.param(x), g.param(w), g.param(b), g.param(v));
                let y = g.matmul(x, w);
                let y = g.add_bias(y, b);
                let y = g.add(y, v);
                let y = g.scale(y, s);
                let z = g.matmul_tn(y, v);
                g.cross_entropy(z, t.clone())
            })
            .unwrap();
            assert_passes(r, &format!("linear seed {seed}"));
        }
    }

    #[test]
    fn relu_layer() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::new();
            let x = p.add("x", rand_matrix(&mut rng, 6, 4, 1.0));
            let t = targets(&mut rng, 6, 4);
            let r = grad_check(&p, STEP, |g| {
                let n = g.param(x);
                let y = g.relu(n);
                g.cross_entropy(y, t.clone())
            })
            .unwrap();
            assert_passes(r, &format!("relu seed {seed}"));
        }
    }

    #[test]
    fn neighbor_mean_layer() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::new();
            let x = p.add("x", rand_matrix(&mut rng, 9, 3, 1.0));
            let nb = random_neighborhood(&mut rng, 9);
            let t = targets(&mut rng, 9, 3);
            let r = grad_check(&p, STEP, |g| {
                let n = g.param(x);
                let y = g.neighbor_mean(n, nb.clone());
                g.cross_entropy(y, t.clone())
            })
            .unwrap();
            assert_passes(r, &format!("neighbor mean seed {seed}"));
        }
    }

    #[test]
    fn standardization_layers() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::new();
            let mut xv = rand_matrix(&mut rng, 8, 4, 1.0);
            // One nearly constant column exercises the variance floor.
            for r in 0..8 {
                xv[(r, 3)] = 0.5 + 1e-5 * rng.random_range(-1.0..1.0);
            }
            let x = p.add("x", xv);
            let gamma = p.add("gamma", rand_matrix(&mut rng, 1, 4, 2.0));
            let beta = p.add("beta", rand_matrix(&mut rng, 1, 4, 1.0));
            let t = targets(&mut rng, 8, 4);
            for mode in [StdMode::Additive(1e-5), StdMode::Floor(1e-5)] {
                let r = grad_check(&p, STEP, |g| {
                    let (x, gm, bt) = (g.param(x), g.param(gamma), g.param(beta));
                    let y = g.standardize(x, mode);
                    let y = g.scale_shift(y, gm, bt);
                    g.cross_entropy(y, t.clone())
                })
                .unwrap();
                assert_passes(r, &format!("standardize {mode:?} seed {seed}"));
            }
        }
    }

    #[test]
    fn gather_rows_layer() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::new();
            let x = p.add("x", rand_matrix(&mut rng, 10, 3, 1.0));
            let idx = Arc::new((0..6).map(|_| rng.random_range(0..10)).collect::<Vec<_>>());
            let t = targets(&mut rng, 6, 3);
            let r = grad_check(&p, STEP, |g| {
                let n = g.param(x);
                let y = g.gather_rows(n, idx.clone());
                g.cross_entropy(y, t.clone())
            })
            .unwrap();
            assert_passes(r, &format!("gather seed {seed}"));
        }
    }

    #[test]
    fn vib_loss_through_correlation() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::new();
            let zp = p.add("zp", rand_matrix(&mut rng, 12, 4, 1.0));
            let zq = p.add("zq", rand_matrix(&mut rng, 12, 4, 1.0));
            let lambda = rng.random_range(0.001..0.5);
            let r = grad_check(&p, STEP, |g| {
                let (a, b) = (g.param(zp), g.param(zq));
                let z = correlation_node(g, a, b);
                g.vib_loss(z, lambda)
            })
            .unwrap();
            assert_passes(r, &format!("vib seed {seed}"));
        }
    }

    #[test]
    fn masked_cross_entropy_loss() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::new();
            let x = p.add("logits", rand_matrix(&mut rng, 30, 3, 3.0));
            let t: Arc<Vec<(usize, usize)>> =
                Arc::new((0..30).filter_map(|r| rng.random_bool(0.4).then(|| (r, rng.random_range(0..3)))).collect());
            if t.is_empty() {
                continue;
            }
            let r = grad_check(&p, STEP, |g| {
                let n = g.param(x);
                g.cross_entropy(n, t.clone())
            })
            .unwrap();
            assert_passes(r, &format!("cross entropy seed {seed}"));
        }
    }

    #[test]
    fn offset_losses() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::new();
            let o = p.add("offsets", rand_matrix(&mut rng, 30, 3, 3.0));
            let t = offset_targets(&mut rng, 30);
            let reg = grad_check(&p, STEP, |g| {
                let n = g.param(o);
                g.offset_reg(n, t.clone())
            })
            .unwrap();
            assert_passes(reg, &format!("offset reg seed {seed}"));
            let dir = grad_check(&p, STEP, |g| {
                let n = g.param(o);
                g.offset_dir(n, t.clone())
            })
            .unwrap();
            assert_passes(dir, &format!("offset dir seed {seed}"));
        }
    }

    #[test]
    fn backbone_and_heads() {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = ModelConfig {
                backbone: small_backbone(),
                semantic_classes: Some(2),
                offset_scale: Some(3.0),
            };
            let mut model = Model::new(cfg, seed).unwrap();
            jitter_params(&mut model.params, &mut rng);
            let (coords, colors) = random_points(&mut rng, 30, 4.0);
            let input = model.prepare(&coords, &colors).unwrap();
            let model = Model::from_params(cfg, model.params.clone()).unwrap();
            let feat_t = targets(&mut rng, 30, 5);
            let sem_t = targets(&mut rng, 30, 2);
            let off_t = offset_targets(&mut rng, 30);

            let backbone = grad_check(&model.params, STEP, |g| {
                let f = model.forward_features(g, &input);
                g.cross_entropy(f, feat_t.clone())
            })
            .unwrap();
            assert_passes(backbone, &format!("backbone seed {seed}"));

            let full = grad_check(&model.params, STEP, |g| {
                let out = model.forward(g, &input);
                let ce = g.cross_entropy(out.scores.unwrap(), sem_t.clone());
                let reg = g.offset_reg(out.offsets.unwrap(), off_t.clone());
                let dir = g.offset_dir(out.offsets.unwrap(), off_t.clone());
                let l = g.add(ce, reg);
                g.add(l, dir)
            })
            .unwrap();
            assert_passes(full, &format!("heads seed {seed}"));
        }
    }
}

mod model {
    use super::*;

    fn features(model: &Model, coords: &[Point3<f64>], colors: &[[f64; 3]]) -> Matrix {
        let input = model.prepare(coords, colors).unwrap();
        let mut g = Graph::new(&model.params);
        let f = model.forward_features(&mut g, &input);
        g.value(f).clone()
    }

    #[test]
    fn single_point_reduces_to_pointwise_map() {
        let cfg = ModelConfig::backbone_only(small_backbone());
        let mut model = Model::new(cfg, 3).unwrap();
        jitter_params(&mut model.params, &mut ChaCha8Rng::seed_from_u64(3));
        let model = Model::from_params(cfg, model.params.clone()).unwrap();
        let f = features(&model, &[Point3::new(1.0, 2.0, 3.0)], &[[0.1, 0.2, 0.3]]);
        // One row standardizes to zero, so each block outputs relu(beta) and
        // the features are relu(beta_last) * W_out + b_out.
        let p = &model.params;
        let beta = p.get(p.find("backbone.block1.beta").unwrap());
        let w = p.get(p.find("backbone.out.weight").unwrap());
        let b = p.get(p.find("backbone.out.bias").unwrap());
        for j in 0..w.cols() {
            let want: f64 = (0..w.rows()).map(|k| beta[(0, k)].max(0.0) * w[(k, j)]).sum::<f64>() + b[(0, j)];
            assert!((f[(0, j)] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_points_identical_rows() {
        let model = Model::new(ModelConfig::backbone_only(small_backbone()), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut coords, mut colors) = random_points(&mut rng, 20, 3.0);
        coords.push(coords[5]);
        colors.push(colors[5]);
        let f = features(&model, &coords, &colors);
        assert_eq!(f.row(5), f.row(20));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn permutation_equivariance(seed in any::<u64>(), n in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = Model::new(ModelConfig::backbone_only(small_backbone()), seed).unwrap();
            let (coords, colors) = random_points(&mut rng, n, 4.0);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pc: Vec<_> = perm.iter().map(|&i| coords[i]).collect();
            let pcol: Vec<_> = perm.iter().map(|&i| colors[i]).collect();
            let a = features(&model, &coords, &colors);
            let b = features(&model, &pc, &pcol);
            for (k, &i) in perm.iter().enumerate() {
                for j in 0..a.cols() {
                    prop_assert!((a[(i, j)] - b[(k, j)]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn init_is_seeded_and_single_precision() {
        let cfg = ModelConfig {
            backbone: BackboneConfig::for_voxel_size(1.5),
            semantic_classes: Some(2),
            offset_scale: Some(10.0),
        };
        let a = Model::new(cfg, 9).unwrap();
        let b = Model::new(cfg, 9).unwrap();
        let c = Model::new(cfg, 10).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        for (_, m) in a.params.iter() {
            assert!(m.data().iter().all(|&v| v as f32 as f64 == v));
        }
    }

    #[test]
    fn bind_rejects_wrong_shapes() {
        let cfg = ModelConfig::backbone_only(small_backbone());
        let m = Model::new(cfg, 0).unwrap();
        let mut other = cfg;
        other.backbone.hidden_dim = 7;
        assert!(matches!(Model::from_params(other, m.params.clone()), Err(Error::DimensionMismatch(_))));
        let with_head = ModelConfig {
            semantic_classes: Some(2),
            ..cfg
        };
        assert!(Model::from_params(with_head, m.params).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_backbone();
        cfg.input_dim = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = small_backbone();
        cfg.aggregation_radius = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_backbone();
        cfg.output_dim = 0;
        assert!(cfg.validate().is_err());
        let d = BackboneConfig::for_voxel_size(1.5);
        assert_eq!((d.hidden_dim, d.blocks, d.output_dim), (32, 3, 32));
        assert_eq!(d.aggregation_radius, 6.0);
    }
}

mod optim {
    use super::*;

    #[test]
    fn poly_lr_anchors() {
        assert_eq!(poly_lr(0, 10000, 0.1, 0.9).unwrap(), 0.1);
        assert_eq!(poly_lr(10000, 10000, 0.1, 0.9).unwrap(), 0.0);
        assert_eq!(poly_lr(7, 7, 0.3, 2.0).unwrap(), 0.0);
        let mid = poly_lr(5000, 10000, 0.1, 0.9).unwrap();
        assert!((mid - 0.05359).abs() < 5e-6, "{mid}");
        assert!((mid - 0.1 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(poly_lr(0, 0, 0.1, 0.9).is_err());
        assert!(poly_lr(11, 10, 0.1, 0.9).is_err());
    }

    proptest! {
        #[test]
        fn poly_lr_is_monotone(total in 1usize..5000, power in 0.1f64..3.0) {
            let mut prev = f64::INFINITY;
            for i in (0..=total).step_by((total / 50).max(1)) {
                let lr = poly_lr(i, total, 0.1, power).unwrap();
                prop_assert!(lr <= prev && lr >= 0.0);
                prev = lr;
            }
        }
    }

    fn quadratic_grads(params: &ParamStore, id: ParamId, t: &Arc<Vec<(usize, usize)>>) -> Gradients {
        let mut g = Graph::new(params);
        let n = g.param(id);
        let l = g.cross_entropy(n, t.clone());
        g.backward(l)
    }

    #[test]
    fn momentum_update_matches_hand_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamStore::new();
        let id = p.add("x", rand_matrix(&mut rng, 4, 3, 1.0));
        p.round_to_f32();
        let t = targets(&mut rng, 4, 3);
        let mut opt = Sgd::new(&p, 0.9, None);
        let mut want_p = p.get(id).data().to_vec();
        let mut want_v = vec![0.0f64; want_p.len()];
        for step in 0..3 {
            let grads = quadratic_grads(&p, id, &t);
            let g = grads.get(id).unwrap().data().to_vec();
            let lr = 0.1 / (step + 1) as f64;
            opt.step(&mut p, &grads, lr);
            for k in 0..want_p.len() {
                want_v[k] = (0.9 * want_v[k] + g[k]) as f32 as f64;
                want_p[k] = (want_p[k] - lr * want_v[k]) as f32 as f64;
            }
            assert_eq!(p.get(id).data(), &want_p[..]);
            assert_eq!(opt.velocity().get(id).data(), &want_v[..]);
        }
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut p = ParamStore::new();
        let id = p.add("x", Matrix::from_rows(&[vec![40.0, -40.0]]));
        let t = Arc::new(vec![(0, 1)]);
        let grads = quadratic_grads(&p, id, &t);
        let norm = grads.global_norm();
        assert!(norm > 1.0);
        let before = p.get(id).data().to_vec();
        let mut opt = Sgd::new(&p, 0.0, Some(0.5));
        opt.step(&mut p, &grads, 1.0);
        let moved: f64 = p.get(id).data().iter().zip(&before).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((moved - 0.5).abs() < 1e-6, "{moved}");
    }
}

mod checkpoint {
    use super::*;

    fn sample_checkpoint(with_momentum: bool) -> Checkpoint {
        let cfg = ModelConfig {
            backbone: small_backbone(),
            semantic_classes: Some(3),
            offset_scale: Some(7.5),
        };
        let model = Model::new(cfg, 11).unwrap();
        let meta = TrainMeta {
            kind: "semantic".into(),
            iteration: 4,
            total_iterations: 10,
            seed: 11,
            settings: [("note".to_string(), "x=1".to_string())].into_iter().collect(),
        };
        let momentum = with_momentum.then(|| {
            let mut m = model.params.zeros_like();
            jitter_params(&mut m, &mut ChaCha8Rng::seed_from_u64(2));
            m.round_to_f32();
            m
        });
        Checkpoint::from_model(&model, meta, momentum)
    }

    #[test]
    fn bytes_round_trip_is_bit_exact() {
        for with_momentum in [false, true] {
            let ck = sample_checkpoint(with_momentum);
            let bytes = ck.to_bytes();
            assert_eq!(&bytes[..4], b"E3DP");
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.params, ck.params);
            assert_eq!(back.momentum, ck.momentum);
            assert_eq!(back.model, ck.model);
            assert_eq!(back.meta, ck.meta);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn file_round_trip_and_describe() {
        let ck = sample_checkpoint(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        let text = back.describe();
        assert!(text.contains("backbone.lift.weight"));
        assert!(text.contains("semantic"));
        back.to_model().unwrap();
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample_checkpoint(false).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[4] = 99;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        assert!(matches!(Checkpoint::load(std::path::Path::new("/nonexistent/m.ckpt")), Err(Error::Io { .. })));
    }

    fn toy_step(
        g: &mut Graph<'_>,
        model: &Model,
        rng: &mut ChaCha8Rng,
        input: &PreparedCloud,
    ) -> shootseg::Result<StepLoss> {
        let f = model.forward_features(g, input);
        let t = targets(rng, input.len(), 5);
        Ok(StepLoss {
            loss: g.cross_entropy(f, t),
            parts: vec![],
        })
    }

    fn meta(total: usize) -> TrainMeta {
        TrainMeta {
            kind: "toy".into(),
            iteration: 0,
            total_iterations: total,
            seed: 3,
            settings: Default::default(),
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let cfg = ModelConfig::backbone_only(small_backbone());
        let (coords, colors) = random_points(&mut ChaCha8Rng::seed_from_u64(8), 25, 4.0);
        let model = Model::new(cfg, 0).unwrap();
        let input = model.prepare(&coords, &colors).unwrap();
        let schedule = Schedule {
            iterations: 12,
            checkpoint_every: 5,
            ..Schedule::default()
        };
        let mut mids = Vec::new();
        let mut losses = Vec::new();
        let full = train(
            model.clone(),
            None,
            &schedule,
            meta(12),
            7,
            |g, m, rng| toy_step(g, m, rng, &input),
            &mut |e| match e {
                TrainEvent::Checkpoint(c) => mids.push(c.to_bytes()),
                TrainEvent::Iteration(l) => losses.push(l.loss),
            },
        )
        .unwrap();
        assert_eq!(mids.len(), 2);
        assert_eq!(full.meta.iteration, 12);
        let mid = Checkpoint::from_bytes(&mids[0]).unwrap();
        assert_eq!(mid.meta.iteration, 5);
        let mut resumed_losses = Vec::new();
        let resumed = train(
            mid.to_model().unwrap(),
            mid.momentum.clone(),
            &schedule,
            mid.meta.clone(),
            7,
            |g, m, rng| toy_step(g, m, rng, &input),
            &mut |e| {
                if let TrainEvent::Iteration(l) = e {
                    resumed_losses.push(l.loss);
                }
            },
        )
        .unwrap();
        assert_eq!(resumed.to_bytes(), full.to_bytes());
        assert_eq!(resumed_losses, losses[5..].to_vec());
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let cfg = ModelConfig::backbone_only(small_backbone());
        let model = Model::new(cfg, 4).unwrap();
        let (coords, colors) = random_points(&mut ChaCha8Rng::seed_from_u64(1), 5, 2.0);
        let input = model.prepare(&coords, &colors).unwrap();
        let schedule = Schedule {
            iterations: 0,
            ..Schedule::default()
        };
        let ck = train(model.clone(), None, &schedule, meta(0), 1, |g, m, r| toy_step(g, m, r, &input), &mut |_| {})
            .unwrap();
        assert_eq!(ck.params, model.params);
    }

    #[test]
    fn divergence_returns_last_good_parameters() {
        let cfg = ModelConfig::backbone_only(small_backbone());
        let model = Model::new(cfg, 4).unwrap();
        let (coords, colors) = random_points(&mut ChaCha8Rng::seed_from_u64(1), 8, 2.0);
        let input = model.prepare(&coords, &colors).unwrap();
        let schedule = Schedule {
            iterations: 6,
            ..Schedule::default()
        };
        let mut calls = 0;
        let err = train(
            model,
            None,
            &schedule,
            meta(6),
            1,
            |g, m, r| {
                calls += 1;
                let out = toy_step(g, m, r, &input)?;
                Ok(if calls == 4 {
                    StepLoss {
                        loss: g.scale(out.loss, f64::NAN),
                        parts: vec![],
                    }
                } else {
                    out
                })
            },
            &mut |_| {},
        )
        .unwrap_err();
        match err {
            Error::Diverged { iteration, last_good } => {
                assert_eq!(iteration, 3);
                assert_eq!(last_good.meta.iteration, 3);
                assert!(last_good.params.iter().all(|(_, m)| m.is_finite()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn iteration_streams_are_distinct_and_stable() {
        let a: u64 = iteration_rng(1, 2, 3).random();
        let b: u64 = iteration_rng(1, 2, 3).random();
        let c: u64 = iteration_rng(1, 2, 4).random();
        let d: u64 = iteration_rng(1, 3, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
