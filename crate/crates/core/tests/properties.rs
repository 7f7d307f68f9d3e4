use std::sync::OnceLock;

use nalgebra::{Matrix6, SymmetricEigen, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plivox::bench::{evaluate_ate, render_frame, SyntheticScene, Trajectory};
use plivox::field::AnalyticField;
use plivox::geometry::{backproject, project, se3_exp, Image, Intrinsics, Pose, RgbdFrame, Twist};
use plivox::grid::{fuse_latent, fuse_latent_max, FusionMode, LocalPoint, PliVoxel, VoxelGrid, VoxelIndex};
use plivox::map::{integrate_cloud, ColorCloud};
use plivox::mesh::{colorize_mesh, extract_mesh, MeshRequest, TriangleMesh};
use plivox::net::{bundled_prior, NetWeights};
use plivox::prior::{cnp_loss, sample_voxel, TrainConfig, TrainVoxelSample};
use plivox::shapes::Shape;
use plivox::tracker::{huber_weight, sample_depth_points, sdf_residuals, track, track_points, SigmaMode, TrackingConfig};

fn prior() -> &'static NetWeights {
    static NET: OnceLock<NetWeights> = OnceLock::new();
    NET.get_or_init(bundled_prior)
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn unit(a: [f64; 3]) -> Vector3<f64> {
    let v = v3(a);
    if v.norm() < 1e-3 {
        Vector3::z()
    } else {
        v.normalize()
    }
}

fn pose_from(rot: [f64; 3], t: [f64; 3]) -> Pose {
    Pose::new(UnitQuaternion::from_scaled_axis(v3(rot)), v3(t))
}

fn arb_pose() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-10.0..10.0f64)).prop_map(|(r, t)| pose_from(r, t))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_local_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<LocalPoint> {
    (0..n)
        .map(|_| {
            let y = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let n = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            LocalPoint { y, n: n.normalize() }
        })
        .collect()
}

fn pose_gap(a: &Pose, b: &Pose) -> f64 {
    (a.rotation_matrix() - b.rotation_matrix()).amax().max((a.translation - b.translation).amax())
}

fn small_intrinsics() -> Intrinsics {
    Intrinsics::new(32.5, 32.5, 19.5, 14.5, 40, 30).unwrap()
}

fn room() -> &'static (SyntheticScene, Trajectory) {
    static ROOM: OnceLock<(SyntheticScene, Trajectory)> = OnceLock::new();
    ROOM.get_or_init(|| {
        let scene = SyntheticScene::room(small_intrinsics(), 12);
        let traj = scene.path.as_ref().unwrap().trajectory();
        (scene, traj)
    })
}

// geometry

proptest! {
    #[test]
    fn exp_of_negated_log_is_inverse(v in prop::array::uniform3(-5.0..5.0f64), axis in prop::array::uniform3(-1.0..1.0f64), angle in 0.0..3.0f64) {
        let t = Twist::new(v3(v), unit(axis) * angle).exp();
        let l = t.log();
        let back = se3_exp(&Twist::new(-l.v, -l.omega));
        prop_assert!(pose_gap(&back, &t.inverse()) < 1e-8);
    }

    #[test]
    fn project_inverts_unproject(u in 0.0..159.0f64, v in 0.0..119.0f64, d in 0.1..8.0f64) {
        let k = Intrinsics::new(130.0, 130.0, 79.5, 59.5, 160, 120).unwrap();
        let x = k.unproject(u, v, d);
        let p = project(&x, &k).unwrap();
        prop_assert!(p.in_bounds);
        prop_assert!((p.uv.x - u).abs() < 1e-9 && (p.uv.y - v).abs() < 1e-9);
        prop_assert!((k.unproject(p.uv.x, p.uv.y, x.z) - x).norm() < 1e-6);
    }

    #[test]
    fn normals_face_the_camera(m in prop::array::uniform3(-0.6..0.6f64), c in 0.5..3.0f64, bump in 0.0..0.3f64) {
        let k = small_intrinsics();
        let m = Vector3::new(m[0], m[1], 1.0).normalize();
        let depth = Image::from_fn(k.width, k.height, |u, v| {
            let ray = k.unproject(u as f64, v as f64, 1.0);
            let t = c / m.dot(&ray);
            let wave = 1.0 + bump * 0.1 * ((u as f64) * 0.3).sin();
            if t > 0.0 { (t * wave) as f32 } else { 0.0 }
        });
        let frame = RgbdFrame { intensity: Image::new(k.width, k.height), depth, color: None, intrinsics: k, timestamp: 0.0 };
        let cloud = backproject(&frame).unwrap();
        prop_assert!(!cloud.is_empty());
        for (x, n) in cloud.points.iter().zip(&cloud.normals) {
            prop_assert!(n.dot(x) < 0.0);
            prop_assert!((n.norm() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn composition_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        prop_assert!(pose_gap(&left, &right) < 1e-10);
        let r = left.rotation_matrix();
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).amax() < 1e-6);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-6);
    }
}

// grid

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_is_invariant_to_batch_splitting(seed in any::<u64>(), n in 2usize..80, prior_weight in 0u32..50) {
        let mut r = rng(seed);
        let net = prior();
        let points = random_local_points(&mut r, n);
        let start = PliVoxel {
            centroid: Vector3::zeros(),
            latent: if prior_weight == 0 { vec![0.0; 29] } else { (0..29).map(|_| r.random_range(-1.0..1.0f32)).collect() },
            weight: prior_weight,
        };
        let whole = fuse_latent(&start, &net.encode_points(&points).unwrap(), n as u32, None);

        let mut cuts: Vec<usize> = (0..r.random_range(1..4)).map(|_| r.random_range(1..n)).collect();
        cuts.extend([0, n]);
        cuts.sort_unstable();
        cuts.dedup();
        let mut split = start;
        for w in cuts.windows(2) {
            let part = &points[w[0]..w[1]];
            split = fuse_latent(&split, &net.encode_points(part).unwrap(), part.len() as u32, None);
        }
        prop_assert_eq!(split.weight, whole.weight);
        for (a, b) in split.latent.iter().zip(&whole.latent) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn weights_never_decrease(seed in any::<u64>(), steps in 1usize..20, cap in prop::option::of(1u32..100)) {
        let mut r = rng(seed);
        let mut v = PliVoxel::empty(Vector3::zeros(), 4);
        for _ in 0..steps {
            let l: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
            let w = r.random_range(1..200);
            let next = if r.random_bool(0.5) { fuse_latent(&v, &l, w, cap) } else { fuse_latent_max(&v, &l, w, cap) };
            prop_assert!(next.weight >= v.weight);
            v = next;
        }
    }

    #[test]
    fn voxel_index_is_translation_consistent(
        a in 0.01..1.0f64,
        origin in prop::array::uniform3(-5.0..5.0f64),
        cell in prop::array::uniform3(-100i32..100),
        frac in prop::array::uniform3(1e-6..(1.0 - 1e-6)),
        k in prop::array::uniform3(-100i32..100),
    ) {
        let grid = VoxelGrid::new(a, v3(origin), 29).unwrap();
        let x = v3(origin) + Vector3::new(cell[0] as f64 + frac[0], cell[1] as f64 + frac[1], cell[2] as f64 + frac[2]) * a;
        let shift = Vector3::new(k[0] as f64, k[1] as f64, k[2] as f64) * a;
        prop_assert_eq!(grid.voxel_index(&x), VoxelIndex(cell));
        prop_assert_eq!(grid.voxel_index(&(x + shift)), VoxelIndex(cell).offset(k));
    }

    #[test]
    fn sub_threshold_buckets_are_never_allocated(seed in any::<u64>(), threshold in 1usize..32) {
        let mut r = rng(seed);
        let mut grid = VoxelGrid::with_defaults();
        grid.allocation_threshold = threshold;
        let mut cloud = plivox::geometry::OrientedPointCloud::default();
        for i in 0..6 {
            let count = r.random_range(0..2 * threshold + 2);
            let c = grid.centroid(VoxelIndex([i, 0, 0]));
            for _ in 0..count {
                let y = Vector3::new(r.random_range(-0.49..0.49), r.random_range(-0.49..0.49), r.random_range(-0.49..0.49));
                cloud.push(c + y * 0.1, -Vector3::z());
            }
        }
        let buckets = grid.bucket_points(&cloud);
        prop_assert!(buckets.accepted.values().all(|p| p.len() >= threshold));
        prop_assert!(buckets.withheld.values().all(|&c| c < threshold));
        let stats = integrate_cloud(&cloud, &mut grid, prior(), FusionMode::Mean).unwrap();
        prop_assert_eq!(stats.voxels_allocated, buckets.accepted.len());
        for (k, vox) in grid.iter_sorted() {
            prop_assert!(!buckets.withheld.contains_key(&k));
            prop_assert!(vox.weight as usize >= threshold);
        }
    }
}

// neural-implicit

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sigma_is_positive(seed in 0u64..1000, y in prop::array::uniform3(-1.0..1.0f64), scale in 0.0..100.0f64) {
        let mut r = rng(seed);
        let latent: Vec<f64> = (0..29).map(|_| r.random_range(-1.0..1.0) * scale).collect();
        for net in [prior(), &NetWeights::init(seed)] {
            let d = net.decode(&v3(y), &latent);
            prop_assert!(d.sigma > 0.0 && d.sigma.is_finite());
            prop_assert!(d.mu.is_finite());
        }
    }

    #[test]
    fn encoder_ignores_order_and_duplication(seed in any::<u64>(), n in 1usize..64, copies in 1usize..4) {
        let mut r = rng(seed);
        let net = prior();
        let points = random_local_points(&mut r, n);
        let base = net.encode_points(&points).unwrap();
        let mut shuffled: Vec<LocalPoint> = points.iter().flat_map(|p| std::iter::repeat_n(*p, copies)).collect();
        shuffled.shuffle(&mut r);
        prop_assert_eq!(net.encode_points(&shuffled).unwrap(), base);
    }

    #[test]
    fn forward_passes_are_deterministic(seed in any::<u64>(), n in 1usize..32) {
        let mut r = rng(seed);
        let net = prior();
        let points = random_local_points(&mut r, n);
        let latent = net.encode_points(&points).unwrap();
        let y = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        prop_assert_eq!(net.encode_points(&points).unwrap(), latent.clone());
        prop_assert_eq!(net.decode(&y, &latent), net.decode(&y, &latent));
        prop_assert_eq!(net.decode_spatial_gradient(&y, &latent), net.decode_spatial_gradient(&y, &latent));
    }
}

// prior-training

fn sphere_sample(seed: u64, a: f64) -> (Shape, Vector3<f64>, f64, Vector3<f64>, TrainVoxelSample, TrainConfig) {
    let mut r = rng(seed);
    let center = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
    let radius = r.random_range(3.0..8.0) * a;
    let dir = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)).normalize();
    let voxel = center + dir * radius;
    let cfg = TrainConfig {
        voxel_size: a,
        n_d: 256,
        ..Default::default()
    };
    let shape = Shape::sphere(center, radius);
    let sample = sample_voxel(&shape, &voxel, 48, &cfg, &mut r).unwrap();
    (shape, center, radius, voxel, sample, cfg)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cnp_loss_ignores_sample_order(seed in any::<u64>()) {
        let (_, _, _, _, sample, cfg) = sphere_sample(seed, 1.0);
        let mut shuffled = sample.clone();
        let mut r = rng(seed ^ 0x5eed);
        shuffled.surface.shuffle(&mut r);
        shuffled.samples.shuffle(&mut r);
        let a = cnp_loss(&sample, prior(), cfg.delta).unwrap();
        let b = cnp_loss(&shuffled, prior(), cfg.delta).unwrap();
        prop_assert!((a - b).abs() <= 1e-8, "{} vs {}", a, b);
    }

    #[test]
    fn sampler_labels_are_exact_distances(seed in any::<u64>(), a in 0.05..1.0f64) {
        let (_, center, radius, voxel, sample, _) = sphere_sample(seed, a);
        for (y, s) in &sample.samples {
            let x = voxel + y * a;
            let oracle = ((x - center).norm() - radius) / a;
            prop_assert!((s - oracle).abs() <= 1e-9, "{} vs {}", s, oracle);
        }
        prop_assert_eq!(sample.samples.len(), 256);
        prop_assert_eq!(sample.surface.len(), 48);
    }
}

// tracker

fn tracking_setup(frame_index: usize, twist: [f64; 6]) -> (RgbdFrame, Pose, AnalyticField) {
    let (scene, traj) = room();
    let gt = traj.poses[frame_index].1;
    let frame = render_frame(scene, &gt, 0.0, frame_index);
    let prev = gt.compose(&Twist::from_slice(&twist).exp().inverse());
    let field = AnalyticField {
        shape: scene.shape.clone(),
        voxel_size: 0.1,
        sigma: 0.05,
    };
    (frame, prev, field)
}

fn small_twist() -> impl Strategy<Value = [f64; 6]> {
    (prop::array::uniform3(-0.02..0.02f64), prop::array::uniform3(-0.03..0.03f64)).prop_map(|(v, w)| [v[0], v[1], v[2], w[0], w[1], w[2]])
}

proptest! {
    #[test]
    fn huber_weight_is_one_inside_and_decreasing_outside(r1 in -50.0..50.0f64, r2 in -50.0..50.0f64, delta in 0.01..10.0f64) {
        for r in [r1, r2] {
            let w = huber_weight(r, delta);
            if r.abs() <= delta {
                prop_assert_eq!(w, 1.0);
            } else {
                prop_assert!((w - delta / r.abs()).abs() < 1e-15);
            }
        }
        if r1.abs() <= r2.abs() {
            prop_assert!(huber_weight(r1, delta) >= huber_weight(r2, delta));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn common_sigma_scale_leaves_the_solution_unchanged(frame_index in 0usize..12, twist in small_twist(), c in 0.1..10.0f64) {
        let (frame, prev, field) = tracking_setup(frame_index, twist);
        let cfg = TrackingConfig { huber_delta: 1e12, ..Default::default() };
        let points = sample_depth_points(&frame, &cfg);
        let scaled = AnalyticField { sigma: field.sigma * c, ..field.clone() };
        let a = track_points(&points, None, &prev, &field, &cfg, Pose::identity()).unwrap();
        let b = track_points(&points, None, &prev, &scaled, &cfg, Pose::identity()).unwrap();
        prop_assert_eq!(a.iterations, b.iterations);
        prop_assert!(pose_gap(&a.pose, &b.pose) < 1e-9);

        let unit = TrackingConfig { sigma_mode: SigmaMode::ConstantOne, ..cfg };
        let a = track_points(&points, None, &prev, &field, &unit, Pose::identity()).unwrap();
        let b = track_points(&points, None, &prev, &AnalyticField { sigma: field.sigma * 2.0, ..field.clone() }, &unit, Pose::identity()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normal_matrix_is_symmetric_psd(frame_index in 0usize..12, twist in small_twist()) {
        let (frame, prev, field) = tracking_setup(frame_index, twist);
        let cfg = TrackingConfig::default();
        let points = sample_depth_points(&frame, &cfg);
        let term = sdf_residuals(&points, &prev, &Pose::identity(), &field, &cfg).unwrap();
        let mut h = Matrix6::zeros();
        for row in &term.rows {
            h += row.j * row.j.transpose() * row.w;
        }
        prop_assert!((h - h.transpose()).amax() == 0.0);
        let eig = SymmetricEigen::new(h).eigenvalues;
        prop_assert!(eig.min() >= -1e-9 * eig.max().abs());
    }

    #[test]
    fn tracking_is_deterministic(frame_index in 1usize..12, twist in small_twist(), seed in any::<u64>()) {
        let (scene, traj) = room();
        let (frame, prev, field) = tracking_setup(frame_index, twist);
        let previous = render_frame(scene, &traj.poses[frame_index - 1].1, 0.0, frame_index - 1);
        let cfg = TrackingConfig { seed, ..Default::default() };
        let a = track(&frame, Some(&previous), &prev, &field, &cfg, None).unwrap();
        let b = track(&frame, Some(&previous), &prev, &field, &cfg, None).unwrap();
        prop_assert_eq!(a, b);
    }
}

// mapper-mesher

/// Decoder whose μ is `n·y + l_0` with σ constant.
fn planar_net(n: &Vector3<f64>) -> NetWeights {
    let mut net = NetWeights::init_with(&[6, 29], &[32, 2], 0).unwrap();
    let layer = &mut net.decoder.layers[0];
    layer.weight.iter_mut().for_each(|w| *w = 0.0);
    layer.bias = vec![0.0, 0.0];
    layer.weight[..3].copy_from_slice(n.as_slice());
    layer.weight[3] = 1.0;
    net
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mean_integration_ignores_frame_order(seed in any::<u64>(), frames in 2usize..5) {
        let mut r = rng(seed);
        let template = VoxelGrid::with_defaults();
        let clouds: Vec<_> = (0..frames)
            .map(|_| {
                let mut cloud = plivox::geometry::OrientedPointCloud::default();
                for i in 0..4 {
                    if r.random_bool(0.4) {
                        continue;
                    }
                    let c = template.centroid(VoxelIndex([i, i % 2, 0]));
                    for _ in 0..r.random_range(16..40) {
                        let y = Vector3::new(r.random_range(-0.49..0.49), r.random_range(-0.49..0.49), r.random_range(-0.49..0.49));
                        let n = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), -1.0).normalize();
                        cloud.push(c + y * 0.1, n);
                    }
                }
                cloud
            })
            .collect();
        let mut order: Vec<usize> = (0..frames).collect();
        let mut forward = template.clone();
        for &i in &order {
            integrate_cloud(&clouds[i], &mut forward, prior(), FusionMode::Mean).unwrap();
        }
        order.shuffle(&mut r);
        let mut permuted = template.clone();
        for &i in &order {
            integrate_cloud(&clouds[i], &mut permuted, prior(), FusionMode::Mean).unwrap();
        }
        let (fa, fb) = (forward.iter_sorted(), permuted.iter_sorted());
        prop_assert_eq!(fa.len(), fb.len());
        for ((ka, va), (kb, vb)) in fa.iter().zip(&fb) {
            prop_assert_eq!(ka, kb);
            prop_assert_eq!(va.weight, vb.weight);
            for (x, y) in va.latent.iter().zip(&vb.latent) {
                prop_assert!((x - y).abs() <= 1e-6, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn meshes_have_no_degenerate_triangles(normal in prop::array::uniform3(-1.0..1.0f64), p0 in prop::array::uniform3(0.05..0.35f64), seed in any::<u64>(), jitter in 0.0..0.2f64) {
        let n = unit(normal);
        let net = planar_net(&n);
        let mut r = rng(seed);
        let mut grid = VoxelGrid::with_defaults();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let idx = VoxelIndex([i, j, k]);
                    let mut l = vec![0.0f32; 29];
                    l[0] = (n.dot(&(grid.centroid(idx) - v3(p0))) / 0.1 + r.random_range(-jitter..=jitter)) as f32;
                    grid.insert(idx, l, 1).unwrap();
                }
            }
        }
        let mesh = extract_mesh(&grid, &net, &MeshRequest::default());
        prop_assert!(!mesh.is_empty());
        prop_assert!(mesh.validate().is_ok());
        for t in &mesh.triangles {
            prop_assert!(mesh.triangle_area(t) > 1e-12);
        }
    }

    #[test]
    fn colorize_ignores_point_order(seed in any::<u64>(), k in 1usize..6) {
        let mut r = rng(seed);
        let rand_point = |r: &mut ChaCha8Rng| Vector3::new(r.random_range(0.0..0.3), r.random_range(0.0..0.3), r.random_range(0.0..0.3));
        let mesh = TriangleMesh { vertices: (0..40).map(|_| rand_point(&mut r)).collect(), ..Default::default() };
        let mut points: Vec<(Vector3<f64>, [u8; 3])> = (0..300).map(|_| (rand_point(&mut r), [r.random(), r.random(), r.random()])).collect();
        let cloud = |pts: &[(Vector3<f64>, [u8; 3])]| {
            let mut c = ColorCloud::default();
            pts.iter().for_each(|(p, col)| c.push(*p, *col));
            c
        };
        let a = colorize_mesh(&mesh, &cloud(&points), k, 0.05);
        points.shuffle(&mut r);
        let b = colorize_mesh(&mesh, &cloud(&points), k, 0.05);
        prop_assert_eq!(a.colors, b.colors);
    }
}

// io-bench

fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
    prop::collection::vec((0.001..1.0f64, arb_pose()), 3..20).prop_map(|steps| {
        let mut t = 1.3e9;
        Trajectory::new(
            steps
                .into_iter()
                .map(|(dt, p)| {
                    t += dt;
                    (t, p)
                })
                .collect(),
        )
        .unwrap()
    })
}

proptest! {
    #[test]
    fn ate_ignores_a_global_rigid_motion(est in arb_trajectory(), g in arb_pose(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let gt = Trajectory::new(
            est.poses
                .iter()
                .map(|(t, p)| (*t, Pose::new(p.rotation, p.translation + Vector3::new(r.random_range(-0.1..0.1), r.random_range(-0.1..0.1), r.random_range(-0.1..0.1)))))
                .collect(),
        )
        .unwrap();
        let moved = Trajectory::new(est.poses.iter().map(|(t, p)| (*t, g.compose(p))).collect()).unwrap();
        let a = evaluate_ate(&est, &gt).unwrap().rmse;
        let b = evaluate_ate(&moved, &gt).unwrap().rmse;
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn tum_text_round_trips_bit_exactly(traj in arb_trajectory()) {
        let text = traj.to_tum();
        let back = Trajectory::parse_tum(&text, "mem").unwrap();
        prop_assert_eq!(&back, &traj);
        prop_assert_eq!(back.to_tum(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rendered_depth_lies_on_the_surface(frame_index in 0usize..12) {
        let (scene, traj) = room();
        let pose = traj.poses[frame_index].1;
        let frame = render_frame(scene, &pose, 0.0, frame_index);
        let k = frame.intrinsics;
        let mut valid = 0;
        for v in 0..k.height {
            for u in 0..k.width {
                let d = frame.depth.get(u, v) as f64;
                if d <= 0.0 {
                    continue;
                }
                valid += 1;
                let x = pose.transform_point(&k.unproject(u as f64, v as f64, d));
                prop_assert!(scene.shape.sdf(&x).abs() < 2.0 * scene.epsilon, "pixel ({}, {}): {}", u, v, scene.shape.sdf(&x));
            }
        }
        prop_assert!(valid > k.width * k.height / 2);
    }
}
