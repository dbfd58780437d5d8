// Debug: single odometry step with exact prior against an exact map.
use topoloc::cloud::*;
use topoloc::doppler::GyroSample;
use topoloc::geom::*;
use topoloc::icp::*;
use topoloc::sim;

fn main() {
    let mut boxes = Vec::new();
    for k in 0..8 {
        let x = 12.0 + 18.0 * k as f64;
        let side = if k % 2 == 0 { 1.0 } else { -1.0 };
        boxes.push(sim::BoxSpec {
            min: Vec3::new(x, side * 5.0 - 2.0, -1.5),
            max: Vec3::new(x + 4.0, side * 5.0 + 2.0, 2.5),
        });
    }
    let world = sim::WorldSpec {
        planes: vec![
            sim::PlaneSpec { center: Vec3::new(60.0, 0.0, -1.5), normal: Vec3::z(), half_extents: [260.0, 40.0] },
            sim::PlaneSpec { center: Vec3::new(60.0, 11.0, 2.5), normal: -Vec3::y(), half_extents: [260.0, 4.5] },
            sim::PlaneSpec { center: Vec3::new(60.0, -11.0, 2.5), normal: Vec3::y(), half_extents: [260.0, 4.5] },
            sim::PlaneSpec { center: Vec3::new(160.0, 0.0, 3.0), normal: -Vec3::x(), half_extents: [30.0, 8.0] },
        ],
        boxes,
        dynamics: vec![],
        seed: 11,
    };
    let w = Twist::new(Vec3::new(10.0, 0.0, 0.0), Vec3::zeros());
    let gt = sim::build_trajectory(&[sim::RouteSegment { t_start: 0.0, t_end: 1.0, twist: w }]).unwrap();
    let sensor = sim::SensorSpec { elevation_rows: 12, azimuth_cols: 100, ..sim::SensorSpec::default() };
    let config = IcpConfig::default();

    // Frame 0: undistort with the exact trajectory, insert at truth.
    let prep = |raw: &LidarFrame| {
        extract_planar_features(&voxel_downsample(raw, 0.5).unwrap(), 20, 0.95).unwrap()
    };
    let raw0 = sim::render_scan(&world, &gt, 0.0, 0.1, &sensor).unwrap();
    let f0 = prep(&raw0);
    let k0a = TrajectoryKnot { pose: exp_map(&w.scaled(0.1)).inverse(), twist: w, stamp: 0.0 };
    let k0b = TrajectoryKnot { pose: Pose::identity(), twist: w, stamp: 0.1 };
    let u0 = undistort(&f0, &k0a, &k0b, &Pose::identity()).unwrap();
    let map = update_local_map(&LocalMap::new(), &refresh_normals(&u0, &Default::default()), &Pose::identity(), 3);
    println!("map: {} points", map.len());

    // Frame 1 with the exact prior.
    let raw1 = sim::render_scan(&world, &gt, 0.1, 0.2, &sensor).unwrap();
    let f1 = prep(&raw1);
    let truth_rel = exp_map(&w.scaled(0.1));
    let prior = (
        TrajectoryKnot { pose: Pose::identity(), twist: w, stamp: 0.1 },
        TrajectoryKnot { pose: truth_rel, twist: w, stamp: 0.2 },
    );
    let gyro: Vec<GyroSample> = sim::simulate_gyro(&gt, &sensor, 11, 0.1, 0.2).unwrap();
    let mut anchor = nalgebra::SMatrix::<f64, 12, 12>::zeros();
    anchor.fixed_view_mut::<6, 6>(0, 0).copy_from(&(Mat6::identity() * 1e8));
    anchor.fixed_view_mut::<6, 6>(6, 6).copy_from(&(Mat6::identity() * 1e8));
    let step = icp_odometry_step(&f1, &map, &gyro, &prior, &anchor, &config).unwrap();
    let err = truth_rel.inverse().compose(&step.knots.1.pose);
    println!(
        "tight anchor: iters {} corr {} err_t {:.2e} err_r {:.2e} deg twist {:?}",
        step.iterations,
        step.correspondences,
        err.translation.norm(),
        err.rotation_angle().to_degrees(),
        step.knots.1.twist.linear
    );

    // Diagnose residuals at the exact truth state.
    {
        use topoloc::icp::{ChartTerms, LocalState};
        let state = LocalState::from_knots(&prior.0.pose, &prior.0, &prior.1).unwrap();
        let chart = ChartTerms::new(&state, &prior.0.pose, 0.1, 0.2).unwrap();
        let to_world = gt.pose(0.1).unwrap(); // map frame -> world
        let mut max_scan_surf: f64 = 0.0;
        let mut max_map_surf: f64 = 0.0;
        let mut sum_n = 0.0;
        let mut max_n: f64 = 0.0;
        let mut count = 0;
        for p in &f1.points {
            let mapped = chart.transform(&p.position, p.timestamp);
            let world_pt = to_world.apply(&mapped);
            max_scan_surf = max_scan_surf.max(world.surface_distance(&world_pt, p.timestamp));
            if let Some((mp, _)) = associate(&mapped, &map, 1.0) {
                let e = mp.position - mapped;
                let en = e.dot(&mp.normal).abs();
                sum_n += en;
                max_n = max_n.max(en);
                count += 1;
            }
        }
        for mp in map.points() {
            let world_pt = to_world.apply(&mp.position);
            max_map_surf = max_map_surf.max(world.surface_distance(&world_pt, 0.1));
        }
        println!("at truth: scan surf max {max_scan_surf:.2e}  map surf max {max_map_surf:.2e}");
        println!("normal-dir residuals: mean {:.2e} max {:.2e} over {count}", sum_n / count as f64, max_n);
        // Gated stats + worst matches.
        let gate_cos = (45.0_f64).to_radians().cos();
        let mut kept: Vec<(f64, Vec3, Vec3, Vec3, Vec3)> = Vec::new();
        for p in &f1.points {
            let pose_t = chart.pose_at(p.timestamp);
            let mapped = pose_t.apply(&p.position);
            if let Some((mp, _)) = associate(&mapped, &map, 1.0) {
                if let Some(n) = &p.normal {
                    if pose_t.rotate(n).dot(&mp.normal).abs() < gate_cos { continue; }
                }
                let e = mp.position - mapped;
                kept.push((e.dot(&mp.normal).abs(), mapped, mp.position, mp.normal, pose_t.rotate(&p.normal.unwrap())));
            }
        }
        kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        println!("gated matches: {}", kept.len());
        for (en, scan, mapp, mn, sn) in kept.iter().take(8) {
            println!("  |e.n| {en:.3}  scan ({:+.2},{:+.2},{:+.2}) map ({:+.2},{:+.2},{:+.2}) mapn ({:+.2},{:+.2},{:+.2}) scann ({:+.2},{:+.2},{:+.2})",
                scan.x, scan.y, scan.z, mapp.x, mapp.y, mapp.z, mn.x, mn.y, mn.z, sn.x, sn.y, sn.z);
        }
    }

    let mut anchor2 = nalgebra::SMatrix::<f64, 12, 12>::zeros();
    anchor2.fixed_view_mut::<6, 6>(0, 0).copy_from(&(Mat6::identity() * 1e8));
    anchor2.fixed_view_mut::<6, 6>(6, 6).copy_from(&(Mat6::identity() * 1e-2));
    let step = icp_odometry_step(&f1, &map, &gyro, &prior, &anchor2, &config).unwrap();
    let err = truth_rel.inverse().compose(&step.knots.1.pose);
    println!(
        "weak twist anchor: iters {} corr {} err_t {:.2e} err_r {:.2e} deg twist {:?}",
        step.iterations,
        step.correspondences,
        err.translation.norm(),
        err.rotation_angle().to_degrees(),
        step.knots.1.twist.linear
    );

    // Exactness check on a shadow-free room world.
    {
        let room = sim::WorldSpec {
            planes: vec![
                sim::PlaneSpec { center: Vec3::new(0.0, 0.0, -1.5), normal: Vec3::z(), half_extents: [80.0, 80.0] },
                sim::PlaneSpec { center: Vec3::new(70.0, 0.0, 6.0), normal: -Vec3::x(), half_extents: [40.0, 10.0] },
                sim::PlaneSpec { center: Vec3::new(-50.0, 0.0, 6.0), normal: Vec3::x(), half_extents: [40.0, 10.0] },
                sim::PlaneSpec { center: Vec3::new(0.0, 40.0, 6.0), normal: -Vec3::y(), half_extents: [80.0, 10.0] },
                sim::PlaneSpec { center: Vec3::new(0.0, -40.0, 6.0), normal: Vec3::y(), half_extents: [80.0, 10.0] },
            ],
            ..sim::WorldSpec::default()
        };
        let raw0 = sim::render_scan(&room, &gt, 0.0, 0.1, &sensor).unwrap();
        let f0 = prep(&raw0);
        let u0 = undistort(&f0, &k0a, &k0b, &Pose::identity()).unwrap();
        let map = update_local_map(&LocalMap::new(), &refresh_normals(&u0, &Default::default()), &Pose::identity(), 3);
        let raw1 = sim::render_scan(&room, &gt, 0.1, 0.2, &sensor).unwrap();
        let f1 = prep(&raw1);
        let mut anchor = nalgebra::SMatrix::<f64, 12, 12>::zeros();
        anchor.fixed_view_mut::<6, 6>(0, 0).copy_from(&(Mat6::identity() * 1e8));
        anchor.fixed_view_mut::<6, 6>(6, 6).copy_from(&(Mat6::identity() * 1e-2));
        {
            use topoloc::icp::{ChartTerms, LocalState};
            let state = LocalState::from_knots(&prior.0.pose, &prior.0, &prior.1).unwrap();
            let chart = ChartTerms::new(&state, &prior.0.pose, 0.1, 0.2).unwrap();
            let mut kept: Vec<(f64, Vec3, Vec3, Vec3, Vec3)> = Vec::new();
            let gc = (45.0_f64).to_radians().cos();
            for p in &f1.points {
                let pose_t = chart.pose_at(p.timestamp);
                let mapped = pose_t.apply(&p.position);
                if let Some((mp, _)) = associate(&mapped, &map, 1.0) {
                    if let Some(n) = &p.normal {
                        if pose_t.rotate(n).dot(&mp.normal).abs() < gc { continue; }
                    }
                    let e = mp.position - mapped;
                    kept.push((e.dot(&mp.normal).abs(), mapped, mp.position, mp.normal, pose_t.rotate(&p.normal.unwrap())));
                }
            }
            kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            println!("room at truth: {} matches, top |e.n|:", kept.len());
            for (en, scan, mapp, mn, _sn) in kept.iter().take(6) {
                println!("  |e.n| {en:.2e}  scan ({:+.2},{:+.2},{:+.2}) map ({:+.2},{:+.2},{:+.2}) mapn ({:+.2},{:+.2},{:+.2})",
                    scan.x, scan.y, scan.z, mapp.x, mapp.y, mapp.z, mn.x, mn.y, mn.z);
            }
        }
        for iters in [1usize, 2, 3, 6] {
            let c2 = IcpConfig { plane_epsilon: 1e-5, max_iterations: iters, ..config.clone() };
            let step = icp_odometry_step(&f1, &map, &gyro, &prior, &anchor, &c2).unwrap();
            let err = truth_rel.inverse().compose(&step.knots.1.pose);
            println!("room world iters {iters}: corr {} err_t {:.2e} err_r {:.2e} deg twist_err {:.2e}",
                step.correspondences, err.translation.norm(), err.rotation_angle().to_degrees(),
                (step.knots.1.twist.to_vector() - w.to_vector()).norm());
        }
    }
}
