// Debug: trace per-frame icp iterations/cost on the corridor route.
use topoloc::cloud::*;
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
    let gt = sim::build_trajectory(&[sim::RouteSegment {
        t_start: 0.0, t_end: 10.2,
        twist: Twist::new(Vec3::new(10.0, 0.0, 0.0), Vec3::zeros()),
    }]).unwrap();
    let sensor = sim::SensorSpec { elevation_rows: 12, azimuth_cols: 100, ..sim::SensorSpec::default() };
    let config = IcpConfig {
        initial_twist: Twist::new(Vec3::new(10.0, 0.0, 0.0), Vec3::zeros()),
        ..IcpConfig::default()
    };
    let mut odom = IcpOdometry::new(config);
    for k in 0..102 {
        let (t0, t1) = (0.1 * k as f64, 0.1 * (k + 1) as f64);
        let raw = sim::render_scan(&world, &gt, t0, t1, &sensor).unwrap();
        let feats = extract_planar_features(&voxel_downsample(&raw, 0.5).unwrap(), 20, 0.95).unwrap();
        let gyro = sim::simulate_gyro(&gt, &sensor, world.seed, t0, t1).unwrap();
        match odom.process_frame(&feats, &gyro) {
            Ok(out) => {
                println!("frame {k:3}: feats {:5} corr {:5} iters {:2} div {} rel.x {:+.4} twist.x {:+.4} pose.x {:+.3}",
                    feats.len(), out.correspondences, out.iterations, out.diverged,
                    out.relative.translation.x, out.knots.1.twist.linear.x, out.pose.translation.x);
            }
            Err(e) => { println!("frame {k}: ERROR {e}"); break; }
        }
    }
}
