use proptest::prelude::*;
use voxstereo::evalkit::{angle_deg, perturb_pose};
use voxstereo::geometry::{project_point, ray_through_pixel, Mat3, Vec3};
use voxstereo::{Camera, Intrinsics, Pose};

fn orbit_pose(az: f64, el: f64, radius: f64) -> Pose {
    let (a, e) = (az.to_radians(), el.to_radians());
    let eye = Vec3::new(radius * e.cos() * a.sin(), radius * e.sin(), -radius * e.cos() * a.cos());
    Pose::look_at(eye, Vec3::zeros(), Vec3::y()).unwrap()
}

fn max_orthonormality_error(r: &Mat3) -> f64 {
    let e = r.transpose() * r - Mat3::identity();
    e.iter().fold((r.determinant() - 1.0).abs(), |m, x| m.max(x.abs()))
}

proptest! {
    #[test]
    fn ray_round_trip(
        az in 0.0..360.0f64,
        el in -60.0..60.0f64,
        u in 0.0..63.0f64,
        v in 0.0..47.0f64,
        depth in 0.3..4.0f64,
    ) {
        let k = Intrinsics::new(70.0, 65.0, 31.5, 23.5, 64, 48).unwrap();
        let pose = orbit_pose(az, el, 2.0);
        let (origin, dir) = ray_through_pixel(u, v, &k, &pose);
        prop_assert!((dir.norm() - 1.0).abs() < 1e-12);
        let p = project_point(&(origin + depth * dir), &k, &pose);
        prop_assert!(p.valid);
        prop_assert!((p.u - u).abs() < 1e-6 && (p.v - v).abs() < 1e-6);
    }

    #[test]
    fn projection_reconstructs_the_point(
        x in -0.5..0.5f64, y in -0.5..0.5f64, z in -0.5..0.5f64,
        az in 0.0..360.0f64, el in -40.0..40.0f64,
    ) {
        let k = Intrinsics::centered(64.0, 64, 64).unwrap();
        let cam = Camera::new(k, orbit_pose(az, el, 2.0));
        let w = Vec3::new(x, y, z);
        let p = cam.project(&w);
        prop_assert!(p.valid);
        let back = cam.point_at_depth(p.u, p.v, p.z);
        prop_assert!((back - w).norm() < 1e-9);
    }

    #[test]
    fn projection_is_scale_consistent(
        x in -1.0..1.0f64, y in -1.0..1.0f64, z in 0.5..3.0f64, lambda in 0.1..10.0f64,
    ) {
        let k = Intrinsics::centered(50.0, 64, 64).unwrap();
        let pose = Pose::identity();
        let a = project_point(&Vec3::new(x, y, z), &k, &pose);
        let b = project_point(&(lambda * Vec3::new(x, y, z)), &k, &pose);
        prop_assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
    }

    #[test]
    fn perturbed_poses_stay_rotations(
        az in 0.0..360.0f64, el in -20.0..30.0f64, theta in 0.0..30.0f64, seed in any::<u64>(),
    ) {
        let pose = orbit_pose(az, el, 2.0);
        let p = perturb_pose(&pose, theta, seed).unwrap();
        prop_assert!(max_orthonormality_error(&p.rotation) < 1e-9);
        prop_assert!((p.center() - pose.center()).norm() < 1e-9);
    }
}

#[test]
fn viewing_axis_moves_at_most_theta() {
    let mut worst = 0.0f64;
    for s in 0..10_000u64 {
        let theta = [0.5, 2.5, 5.0, 10.0][(s % 4) as usize];
        let pose = orbit_pose((s * 37 % 360) as f64, (s * 11 % 50) as f64 - 20.0, 2.0);
        let p = perturb_pose(&pose, theta, s).unwrap();
        let a = angle_deg(&pose.viewing_axis(), &p.viewing_axis());
        assert!(a <= theta + 1e-9, "sample {s}: {a} > {theta}");
        worst = worst.max(a / theta);
    }
    // The bound should also be approached, not just respected.
    assert!(worst > 0.99);
}

#[test]
fn zero_bound_and_negative_bound() {
    let pose = orbit_pose(40.0, 10.0, 2.0);
    let p = perturb_pose(&pose, 0.0, 3).unwrap();
    assert!((p.rotation - pose.rotation).abs().max() < 1e-12);
    assert!(perturb_pose(&pose, -1.0, 3).is_err());
}
