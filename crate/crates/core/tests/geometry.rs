use mvpose_core::geometry::{backproject_ray, project, triangulate_multiview, CameraModel, Point2D, Point3D};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_camera(rng: &mut impl Rng, id: usize) -> CameraModel {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let radius = rng.random_range(3000.0..7000.0);
    let eye = Point3D::new(radius * angle.cos(), radius * angle.sin(), rng.random_range(500.0..3000.0));
    let target = Point3D::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), 1000.0);
    let f = rng.random_range(400.0..1200.0);
    CameraModel::look_at(format!("c{id}"), 1280, 1024, (f, f * rng.random_range(0.95..1.05)), eye, target, Vector3::z())
        .unwrap()
}

fn point_near_origin(rng: &mut impl Rng) -> Point3D {
    Point3D::new(
        rng.random_range(-2000.0..2000.0),
        rng.random_range(-2000.0..2000.0),
        rng.random_range(0.0..2000.0),
    )
}

/// Distance from `p` to the line `o + s d`, computed without the ray type.
fn line_distance(o: &Point3D, d: &Vector3<f64>, p: &Point3D) -> f64 {
    let w = p - o;
    (w - d * (w.dot(d) / d.norm_squared())).norm()
}

#[test]
fn thousand_round_trips_land_on_the_ray() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let cam = random_camera(&mut rng, i);
        let p = point_near_origin(&mut rng);
        let px = project(&cam, &p).unwrap();
        let ray = backproject_ray(&cam, &px);
        worst = worst.max(line_distance(ray.origin(), ray.direction(), &p));
    }
    assert!(worst < 1e-6, "worst point-to-ray distance {worst} mm");
}

#[test]
fn noiseless_multiview_triangulation_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..200 {
        let cams: Vec<CameraModel> = (0..rng.random_range(2..6)).map(|i| random_camera(&mut rng, i)).collect();
        let p = point_near_origin(&mut rng);
        let obs: Vec<(&CameraModel, Point2D)> = cams.iter().map(|c| (c, project(c, &p).unwrap())).collect();
        let q = triangulate_multiview(obs).unwrap();
        assert!((q - p).norm() < 1e-6, "trial {trial}: error {}", (q - p).norm());
    }
}

#[test]
fn single_observation_does_not_triangulate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cam = random_camera(&mut rng, 0);
    let px = project(&cam, &Point3D::new(0.0, 0.0, 1000.0)).unwrap();
    assert!(triangulate_multiview([(&cam, px)]).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn points_along_a_ray_project_to_its_pixel(seed in any::<u64>(), u in 0.0f64..1280.0, v in 0.0f64..1024.0, s in 100.0f64..10_000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = random_camera(&mut rng, 0);
        let ray = backproject_ray(&cam, &Point2D::new(u, v));
        prop_assert!((ray.direction().norm() - 1.0).abs() < 1e-12);
        let px = project(&cam, &ray.point_at(s)).unwrap();
        prop_assert!((px.u - u).abs() < 1e-6 && (px.v - v).abs() < 1e-6);
    }

    #[test]
    fn depth_sign_decides_projectability(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = random_camera(&mut rng, 0);
        let p = point_near_origin(&mut rng);
        let behind = cam.centre() + (cam.centre() - p);
        prop_assert!(project(&cam, &p).is_ok());
        prop_assert!(project(&cam, &behind).is_err());
    }
}
