use std::time::Instant;

use autodiff::{Tensor, Var};
use mvstta::geometry::*;
use mvstta::scenegen::{generate_dataset, SceneSpec};
use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;

fn camera(f: (f64, f64), c: (f64, f64), angles: (f64, f64, f64), t: (f64, f64, f64)) -> Camera {
    let r = Rotation3::from_euler_angles(angles.0, angles.1, angles.2);
    Camera::new(
        Intrinsics::new(f.0, f.1, c.0, c.1).unwrap(),
        Pose::new(*r.matrix(), Vector3::new(t.0, t.1, t.2)).unwrap(),
    )
}

fn arb_camera(max_angle: f64, max_shift: f64) -> impl Strategy<Value = Camera> {
    let a = -max_angle..max_angle;
    let s = -max_shift..max_shift;
    (
        (20.0..80.0f64, 20.0..80.0f64),
        (10.0..30.0f64, 8.0..20.0f64),
        (a.clone(), a.clone(), a),
        (s.clone(), s.clone(), s),
    )
        .prop_map(|(f, c, angles, t)| camera(f, c, angles, t))
}

proptest! {
    #[test]
    fn homography_to_itself_is_identity(cam in arb_camera(3.0, 5.0), d in 0.1..100.0f64) {
        let h = homography(&cam, &cam, d).unwrap();
        prop_assert!((h - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn pure_rotation_ignores_depth(
        f in (20.0..80.0f64, 20.0..80.0f64),
        c in (10.0..30.0f64, 8.0..20.0f64),
        ra in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64),
        rb in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64),
        t in (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64),
        d1 in 0.5..10.0f64,
        d2 in 0.5..10.0f64,
    ) {
        // both cameras share a center, so the plane drops out
        let a = camera(f, c, ra, (0.0, 0.0, 0.0));
        let b = camera(f, c, rb, (0.0, 0.0, 0.0));
        let shift = |cam: Camera| {
            let center = Vector3::new(t.0, t.1, t.2);
            let r = *cam.pose.rotation();
            Camera::new(cam.intrinsics, Pose::new(r, -(r * center)).unwrap())
        };
        let (a, b) = (shift(a), shift(b));
        let h1 = homography(&a, &b, d1).unwrap();
        let h2 = homography(&a, &b, d2).unwrap();
        let expected = b.intrinsics.matrix() * b.pose.rotation() * a.pose.rotation().transpose()
            * a.intrinsics.inverse().unwrap();
        prop_assert!((h1 - expected).abs().max() < 1e-9);
        prop_assert!((h2 - expected).abs().max() < 1e-9);
    }

    #[test]
    fn back_projection_reprojects(cam in arb_camera(3.0, 5.0), x in -10.0..60.0f64, y in -10.0..40.0f64, d in 0.1..50.0f64) {
        let p = cam.back_project(x, y, d).unwrap();
        prop_assert!((cam.pose.to_camera(&p).z - d).abs() < 1e-9 * d.max(1.0));
        let (u, v) = cam.project(&p).unwrap();
        prop_assert!((u - x).abs() < 1e-9 && (v - y).abs() < 1e-9, "{u} {v} vs {x} {y}");
    }

    #[test]
    fn homography_agrees_with_ray_plane_transfer(
        a in arb_camera(0.2, 0.5),
        b in arb_camera(0.2, 0.5),
        x in 0.0..47.0f64,
        y in 0.0..31.0f64,
        d in 2.0..6.0f64,
    ) {
        let world = a.back_project(x, y, d).unwrap();
        let direct = b.project(&world);
        let via_h = apply_homography(&homography(&a, &b, d).unwrap(), (x, y));
        match (direct, via_h) {
            (Some(p), Some(q)) => prop_assert!((p.0 - q.0).abs() < 1e-9 * p.0.abs().max(1.0) && (p.1 - q.1).abs() < 1e-9 * p.1.abs().max(1.0)),
            (None, None) => {}
            other => prop_assert!(false, "visibility disagrees: {other:?}"),
        }
    }

    #[test]
    fn warp_coords_match_per_pixel_homographies(a in arb_camera(0.2, 0.5), b in arb_camera(0.2, 0.5), seed in 0u64..1000) {
        let (h, w) = (3, 4);
        let depth = Tensor::from_fn(&[h, w], |i| 2.0 + ((seed as usize * 31 + i * 17) % 40) as f64 / 10.0);
        let coords = warp_coords(&a, &b, &Var::constant(depth.clone())).unwrap();
        for i in 0..h * w {
            let u = ((i % w) as f64, (i / w) as f64);
            match apply_homography(&homography(&a, &b, depth.data()[i]).unwrap(), u) {
                Some((px, py)) => {
                    prop_assert!(coords.valid[i]);
                    prop_assert!((coords.xs.value().data()[i] - px).abs() < 1e-9 * px.abs().max(1.0));
                    prop_assert!((coords.ys.value().data()[i] - py).abs() < 1e-9 * py.abs().max(1.0));
                }
                None => prop_assert!(!coords.valid[i]),
            }
        }
    }
}

#[test]
fn identity_warp_reproduces_the_image() {
    let spec = SceneSpec::default();
    let sample = &generate_dataset(&spec, 1).unwrap()[0];
    let reference = &sample.views[0];
    let depth = Var::constant(Tensor::from_fn(&[spec.height, spec.width], |i| 2.0 + (i % 7) as f64 * 0.3));
    let (warped, mask) = inverse_warp(reference, &reference.camera, &depth).unwrap();
    assert_eq!(mask.count(), spec.height * spec.width);
    assert!(warped.value().max_abs_diff(&reference.image) < 1e-12);
}

#[test]
fn nonpositive_depth_is_rejected() {
    let spec = SceneSpec::default();
    let sample = &generate_dataset(&spec, 1).unwrap()[0];
    let mut d = sample.gt_depth.clone().into_data();
    d[5] = 0.0;
    let depth = Var::constant(Tensor::new(vec![spec.height, spec.width], d).unwrap());
    assert!(inverse_warp(&sample.views[1], &sample.views[0].camera, &depth).is_err());
}

#[test]
fn ground_truth_warping_is_accurate_on_100_scenes() {
    let start = Instant::now();
    let data = generate_dataset(&SceneSpec { seed: 0, ..Default::default() }, 100).unwrap();
    let errors: Vec<f64> = data.iter().map(|s| s.warp_error().unwrap()).collect();
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    assert!(worst < 0.02, "worst per-scene warp error {worst}");
    assert!(start.elapsed().as_secs() < 60, "{:?}", start.elapsed());
}
