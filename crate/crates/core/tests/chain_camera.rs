use calmocap_core::camera::{project, Camera, CameraRig, Intrinsics};
use calmocap_core::chain::{forward_kinematics, joint_limit_excess, KinematicChain, Segment, Site, SiteOffsets};
use proptest::prelude::*;

type M4 = [[f64; 4]; 4];

fn mul(a: &M4, b: &M4) -> M4 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..4).map(|k| a[i][k] * b[k][j]).sum()))
}

fn translation(t: [f64; 3]) -> M4 {
    let mut m = identity();
    for i in 0..3 {
        m[i][3] = t[i];
    }
    m
}

fn identity() -> M4 {
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 }))
}

/// Rotation about a unit axis, built from the exponential series of the
/// skew matrix rather than Rodrigues' closed form.
fn rotation(axis: [f64; 3], angle: f64) -> M4 {
    let [x, y, z] = axis.map(|v| v * angle);
    let k = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let mut term = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut sum = term;
    for n in 1..40 {
        term = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|l| term[i][l] * k[l][j]).sum::<f64>() / n as f64));
        for i in 0..3 {
            for j in 0..3 {
                sum[i][j] += term[i][j];
            }
        }
    }
    let mut m = identity();
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = sum[i][j];
        }
    }
    m
}

fn apply(m: &M4, p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3])
}

fn oracle_sites(chain: &KinematicChain, root: &[f64; 6], joints: &[f64], offsets: &SiteOffsets) -> Vec<[f64; 3]> {
    let root_m = [
        translation([root[0], root[1], root[2]]),
        rotation([1.0, 0.0, 0.0], root[3]),
        rotation([0.0, 1.0, 0.0], root[4]),
        rotation([0.0, 0.0, 1.0], root[5]),
    ]
    .iter()
    .fold(identity(), |acc, m| mul(&acc, m));
    let mut frames: Vec<M4> = Vec::new();
    for (seg, q) in chain.segments().iter().zip(joints) {
        let parent = seg.parent.map_or(root_m, |p| frames[p]);
        frames.push(mul(&mul(&parent, &translation(seg.offset)), &rotation(seg.axis, *q)));
    }
    chain
        .sites()
        .iter()
        .zip(&offsets.0)
        .map(|(site, d)| {
            let m = site.segment.map_or(root_m, |s| frames[s]);
            apply(&m, std::array::from_fn(|i| site.offset[i] + d[i]))
        })
        .collect()
}

fn oracle_pixel(cam: &Camera, p: [f64; 3]) -> [f64; 2] {
    let [w, x, y, z] = cam.rotation;
    let angle = 2.0 * w.clamp(-1.0, 1.0).acos();
    let n = (x * x + y * y + z * z).sqrt();
    let r = if n < 1e-15 { identity() } else { rotation([x / n, y / n, z / n], angle) };
    let m = mul(&translation(cam.translation), &r);
    let c = apply(&m, p);
    let k = &cam.intrinsics;
    [k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy]
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|c| c / n)
}

prop_compose! {
    fn small_chain()(j in 1usize..=5)
        (parents in proptest::collection::vec(0usize..5, j),
         roots in proptest::collection::vec(any::<bool>(), j),
         offsets in proptest::collection::vec(prop::array::uniform3(-0.4f64..0.4), j),
         axes in proptest::collection::vec(prop::array::uniform3(-1.0f64..1.0), j),
         sites in proptest::collection::vec(prop::array::uniform3(-0.3f64..0.3), j))
        -> KinematicChain
    {
        let segments = (0..parents.len())
            .map(|k| {
                let parent = if k == 0 || roots[k] { None } else { Some(parents[k] % k) };
                let axis = if axes[k].iter().all(|a| a.abs() < 1e-3) { [0.0, 0.0, 1.0] } else { unit(axes[k]) };
                Segment { name: format!("s{k}"), parent, offset: offsets[k], axis, limits: [-3.0, 3.0] }
            })
            .collect();
        let sites = (0..parents.len())
            .map(|k| Site { name: format!("p{k}"), segment: Some(k), offset: sites[k] })
            .collect();
        KinematicChain::new(segments, sites).unwrap()
    }
}

fn small_rig(count: usize, yaw: f64) -> CameraRig {
    let k = Intrinsics { fx: 900.0, fy: 880.0, cx: 640.0, cy: 360.0, image_size: [1280.0, 720.0] };
    let cameras = (0..count)
        .map(|c| {
            let a = yaw + c as f64 * 2.1;
            let pos = [6.0 * a.cos(), 6.0 * a.sin(), 1.5 + 0.3 * c as f64];
            Camera::look_at(k.clone(), pos, [0.0, 0.0, 0.4], [0.0, 0.0, 1.0]).unwrap()
        })
        .collect();
    CameraRig::new(cameras).unwrap()
}

/// Intrinsic X-Y-Z angles of a rotation matrix, away from gimbal lock.
fn euler_of(m: [[f64; 3]; 3]) -> [f64; 3] {
    [(-m[1][2]).atan2(m[2][2]), m[0][2].asin(), (-m[0][1]).atan2(m[0][0])]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projected_kinematics_match_homogeneous_oracle(
        chain in small_chain(),
        root in prop::array::uniform6(-0.5f64..0.5),
        joints in proptest::collection::vec(-2.0f64..2.0, 5),
        deltas in proptest::collection::vec(prop::array::uniform3(-0.05f64..0.05), 5),
        cams in 2usize..=3,
        yaw in 0.0f64..6.28,
    ) {
        let j = chain.joint_count();
        let offsets = SiteOffsets(deltas[..chain.site_count()].to_vec());
        let sites = forward_kinematics(&chain, &root, &joints[..j], &offsets).unwrap();
        let expected = oracle_sites(&chain, &root, &joints[..j], &offsets);
        let rig = small_rig(cams, yaw);
        for (s, e) in sites.iter().zip(&expected) {
            for c in 0..cams {
                let px = project(&rig, c, *s).unwrap();
                let ox = oracle_pixel(&rig.cameras()[c], *e);
                prop_assert!((px[0] - ox[0]).abs() < 1e-7 && (px[1] - ox[1]).abs() < 1e-7, "{px:?} vs {ox:?}");
            }
        }
    }

    #[test]
    fn rigid_root_transform_moves_all_sites_alike(
        root in prop::array::uniform6(-0.6f64..0.6),
        joints in proptest::collection::vec(-0.4f64..0.4, 10),
        g_angles in prop::array::uniform3(-0.6f64..0.6),
        g_shift in prop::array::uniform3(-3.0f64..3.0),
    ) {
        let chain = KinematicChain::lower_body();
        let offsets = SiteOffsets::zeros(&chain);
        let before = forward_kinematics(&chain, &root, &joints, &offsets).unwrap();
        let g = [
            rotation([1.0, 0.0, 0.0], g_angles[0]),
            rotation([0.0, 1.0, 0.0], g_angles[1]),
            rotation([0.0, 0.0, 1.0], g_angles[2]),
        ]
        .iter()
        .fold(translation(g_shift), |acc, m| mul(&acc, m));
        let r = [rotation([1.0, 0.0, 0.0], root[3]), rotation([0.0, 1.0, 0.0], root[4]), rotation([0.0, 0.0, 1.0], root[5])]
            .iter()
            .fold(identity(), |acc, m| mul(&acc, m));
        let composed = mul(&g, &r);
        let angles = euler_of(std::array::from_fn(|i| std::array::from_fn(|j| composed[i][j])));
        prop_assume!(composed[0][2].abs() < 0.95);
        let moved_root = apply(&g, [root[0], root[1], root[2]]);
        let new_root = [moved_root[0], moved_root[1], moved_root[2], angles[0], angles[1], angles[2]];
        let after = forward_kinematics(&chain, &new_root, &joints, &offsets).unwrap();
        for (a, b) in after.iter().zip(&before) {
            let expected = apply(&g, *b);
            for i in 0..3 {
                prop_assert!((a[i] - expected[i]).abs() < 1e-9, "{a:?} vs {expected:?}");
            }
        }
    }

    #[test]
    fn root_translation_shifts_every_site(
        joints in proptest::collection::vec(-0.4f64..0.4, 10),
        shift in prop::array::uniform3(-2.0f64..2.0),
    ) {
        let chain = KinematicChain::lower_body();
        let offsets = SiteOffsets::zeros(&chain);
        let base = forward_kinematics(&chain, &[0.0; 6], &joints, &offsets).unwrap();
        let moved = forward_kinematics(&chain, &[shift[0], shift[1], shift[2], 0.0, 0.0, 0.0], &joints, &offsets).unwrap();
        for (m, b) in moved.iter().zip(&base) {
            for i in 0..3 {
                prop_assert!((m[i] - b[i] - shift[i]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn limit_excess_slope_vanishes_at_the_boundary() {
    let chain = KinematicChain::lower_body();
    let knee = chain.joint_index("knee_l").unwrap();
    let limits = chain.segments()[knee].limits;
    for bound in limits {
        let mut previous = f64::INFINITY;
        for h in [1e-1, 1e-2, 1e-3, 1e-4] {
            let mut up = vec![0.1; chain.joint_count()];
            let mut down = up.clone();
            up[knee] = bound + h;
            down[knee] = bound - h;
            let slope = (joint_limit_excess(&chain, &up) - joint_limit_excess(&chain, &down)) / (2.0 * h);
            assert!(slope.abs() <= h, "slope {slope} at h {h}");
            assert!(slope.abs() < previous);
            previous = slope.abs();
        }
        let mut at = vec![0.1; chain.joint_count()];
        at[knee] = bound;
        assert_eq!(joint_limit_excess(&chain, &at), 0.0);
    }
}
