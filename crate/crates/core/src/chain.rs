//! Articulated kinematic chain, marker sites and forward kinematics.
//!
//! A chain is a tree of segments, each attached to its parent (or to the
//! free-floating root) by one revolute joint. The pose vector used
//! throughout the engine is `[tx, ty, tz, rx, ry, rz, θ_0, …, θ_{J-1}]`:
//! root translation in metres, root orientation as intrinsic X-Y-Z angles,
//! then one angle per joint in segment order.
//!
//! The JSON config document has the shape
//!
//! ```json
//! {
//!   "segments": [
//!     {"name": "hip", "parent": null, "offset": [0, 0.1, 0],
//!      "axis": [0, -1, 0], "limits": [-0.6, 1.6]}
//!   ],
//!   "sites": [{"name": "knee", "segment": 0, "offset": [0, 0, -0.42]}]
//! }
//! ```
//!
//! `parent: null` attaches a segment to the root; `segment: null` places a
//! site on the root body. `offset` of a segment is the joint origin in the
//! parent frame, `axis` the unit rotation axis in that frame.

use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::error::{Error, Result};
use crate::geometry::{euler_xyz, norm3, Mat3, Vec3};

pub const ROOT_DOF: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: [f64; 3],
    pub axis: [f64; 3],
    pub limits: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub name: String,
    pub segment: Option<usize>,
    pub offset: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ChainDocument {
    segments: Vec<Segment>,
    sites: Vec<Site>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainDocument", into = "ChainDocument")]
pub struct KinematicChain {
    segments: Vec<Segment>,
    sites: Vec<Site>,
}

impl TryFrom<ChainDocument> for KinematicChain {
    type Error = Error;

    fn try_from(doc: ChainDocument) -> Result<Self> {
        KinematicChain::new(doc.segments, doc.sites)
    }
}

impl From<KinematicChain> for ChainDocument {
    fn from(c: KinematicChain) -> Self {
        ChainDocument { segments: c.segments, sites: c.sites }
    }
}

impl KinematicChain {
    pub fn new(segments: Vec<Segment>, sites: Vec<Site>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invalid("a chain needs at least one jointed segment"));
        }
        for (k, seg) in segments.iter().enumerate() {
            if let Some(p) = seg.parent {
                if p >= k {
                    return Err(Error::invalid(format!(
                        "segment {k} ({}) has parent {p}; parents must precede children",
                        seg.name
                    )));
                }
            }
            if (norm3(seg.axis) - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("segment {k} axis is not unit length")));
            }
            if !(seg.limits[0] < seg.limits[1]) {
                return Err(Error::invalid(format!("segment {k} joint limits are not ordered")));
            }
            if seg.offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("segment {k} offset is not finite")));
            }
        }
        for (i, site) in sites.iter().enumerate() {
            if let Some(s) = site.segment {
                if s >= segments.len() {
                    return Err(Error::invalid(format!("site {i} references missing segment {s}")));
                }
            }
        }
        let mut has_child = vec![false; segments.len()];
        for seg in &segments {
            if let Some(p) = seg.parent {
                has_child[p] = true;
            }
        }
        for (k, leaf) in has_child.iter().enumerate() {
            if !leaf && !sites.iter().any(|s| s.segment == Some(k)) {
                return Err(Error::invalid(format!(
                    "terminal segment {k} ({}) carries no site",
                    segments[k].name
                )));
            }
        }
        Ok(Self { segments, sites })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn joint_count(&self) -> usize {
        self.segments.len()
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    /// Length of the pose vector (root plus joints).
    pub fn pose_dim(&self) -> usize {
        ROOT_DOF + self.segments.len()
    }

    pub fn site_index(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.name == name)
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    /// Names of every pose coordinate, root first.
    pub fn coordinate_names(&self) -> Vec<String> {
        ["root_tx", "root_ty", "root_tz", "root_rx", "root_ry", "root_rz"]
            .iter()
            .map(|s| s.to_string())
            .chain(self.segments.iter().map(|s| s.name.clone()))
            .collect()
    }

    /// Site positions for a full pose vector `[root(6), joints(J)]`.
    pub fn forward<T: Real>(&self, pose: &[T], offsets: &[[T; 3]]) -> Result<Vec<Vec3<T>>> {
        if pose.len() != self.pose_dim() {
            return Err(Error::DimensionMismatch {
                what: "pose vector",
                expected: self.pose_dim(),
                got: pose.len(),
            });
        }
        if offsets.len() != self.sites.len() {
            return Err(Error::DimensionMismatch {
                what: "site offsets",
                expected: self.sites.len(),
                got: offsets.len(),
            });
        }
        Ok(self.forward_unchecked(pose, offsets))
    }

    pub(crate) fn forward_unchecked<T: Real>(&self, pose: &[T], offsets: &[[T; 3]]) -> Vec<Vec3<T>> {
        let root_rot = euler_xyz(pose[3], pose[4], pose[5]);
        let root_pos = Vec3([pose[0], pose[1], pose[2]]);
        let mut frames: Vec<(Mat3<T>, Vec3<T>)> = Vec::with_capacity(self.segments.len());
        for (k, seg) in self.segments.iter().enumerate() {
            let (prot, ppos) = match seg.parent {
                Some(p) => (&frames[p].0, &frames[p].1),
                None => (&root_rot, &root_pos),
            };
            let origin = prot.transform_const(ppos, seg.offset);
            let local = Mat3::axis_angle(seg.axis, pose[ROOT_DOF + k]);
            frames.push((prot.mul_mat(&local), origin));
        }
        self.sites
            .iter()
            .zip(offsets)
            .map(|(site, delta)| {
                let (rot, pos) = match site.segment {
                    Some(s) => (&frames[s].0, &frames[s].1),
                    None => (&root_rot, &root_pos),
                };
                let local = Vec3(std::array::from_fn(|i| delta[i] + site.offset[i]));
                rot.transform(pos, &local)
            })
            .collect()
    }

    /// Squared joint-limit violation summed over joints; zero inside limits.
    /// `joints` must hold one angle per segment.
    pub fn limit_excess<T: Real>(&self, joints: &[T]) -> T {
        let mut terms = Vec::new();
        for (seg, &q) in self.segments.iter().zip(joints) {
            let v = q.value();
            if v > seg.limits[1] {
                terms.push((q - seg.limits[1]).square());
            } else if v < seg.limits[0] {
                terms.push((q - seg.limits[0]).square());
            }
        }
        match terms.is_empty() {
            true => joints[0].lift(0.0),
            false => T::sum(&terms),
        }
    }

    /// The ten-joint lower-body model used by the simulator fixtures.
    ///
    /// World frame: +x forward, +y left, +z up. Joints: lumbar flexion and
    /// side bend, then per side hip flexion, hip adduction, knee flexion and
    /// ankle dorsiflexion (positive = anatomical direction). Fourteen sites.
    pub fn lower_body() -> Self {
        let mut segments = vec![
            seg("lumbar_flex", None, [0.0, 0.0, 0.10], [0.0, 1.0, 0.0], [-0.5, 0.8]),
            seg("lumbar_bend", Some(0), [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-0.5, 0.5]),
        ];
        let mut sites = vec![
            site("hip_l", None, [0.0, 0.09, -0.07]),
            site("hip_r", None, [0.0, -0.09, -0.07]),
            site("sacrum", None, [-0.10, 0.0, 0.02]),
            site("neck", Some(1), [0.0, 0.0, 0.45]),
            site("shoulder_l", Some(1), [0.0, 0.18, 0.40]),
            site("shoulder_r", Some(1), [0.0, -0.18, 0.40]),
        ];
        for (side, sign) in [("l", 1.0), ("r", -1.0)] {
            let base = segments.len();
            segments.push(seg(
                &format!("hip_flex_{side}"),
                None,
                [0.0, 0.09 * sign, -0.07],
                [0.0, -1.0, 0.0],
                [-0.6, 1.6],
            ));
            segments.push(seg(
                &format!("hip_add_{side}"),
                Some(base),
                [0.0, 0.0, 0.0],
                [-sign, 0.0, 0.0],
                [-0.5, 0.5],
            ));
            segments.push(seg(
                &format!("knee_{side}"),
                Some(base + 1),
                [0.0, 0.0, -0.42],
                [0.0, 1.0, 0.0],
                [0.0, 2.4],
            ));
            segments.push(seg(
                &format!("ankle_{side}"),
                Some(base + 2),
                [0.0, 0.0, -0.42],
                [0.0, -1.0, 0.0],
                [-0.7, 0.6],
            ));
            sites.push(site(&format!("knee_{side}"), Some(base + 2), [0.0, 0.05 * sign, 0.0]));
            sites.push(site(&format!("ankle_{side}"), Some(base + 3), [0.0, 0.04 * sign, 0.0]));
            sites.push(site(&format!("heel_{side}"), Some(base + 3), [-0.06, 0.0, -0.06]));
            sites.push(site(&format!("toe_{side}"), Some(base + 3), [0.16, 0.0, -0.06]));
        }
        Self::new(segments, sites).expect("lower-body preset is valid")
    }

    /// Serial chain of `links` unit-free segments of length `link` along +x,
    /// every joint about `axis`, with one site at each joint and one at the tip.
    pub fn serial(links: usize, link: f64, axis: [f64; 3]) -> Self {
        let segments = (0..links)
            .map(|k| {
                let offset = if k == 0 { [0.0; 3] } else { [link, 0.0, 0.0] };
                seg(&format!("joint_{k}"), k.checked_sub(1), offset, axis, [-3.0, 3.0])
            })
            .collect();
        let mut sites: Vec<Site> = (0..links)
            .map(|k| site(&format!("joint_{k}"), Some(k), [0.0; 3]))
            .collect();
        sites.push(site("tip", Some(links - 1), [link, 0.0, 0.0]));
        Self::new(segments, sites).expect("serial preset is valid")
    }
}

fn seg(name: &str, parent: Option<usize>, offset: [f64; 3], axis: [f64; 3], limits: [f64; 2]) -> Segment {
    Segment { name: name.to_string(), parent, offset, axis, limits }
}

fn site(name: &str, segment: Option<usize>, offset: [f64; 3]) -> Site {
    Site { name: name.to_string(), segment, offset }
}

/// Learnable per-site displacement from the nominal local offset, metres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteOffsets(pub Vec<[f64; 3]>);

impl SiteOffsets {
    pub fn zeros(chain: &KinematicChain) -> Self {
        SiteOffsets(vec![[0.0; 3]; chain.site_count()])
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum()
    }

    pub fn validate(&self, chain: &KinematicChain) -> Result<()> {
        if self.0.len() != chain.site_count() {
            return Err(Error::DimensionMismatch {
                what: "site offsets",
                expected: chain.site_count(),
                got: self.0.len(),
            });
        }
        if self.0.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("site offsets must be finite"));
        }
        Ok(())
    }
}

/// World-space site positions for a root pose, joint angles and offsets.
pub fn forward_kinematics(
    chain: &KinematicChain,
    root_pose: &[f64; 6],
    joint_angles: &[f64],
    offsets: &SiteOffsets,
) -> Result<Vec<[f64; 3]>> {
    if joint_angles.len() != chain.joint_count() {
        return Err(Error::DimensionMismatch {
            what: "joint angles",
            expected: chain.joint_count(),
            got: joint_angles.len(),
        });
    }
    offsets.validate(chain)?;
    let pose: Vec<f64> = root_pose.iter().chain(joint_angles).copied().collect();
    Ok(chain.forward(&pose, &offsets.0)?.iter().map(|p| p.value()).collect())
}

/// Site positions for a full pose vector `[root (6), joints]`.
pub fn forward_kinematics_pose(chain: &KinematicChain, pose: &[f64], offsets: &SiteOffsets) -> Result<Vec<[f64; 3]>> {
    offsets.validate(chain)?;
    Ok(chain.forward(pose, &offsets.0)?.iter().map(|p| p.value()).collect())
}

/// `Σ_j max(0, θ_j − max_j)² + max(0, min_j − θ_j)²`.
pub fn joint_limit_excess(chain: &KinematicChain, joint_angles: &[f64]) -> f64 {
    chain
        .segments
        .iter()
        .zip(joint_angles)
        .map(|(s, &q)| (q - s.limits[1]).max(0.0).powi(2) + (s.limits[0] - q).max(0.0).powi(2))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() < tol)
    }

    #[test]
    fn identity_configuration_composes_translations_only() {
        let chain = KinematicChain::lower_body();
        let offsets = SiteOffsets::zeros(&chain);
        let pos = forward_kinematics(&chain, &[0.0; 6], &vec![0.0; 10], &offsets).unwrap();
        let heel = chain.site_index("heel_l").unwrap();
        // hip (0, .09, -.07) + thigh (0,0,-.42) + shank (0,0,-.42) + heel offset
        assert!(close(pos[heel], [-0.06, 0.09, -0.07 - 0.84 - 0.06], 1e-12));
        let neck = chain.site_index("neck").unwrap();
        assert!(close(pos[neck], [0.0, 0.0, 0.55], 1e-12));
    }

    #[test]
    fn planar_quarter_turn_puts_tip_at_one_one() {
        let chain = KinematicChain::serial(2, 1.0, [0.0, 0.0, 1.0]);
        let offsets = SiteOffsets::zeros(&chain);
        // Joint 1 sits at the end of link 0.
        let pos = forward_kinematics(&chain, &[0.0; 6], &[0.0, FRAC_PI_2], &offsets).unwrap();
        assert!(close(pos[2], [1.0, 1.0, 0.0], 1e-12), "{:?}", pos[2]);

        let lifted = forward_kinematics(&chain, &[0.0, 0.0, 0.5, 0.0, 0.0, 0.0], &[0.0, FRAC_PI_2], &offsets)
            .unwrap();
        for (a, b) in pos.iter().zip(&lifted) {
            assert!(close([a[0], a[1], a[2] + 0.5], *b, 1e-15));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let chain = KinematicChain::serial(3, 1.0, [0.0, 0.0, 1.0]);
        let offsets = SiteOffsets::zeros(&chain);
        assert!(matches!(
            forward_kinematics(&chain, &[0.0; 6], &[0.0; 2], &offsets),
            Err(Error::DimensionMismatch { .. })
        ));
        let short = SiteOffsets(vec![[0.0; 3]; 2]);
        assert!(forward_kinematics(&chain, &[0.0; 6], &[0.0; 3], &short).is_err());
    }

    #[test]
    fn limit_excess_examples() {
        let chain = KinematicChain::serial(3, 1.0, [0.0, 0.0, 1.0]);
        assert_eq!(joint_limit_excess(&chain, &[0.0, 2.9, -2.9]), 0.0);
        assert!((joint_limit_excess(&chain, &[3.1, 0.0, 0.0]) - 0.01).abs() < 1e-12);
        assert!((joint_limit_excess(&chain, &[3.1, -3.2, 0.0]) - 0.05).abs() < 1e-12);
        let generic: f64 = chain.limit_excess(&[3.1, -3.2, 0.0]);
        assert!((generic - 0.05).abs() < 1e-12);
    }

    #[test]
    fn invalid_chains_are_rejected() {
        let bad_parent = vec![seg("a", Some(0), [0.0; 3], [0.0, 0.0, 1.0], [-1.0, 1.0])];
        assert!(KinematicChain::new(bad_parent, vec![site("s", Some(0), [0.0; 3])]).is_err());
        let bad_axis = vec![seg("a", None, [0.0; 3], [0.0, 0.0, 1.1], [-1.0, 1.0])];
        assert!(KinematicChain::new(bad_axis, vec![site("s", Some(0), [0.0; 3])]).is_err());
        let bad_limits = vec![seg("a", None, [0.0; 3], [0.0, 0.0, 1.0], [1.0, 1.0])];
        assert!(KinematicChain::new(bad_limits, vec![site("s", Some(0), [0.0; 3])]).is_err());
        let bare_leaf = vec![seg("a", None, [0.0; 3], [0.0, 0.0, 1.0], [-1.0, 1.0])];
        assert!(KinematicChain::new(bare_leaf, vec![site("s", None, [0.0; 3])]).is_err());
    }

    #[test]
    fn json_round_trip_validates() {
        let chain = KinematicChain::lower_body();
        let text = serde_json::to_string(&chain).unwrap();
        let back: KinematicChain = serde_json::from_str(&text).unwrap();
        assert_eq!(chain, back);
        let broken = text.replacen("\"parent\":null", "\"parent\":5", 1);
        assert!(serde_json::from_str::<KinematicChain>(&broken).is_err());
    }
}
