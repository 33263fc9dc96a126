//! Multi-camera 2D keypoint observations.
//!
//! Serialized as JSON lines, one record per (frame, camera):
//!
//! ```json
//! {"t": 0.1, "cam": 2, "kp": [[412.3, 218.9], ...], "score": [0.93, ...], "vis": [true, ...]}
//! ```
//!
//! `t` is the frame timestamp in seconds. Keypoint order matches the chain's
//! site order. Invisible keypoints keep a placeholder coordinate and are
//! ignored everywhere. A (frame, camera) pair with no record is fully
//! occluded.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One camera's detections at one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub kp: Vec<[f64; 2]>,
    pub score: Vec<f64>,
    pub vis: Vec<bool>,
}

impl View {
    pub fn visible_count(&self) -> usize {
        self.vis.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub t: f64,
    /// Indexed by camera; `None` when the camera saw nothing.
    pub views: Vec<Option<View>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    frames: Vec<Frame>,
    cameras: usize,
    keypoints: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    t: f64,
    cam: usize,
    kp: Vec<[f64; 2]>,
    score: Vec<f64>,
    vis: Vec<bool>,
}

impl ObservationSet {
    pub fn new(frames: Vec<Frame>, cameras: usize, keypoints: usize) -> Result<Self> {
        let set = Self { frames, cameras, keypoints };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid("observation set has no frames"));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if !f.t.is_finite() {
                return Err(Error::invalid(format!("frame {i} has a non-finite timestamp")));
            }
            if i > 0 && f.t <= self.frames[i - 1].t {
                return Err(Error::invalid(format!("frame timestamps not strictly increasing at frame {i}")));
            }
            if f.views.len() != self.cameras {
                return Err(Error::DimensionMismatch { what: "cameras per frame", expected: self.cameras, got: f.views.len() });
            }
            for v in f.views.iter().flatten() {
                for len in [v.kp.len(), v.score.len(), v.vis.len()] {
                    if len != self.keypoints {
                        return Err(Error::DimensionMismatch { what: "keypoints per view", expected: self.keypoints, got: len });
                    }
                }
                for ((p, &s), &vis) in v.kp.iter().zip(&v.score).zip(&v.vis) {
                    if !(0.0..=1.0).contains(&s) {
                        return Err(Error::invalid(format!("score {s} outside [0, 1] at frame {i}")));
                    }
                    if vis && !(p[0].is_finite() && p[1].is_finite()) {
                        return Err(Error::invalid(format!("non-finite visible keypoint at frame {i}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn camera_count(&self) -> usize {
        self.cameras
    }

    pub fn keypoint_count(&self) -> usize {
        self.keypoints
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t).collect()
    }

    pub fn span(&self) -> (f64, f64) {
        (self.frames[0].t, self.frames[self.frames.len() - 1].t)
    }

    /// Visible keypoint count per frame, summed over cameras.
    pub fn visible_counts(&self) -> Vec<usize> {
        self.frames
            .iter()
            .map(|f| f.views.iter().flatten().map(View::visible_count).sum())
            .collect()
    }

    /// Scores of every visible keypoint.
    pub fn visible_scores(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for f in &self.frames {
            for v in f.views.iter().flatten() {
                out.extend(v.score.iter().zip(&v.vis).filter(|(_, &vis)| vis).map(|(&s, _)| s));
            }
        }
        out
    }

    /// Copy with every observation from `camera` removed.
    pub fn without_camera(&self, camera: usize) -> Self {
        let mut out = self.clone();
        for f in &mut out.frames {
            if let Some(v) = f.views.get_mut(camera) {
                *v = None;
            }
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for f in &self.frames {
            for (cam, v) in f.views.iter().enumerate() {
                if let Some(v) = v {
                    let rec = Record { t: f.t, cam, kp: v.kp.clone(), score: v.score.clone(), vis: v.vis.clone() };
                    serde_json::to_writer(&mut w, &rec)?;
                    w.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Parses JSON lines. Frames are grouped by identical `t`; the camera
    /// count is `cameras` when given, otherwise one past the largest index.
    pub fn read_jsonl<R: BufRead>(r: R, cameras: Option<usize>) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("observation line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        let first = records.first().ok_or_else(|| Error::invalid("observation file is empty"))?;
        let keypoints = first.kp.len();
        let cams = cameras.unwrap_or_else(|| records.iter().map(|r| r.cam + 1).max().unwrap_or(0));
        let mut frames: Vec<Frame> = Vec::new();
        for rec in records {
            if rec.cam >= cams {
                return Err(Error::invalid(format!("camera index {} out of range", rec.cam)));
            }
            let new_frame = frames.last().is_none_or(|f| f.t != rec.t);
            if new_frame {
                frames.push(Frame { t: rec.t, views: vec![None; cams] });
            }
            let frame = frames.last_mut().expect("frame pushed above");
            if frame.views[rec.cam].is_some() {
                return Err(Error::invalid(format!("duplicate record for camera {} at t={}", rec.cam, rec.t)));
            }
            frame.views[rec.cam] = Some(View { kp: rec.kp, score: rec.score, vis: rec.vis });
        }
        Self::new(frames, cams, keypoints)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(k: usize, s: f64) -> View {
        View { kp: vec![[1.5, -2.25]; k], score: vec![s; k], vis: vec![true; k] }
    }

    fn set() -> ObservationSet {
        let frames = (0..3)
            .map(|i| Frame { t: i as f64 * 0.1, views: vec![Some(view(2, 0.5)), if i == 1 { None } else { Some(view(2, 0.9)) }] })
            .collect();
        ObservationSet::new(frames, 2, 2).unwrap()
    }

    #[test]
    fn jsonl_round_trip() {
        let obs = set();
        let text = obs.to_jsonl();
        assert_eq!(text.lines().count(), 5);
        let back = ObservationSet::read_jsonl(text.as_bytes(), Some(2)).unwrap();
        assert_eq!(back, obs);
        assert_eq!(back.visible_counts(), vec![4, 2, 4]);
    }

    #[test]
    fn rejects_bad_scores_and_order() {
        let mut bad = set();
        bad.frames[0].views[0].as_mut().unwrap().score[0] = 1.2;
        assert!(bad.validate().is_err());
        let mut unordered = set();
        unordered.frames[2].t = 0.05;
        assert!(unordered.validate().is_err());
        let mut ragged = set();
        ragged.frames[0].views[0].as_mut().unwrap().kp.pop();
        assert!(ragged.validate().is_err());
    }

    #[test]
    fn masking_a_camera() {
        let obs = set().without_camera(1);
        assert_eq!(obs.visible_counts(), vec![2, 2, 2]);
    }
}
