//! Online tracking loop: predict every track's box for the frame, match
//! against detections by IoU with an optimal assignment, update, age, spawn,
//! remove, then predict again for the next frame.

use std::collections::{HashSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assignment::{assign_with_gate, cost_matrix};
use crate::baselines::{KalmanConfig, KalmanState};
use crate::data::{Detection, Scene};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{decode_offset, BBox, ClampCounter};
use crate::predictor::{Predictor, TrajectoryWindow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Minimum IoU for an accepted track/detection pair.
    pub iou_gate: f64,
    /// Frames a track may stay unmatched before it is removed.
    pub t_max: u32,
    /// Minimum confidence for an unmatched detection to start a track.
    pub spawn_conf: f64,
    /// History length kept per track (the learned model's window size).
    pub n_past: usize,
    /// Drop pseudo-observations from the history when a lost track is re-matched.
    pub purge_pseudo_on_rematch: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { iou_gate: 0.3, t_max: 30, spawn_conf: 0.6, n_past: 10, purge_pseudo_on_rematch: false }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_gate) {
            return Err(Error::Config(format!("iou_gate must be in [0, 1], got {}", self.iou_gate)));
        }
        if self.t_max == 0 || self.n_past == 0 {
            return Err(Error::Config("t_max and n_past must be positive".into()));
        }
        Ok(())
    }
}

/// Source of each track's next-frame box.
#[derive(Debug, Clone)]
pub enum MotionModel {
    Learned(Arc<Predictor>),
    Kalman(KalmanConfig),
    NoMotion,
}

impl MotionModel {
    pub fn name(&self) -> &'static str {
        match self {
            MotionModel::Learned(_) => "learned",
            MotionModel::Kalman(_) => "kalman",
            MotionModel::NoMotion => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackState {
    Active,
    Lost(u32),
    Removed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub frame: u32,
    pub bbox: BBox,
    pub pseudo: bool,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub state: TrackState,
    /// Box expected in the upcoming frame.
    pub predicted: BBox,
    history: VecDeque<HistoryEntry>,
    capacity: usize,
    kf: Option<KalmanState>,
}

impl Track {
    fn new(id: u64, frame: u32, bbox: BBox, capacity: usize, kf: Option<KalmanState>) -> Self {
        let mut history = VecDeque::with_capacity(capacity);
        history.push_back(HistoryEntry { frame, bbox, pseudo: false });
        Self { id, state: TrackState::Active, predicted: bbox, history, capacity, kf }
    }

    pub fn history(&self) -> &VecDeque<HistoryEntry> {
        &self.history
    }

    pub fn last_box(&self) -> BBox {
        self.history.back().expect("history is never empty").bbox
    }

    fn push(&mut self, entry: HistoryEntry) {
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(entry);
    }

    /// The most recent `n` history entries as a predictor window.
    pub fn window(&self, n: usize) -> Result<TrajectoryWindow> {
        let skip = self.history.len().saturating_sub(n);
        let (frames, boxes) = self.history.iter().skip(skip).map(|e| (e.frame, e.bbox)).unzip();
        TrajectoryWindow::new(frames, boxes)
    }
}

/// Next-frame box of one track. Learned models need two observations; a
/// single-observation track repeats its box.
pub fn predict_for_track(track: &Track, model: &MotionModel, clamps: &mut ClampCounter) -> Result<BBox> {
    Ok(predict_tracks(std::slice::from_ref(track), model, clamps)?.0[0])
}

fn predict_tracks(tracks: &[Track], model: &MotionModel, clamps: &mut ClampCounter) -> Result<(Vec<BBox>, Vec<Option<KalmanState>>)> {
    match model {
        MotionModel::NoMotion => Ok((tracks.iter().map(Track::last_box).collect(), vec![None; tracks.len()])),
        MotionModel::Kalman(kf) => {
            let mut boxes = Vec::with_capacity(tracks.len());
            let mut states = Vec::with_capacity(tracks.len());
            for t in tracks {
                let s = t.kf.unwrap_or_else(|| kf.init(&t.last_box()));
                let (next, b) = kf.predict(&s);
                boxes.push(b);
                states.push(Some(next));
            }
            Ok((boxes, states))
        }
        MotionModel::Learned(p) => {
            let n_past = p.config().n_past;
            let mut boxes: Vec<BBox> = tracks.iter().map(Track::last_box).collect();
            let mut idx = Vec::new();
            let mut windows = Vec::new();
            for (i, t) in tracks.iter().enumerate() {
                if t.history.len() >= 2 {
                    idx.push(i);
                    windows.push(t.window(n_past)?);
                }
            }
            if !windows.is_empty() {
                let offsets = p.predict_batch(&windows)?;
                for ((i, w), o) in idx.into_iter().zip(&windows).zip(&offsets) {
                    boxes[i] = decode_offset(&w.base_box(), o, clamps);
                }
            }
            Ok((boxes, vec![None; tracks.len()]))
        }
    }
}

/// Per-frame diagnostics record, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDiag {
    pub frame: u32,
    pub tracks: usize,
    pub detections: usize,
    pub matches: usize,
    pub mean_match_cost: Option<f64>,
    pub spawned: usize,
    pub lost: usize,
    pub removed: usize,
}

/// `(track id, box)` pairs reported for one frame.
pub type FrameOutput = Vec<(u64, BBox)>;

pub struct Tracker {
    config: TrackerConfig,
    model: MotionModel,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<u32>,
    clamps: ClampCounter,
}

impl Tracker {
    pub fn new(config: TrackerConfig, model: MotionModel) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, model, tracks: Vec::new(), next_id: 1, last_frame: None, clamps: ClampCounter::default() })
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn clamps(&self) -> ClampCounter {
        self.clamps
    }

    /// Process frame `frame`. Returns the boxes of tracks matched or started
    /// in this frame, plus diagnostics.
    pub fn step(&mut self, frame: u32, detections: &[Detection]) -> Result<(FrameOutput, FrameDiag)> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::Tracking(format!("frame {frame} arrived after frame {last}")));
            }
        }
        let mut seen = HashSet::new();
        for d in detections {
            d.bbox.validate()?;
            if let Some(id) = d.id {
                if !seen.insert(id) {
                    return Err(Error::Tracking(format!("duplicate detection id {id} in frame {frame}")));
                }
            }
        }
        self.last_frame = Some(frame);

        let preds: Vec<BBox> = self.tracks.iter().map(|t| t.predicted).collect();
        let dets: Vec<BBox> = detections.iter().map(|d| d.bbox).collect();
        let cost = cost_matrix(&preds, &dets);
        let assignment = assign_with_gate(&cost, self.config.iou_gate)?;

        let mut output = Vec::new();
        let mut diag = FrameDiag {
            frame,
            tracks: self.tracks.len(),
            detections: detections.len(),
            matches: assignment.matches.len(),
            mean_match_cost: None,
            spawned: 0,
            lost: 0,
            removed: 0,
        };
        if !assignment.matches.is_empty() {
            let total: f64 = assignment.matches.iter().map(|&(r, c)| cost.get(r, c)).sum();
            diag.mean_match_cost = Some(total / assignment.matches.len() as f64);
        }

        let kalman = match &self.model {
            MotionModel::Kalman(kf) => Some(*kf),
            _ => None,
        };
        for &(ti, di) in &assignment.matches {
            let track = &mut self.tracks[ti];
            let z = detections[di].bbox;
            if self.config.purge_pseudo_on_rematch && matches!(track.state, TrackState::Lost(_)) {
                track.history.retain(|e| !e.pseudo);
            }
            track.push(HistoryEntry { frame, bbox: z, pseudo: false });
            track.state = TrackState::Active;
            if let (Some(kf), Some(s)) = (kalman, track.kf) {
                track.kf = Some(kf.update(&s, &z)?);
            }
            output.push((track.id, z));
        }
        for &ti in &assignment.unmatched_rows {
            let track = &mut self.tracks[ti];
            let age = match track.state {
                TrackState::Lost(a) => a + 1,
                _ => 1,
            };
            let entry = HistoryEntry { frame, bbox: track.predicted, pseudo: true };
            track.push(entry);
            if age >= self.config.t_max {
                track.state = TrackState::Removed;
                diag.removed += 1;
            } else {
                track.state = TrackState::Lost(age);
                diag.lost += 1;
            }
        }
        self.tracks.retain(|t| t.state != TrackState::Removed);

        for &di in &assignment.unmatched_cols {
            let d = &detections[di];
            if d.conf < self.config.spawn_conf {
                continue;
            }
            let kf = kalman.map(|k| k.init(&d.bbox));
            let track = Track::new(self.next_id, frame, d.bbox, self.config.n_past, kf);
            output.push((track.id, d.bbox));
            self.next_id += 1;
            self.tracks.push(track);
            diag.spawned += 1;
        }

        let (boxes, states) = predict_tracks(&self.tracks, &self.model, &mut self.clamps)?;
        for ((t, b), s) in self.tracks.iter_mut().zip(boxes).zip(states) {
            t.predicted = b;
            if s.is_some() {
                t.kf = s;
            }
        }
        output.sort_by_key(|(id, _)| *id);
        Ok((output, diag))
    }

    /// Track every frame from 1 to the scene's last frame; frames without
    /// detections still age the tracks.
    pub fn run(&mut self, scene: &Scene) -> Result<(Scene, Vec<FrameDiag>)> {
        let mut out = Scene::new(scene.info.clone());
        let mut diags = Vec::new();
        let last = scene.last_frame().max(scene.info.length.unwrap_or(0));
        for frame in 1..=last {
            let (records, diag) = self.step(frame, scene.detections(frame))?;
            for (id, bbox) in records {
                out.push(frame, Detection { bbox, conf: 1.0, id: Some(id) });
            }
            diags.push(diag);
        }
        Ok((out, diags))
    }
}

/// Independent tracker per scene, sharing one motion model.
pub fn track_scenes(scenes: &[Scene], config: &TrackerConfig, model: &MotionModel, exec: Exec) -> Result<Vec<(Scene, Vec<FrameDiag>)>> {
    exec.map(scenes, |s| Tracker::new(*config, model.clone())?.run(s)).into_iter().collect()
}
