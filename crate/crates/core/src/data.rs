//! Scenes in MOTChallenge text form, synthetic scene generation, training
//! window extraction and augmentation.
//!
//! Row grammar (one detection per line, no header):
//!
//! ```text
//! frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z
//! ```
//!
//! Coordinates are pixels; they are normalized by the sequence's image size
//! on load. `id = -1` marks an identity-free detection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_max_cost, cost_matrix};
use crate::error::{io_err, Error, Result};
use crate::geometry::{encode_offset, BBox, Offset4};
use crate::predictor::TrajectoryWindow;

/// Per-sequence metadata (`seqinfo.ini`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqInfo {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub length: Option<u32>,
}

impl SeqInfo {
    pub fn new(name: impl Into<String>, width: u32, height: u32, fps: f64) -> Self {
        Self { name: name.into(), width, height, fps, length: None }
    }

    /// Parse an ini-style `key=value` file. Section headers and `;`/`#`
    /// comments are ignored. Accepts the MOTChallenge keys `imWidth`,
    /// `imHeight`, `frameRate`, `seqLength`, `name` as well as `width`,
    /// `height`, `fps`.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('[') || line.starts_with(';') || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            kv.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
        let get = |keys: &[&str]| keys.iter().find_map(|k| kv.get(*k)).cloned();
        let num = |keys: &[&str]| -> Result<Option<f64>> {
            match get(keys) {
                None => Ok(None),
                Some(s) => s.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!("{} is not a number: {s}", keys[0]),
                }),
            }
        };
        let missing = |what: &str| Error::MissingMetadata(format!("{what} in {}", path.display()));
        let width = num(&["imwidth", "width"])?.ok_or_else(|| missing("image width"))?;
        let height = num(&["imheight", "height"])?.ok_or_else(|| missing("image height"))?;
        if width <= 0.0 || height <= 0.0 {
            return Err(missing("positive image size"));
        }
        let name = get(&["name"]).unwrap_or_else(|| {
            path.parent().and_then(|p| p.file_name()).map_or("seq".into(), |n| n.to_string_lossy().into_owned())
        });
        Ok(Self {
            name,
            width: width as u32,
            height: height as u32,
            fps: num(&["framerate", "fps"])?.unwrap_or(25.0),
            length: num(&["seqlength", "length"])?.map(|v| v as u32),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = format!(
            "[Sequence]\nname={}\nimWidth={}\nimHeight={}\nframeRate={}\n",
            self.name, self.width, self.height, self.fps
        );
        if let Some(l) = self.length {
            let _ = writeln!(s, "seqLength={l}");
        }
        fs::write(path, s).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub conf: f64,
    pub id: Option<u64>,
}

/// Frame-indexed detections of one sequence, boxes in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub info: SeqInfo,
    pub frames: BTreeMap<u32, Vec<Detection>>,
}

impl Scene {
    pub fn new(info: SeqInfo) -> Self {
        Self { info, frames: BTreeMap::new() }
    }

    pub fn push(&mut self, frame: u32, det: Detection) {
        self.frames.entry(frame).or_default().push(det);
    }

    pub fn num_detections(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn detections(&self, frame: u32) -> &[Detection] {
        self.frames.get(&frame).map_or(&[], Vec::as_slice)
    }

    pub fn last_frame(&self) -> u32 {
        self.frames.keys().next_back().copied().unwrap_or(0)
    }

    /// Identity-bearing observations grouped per id, in frame order.
    pub fn tracks(&self) -> BTreeMap<u64, Vec<(u32, BBox)>> {
        let mut out: BTreeMap<u64, Vec<(u32, BBox)>> = BTreeMap::new();
        for (&f, dets) in &self.frames {
            for d in dets {
                if let Some(id) = d.id {
                    out.entry(id).or_default().push((f, d.bbox));
                }
            }
        }
        out
    }
}

fn parse_row(fields: &[&str], info: &SeqInfo) -> std::result::Result<(u32, Detection), String> {
    if fields.len() < 6 {
        return Err(format!("expected at least 6 comma-separated fields, got {}", fields.len()));
    }
    let num = |i: usize| fields[i].trim().parse::<f64>().map_err(|_| format!("field {} is not a number: {:?}", i + 1, fields[i]));
    let frame = num(0)?;
    if frame < 1.0 || frame.fract() != 0.0 {
        return Err(format!("frame must be a positive integer, got {frame}"));
    }
    let id = num(1)?;
    if id.fract() != 0.0 || id < -1.0 {
        return Err(format!("id must be an integer >= -1, got {id}"));
    }
    let (l, t, w, h) = (num(2)?, num(3)?, num(4)?, num(5)?);
    if !(w > 0.0 && h > 0.0) {
        return Err(format!("box must have positive extent, got {w}x{h}"));
    }
    let conf = if fields.len() > 6 { num(6)? } else { 1.0 };
    let bbox = BBox::from_pixels(l, t, w, h, info.width as f64, info.height as f64).map_err(|e| e.to_string())?;
    let id = if id < 0.0 { None } else { Some(id as u64) };
    Ok((frame as u32, Detection { bbox, conf, id }))
}

pub fn parse_mot_str(text: &str, info: SeqInfo, path: &Path) -> Result<Scene> {
    let mut scene = Scene::new(info);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let (frame, det) = parse_row(&fields, &scene.info).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        scene.push(frame, det);
    }
    Ok(scene)
}

pub fn parse_mot(path: &Path, info: SeqInfo) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_mot_str(&text, info, path)
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

/// Rows sorted by `(frame, id)`; identity-free rows keep their input order
/// after the identified ones of the same frame.
pub fn mot_string(scene: &Scene) -> String {
    let (iw, ih) = (scene.info.width as f64, scene.info.height as f64);
    let mut out = String::new();
    for (&f, dets) in &scene.frames {
        let mut order: Vec<&Detection> = dets.iter().collect();
        order.sort_by_key(|d| d.id.map_or(u64::MAX, |i| i));
        for d in order {
            let [l, t, w, h] = d.bbox.to_pixels(iw, ih);
            let id = d.id.map_or("-1".to_string(), |i| i.to_string());
            let _ = writeln!(
                out,
                "{f},{id},{},{},{},{},{},-1,-1,-1",
                fmt_num(l),
                fmt_num(t),
                fmt_num(w),
                fmt_num(h),
                fmt_num(d.conf)
            );
        }
    }
    out
}

pub fn write_mot(scene: &Scene, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, mot_string(scene)).map_err(io_err(path))
}

/// MOTChallenge sequence directory: `seqinfo.ini`, `gt/gt.txt`, `det/det.txt`.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub dir: PathBuf,
    pub info: SeqInfo,
    pub gt: Option<Scene>,
    pub det: Option<Scene>,
}

impl Sequence {
    pub fn load(dir: &Path) -> Result<Self> {
        let info = SeqInfo::read(&dir.join("seqinfo.ini"))?;
        let opt = |rel: &str| -> Result<Option<Scene>> {
            let p = dir.join(rel);
            if p.exists() {
                parse_mot(&p, info.clone()).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self { dir: dir.to_path_buf(), gt: opt("gt/gt.txt")?, det: opt("det/det.txt")?, info })
    }

    pub fn save(dir: &Path, info: &SeqInfo, gt: Option<&Scene>, det: Option<&Scene>) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        info.write(&dir.join("seqinfo.ini"))?;
        if let Some(gt) = gt {
            write_mot(gt, &dir.join("gt").join("gt.txt"))?;
        }
        if let Some(det) = det {
            write_mot(det, &dir.join("det").join("det.txt"))?;
        }
        Ok(())
    }
}

/// Subdirectories of `root` holding a `seqinfo.ini`, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let p = entry.map_err(io_err(root))?.path();
        if p.join("seqinfo.ini").is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    Linear,
    Sinusoidal,
    Circular,
    Turn,
    CrossingPair,
}

/// Synthetic benchmark description. Ranges are `[lo, hi]`; distances are
/// normalized units per frame, periods are frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub name: String,
    pub seed: u64,
    pub scenes: usize,
    pub frames: u32,
    /// Objects per scene; a crossing pair counts as two.
    pub objects: usize,
    pub motions: Vec<MotionKind>,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    /// Detection noise std as a fraction of box width/height.
    pub det_noise: f64,
    /// Probability that a detection is missing.
    pub drop_rate: f64,
    pub speed: [f64; 2],
    pub box_w: [f64; 2],
    pub box_h: [f64; 2],
    /// Sinusoid amplitude and circle radius.
    pub amplitude: [f64; 2],
    pub period: [f64; 2],
    /// Turn angle in degrees.
    pub turn_angle: [f64; 2],
    /// Perpendicular sinusoidal wiggle amplitude on crossing pairs.
    pub crossing_wiggle: [f64; 2],
    /// Relative size drift over the whole sequence.
    pub scale_drift: f64,
    pub margin: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            seed: 0,
            scenes: 5,
            frames: 120,
            objects: 6,
            motions: vec![MotionKind::Linear, MotionKind::Sinusoidal, MotionKind::CrossingPair],
            width: 1920,
            height: 1080,
            fps: 25.0,
            det_noise: 0.02,
            drop_rate: 0.0,
            speed: [0.002, 0.006],
            box_w: [0.025, 0.04],
            box_h: [0.08, 0.12],
            amplitude: [0.03, 0.08],
            period: [30.0, 60.0],
            turn_angle: [45.0, 120.0],
            crossing_wiggle: [0.0, 0.0],
            scale_drift: 0.2,
            margin: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.frames < 2 {
            return bad("frames must be at least 2");
        }
        if self.motions.is_empty() {
            return bad("at least one motion kind is required");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(0.0..1.0).contains(&self.drop_rate) || self.det_noise < 0.0 {
            return bad("drop_rate must be in [0, 1) and det_noise >= 0");
        }
        for (n, r) in [
            ("speed", self.speed),
            ("box_w", self.box_w),
            ("box_h", self.box_h),
            ("amplitude", self.amplitude),
            ("period", self.period),
            ("turn_angle", self.turn_angle),
            ("crossing_wiggle", self.crossing_wiggle),
        ] {
            if !(r[0] <= r[1]) || r[0] < 0.0 {
                return bad(&format!("{n} range must satisfy 0 <= lo <= hi"));
            }
        }
        if self.box_w[0] <= 0.0 || self.box_h[0] <= 0.0 || self.period[0] <= 0.0 {
            return bad("box sizes and periods must be positive");
        }
        if !(0.0..0.4).contains(&self.margin) {
            return bad("margin must be in [0, 0.4)");
        }
        Ok(())
    }

    pub fn scene_name(&self, index: usize) -> String {
        format!("{}-{:03}", self.name, index)
    }
}

/// Ground truth and the noisy detector view of one synthetic sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub gt: Scene,
    pub det: Scene,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

type Path2 = Box<dyn Fn(f64) -> (f64, f64)>;

/// One object's center path over frames `1..=frames`, sampled until it stays
/// inside the margin (falls back to the last draw after 200 tries).
fn sample_path(kind: MotionKind, spec: &SynthSpec, rng: &mut ChaCha8Rng, half: (f64, f64)) -> Vec<Path2> {
    let t_len = spec.frames as f64;
    let lo = spec.margin;
    let inside = |p: &Path2| {
        (1..=spec.frames).all(|f| {
            let (x, y) = p(f as f64);
            x - half.0 >= lo && x + half.0 <= 1.0 - lo && y - half.1 >= lo && y + half.1 <= 1.0 - lo
        })
    };
    let mut last = Vec::new();
    for _ in 0..200 {
        let paths = draw_paths(kind, spec, rng, t_len);
        if paths.iter().all(&inside) {
            return paths;
        }
        last = paths;
    }
    last
}

fn draw_paths(kind: MotionKind, spec: &SynthSpec, rng: &mut ChaCha8Rng, t_len: f64) -> Vec<Path2> {
    use std::f64::consts::TAU;
    let speed = uniform(rng, spec.speed);
    let dir = rng.gen_range(0.0..TAU);
    let (vx, vy) = (speed * dir.cos(), speed * dir.sin());
    let start = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
    match kind {
        MotionKind::Linear => vec![Box::new(move |t| (start.0 + vx * t, start.1 + vy * t))],
        MotionKind::Sinusoidal => {
            let amp = uniform(rng, spec.amplitude);
            let w = TAU / uniform(rng, spec.period);
            let phase = rng.gen_range(0.0..TAU);
            let (px, py) = (-dir.sin(), dir.cos());
            vec![Box::new(move |t| {
                let s = amp * (w * t + phase).sin();
                (start.0 + vx * t + px * s, start.1 + vy * t + py * s)
            })]
        }
        MotionKind::Circular => {
            let r = uniform(rng, spec.amplitude).max(1e-3) * 2.0;
            let w = speed / r * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let a0 = rng.gen_range(0.0..TAU);
            vec![Box::new(move |t| (start.0 + r * (w * t + a0).cos(), start.1 + r * (w * t + a0).sin()))]
        }
        MotionKind::Turn => {
            let t_turn = rng.gen_range(0.3 * t_len..0.7 * t_len);
            let ang = uniform(rng, spec.turn_angle).to_radians() * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let (ux, uy) = (speed * (dir + ang).cos(), speed * (dir + ang).sin());
            vec![Box::new(move |t| {
                if t <= t_turn {
                    (start.0 + vx * t, start.1 + vy * t)
                } else {
                    let d = t - t_turn;
                    (start.0 + vx * t_turn + ux * d, start.1 + vy * t_turn + uy * d)
                }
            })]
        }
        MotionKind::CrossingPair => {
            let t_c = rng.gen_range(0.4 * t_len..0.6 * t_len).round();
            let meet = (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
            let sep = rng.gen_range(60f64..120.0).to_radians();
            let mut out: Vec<Path2> = Vec::new();
            for (k, d) in [dir, dir + sep].into_iter().enumerate() {
                let sp = if k == 0 { speed } else { uniform(rng, spec.speed) };
                let (vx, vy) = (sp * d.cos(), sp * d.sin());
                let amp = uniform(rng, spec.crossing_wiggle);
                let w = TAU / uniform(rng, spec.period);
                let (px, py) = (-d.sin(), d.cos());
                out.push(Box::new(move |t| {
                    let dt = t - t_c;
                    let s = amp * (w * dt).sin();
                    (meet.0 + vx * dt + px * s, meet.1 + vy * dt + py * s)
                }));
            }
            out
        }
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1))
}

/// Generate scene `index` of a synthetic benchmark.
pub fn synth_scene(spec: &SynthSpec, index: usize) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, index);
    let mut info = SeqInfo::new(spec.scene_name(index), spec.width, spec.height, spec.fps);
    info.length = Some(spec.frames);
    let mut gt = Scene::new(info.clone());
    let mut det = Scene::new(info);
    let mut next_id = 1u64;
    let mut slot = 0usize;
    while (next_id as usize) <= spec.objects {
        let kind = spec.motions[slot % spec.motions.len()];
        slot += 1;
        if kind == MotionKind::CrossingPair && next_id as usize + 1 > spec.objects {
            if spec.motions.iter().all(|m| *m == MotionKind::CrossingPair) {
                break;
            }
            continue;
        }
        let w0 = uniform(&mut rng, spec.box_w);
        let h0 = uniform(&mut rng, spec.box_h);
        let paths = sample_path(kind, spec, &mut rng, (w0 * (1.0 + spec.scale_drift), h0 * (1.0 + spec.scale_drift)));
        for path in paths {
            let drift = spec.scale_drift * rng.gen_range(-1.0..1.0);
            let id = next_id;
            next_id += 1;
            for f in 1..=spec.frames {
                let (cx, cy) = path(f as f64);
                let s = 1.0 + drift * (f as f64 / spec.frames as f64 - 0.5);
                let bbox = BBox::new(cx, cy, w0 * s, h0 * s)?;
                if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
                    continue;
                }
                gt.push(f, Detection { bbox, conf: 1.0, id: Some(id) });
            }
        }
    }
    let noise = Normal::new(0.0, spec.det_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for (&f, objs) in &gt.frames {
        for o in objs {
            let mut n = || if spec.det_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let b = o.bbox;
            let noisy = BBox::new(b.cx + n() * b.w, b.cy + n() * b.h, b.w * n().exp(), b.h * n().exp())?;
            let conf = (rng.gen_range(0.7..1.0f64) * 1000.0).round() / 1000.0;
            if rng.gen::<f64>() < spec.drop_rate {
                continue;
            }
            det.push(f, Detection { bbox: noisy, conf, id: None });
        }
    }
    Ok(SynthScene { gt, det })
}

pub fn synth_all(spec: &SynthSpec) -> Result<Vec<SynthScene>> {
    (0..spec.scenes).map(|i| synth_scene(spec, i)).collect()
}

/// A training window with its ground-truth next box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub window: TrajectoryWindow,
    pub next: BBox,
    pub target: Offset4,
}

impl TrainingSample {
    pub fn new(window: TrajectoryWindow, next: BBox) -> Self {
        let target = encode_offset(&window.base_box(), &next);
        Self { window, next, target }
    }
}

/// Every `(window, next offset)` pair of every identified track: one sample
/// per observation that has at least two predecessors, using at most the
/// `n_past` most recent of them.
pub fn extract_windows(scene: &Scene, n_past: usize) -> Vec<TrainingSample> {
    let mut out = Vec::new();
    for obs in scene.tracks().values() {
        for k in 2..obs.len() {
            let from = k.saturating_sub(n_past);
            let (frames, boxes): (Vec<u32>, Vec<BBox>) = obs[from..k].iter().copied().unzip();
            let window = TrajectoryWindow::new(frames, boxes).expect("track frames are increasing");
            out.push(TrainingSample::new(window, obs[k].1));
        }
    }
    out
}

/// Give detections the id of the ground-truth box they overlap best
/// (IoU >= `iou_min`, optimal per frame); unmatched detections are dropped.
pub fn label_detections(gt: &Scene, det: &Scene, iou_min: f64) -> Result<Scene> {
    let mut out = Scene::new(det.info.clone());
    for (&f, dets) in &det.frames {
        let gts = gt.detections(f);
        let c = cost_matrix(&gts.iter().map(|g| g.bbox).collect::<Vec<_>>(), &dets.iter().map(|d| d.bbox).collect::<Vec<_>>());
        for (gi, di) in assign_max_cost(&c, 1.0 - iou_min)?.matches {
            out.push(f, Detection { id: gts[gi].id, ..dets[di] });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Probability of removing each non-final observation.
    pub drop_prob: f64,
    /// Jitter scale: centers move by up to `jitter·(w, h)`, log-sizes by up to `jitter`.
    pub jitter: f64,
    /// Truncate to a uniformly drawn length in `[2, len]`.
    pub random_length: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { drop_prob: 0.1, jitter: 0.05, random_length: false }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self { drop_prob: 0.0, jitter: 0.0, random_length: false }
    }
}

pub fn augment(sample: &TrainingSample, policy: &AugmentPolicy, rng: &mut impl Rng) -> TrainingSample {
    let mut window = sample.window.clone();
    if policy.drop_prob > 0.0 && window.len() > 2 {
        let n = window.len();
        let mut keep: Vec<bool> = (0..n).map(|i| i == n - 1 || rng.gen::<f64>() >= policy.drop_prob).collect();
        // restore the most recent dropped entries until two remain
        let mut i = n - 1;
        while keep.iter().filter(|k| **k).count() < 2 {
            i -= 1;
            keep[i] = true;
        }
        window.retain_mask(&keep);
    }
    if policy.jitter > 0.0 {
        let s = policy.jitter;
        for b in window.boxes_mut() {
            let (dx, dy) = (rng.gen_range(-s..=s) * b.w, rng.gen_range(-s..=s) * b.h);
            let (sw, sh) = (rng.gen_range(-s..=s).exp(), rng.gen_range(-s..=s).exp());
            *b = BBox { cx: b.cx + dx, cy: b.cy + dy, w: b.w * sw, h: b.h * sh };
        }
    }
    if policy.random_length && window.len() > 2 {
        let len = rng.gen_range(2..=window.len());
        window.truncate_front(len);
    }
    TrainingSample::new(window, sample.next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info100() -> SeqInfo {
        SeqInfo::new("t", 100, 100, 25.0)
    }

    #[test]
    fn parse_single_row() {
        let s = parse_mot_str("1,3,10,20,30,40,1,-1,-1,-1\n", info100(), Path::new("x")).unwrap();
        let d = s.detections(1)[0];
        assert_eq!(d.id, Some(3));
        assert!((d.bbox.cx - 0.25).abs() < 1e-12);
        assert!((d.bbox.cy - 0.40).abs() < 1e-12);
        assert!((d.bbox.w - 0.30).abs() < 1e-12);
        assert!((d.bbox.h - 0.40).abs() < 1e-12);
    }

    #[test]
    fn parse_empty_and_errors() {
        let s = parse_mot_str("", info100(), Path::new("x")).unwrap();
        assert_eq!(s.num_detections(), 0);
        let e = parse_mot_str("1,1,0,0,5,5\n2,1,0,0,abc,5\n", info100(), Path::new("f.txt")).unwrap_err();
        assert!(e.to_string().contains("f.txt:2"), "{e}");
        assert!(parse_mot_str("0,1,0,0,5,5", info100(), Path::new("x")).is_err());
        assert!(parse_mot_str("1,1,0,0,0,5", info100(), Path::new("x")).is_err());
        assert!(parse_mot_str("1,1,0", info100(), Path::new("x")).is_err());
    }

    #[test]
    fn identity_free_rows() {
        let s = parse_mot_str("4,-1,1,1,5,5,0.5,-1,-1,-1", info100(), Path::new("x")).unwrap();
        assert_eq!(s.detections(4)[0].id, None);
        assert!(mot_string(&s).starts_with("4,-1,1,1,5,5,0.5,"));
    }

    #[test]
    fn write_sorted_without_header() {
        let text = "2,5,1,1,5,5,1,-1,-1,-1\n1,9,1,1,5,5,1,-1,-1,-1\n1,2,3,3,5,5,1,-1,-1,-1\n";
        let s = parse_mot_str(text, info100(), Path::new("x")).unwrap();
        let out = mot_string(&s);
        let keys: Vec<(u32, u64)> = out
            .lines()
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0].parse().unwrap(), f[1].parse().unwrap())
            })
            .collect();
        assert_eq!(keys, vec![(1, 2), (1, 9), (2, 5)]);
        assert!(out.lines().all(|l| l.split(',').count() == 10));
    }

    #[test]
    fn fifty_row_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut text = String::new();
        for i in 0..50 {
            let _ = writeln!(
                text,
                "{},{},{:.2},{:.2},{:.2},{:.2},1,-1,-1,-1",
                i / 5 + 1,
                i % 5 + 1,
                rng.gen_range(0.0..1800.0),
                rng.gen_range(0.0..1000.0),
                rng.gen_range(10.0..100.0),
                rng.gen_range(10.0..100.0)
            );
        }
        let info = SeqInfo::new("r", 1920, 1080, 30.0);
        let a = parse_mot_str(&text, info.clone(), Path::new("x")).unwrap();
        let written = mot_string(&a);
        let b = parse_mot_str(&written, info, Path::new("x")).unwrap();
        assert_eq!(a.num_detections(), 50);
        for (f, da) in &a.frames {
            for (x, y) in da.iter().zip(b.detections(*f)) {
                assert_eq!(x.id, y.id);
                let (px, py) = (x.bbox.to_pixels(1920.0, 1080.0), y.bbox.to_pixels(1920.0, 1080.0));
                for k in 0..4 {
                    assert!((px[k] - py[k]).abs() < 1e-9, "{px:?} vs {py:?}");
                }
            }
        }
        assert_eq!(mot_string(&b), written);
    }

    #[test]
    fn pixel_normalization_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (l, t, w, h) = (rng.gen_range(0.0..1900.0), rng.gen_range(0.0..1000.0), rng.gen_range(1.0..300.0), rng.gen_range(1.0..300.0));
            let b = BBox::from_pixels(l, t, w, h, 1920.0, 1080.0).unwrap();
            let p = b.to_pixels(1920.0, 1080.0);
            for (x, y) in p.iter().zip([l, t, w, h]) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn seqinfo_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seqinfo.ini");
        fs::write(&p, "[Sequence]\nname=MOT17-02\nimWidth=1920\nimHeight=1080\nframeRate=30\nseqLength=600\n").unwrap();
        let i = SeqInfo::read(&p).unwrap();
        assert_eq!((i.width, i.height, i.fps, i.length), (1920, 1080, 30.0, Some(600)));
        fs::write(&p, "name=x\nfps=30\n").unwrap();
        assert!(matches!(SeqInfo::read(&p), Err(Error::MissingMetadata(_))));
    }

    fn spec_with(kind: MotionKind) -> SynthSpec {
        SynthSpec { motions: vec![kind], objects: 2, det_noise: 0.0, scale_drift: 0.0, ..SynthSpec::default() }
    }

    #[test]
    fn linear_gt_is_affine() {
        let s = synth_scene(&spec_with(MotionKind::Linear), 0).unwrap();
        for obs in s.gt.tracks().values() {
            assert!(obs.len() > 10);
            for w in obs.windows(3) {
                assert_eq!(w[1].0 + 1, w[2].0);
                let ax = w[2].1.cx - 2.0 * w[1].1.cx + w[0].1.cx;
                let ay = w[2].1.cy - 2.0 * w[1].1.cy + w[0].1.cy;
                assert!(ax.abs() < 1e-12 && ay.abs() < 1e-12);
            }
        }
        // noise-free detections coincide with gt
        for (f, dets) in &s.det.frames {
            for (d, g) in dets.iter().zip(s.gt.detections(*f)) {
                assert_eq!(d.bbox, g.bbox);
            }
        }
    }

    #[test]
    fn crossing_pair_meets() {
        let spec = SynthSpec { crossing_wiggle: [0.02, 0.04], ..spec_with(MotionKind::CrossingPair) };
        for idx in 0..5 {
            let s = synth_scene(&spec, idx).unwrap();
            let tracks = s.gt.tracks();
            assert_eq!(tracks.len(), 2);
            let (a, b) = (&tracks[&1], &tracks[&2]);
            let closest = a
                .iter()
                .filter_map(|(f, ba)| b.iter().find(|(g, _)| g == f).map(|(_, bb)| ((ba.cx - bb.cx).hypot(ba.cy - bb.cy), *f)))
                .min_by(|x, y| x.0.total_cmp(&y.0))
                .unwrap();
            assert!(closest.0 < 1e-12, "scene {idx}: min distance {}", closest.0);
            let t = closest.1 as f64 / spec.frames as f64;
            assert!((0.39..=0.61).contains(&t));
        }
    }

    #[test]
    fn synth_is_reproducible() {
        let spec = SynthSpec { drop_rate: 0.1, ..SynthSpec::default() };
        assert_eq!(synth_scene(&spec, 3).unwrap(), synth_scene(&spec, 3).unwrap());
        assert_ne!(synth_scene(&spec, 3).unwrap(), synth_scene(&spec, 4).unwrap());
        assert!(SynthSpec { frames: 1, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { motions: vec![], ..SynthSpec::default() }.validate().is_err());
    }

    fn track_scene(len: u32) -> Scene {
        let mut s = Scene::new(info100());
        for f in 1..=len {
            let b = BBox::new(0.1 + 0.01 * f as f64, 0.5 + 0.002 * (f * f) as f64, 0.05, 0.1).unwrap();
            s.push(f, Detection { bbox: b, conf: 1.0, id: Some(7) });
        }
        s
    }

    #[test]
    fn window_counts() {
        assert_eq!(extract_windows(&track_scene(3), 10).len(), 1);
        let w = extract_windows(&track_scene(12), 10);
        assert_eq!(w.len(), 10);
        assert!(w.iter().all(|s| s.window.len() <= 10));
        assert_eq!(w.last().unwrap().window.len(), 10);
    }

    #[test]
    fn window_targets_recomputed() {
        let scene = track_scene(12);
        let obs = &scene.tracks()[&7];
        for (k, s) in extract_windows(&scene, 10).iter().enumerate() {
            let i = k + 2;
            let expect = encode_offset(&obs[i - 1].1, &obs[i].1);
            assert_eq!(s.target, expect);
            assert_eq!(s.window.base_box(), obs[i - 1].1);
            assert_eq!(*s.window.frames().last().unwrap(), obs[i - 1].0);
        }
    }

    #[test]
    fn noop_policy_keeps_sample() {
        let s = extract_windows(&track_scene(12), 10).pop().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &AugmentPolicy::none(), &mut rng), s);
    }

    #[test]
    fn augmented_samples_keep_invariants() {
        let samples = extract_windows(&track_scene(30), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = AugmentPolicy { drop_prob: 0.3, jitter: 0.05, random_length: true };
        for i in 0..1000 {
            let s = &samples[i % samples.len()];
            let a = augment(s, &policy, &mut rng);
            assert!(a.window.len() >= 2 && a.window.len() <= s.window.len());
            assert!(a.window.frames().windows(2).all(|p| p[0] < p[1]));
            assert_eq!(a.window.frames().last(), s.window.frames().last());
            let toks = a.window.tokens();
            assert_eq!(&toks[0].to_array()[5..], &[0.0; 4]);
            for k in 1..toks.len() {
                let d = encode_offset(&a.window.boxes()[k - 1], &a.window.boxes()[k]);
                assert_eq!([toks[k].d_cx, toks[k].d_cy, toks[k].d_w, toks[k].d_h], d.to_array());
            }
            assert_eq!(a.target, encode_offset(&a.window.base_box(), &s.next));
        }
    }

    #[test]
    fn random_length_bounds() {
        let s = extract_windows(&track_scene(12), 10).pop().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let policy = AugmentPolicy { drop_prob: 0.0, jitter: 0.0, random_length: true };
        let lens: std::collections::BTreeSet<usize> = (0..500).map(|_| augment(&s, &policy, &mut rng).window.len()).collect();
        assert_eq!(lens.first(), Some(&2));
        assert_eq!(lens.last(), Some(&10));
    }

    #[test]
    fn label_detections_assigns_ids() {
        let spec = SynthSpec { drop_rate: 0.0, det_noise: 0.01, ..SynthSpec::default() };
        let s = synth_scene(&spec, 0).unwrap();
        let lab = label_detections(&s.gt, &s.det, 0.5).unwrap();
        assert!(lab.num_detections() as f64 > 0.95 * s.det.num_detections() as f64);
        assert_eq!(lab.tracks().len(), s.gt.tracks().len());
    }
}
