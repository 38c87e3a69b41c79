//! CLEAR MOT counts (MOTA, FP, FN, IDSW) and the identity measures
//! (IDTP, IDFP, IDFN, IDF1).
//!
//! Ground-truth rows whose confidence column is 0 are ignored, matching the
//! MOTChallenge "do not consider" flag.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assignment::{assign_max_cost, min_cost_matching, CostMatrix};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// IoU needed for a hypothesis box to count as covering a gt box.
pub const DEFAULT_IOU_MIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mota: f64,
    pub idf1: f64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub idsw: u64,
    pub gt_count: u64,
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
}

impl EvalReport {
    /// Report from raw counts; both ratios derive from them.
    pub fn from_counts(fp: u64, fn_: u64, idsw: u64, gt_count: u64, idtp: u64, idfp: u64, idfn: u64) -> Self {
        let mota = 1.0 - (fp + fn_ + idsw) as f64 / gt_count.max(1) as f64;
        let denom = 2 * idtp + idfp + idfn;
        let idf1 = if denom == 0 { 1.0 } else { 2.0 * idtp as f64 / denom as f64 };
        Self { mota, idf1, fp, fn_, idsw, gt_count, idtp, idfp, idfn }
    }

    /// Sum of counts with ratios recomputed.
    pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> Self {
        let mut c = [0u64; 7];
        for r in reports {
            for (acc, v) in c.iter_mut().zip([r.fp, r.fn_, r.idsw, r.gt_count, r.idtp, r.idfp, r.idfn]) {
                *acc += v;
            }
        }
        Self::from_counts(c[0], c[1], c[2], c[3], c[4], c[5], c[6])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClearCounts {
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub idsw: u64,
    pub gt_count: u64,
    /// `(frame, gt id, hyp id)` correspondences.
    pub matches: Vec<(u32, u64, u64)>,
}

type Frame = Vec<(u64, BBox)>;

/// Frame-indexed `(id, box)` lists sorted by id, so results do not depend on
/// row order.
fn by_frame(scene: &Scene, is_gt: bool) -> Result<BTreeMap<u32, Frame>> {
    let mut out = BTreeMap::new();
    for (&f, dets) in &scene.frames {
        let mut rows = Vec::with_capacity(dets.len());
        for d in dets {
            if is_gt && d.conf == 0.0 {
                continue;
            }
            let id = d.id.ok_or_else(|| {
                Error::Precondition(format!("{} row without an id in frame {f}", if is_gt { "gt" } else { "hypothesis" }))
            })?;
            rows.push((id, d.bbox));
        }
        rows.sort_by_key(|r| r.0);
        if rows.windows(2).any(|p| p[0].0 == p[1].0) {
            return Err(Error::Precondition(format!("duplicate id in frame {f}")));
        }
        out.insert(f, rows);
    }
    Ok(out)
}

/// Per-frame CLEAR matching. Pairs from the previous frame that still
/// overlap by `iou_min` are kept; the rest are matched optimally on
/// `1 − IoU`, gated at `iou_min`. A gt id whose hypothesis differs from the
/// one at its previous matched frame counts one identity switch.
pub fn clear_match(gt: &Scene, hyp: &Scene, iou_min: f64) -> Result<ClearCounts> {
    let g = by_frame(gt, true)?;
    let h = by_frame(hyp, false)?;
    let empty = Vec::new();
    let mut prev: HashMap<u64, u64> = HashMap::new();
    let mut last_hyp: HashMap<u64, u64> = HashMap::new();
    let mut counts = ClearCounts::default();
    let frames: std::collections::BTreeSet<u32> = g.keys().chain(h.keys()).copied().collect();
    for f in frames {
        let gf = g.get(&f).unwrap_or(&empty);
        let hf = h.get(&f).unwrap_or(&empty);
        counts.gt_count += gf.len() as u64;
        let mut g_used = vec![false; gf.len()];
        let mut h_used = vec![false; hf.len()];
        let mut pairs = Vec::new();
        for (gi, (gid, gb)) in gf.iter().enumerate() {
            if let Some(hid) = prev.get(gid) {
                if let Some(hi) = hf.iter().position(|(i, _)| i == hid) {
                    if iou(gb, &hf[hi].1) >= iou_min {
                        g_used[gi] = true;
                        h_used[hi] = true;
                        pairs.push((gi, hi));
                    }
                }
            }
        }
        let gr: Vec<usize> = (0..gf.len()).filter(|&i| !g_used[i]).collect();
        let hr: Vec<usize> = (0..hf.len()).filter(|&i| !h_used[i]).collect();
        let data = gr.iter().flat_map(|&a| hr.iter().map(move |&b| 1.0 - iou(&gf[a].1, &hf[b].1))).collect();
        let cost = CostMatrix::new(gr.len(), hr.len(), data)?;
        for (a, b) in assign_max_cost(&cost, 1.0 - iou_min)?.matches {
            pairs.push((gr[a], hr[b]));
        }
        prev.clear();
        for &(gi, hi) in &pairs {
            let (gid, hid) = (gf[gi].0, hf[hi].0);
            if last_hyp.get(&gid).is_some_and(|&old| old != hid) {
                counts.idsw += 1;
            }
            last_hyp.insert(gid, hid);
            prev.insert(gid, hid);
            counts.matches.push((f, gid, hid));
        }
        counts.fn_ += (gf.len() - pairs.len()) as u64;
        counts.fp += (hf.len() - pairs.len()) as u64;
    }
    counts.matches.sort_unstable();
    Ok(counts)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdCounts {
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
}

/// Identity measures: one-to-one matching of whole gt and hypothesis
/// trajectories maximizing the number of frames where matched pairs
/// overlap by at least `iou_min`.
pub fn id_counts(gt: &Scene, hyp: &Scene, iou_min: f64) -> Result<IdCounts> {
    let g = by_frame(gt, true)?;
    let h = by_frame(hyp, false)?;
    let mut gid_ix: BTreeMap<u64, usize> = BTreeMap::new();
    let mut hid_ix: BTreeMap<u64, usize> = BTreeMap::new();
    for rows in g.values() {
        for (id, _) in rows {
            let n = gid_ix.len();
            gid_ix.entry(*id).or_insert(n);
        }
    }
    for rows in h.values() {
        for (id, _) in rows {
            let n = hid_ix.len();
            hid_ix.entry(*id).or_insert(n);
        }
    }
    let total_gt: u64 = g.values().map(|r| r.len() as u64).sum();
    let total_hyp: u64 = h.values().map(|r| r.len() as u64).sum();
    let (ng, nh) = (gid_ix.len(), hid_ix.len());
    let mut overlap = vec![0u64; ng * nh];
    for (f, gf) in &g {
        let Some(hf) = h.get(f) else { continue };
        for (gid, gb) in gf {
            for (hid, hb) in hf {
                if iou(gb, hb) >= iou_min {
                    overlap[gid_ix[gid] * nh + hid_ix[hid]] += 1;
                }
            }
        }
    }
    let cost = CostMatrix::new(ng, nh, overlap.iter().map(|&c| -(c as f64)).collect())?;
    let idtp: u64 = min_cost_matching(&cost)?.into_iter().map(|(a, b)| overlap[a * nh + b]).sum();
    Ok(IdCounts { idtp, idfp: total_hyp - idtp, idfn: total_gt - idtp })
}

pub fn evaluate(gt: &Scene, hyp: &Scene, iou_min: f64) -> Result<EvalReport> {
    let c = clear_match(gt, hyp, iou_min)?;
    let i = id_counts(gt, hyp, iou_min)?;
    Ok(EvalReport::from_counts(c.fp, c.fn_, c.idsw, c.gt_count, i.idtp, i.idfp, i.idfn))
}

/// Aligned text table, one row per named report.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
    let mut s = format!(
        "{:<width$} {:>8} {:>8} {:>7} {:>7} {:>6} {:>7} {:>7} {:>7} {:>7}\n",
        "sequence", "MOTA", "IDF1", "FP", "FN", "IDSW", "GT", "IDTP", "IDFP", "IDFN"
    );
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<width$} {:>8.4} {:>8.4} {:>7} {:>7} {:>6} {:>7} {:>7} {:>7} {:>7}",
            name, r.mota, r.idf1, r.fp, r.fn_, r.idsw, r.gt_count, r.idtp, r.idfp, r.idfn
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Detection, SeqInfo};

    fn scene(rows: &[(u32, u64, f64, f64)]) -> Scene {
        let mut s = Scene::new(SeqInfo::new("m", 100, 100, 25.0));
        for &(f, id, cx, cy) in rows {
            s.push(f, Detection { bbox: BBox::new(cx, cy, 0.1, 0.1).unwrap(), conf: 1.0, id: Some(id) });
        }
        s
    }

    /// Two parallel tracks over 10 frames; the hypothesis swaps ids from frame 6.
    fn swap_fixture() -> (Scene, Scene) {
        let mut g = Vec::new();
        let mut h = Vec::new();
        for f in 1..=10u32 {
            let x = 0.1 + 0.02 * f as f64;
            g.push((f, 1, x, 0.3));
            g.push((f, 2, x, 0.7));
            let (a, b) = if f <= 5 { (11, 12) } else { (12, 11) };
            h.push((f, a, x, 0.3));
            h.push((f, b, x, 0.7));
        }
        (scene(&g), scene(&h))
    }

    #[test]
    fn perfect_hypothesis() {
        let (g, _) = swap_fixture();
        let r = evaluate(&g, &g, DEFAULT_IOU_MIN).unwrap();
        assert_eq!((r.mota, r.idf1, r.fp, r.fn_, r.idsw), (1.0, 1.0, 0, 0, 0));
    }

    #[test]
    fn empty_hypothesis() {
        let (g, _) = swap_fixture();
        let r = evaluate(&g, &Scene::new(g.info.clone()), DEFAULT_IOU_MIN).unwrap();
        assert_eq!(r.mota, 0.0);
        assert_eq!(r.fn_, 20);
        assert_eq!(r.idf1, 0.0);
    }

    #[test]
    fn swap_fixture_closed_form() {
        let (g, h) = swap_fixture();
        let r = evaluate(&g, &h, DEFAULT_IOU_MIN).unwrap();
        assert_eq!(r.idsw, 2);
        assert_eq!((r.fp, r.fn_), (0, 0));
        assert_eq!(r.mota, 1.0 - 2.0 / 20.0);
        assert_eq!((r.idtp, r.idfp, r.idfn), (10, 10, 10));
        assert_eq!(r.idf1, 0.5);
    }

    #[test]
    fn carry_over_beats_better_iou() {
        // gt 1 keeps hypothesis 11 while it overlaps enough, even though 12 fits better
        let g = scene(&[(1, 1, 0.5, 0.5), (2, 1, 0.5, 0.5)]);
        let h = scene(&[(1, 11, 0.5, 0.5), (2, 11, 0.52, 0.5), (2, 12, 0.5, 0.5)]);
        let c = clear_match(&g, &h, 0.5).unwrap();
        assert_eq!(c.idsw, 0);
        assert_eq!(c.fp, 1);
        assert!(c.matches.contains(&(2, 1, 11)));
    }

    #[test]
    fn switch_counted_across_gap() {
        let g = scene(&[(1, 1, 0.5, 0.5), (2, 1, 0.5, 0.5), (3, 1, 0.5, 0.5)]);
        let h = scene(&[(1, 11, 0.5, 0.5), (3, 12, 0.5, 0.5)]);
        let c = clear_match(&g, &h, 0.5).unwrap();
        assert_eq!((c.idsw, c.fn_), (1, 1));
    }

    #[test]
    fn idf1_non_increasing_with_false_tracks() {
        let (g, _) = swap_fixture();
        let mut h = g.clone();
        let mut last = evaluate(&g, &h, 0.5).unwrap().idf1;
        for k in 0..5u64 {
            for f in 1..=10 {
                h.push(f, Detection { bbox: BBox::new(0.9, 0.1 + 0.15 * k as f64, 0.05, 0.05).unwrap(), conf: 1.0, id: Some(100 + k) });
            }
            let r = evaluate(&g, &h, 0.5).unwrap();
            assert!(r.idf1 <= last && (0.0..=1.0).contains(&r.idf1));
            assert!(r.mota < 1.0);
            last = r.idf1;
        }
    }

    #[test]
    fn row_order_does_not_matter() {
        let (g, h) = swap_fixture();
        let mut rev = h.clone();
        for dets in rev.frames.values_mut() {
            dets.reverse();
        }
        assert_eq!(evaluate(&g, &h, 0.5).unwrap(), evaluate(&g, &rev, 0.5).unwrap());
    }

    #[test]
    fn ignored_gt_rows_and_missing_ids() {
        let (mut g, h) = swap_fixture();
        g.push(1, Detection { bbox: BBox::new(0.9, 0.9, 0.05, 0.05).unwrap(), conf: 0.0, id: Some(99) });
        assert_eq!(evaluate(&g, &g, 0.5).unwrap().gt_count, 20);
        let mut bad = h.clone();
        bad.push(1, Detection { bbox: BBox::new(0.9, 0.9, 0.05, 0.05).unwrap(), conf: 1.0, id: None });
        assert!(evaluate(&g, &bad, 0.5).is_err());
    }

    #[test]
    fn report_identities() {
        let r = EvalReport::from_counts(3, 4, 2, 50, 30, 7, 9);
        assert_eq!(r.mota, 1.0 - 9.0 / 50.0);
        assert_eq!(r.idf1, 60.0 / 76.0);
        let agg = EvalReport::aggregate([&r, &r]);
        assert_eq!(agg.gt_count, 100);
        assert_eq!(agg.mota, r.mota);
        let table = format_table(&[("seq-a".into(), r)]);
        assert_eq!(table.lines().count(), 2);
        assert!(table.contains("IDF1"));
    }
}
