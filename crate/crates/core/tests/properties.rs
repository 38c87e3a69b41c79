use proptest::prelude::*;

use mtrack::assignment::{assign_with_gate, min_cost_matching, CostMatrix};
use mtrack::data::{mot_string, parse_mot_str, Detection, Scene, SeqInfo};
use mtrack::geometry::BBox;
use mtrack::metrics::evaluate;

fn brute(c: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
    if row == c.len() {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for j in 0..used.len() {
        if !used[j] {
            used[j] = true;
            best = best.min(c[row][j] + brute(c, row + 1, used));
            used[j] = false;
        }
    }
    best
}

fn matrix(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max, 0..=max).prop_flat_map(|(r, extra)| {
        let k = r + extra;
        prop::collection::vec(prop::collection::vec(0.0..1.0f64, k), r)
    })
}

fn boxes_scene(rows: &[(u32, u64, f64, f64)]) -> Scene {
    let mut s = Scene::new(SeqInfo::new("p", 640, 480, 30.0));
    for &(f, id, cx, cy) in rows {
        s.push(f, Detection { bbox: BBox { cx, cy, w: 0.1, h: 0.2 }, conf: 1.0, id: Some(id) });
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matching_is_optimal(c in matrix(6)) {
        let pairs = min_cost_matching(&CostMatrix::from_rows(&c).unwrap()).unwrap();
        prop_assert_eq!(pairs.len(), c.len());
        let got: f64 = pairs.iter().map(|&(i, j)| c[i][j]).sum();
        let want = brute(&c, 0, &mut vec![false; c[0].len()]);
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
    }

    #[test]
    fn gating_partitions_rows_and_columns(c in matrix(6), gate in 0.0..1.0f64) {
        let r = assign_with_gate(&CostMatrix::from_rows(&c).unwrap(), gate).unwrap();
        prop_assert_eq!(r.matches.len() + r.unmatched_rows.len(), c.len());
        prop_assert_eq!(r.matches.len() + r.unmatched_cols.len(), c[0].len());
        for &(i, j) in &r.matches {
            prop_assert!(c[i][j] <= 1.0 - gate);
        }
    }

    #[test]
    fn mot_text_roundtrip(rows in prop::collection::vec((1u32..50, 1u64..20, 0.1..0.9f64, 0.1..0.9f64), 1..40)) {
        let mut rows = rows;
        rows.sort_by_key(|r| (r.0, r.1));
        rows.dedup_by_key(|r| (r.0, r.1));
        let s = boxes_scene(&rows);
        let text = mot_string(&s);
        let back = parse_mot_str(&text, s.info.clone(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.num_detections(), s.num_detections());
        prop_assert_eq!(mot_string(&back), text);
        for (f, dets) in &s.frames {
            for (a, b) in dets.iter().zip(back.detections(*f)) {
                prop_assert_eq!(a.id, b.id);
                // 3 decimals in pixel units
                prop_assert!((a.bbox.cx - b.bbox.cx).abs() * 640.0 < 1e-3);
                prop_assert!((a.bbox.cy - b.bbox.cy).abs() * 480.0 < 1e-3);
            }
        }
    }

    #[test]
    fn metrics_are_bounded(
        gt in prop::collection::vec((1u32..15, 1u64..5, 0.1..0.9f64, 0.1..0.9f64), 1..30),
        hyp in prop::collection::vec((1u32..15, 1u64..5, 0.1..0.9f64, 0.1..0.9f64), 0..30),
    ) {
        let dedup = |mut v: Vec<(u32, u64, f64, f64)>| { v.sort_by_key(|r| (r.0, r.1)); v.dedup_by_key(|r| (r.0, r.1)); v };
        let (g, h) = (boxes_scene(&dedup(gt)), boxes_scene(&dedup(hyp)));
        let r = evaluate(&g, &h, 0.5).unwrap();
        prop_assert!(r.mota <= 1.0);
        prop_assert!((0.0..=1.0).contains(&r.idf1));
        prop_assert_eq!(r.idtp + r.idfn, r.gt_count);
        let perfect = evaluate(&g, &g, 0.5).unwrap();
        prop_assert_eq!(perfect.mota, 1.0);
        prop_assert_eq!(perfect.idf1, 1.0);
        prop_assert_eq!(perfect.idsw, 0);
    }
}
