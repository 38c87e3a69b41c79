use std::sync::Arc;

use mtrack::baselines::KalmanConfig;
use mtrack::checkpoint;
use mtrack::data::{synth_all, Sequence, SynthSpec};
use mtrack::exec::Exec;
use mtrack::metrics::evaluate;
use mtrack::predictor::{Predictor, PredictorConfig};
use mtrack::tracker::{track_scenes, MotionModel, TrackerConfig};

fn spec() -> SynthSpec {
    SynthSpec { name: "pipe".into(), scenes: 3, frames: 40, objects: 4, ..SynthSpec::default() }
}

#[test]
fn gt_as_detections_tracks_perfectly() {
    let scenes = synth_all(&spec()).unwrap();
    let gt: Vec<_> = scenes.iter().map(|s| s.gt.clone()).collect();
    for model in [MotionModel::NoMotion, MotionModel::Kalman(KalmanConfig::default())] {
        let out = track_scenes(&gt, &TrackerConfig::default(), &model, Exec::Parallel).unwrap();
        for (g, (hyp, _)) in gt.iter().zip(&out) {
            let r = evaluate(g, hyp, 0.5).unwrap();
            assert_eq!(r.idsw, 0, "{}", model.name());
            assert_eq!(r.fp, 0, "{}", model.name());
        }
    }
}

#[test]
fn sequences_roundtrip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    for s in synth_all(&spec()).unwrap() {
        let d = dir.path().join(&s.gt.info.name);
        Sequence::save(&d, &s.gt.info, Some(&s.gt), Some(&s.det)).unwrap();
        let back = Sequence::load(&d).unwrap();
        assert_eq!(back.info, s.gt.info);
        assert_eq!(mtrack::data::mot_string(back.gt.as_ref().unwrap()), mtrack::data::mot_string(&s.gt));
        assert_eq!(back.det.unwrap().num_detections(), s.det.num_detections());
    }
}

#[test]
fn parallel_and_sequential_tracking_agree() {
    let scenes = synth_all(&spec()).unwrap();
    let det: Vec<_> = scenes.iter().map(|s| s.det.clone()).collect();
    let mut model = Predictor::new(PredictorConfig { d_model: 16, layers: 1, heads: 2, ..PredictorConfig::desk() }, 1).unwrap();
    model.randomize(2, 0.05);
    let m = MotionModel::Learned(Arc::new(model));
    let a = track_scenes(&det, &TrackerConfig::default(), &m, Exec::Parallel).unwrap();
    let b = track_scenes(&det, &TrackerConfig::default(), &m, Exec::Sequential).unwrap();
    for ((x, _), (y, _)) in a.iter().zip(&b) {
        assert_eq!(mtrack::data::mot_string(x), mtrack::data::mot_string(y));
    }
}

#[test]
fn checkpoint_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Predictor::new(PredictorConfig::desk(), 4).unwrap();
    model.randomize(5, 0.1);
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    let scenes = synth_all(&spec()).unwrap();
    let windows: Vec<_> = mtrack::data::extract_windows(&scenes[0].gt, 10).into_iter().map(|s| s.window).take(20).collect();
    assert_eq!(model.predict_batch(&windows).unwrap(), back.predict_batch(&windows).unwrap());
}
