use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};

use proptest::prelude::*;

use actloc_core::attention::AttentionMap;
use actloc_core::cluster::{homogeneity, kmeans, video_feature};
use actloc_core::evaluate::{cmd_eval, evaluate, EvalConfig, VideoPredictions};
use actloc_core::metrics::{
    auc_curve, average_precision, default_sigmas, map_at, tube_iou, write_ground_truth, Detection, GazeGeometry,
    GtTube, GtVideo, TubeBoxes,
};
use actloc_core::pipeline::{per_video_outputs, FrameRecord};
use actloc_core::proposals::{BoxProposal, ProposalSource};
use actloc_core::{Error, Tensor, VideoFeature};

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxProposal {
    BoxProposal::new(x1, y1, x2, y2, ProposalSource::External)
}

fn tube(frames: &[(usize, BoxProposal)]) -> TubeBoxes {
    frames.iter().cloned().collect()
}

#[test]
fn three_frame_tube_iou_by_hand() {
    let a = tube(&[(0, bx(0.0, 0.0, 10.0, 10.0)), (1, bx(0.0, 0.0, 10.0, 10.0)), (2, bx(0.0, 0.0, 10.0, 10.0))]);
    let b = tube(&[(1, bx(5.0, 0.0, 15.0, 10.0)), (2, bx(0.0, 0.0, 10.0, 10.0)), (3, bx(0.0, 0.0, 4.0, 4.0))]);
    // frame 0: only a; frame 1: 50/150; frame 2: 1; frame 3: only b.
    let want = (0.0 + 50.0 / 150.0 + 1.0 + 0.0) / 4.0;
    assert!((tube_iou(&a, &b) - want).abs() < 1e-12);
    assert_eq!(tube_iou(&a, &b), tube_iou(&b, &a));
}

fn det(video: &str, boxes: TubeBoxes, score: f64, label: &str) -> Detection {
    Detection {
        video: video.into(),
        boxes,
        score,
        label: Some(label.into()),
    }
}

#[test]
fn ap_of_hit_then_miss_and_swapped() {
    let gt_boxes = tube(&[(0, bx(0.0, 0.0, 10.0, 10.0))]);
    let gts = vec![GtTube {
        video: "v".into(),
        label: "a".into(),
        boxes: gt_boxes.clone(),
    }];
    let miss = tube(&[(0, bx(30.0, 30.0, 40.0, 40.0))]);
    let ranked = vec![det("v", gt_boxes.clone(), 2.0, "a"), det("v", miss.clone(), 1.0, "a")];
    assert_eq!(map_at(&ranked, &gts, 0.5), 1.0);
    let swapped = vec![det("v", gt_boxes, 1.0, "a"), det("v", miss, 2.0, "a")];
    assert_eq!(map_at(&swapped, &gts, 0.5), 0.5);
    assert_eq!(average_precision(&[false, true], 1), 0.5);
}

#[test]
fn ap_counts_unmatched_gts() {
    // One of two gts found at rank 1: recall 0.5 at precision 1.
    assert_eq!(average_precision(&[true, false, false], 2), 0.5);
    // Interpolation lifts the rank-2 precision to the later 2/3.
    assert!((average_precision(&[false, true, true], 2) - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn angle_across_the_screen() {
    let g = GazeGeometry {
        viewing_distance: 40.0,
        screen_width: 40.0,
    };
    let angle = g.angle_between((0.0, 50.0), (100.0, 50.0), (100, 100));
    assert!((angle - 2.0 * 0.5f64.atan().to_degrees()).abs() < 1e-9);
    assert!((angle - 53.13).abs() < 0.01);
}

#[test]
fn pooled_feature_by_hand() {
    let h0 = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 1.0, -1.0]).unwrap();
    let h1 = Tensor::new(vec![2, 3], vec![-1.0, 4.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
    let a0 = AttentionMap {
        frame_index: 0,
        alpha: Tensor::new(vec![2, 1], vec![0.25, 0.75]).unwrap(),
    };
    let a1 = AttentionMap {
        frame_index: 1,
        alpha: Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap(),
    };
    let f = video_feature("v", [(&h0, &a0), (&h1, &a1)]).unwrap();
    let mut want = [f32::NEG_INFINITY; 3];
    for (h, a) in [(&h0, &a0), (&h1, &a1)] {
        for loc in 0..2 {
            for k in 0..3 {
                want[k] = want[k].max(a.alpha.data()[loc] * h.data()[loc * 3 + k]);
            }
        }
    }
    assert_eq!(f.values, want.to_vec());
    assert_eq!(f.values, vec![2.25, 2.0, 1.0]);
}

fn entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

#[test]
fn homogeneity_against_direct_entropy() {
    // Cluster 0 holds classes {a, a, b, b}; cluster 1 holds {c, c}.
    let ids = ["v0", "v1", "v2", "v3", "v4", "v5"];
    let classes = ["a", "a", "b", "b", "c", "c"];
    let clusters = [0, 0, 0, 0, 1, 1];
    let labels: BTreeMap<String, String> = ids.iter().zip(classes).map(|(i, c)| (i.to_string(), c.to_string())).collect();
    let assign: BTreeMap<String, usize> = ids.iter().zip(clusters).map(|(i, c)| (i.to_string(), c)).collect();
    let h_class = entropy(&[2, 2, 2]);
    let h_cond = (4.0 / 6.0) * entropy(&[2, 2]);
    let want = 1.0 - h_cond / h_class;
    assert!((homogeneity(&assign, &labels).unwrap() - want).abs() < 1e-12);

    // One cluster with two equal classes: H(class | cluster) = H(class).
    let two: BTreeMap<String, String> = [("x", "a"), ("y", "b")].iter().map(|(i, c)| (i.to_string(), c.to_string())).collect();
    let one: BTreeMap<String, usize> = [("x", 0), ("y", 0)].iter().map(|(i, c)| (i.to_string(), *c)).collect();
    assert_eq!(homogeneity(&one, &two).unwrap(), 0.0);
}

#[test]
fn lloyd_inertia_never_increases() {
    let features: Vec<VideoFeature> = (0..40)
        .map(|i| {
            let t = i as f32 * 0.7;
            VideoFeature {
                video_id: format!("v{i}"),
                values: vec![t.sin() * 3.0 + (i % 3) as f32, t.cos() * 2.0, (t * 1.3).sin()],
            }
        })
        .collect();
    for seed in 0..5 {
        let r = kmeans(&features, 4, seed).unwrap();
        assert!(r.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", r.inertia_trace);
    }
}

fn square_tube(start: usize, len: usize, x: f64) -> TubeBoxes {
    (start..start + len).map(|f| (f, bx(x, 0.0, x + 10.0, 10.0))).collect()
}

proptest! {
    #[test]
    fn agnostic_ap_never_rises_with_sigma(
        shifts in prop::collection::vec((0.0f64..12.0, 0usize..4, 0.0f64..1.0), 1..6),
        gts_n in 1usize..3,
    ) {
        let gts: Vec<GtTube> = (0..gts_n)
            .map(|g| GtTube { video: "v".into(), label: "a".into(), boxes: square_tube(g * 2, 5, g as f64 * 20.0) })
            .collect();
        let dets: Vec<Detection> = shifts
            .iter()
            .map(|&(dx, start, score)| det("v", square_tube(start, 5, dx), score, "a"))
            .collect();
        let curve = auc_curve(&dets, &gts, &default_sigmas());
        prop_assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12), "{:?}", curve);
    }
}

fn record(frame: usize, b: Option<[f64; 4]>, active: bool) -> FrameRecord {
    FrameRecord {
        frame,
        e: 0.0,
        active,
        boxes: b.map(|b| vec![[b[0], b[1], b[2], b[3], 0.1]]).unwrap_or_default(),
        gaze: [5.0, 5.0],
    }
}

fn gt_video(video: &str, frames: std::ops::RangeInclusive<usize>) -> GtVideo {
    GtVideo {
        video: video.into(),
        label: "linear".into(),
        tubes: vec![frames.map(|f| (f, bx(0.0, 0.0, 10.0, 10.0))).collect()],
        gaze: Vec::new(),
    }
}

fn metric(records: &[actloc_core::MetricRecord], name: &str, sigma: Option<f64>) -> f64 {
    records
        .iter()
        .find(|r| r.metric == name && r.sigma == sigma)
        .map(|r| r.value)
        .unwrap()
}

#[test]
fn evaluate_perfect_and_empty_videos() {
    let gts = vec![gt_video("hit", 1..=4), gt_video("silent", 1..=4)];
    let mut preds = BTreeMap::new();
    preds.insert(
        "hit".to_string(),
        VideoPredictions {
            records: (1..=4).map(|f| record(f, Some([0.0, 0.0, 10.0, 10.0]), true)).collect(),
            saliency: None,
        },
    );
    preds.insert(
        "silent".to_string(),
        VideoPredictions {
            records: (1..=4).map(|f| record(f, None, false)).collect(),
            saliency: None,
        },
    );
    let out = evaluate(&gts, &preds, None, &EvalConfig::default()).unwrap();
    assert_eq!(metric(&out, "recall", Some(0.5)), 0.5);
    assert_eq!(metric(&out, "map", Some(0.5)), 0.5);
    assert_eq!(metric(&out, "temporal_iou", None), 0.5);

    preds.remove("silent");
    assert!(matches!(evaluate(&gts, &preds, None, &EvalConfig::default()), Err(Error::Validation(_))));
}

#[test]
fn cmd_eval_reads_files() {
    let dir = tempfile::tempdir().unwrap();
    let gts = vec![gt_video("a", 1..=3)];
    let gt_path = dir.path().join("gt.jsonl");
    let mut w = BufWriter::new(File::create(&gt_path).unwrap());
    write_ground_truth(&mut w, &gts).unwrap();
    w.flush().unwrap();
    drop(w);
    let (records, _, _) = per_video_outputs(dir.path(), "a");
    let mut w = BufWriter::new(File::create(&records).unwrap());
    for f in 1..=3 {
        writeln!(w, "{}", record(f, Some([0.0, 0.0, 10.0, 10.0]), true).to_json_line()).unwrap();
    }
    w.flush().unwrap();
    drop(w);
    let out = cmd_eval(dir.path(), &gt_path, None, &EvalConfig::default()).unwrap();
    assert_eq!(metric(&out, "recall", Some(0.5)), 1.0);
    assert!(metric(&out, "auc", None) > 0.0);
    let sigmas: BTreeSet<String> = out.iter().filter_map(|r| r.sigma.map(|s| format!("{s}"))).collect();
    assert_eq!(sigmas.len(), default_sigmas().len());
}
