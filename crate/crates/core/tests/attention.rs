use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use actloc_core::attention::{
    box_energy, energy_at_focus, error_attention, gaze_saliency, link_tubes, select_topk, temporal_action_mask,
    AttentionMap, EnergyConfig, ScoredBox, TemporalMaskConfig,
};
use actloc_core::frame::FrameReader;
use actloc_core::evaluate::temporal_iou;
use actloc_core::pipeline::{run_stream, Sinks, Source, StreamProcessor};
use actloc_core::proposals::{BoxProposal, ProposalSource};
use actloc_core::synth::{generate, Background, SceneConfig, SpriteConfig, Trajectory};
use actloc_core::{RunConfig, Tensor};

fn one_hot(w: usize, h: usize, i: usize, j: usize) -> AttentionMap {
    let mut alpha = Tensor::zeros(&[w, h]);
    alpha.data_mut()[i * h + j] = 1.0;
    AttentionMap { frame_index: 0, alpha }
}

#[test]
fn energy_by_direct_arithmetic() {
    let cfg = EnergyConfig::default();
    let b = BoxProposal::new(24.0, 24.0, 40.0, 40.0, ProposalSource::Grid);
    let want = 0.75 * (24.0f64.hypot(24.0) / 64.0f64.hypot(64.0));
    assert!((want - 0.28125).abs() < 1e-12);
    let e = energy_at_focus(&b, (8.0, 8.0), &[], &cfg, (64, 64)).unwrap();
    assert!((e - want).abs() < 1e-12);
    // A 4×4 grid over 64×64 centers cell (0, 0) on pixel (8, 8).
    let e = box_energy(&b, &one_hot(4, 4, 0, 0), &[], &cfg, (64, 64)).unwrap();
    assert!((e - want).abs() < 1e-12);
}

#[test]
fn temporal_term_uses_nearest_previous_box() {
    let cfg = EnergyConfig::default().with_temporal();
    let b = BoxProposal::new(24.0, 24.0, 40.0, 40.0, ProposalSource::Grid);
    let near = BoxProposal::new(28.0, 24.0, 44.0, 40.0, ProposalSource::Grid);
    let far = BoxProposal::new(0.0, 0.0, 8.0, 8.0, ProposalSource::Grid);
    let e = energy_at_focus(&b, (32.0, 32.0), &[far, near], &cfg, (64, 64)).unwrap();
    let diag = 64.0f64.hypot(64.0);
    assert!((e - 0.25 * 4.0 / diag).abs() < 1e-12);
}

#[test]
fn action_in_middle_frames_is_flagged() {
    let scene = SceneConfig {
        width: 64,
        height: 64,
        length: 60,
        background: Background::Noise {
            base: 40,
            amplitude: 12,
            seed: 4,
        },
        sprites: vec![SpriteConfig {
            width: 16,
            height: 16,
            start: (20.0, 20.0),
            trajectory: Trajectory::Circular { radius: 14.0 },
            speed: 2.0,
            active: (20, 40),
            rgb: [210, 220, 200],
            texture_amplitude: 48,
            texture_seed: 8,
        }],
        seed: 2,
    };
    let video = generate("tmp", &scene).unwrap();
    let mut proc = StreamProcessor::new(RunConfig::desk()).unwrap();
    let mut e = Vec::new();
    let mut frames = Vec::new();
    run_stream(
        &mut proc,
        Source::Frames(FrameReader::from_frames(video.frames)),
        &mut Sinks::default(),
        |_, o| {
            e.push(o.record.e);
            frames.push(o.record.frame);
            Ok(())
        },
    )
    .unwrap();
    let mask = temporal_action_mask(&e, &TemporalMaskConfig::default());
    let active = frames.iter().zip(&mask).filter(|(_, &m)| m).map(|(&f, _)| f).collect();
    let tiou = temporal_iou(&active, (20, 40));
    assert!(tiou >= 0.5, "temporal IoU {tiou}, active {active:?}");
}

fn cell_boxes(seed: u64, n: usize) -> Vec<BoxProposal> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut cells: Vec<(usize, usize, usize)> = (0..8)
        .flat_map(|x| (0..8).flat_map(move |y| (1..4).map(move |s| (x, y, s))))
        .collect();
    cells.shuffle(&mut rng);
    for (x, y, s) in cells.into_iter().take(n) {
        let (x1, y1) = (x as f64 * 7.0 + s as f64 * 0.013, y as f64 * 7.0);
        out.push(BoxProposal::new(x1, y1, x1 + 8.0 + s as f64, y1 + 8.0, ProposalSource::Grid));
    }
    out
}

proptest! {
    #[test]
    fn attention_is_a_distribution(values in prop::collection::vec(-50.0f32..50.0, 64)) {
        let e = Tensor::new(vec![8, 8], values).unwrap();
        let a = error_attention(&e, 0).unwrap();
        prop_assert!(a.alpha.data().iter().all(|&v| v >= 0.0));
        prop_assert!((a.alpha.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn saliency_is_a_distribution(values in prop::collection::vec(0.0f32..1.0, 16)) {
        let total: f32 = values.iter().sum();
        prop_assume!(total > 0.0);
        let alpha = Tensor::new(vec![4, 4], values.iter().map(|v| v / total).collect()).unwrap();
        let s = gaze_saliency(&AttentionMap { frame_index: 0, alpha }, (32, 24)).unwrap();
        prop_assert_eq!(s.map.dims(), &[24, 32]);
        prop_assert!((s.map.sum() - 1.0).abs() < 1e-5);
        prop_assert!(s.gaze.0 < 32 && s.gaze.1 < 24);
    }

    #[test]
    fn selection_ignores_input_order(seed in any::<u64>(), n in 1usize..40, i in 0usize..8, j in 0usize..8) {
        let boxes = cell_boxes(seed, n);
        let att = one_hot(8, 8, i, j);
        let cfg = EnergyConfig { k: 5, ..EnergyConfig::default() };
        let want = select_topk(&boxes, &att, &[], &cfg, (64, 64)).unwrap();
        prop_assert!(want.len() == n.min(5));
        prop_assert!(want.windows(2).all(|w| w[0].energy <= w[1].energy));
        let mut shuffled = boxes.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
        let got = select_topk(&shuffled, &att, &[], &cfg, (64, 64)).unwrap();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn tubes_are_contiguous(picks in prop::collection::vec(prop::option::weighted(0.7, 0.0f64..30.0), 1..60), gap in 1usize..6) {
        let selections: Vec<Option<ScoredBox>> = picks
            .iter()
            .map(|p| p.map(|x| ScoredBox { bbox: BoxProposal::new(x, 0.0, x + 8.0, 8.0, ProposalSource::Grid), energy: x / 100.0 }))
            .collect();
        let tubes = link_tubes(selections.iter().enumerate().map(|(f, s)| (f, s.as_ref())), gap);
        let mut covered = 0;
        for t in &tubes {
            prop_assert!(t.is_contiguous());
            prop_assert!(t.entries.windows(2).all(|w| w[1].frame == w[0].frame + 1));
            covered += t.entries.iter().filter(|e| !e.interpolated).count();
        }
        prop_assert_eq!(covered, picks.iter().filter(|p| p.is_some()).count());
    }
}
