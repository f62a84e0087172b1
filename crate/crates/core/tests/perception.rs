use proptest::prelude::*;

use actloc_core::encoder::{Encoder, EncoderConfig};
use actloc_core::frame::Frame;
use actloc_core::proposals::{connected_components, framediff_proposals, grid_proposals, BoxProposal, ProposalSource};
use actloc_core::synth::{generate, Background, SceneConfig, SpriteConfig, Trajectory};

fn scene(mut sprites: Vec<SpriteConfig>, length: usize) -> SceneConfig {
    for s in &mut sprites {
        s.active = (0, length - 1);
    }
    SceneConfig {
        width: 64,
        height: 64,
        length,
        background: Background::Flat { rgb: [30, 30, 30] },
        sprites,
        seed: 0,
    }
}

fn sprite(start: (f64, f64), trajectory: Trajectory, speed: f64) -> SpriteConfig {
    SpriteConfig {
        width: 12,
        height: 12,
        start,
        trajectory,
        speed,
        active: (0, 100),
        rgb: [220, 210, 200],
        texture_amplitude: 0,
        texture_seed: 1,
    }
}

/// Desk stack (3/s2, 3/s2, 3/s1 + pool 2) seen from one output cell: each
/// cell `c` covers input pixels `[8c - 4, 8c + 15)`.
fn desk_field(c: usize) -> (i64, i64) {
    let c = c as i64;
    (8 * c - 4, 8 * c + 15)
}

#[test]
fn desk_receptive_fields_by_hand() {
    let enc = Encoder::new(EncoderConfig::desk()).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let (x0, x1) = desk_field(i);
            let (y0, y1) = desk_field(j);
            assert_eq!(enc.receptive_field_unclipped(i, j), (x0, y0, x1, y1));
        }
    }
}

#[test]
fn moving_sprite_changes_exactly_the_overlapping_cells() {
    let cfg = scene(vec![sprite((30.0, 20.0), Trajectory::Linear { angle: 0.0 }, 3.0)], 2);
    let video = generate("rf", &cfg).unwrap();
    let (a, b) = (&video.frames[0], &video.frames[1]);
    let enc = Encoder::new(EncoderConfig::desk()).unwrap();
    let fa = enc.encode_frame(a, 0).unwrap();
    let fb = enc.encode_frame(b, 1).unwrap();
    let changed: Vec<(usize, usize)> = (0..64)
        .flat_map(|y| (0..64).map(move |x| (x, y)))
        .filter(|&(x, y)| a.pixel(x, y) != b.pixel(x, y))
        .collect();
    assert!(!changed.is_empty());
    let depth = fa.dims().depth;
    for i in 0..8 {
        for j in 0..8 {
            let (x0, x1) = desk_field(i);
            let (y0, y1) = desk_field(j);
            let sees = changed
                .iter()
                .any(|&(x, y)| (x0..x1).contains(&(x as i64)) && (y0..y1).contains(&(y as i64)));
            let at = (i * 8 + j) * depth;
            let moved = fa.values().data()[at..at + depth] != fb.values().data()[at..at + depth];
            assert_eq!(sees, moved, "cell ({i}, {j})");
        }
    }
}

#[test]
fn four_pixel_move_is_boxed() {
    let mut s = sprite((20.0, 24.0), Trajectory::Linear { angle: 0.0 }, 4.0);
    s.width = 16;
    s.height = 16;
    s.texture_amplitude = 48;
    let video = generate("move", &scene(vec![s.clone()], 2)).unwrap();
    let old = s.bbox(0, (64, 64));
    let new = s.bbox(1, (64, 64));
    let union = BoxProposal::new(
        old.x1.min(new.x1),
        old.y1.min(new.y1),
        old.x2.max(new.x2),
        old.y2.max(new.y2),
        ProposalSource::External,
    );
    let boxes = framediff_proposals(&video.frames[0], &video.frames[1], 25, 16).unwrap();
    let best = boxes.iter().map(|b| b.iou(&union)).fold(0.0, f64::max);
    assert!(best >= 0.5, "best IoU {best} over {boxes:?}");
}

#[test]
fn two_separated_sprites_are_two_components() {
    let sprites = [
        sprite((6.0, 6.0), Trajectory::Linear { angle: 0.0 }, 3.0),
        sprite((40.0, 44.0), Trajectory::Linear { angle: 180.0 }, 3.0),
    ];
    let mut mask = vec![false; 64 * 64];
    let mut swept = Vec::new();
    for s in &sprites {
        let (a, b) = (s.bbox(0, (64, 64)), s.bbox(1, (64, 64)));
        let r = (a.x1.min(b.x1) as usize, a.y1.min(b.y1) as usize, a.x2.max(b.x2) as usize, a.y2.max(b.y2) as usize);
        for y in r.1..r.3 {
            for x in r.0..r.2 {
                mask[y * 64 + x] = true;
            }
        }
        swept.push(r);
    }
    let comps = connected_components(&mask, 64, 64);
    assert_eq!(comps.len(), 2);
    for (c, r) in comps.iter().zip(&swept) {
        assert_eq!((c.0, c.1, c.2, c.3), *r);
        assert_eq!(c.4, (r.2 - r.0) * (r.3 - r.1));
    }
}

fn check_bounds(boxes: &[BoxProposal], w: usize, h: usize) -> Result<(), TestCaseError> {
    for b in boxes {
        prop_assert!(b.validate(w, h).is_ok(), "{b:?} in {w}x{h}");
        prop_assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w as f64 && b.y2 <= h as f64);
        prop_assert!(b.x2 > b.x1 && b.y2 > b.y1);
    }
    Ok(())
}

proptest! {
    #[test]
    fn grid_boxes_stay_inside(
        w in 8usize..96, h in 8usize..96,
        scales in prop::collection::vec(4usize..48, 1..4),
        stride in 0.2f64..1.5,
    ) {
        let scales: Vec<usize> = scales.into_iter().filter(|&s| s <= w.min(h)).collect();
        prop_assume!(!scales.is_empty());
        let boxes = grid_proposals(w, h, &scales, stride).unwrap();
        check_bounds(&boxes, w, h)?;
    }

    #[test]
    fn motion_boxes_stay_inside(
        w in 4usize..40, h in 4usize..40,
        seed in any::<u64>(), threshold in 0u8..100, min_area in 0usize..10,
    ) {
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 24) as u8
        };
        let a = Frame::new(w, h, (0..w * h * 3).map(|_| next()).collect()).unwrap();
        let b = Frame::new(w, h, (0..w * h * 3).map(|_| next()).collect()).unwrap();
        let boxes = framediff_proposals(&a, &b, threshold, min_area).unwrap();
        check_bounds(&boxes, w, h)?;
    }
}
