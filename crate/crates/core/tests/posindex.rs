use proptest::prelude::*;
use tryon_core::model::TokenSequence;
use tryon_core::posindex::*;
use tryon_core::tensor::Mat;

fn index_at(points: &[[f64; 3]]) -> PositionIndex {
    PositionIndex {
        entries: points.iter().map(|p| PositionEntry { id: p[0] as u8, row: p[1], col: p[2] }).collect(),
        blocks: Vec::new(),
    }
}

/// Rotates with the id coordinate taken as a real, so the oracle can use
/// fractional shifts on every axis.
fn rope_real(v: &[f64], coords: [f64; 3], base: f64) -> Vec<f64> {
    let layout = axis_layout(v.len()).unwrap();
    let mut out = v.to_vec();
    let mut offset = 0;
    for (axis, &w) in layout.iter().enumerate() {
        for k in 0..w / 2 {
            let theta = coords[axis] * base.powf(-2.0 * k as f64 / w as f64);
            let (c, s) = (theta.cos(), theta.sin());
            // explicit 2x2 rotation matrix times the slice
            let m = [[c, -s], [s, c]];
            let x = [v[offset + 2 * k], v[offset + 2 * k + 1]];
            out[offset + 2 * k] = m[0][0] * x[0] + m[0][1] * x[1];
            out[offset + 2 * k + 1] = m[1][0] * x[0] + m[1][1] * x[1];
        }
        offset += w;
    }
    out
}

fn rope_one(v: &[f64], coords: [f64; 3]) -> Vec<f64> {
    let rotary = Rotary::new(v.len(), 10_000.0).unwrap();
    let seq = TokenSequence::new(Mat::from_vec(1, v.len(), v.to_vec()), index_at(&[coords])).unwrap();
    apply_rope(&seq, &rotary).unwrap().tokens.data
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn zero_position_is_identity() {
    let v: Vec<f64> = (0..12).map(|i| i as f64 - 5.5).collect();
    assert_eq!(rope_one(&v, [0.0; 3]), v);
}

#[test]
fn quarter_turn_swaps_components() {
    // width 6: one pair per axis, frequency 1 on each
    let v = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let out = rope_one(&v, [0.0, std::f64::consts::FRAC_PI_2, 0.0]);
    assert!(out[2].abs() < 1e-15);
    assert!((out[3] - 1.0).abs() < 1e-15);
    let out = rope_one(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0], [0.0, std::f64::consts::FRAC_PI_2, 0.0]);
    assert!((out[2] + 1.0).abs() < 1e-15 && out[3].abs() < 1e-15);
}

#[test]
fn eight_wide_token_matches_rotation_oracle() {
    let v = [0.3, -1.2, 0.7, 2.1, -0.4, 0.9, 1.5, -0.8];
    let got = rope_one(&v, [1.0, 2.0, 3.0]);
    let want = rope_real(&v, [1.0, 2.0, 3.0], 10_000.0);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn width_mismatch_is_rejected() {
    let rotary = Rotary::new(12, 10_000.0).unwrap();
    let seq = TokenSequence::new(Mat::from_vec(1, 8, vec![0.0f64; 8]), index_at(&[[0.0; 3]])).unwrap();
    assert!(apply_rope(&seq, &rotary).is_err());
    assert!(Rotary::new(10, 10_000.0).is_ok());
    assert!(Rotary::new(9, 10_000.0).is_err());
}

#[test]
fn model_grids_have_expected_layout() {
    // 8x8 noisy target, 8x8 person and cloth, reference pooled to 4x4
    let idx = build_position_index(
        GridSpec::new(8, 8, ConditionSlot::Noise),
        &[
            GridSpec::new(8, 8, ConditionSlot::Person),
            GridSpec::new(8, 8, ConditionSlot::Cloth),
            GridSpec::new(4, 4, ConditionSlot::Reference),
        ],
    )
    .unwrap();
    assert_eq!(idx.len(), 64 * 3 + 16);
    let r = idx.block(3).unwrap();
    let last = idx.entries[r.end() - 1];
    assert_eq!((last.id, last.row, last.col), (3, 6.0, 6.0));
    for (i, e) in idx.entries[..64].iter().enumerate() {
        assert_eq!((e.id, e.row, e.col), (0, (i / 8) as f64, (i % 8) as f64));
    }
}

fn grids() -> impl Strategy<Value = (GridSpec, Vec<GridSpec>)> {
    let dims = (1usize..6, 1usize..6);
    (dims.clone(), proptest::collection::vec(dims, 0..=3), any::<u8>()).prop_map(|((r, c), conds, perm)| {
        let mut ids = vec![1u8, 2, 3];
        ids.rotate_left((perm % 3) as usize);
        let conds = conds.into_iter().zip(ids).map(|((r, c), id)| GridSpec { rows: r, cols: c, condition_id: id }).collect();
        (GridSpec { rows: r, cols: c, condition_id: 0 }, conds)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rope_preserves_norm(v in proptest::collection::vec(-5.0f64..5.0, 12), p in proptest::array::uniform3(-20.0f64..20.0)) {
        let out = rope_one(&v, [p[0].abs().floor(), p[1], p[2]]);
        prop_assert!((dot(&out, &out).sqrt() - dot(&v, &v).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn rope_dot_depends_on_offset_only(
        q in proptest::collection::vec(-2.0f64..2.0, 18),
        k in proptest::collection::vec(-2.0f64..2.0, 18),
        p1 in proptest::array::uniform3(-10.0f64..10.0),
        p2 in proptest::array::uniform3(-10.0f64..10.0),
        delta in proptest::array::uniform3(-10.0f64..10.0),
    ) {
        let a = dot(&rope_real(&q, p1, 10_000.0), &rope_real(&k, p2, 10_000.0));
        let shift = |p: [f64; 3]| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]];
        let b = dot(&rope_real(&q, shift(p1), 10_000.0), &rope_real(&k, shift(p2), 10_000.0));
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn rope_oracle_agrees_with_library(v in proptest::collection::vec(-3.0f64..3.0, 8..=24), p in proptest::array::uniform3(0.0f64..8.0)) {
        prop_assume!(v.len() % 2 == 0 && v.len() >= 6);
        let p = [p[0].floor(), p[1], p[2]];
        let got = rope_one(&v, p);
        let want = rope_real(&v, p, 10_000.0);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn index_is_deterministic_and_well_formed((target, conds) in grids()) {
        let a = build_position_index(target, &conds).unwrap();
        let b = build_position_index(target, &conds).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), target.tokens() + conds.iter().map(|g| g.tokens()).sum::<usize>());
        let mut start = 0;
        for g in std::iter::once(&target).chain(&conds) {
            for i in 0..g.tokens() {
                let e = a.entries[start + i];
                prop_assert_eq!(e.id, g.condition_id);
                let (r, c) = ((i / g.cols) as f64, (i % g.cols) as f64);
                prop_assert_eq!(e.row, r * target.rows as f64 / g.rows as f64);
                prop_assert_eq!(e.col, c * target.cols as f64 / g.cols as f64);
            }
            start += g.tokens();
        }
    }

    #[test]
    fn integer_upscaling_lands_on_target_points(rows in 1usize..6, cols in 1usize..6, f in 1usize..4) {
        let target = GridSpec::new(rows, cols, ConditionSlot::Noise);
        let cond = GridSpec::new(rows * f, cols * f, ConditionSlot::Cloth);
        let idx = build_position_index(target, &[cond]).unwrap();
        let cloth = &idx.entries[target.tokens()..];
        for r in (0..rows * f).step_by(f) {
            for c in (0..cols * f).step_by(f) {
                let e = cloth[r * cond.cols + c];
                prop_assert_eq!((e.row, e.col), ((r / f) as f64, (c / f) as f64));
            }
        }
    }
}
