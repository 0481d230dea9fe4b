use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tryon_core::image::{dominant_hue, hue_distance};
use tryon_core::synthworld::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn garment(category: Category, seed: u64) -> GarmentParams {
    GarmentParams::random(category, &mut rng(seed))
}

fn leg_or_torso_rows(mask: &[bool], r0: usize, r1: usize) -> bool {
    mask.iter().enumerate().filter(|(_, &m)| m).all(|(i, _)| (r0..r1).contains(&(i / BASE)))
}

#[test]
fn rendering_is_deterministic() {
    let p = PersonParams::random(BASE, &mut rng(1));
    let g = garment(Category::Upper, 2);
    assert_eq!(render_person(&p, &g), render_person(&p, &g));
    assert_eq!(render_pose_map(&p), render_pose_map(&p));
}

#[test]
fn translucency_only_changes_garment_region() {
    for (seed, cat) in [(3, Category::Upper), (4, Category::Lower), (5, Category::Dress)] {
        let p = PersonParams::random(BASE, &mut rng(seed));
        let g = GarmentParams { translucent: false, ..garment(cat, seed + 10) };
        let a = render_person(&p, &g);
        let b = render_person(&p, &g.twin());
        let region = category_mask(cat, BASE);
        let mut changed = 0;
        for (i, (x, y)) in a.data.chunks_exact(3).zip(b.data.chunks_exact(3)).enumerate() {
            if x != y {
                assert!(region[i], "{cat:?}: pixel {i} outside the category region changed");
                changed += 1;
            }
        }
        assert!(changed > 0);
    }
}

#[test]
fn length_scales_covered_rows() {
    let p = PersonParams::random(BASE, &mut rng(6));
    for cat in Category::ALL {
        let base = GarmentParams { pattern: Pattern::Solid, ..garment(cat, 7) };
        let rows = |len: f32| {
            let mask = garment_mask(&p, &GarmentParams { length: len, ..base });
            (0..BASE).filter(|r| (0..BASE).any(|c| mask[r * BASE + c])).count() as f32
        };
        let (full, half) = (rows(1.0), rows(0.5));
        assert!((half - full * 0.5).abs() <= 1.0, "{cat:?}: {full} vs {half}");
    }
}

#[test]
fn agnostic_matches_target_off_mask_and_grey_on_mask() {
    let p = PersonParams::random(BASE, &mut rng(8));
    for cat in Category::ALL {
        let g = garment(cat, 9);
        let target = render_person(&p, &g);
        let (agn, mask) = render_agnostic(&p, &g);
        for (i, (a, t)) in agn.data.chunks_exact(3).zip(target.data.chunks_exact(3)).enumerate() {
            if mask[i] {
                assert!(a.iter().all(|&v| (v - 0.5).abs() < 1.0 / 255.0));
            } else {
                assert_eq!(a, t);
            }
        }
    }
}

#[test]
fn category_masks_have_documented_geometry() {
    let upper = category_mask(Category::Upper, BASE);
    let lower = category_mask(Category::Lower, BASE);
    let dress = category_mask(Category::Dress, BASE);
    // the upper region never reaches the leg rows
    assert!(leg_or_torso_rows(&upper, 10, 20));
    assert!(leg_or_torso_rows(&lower, 20, 32));
    assert!(upper.iter().zip(&lower).all(|(a, b)| !(a & b)));
    let frac = |m: &[bool]| m.iter().filter(|&&v| v).count() as f64 / m.len() as f64;
    assert!((0.10..0.13).contains(&frac(&upper)));
    assert!((0.13..0.15).contains(&frac(&lower)));
    assert!((0.25..0.27).contains(&frac(&dress)));
    let big = category_mask(Category::Dress, 2 * BASE);
    assert!((frac(&big) - frac(&dress)).abs() < 1e-12);
}

#[test]
fn garments_stay_inside_their_category_region() {
    for seed in 0..30 {
        let p = PersonParams::random(BASE, &mut rng(100 + seed));
        for cat in Category::ALL {
            let g = garment(cat, 200 + seed);
            let covered = garment_mask(&p, &g);
            let region = category_mask(cat, BASE);
            assert!(covered.iter().zip(&region).all(|(&c, &r)| !c || r), "{cat:?} seed {seed}");
        }
    }
}

#[test]
fn reference_preserves_garment_hue_and_changes_person() {
    let mut r = rng(10);
    for seed in 0..40 {
        let target_person = PersonParams::random(BASE, &mut r);
        let g = garment(Category::ALL[seed % 3], 300 + seed as u64);
        let (reference, other) = make_reference(&g, &target_person, &mut r);
        assert!(other.differing_fields(&target_person) >= 2);
        if g.category == Category::Upper {
            assert_ne!(other.outfit_lower, target_person.outfit_lower);
        }
        let mask = garment_mask(&other, &g);
        let hue = dominant_hue(&reference, &mask, 0.2).expect("saturated garment pixels");
        assert!(hue_distance(hue, g.hue()) <= 0.05, "hue {hue} vs {}", g.hue());
    }
}

#[test]
fn flat_cloth_hides_translucency_but_worn_render_shows_it() {
    let p = PersonParams::random(BASE, &mut rng(11));
    let g = GarmentParams { translucent: true, ..garment(Category::Upper, 12) };
    assert_eq!(render_cloth(&g, BASE), render_cloth(&g.twin(), BASE));
    let sheer = render_person(&p, &g);
    let opaque = render_person(&p, &g.twin());
    assert_ne!(sheer, opaque);
    // blended pixel = 0.5 * garment + 0.5 * grey level of the skin below
    let lum = tryon_core::image::luma(&p.skin);
    let (r, c) = (19, 11);
    let want: Vec<f32> = opaque.pixel(r, c).iter().map(|v| 0.5 * v + 0.5 * lum).collect();
    for (a, b) in sheer.pixel(r, c).iter().zip(want) {
        assert!((a - b).abs() <= 1.0 / 255.0);
    }
    assert!(classify_translucency(&sheer, &p, &g));
    assert!(!classify_translucency(&opaque, &p, &g));
}

#[test]
fn pose_map_ignores_garments() {
    let p = PersonParams::random(BASE, &mut rng(13));
    let d = render_pose_map(&p);
    for seed in 0..5 {
        let mut q = p;
        q.outfit_upper = garment(Category::Upper, seed);
        q.outfit_lower = garment(Category::Lower, seed + 50);
        assert_eq!(render_pose_map(&q), d);
    }
}

#[test]
fn records_satisfy_the_oracle() {
    let recs = build_dataset(20, CategoryMix::default(), 5, BASE).unwrap();
    for r in &recs {
        assert_eq!(r.target, render_person(&r.person_params, &r.garment));
        assert_eq!(r.reference.as_ref().unwrap(), &render_person(&r.reference_person, &r.garment));
        assert_eq!(r.pose, render_pose_map(&r.person_params));
    }
}

#[test]
fn category_mix_is_respected() {
    let recs = build_dataset(30, CategoryMix::new(1.0, 0.0, 0.0).unwrap(), 1, BASE).unwrap();
    assert!(recs.iter().all(|r| r.category() == Category::Upper));
    let recs = build_dataset(30, CategoryMix::new(0.0, 0.0, 1.0).unwrap(), 1, BASE).unwrap();
    assert!(recs.iter().all(|r| r.category() == Category::Dress));
    assert!(CategoryMix::new(0.5, 0.2, 0.2).is_err());
    assert!(CategoryMix::parse("0.5,0.5").is_err());
    assert_eq!(CategoryMix::parse("0.2, 0.3, 0.5").unwrap(), CategoryMix::new(0.2, 0.3, 0.5).unwrap());
}

#[test]
fn translucency_draw_is_balanced() {
    let recs = build_dataset(1000, CategoryMix::default(), 77, BASE).unwrap();
    let frac = recs.iter().filter(|r| r.garment.translucent).count() as f64 / 1000.0;
    assert!((frac - 0.5).abs() <= 0.05, "translucent fraction {frac}");
}

#[test]
fn dataset_files_are_reproducible_and_round_trip() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let recs = build_dataset(10, CategoryMix::default(), 42, BASE).unwrap();
    write_dataset(&recs, a.path(), "train").unwrap();
    write_dataset(&build_dataset(10, CategoryMix::default(), 42, BASE).unwrap(), b.path(), "train").unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path().join("train")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 10 * ROLES.len() + 1);
    for n in &names {
        let x = std::fs::read(a.path().join("train").join(n)).unwrap();
        let y = std::fs::read(b.path().join("train").join(n)).unwrap();
        assert_eq!(x, y, "{n:?} differs");
    }
    let back = read_dataset(a.path(), "train").unwrap();
    assert_eq!(back, recs);
}

#[test]
fn missing_files_are_reported_by_path() {
    let dir = tempfile::tempdir().unwrap();
    let recs = build_dataset(2, CategoryMix::default(), 1, BASE).unwrap();
    write_dataset(&recs, dir.path(), "test").unwrap();
    std::fs::remove_file(role_path(&dir.path().join("test"), 1, "cloth")).unwrap();
    let err = read_dataset(dir.path(), "test").unwrap_err().to_string();
    assert!(err.contains("1_cloth.png"), "{err}");
    let err = read_dataset(dir.path(), "nope").unwrap_err().to_string();
    assert!(err.contains("nope"), "{err}");
}
