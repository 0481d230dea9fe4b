use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tryon_core::image::{dominant_hue, hue_distance, Image};
use tryon_core::refgen::service::{ServiceClient, ServiceDescriber, ServiceEditor};
use tryon_core::refgen::*;
use tryon_core::synthworld::*;
use tryon_core::Error;

fn records(n: usize, seed: u64) -> Vec<SampleRecord> {
    build_dataset(n, CategoryMix::default(), seed, BASE).unwrap()
}

fn pair(a: &str, b: &str) -> (String, String) {
    (a.to_string(), b.to_string())
}

#[test]
fn template_describer_output_parses_and_inverts_hair() {
    for r in records(20, 1) {
        let (pos, neg) = describe_appearance(&r.person, &mut TemplateDescriber, 0).unwrap();
        assert!(!pos.is_empty() && !neg.is_empty());
        let (skin, hair) = TemplateDescriber::read(&r.person).unwrap();
        let skin_name = SKIN_TONES.iter().find(|(_, c)| {
            c.iter().zip(&r.person_params.skin).all(|(a, b)| (a - b).abs() < 0.01)
        });
        assert_eq!(skin, skin_name.unwrap().0);
        assert!(neg.contains(&format!("{skin} skin")));
        assert!(pos.contains(&format!("{} skin", opposite_skin(skin))));
        match hair {
            Some(h) => {
                assert!(neg.contains(&format!("{h} hair")));
                assert!(pos.contains(&format!("{} hair", opposite_hair(h))));
                assert_ne!(h, opposite_hair(h));
            }
            None => assert_eq!(r.person_params.hair_style, 3),
        }
    }
}

#[test]
fn description_parser_fails_closed() {
    assert_eq!(parse_description("Positive: a. Negative: b.").unwrap(), pair("a", "b"));
    for raw in ["Positive: only this", "Negative: x", "Negative: x Positive: y", "Positive: Negative: x"] {
        match parse_description(raw) {
            Err(Error::DescriberParse { raw: kept, .. }) => assert_eq!(kept, raw),
            other => panic!("{raw:?} gave {other:?}"),
        }
    }
}

#[test]
fn prompts_follow_the_template() {
    let bank = DescriptionBank::builtin();
    let outfit = &bank.outfits[&Category::Dress][0];
    let p = assemble_prompts(&pair("tan skin", "fair skin"), "walking forward", outfit, "red dress", Category::Dress, &bank).unwrap();
    assert!(p.positive.contains("keep the red dress cloth unchanged"));
    assert!(p.positive.starts_with("tan skin, walking forward"));
    assert_eq!(p.negative, "fair skin");

    let p = assemble_prompts(&pair("tan skin", "fair skin"), "", outfit, "red dress", Category::Dress, &bank).unwrap();
    assert!(!p.positive.contains(", ,") && !p.positive.contains("  "));
    let again = assemble_prompts(&pair("tan skin", "fair skin"), "", outfit, "red dress", Category::Dress, &bank).unwrap();
    assert_eq!(p, again);

    let wrong = &bank.outfits[&Category::Upper][0];
    assert!(assemble_prompts(&pair("a", "b"), "", wrong, "red dress", Category::Dress, &bank).is_err());
}

#[test]
fn bank_rejects_self_describing_outfits_and_round_trips() {
    let bank = DescriptionBank::builtin();
    assert_eq!(DescriptionBank::parse(&bank.to_text()).unwrap(), bank);
    assert!(DescriptionBank::parse("[upper]\noutfit: a blue shirt\n").is_err());
    assert!(DescriptionBank::parse("[lower]\noutfit: a blue shirt\naction: sitting\n").is_ok());
    assert!(DescriptionBank::parse("outfit: before header\n").is_err());
    assert!(DescriptionBank::parse("[hat]\noutfit: x\n").is_err());
}

#[test]
fn dedup_basic_cases() {
    let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
    let f = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    for t in [0.1, 0.5, 1.0] {
        assert_eq!(dedup_features(&ids, &f, t).unwrap(), vec![0, 2]);
    }
    assert!(dedup_features(&ids, &f, 0.0).is_err());
    let z = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]];
    match dedup_features(&ids, &z, 0.9) {
        Err(Error::ZeroNormFeature(id)) => assert_eq!(id, "1"),
        other => panic!("{other:?}"),
    }
}

/// Exhaustive pairwise similarity table, then the same first-wins scan.
fn dedup_oracle(f: &[Vec<f64>], t: f64) -> Vec<usize> {
    let n = f.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let d: f64 = f[i].iter().zip(&f[j]).map(|(a, b)| a * b).sum();
            let ni: f64 = f[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nj: f64 = f[j].iter().map(|a| a * a).sum::<f64>().sqrt();
            sim[i][j] = d / (ni * nj);
        }
    }
    let mut dropped = vec![false; n];
    for i in 0..n {
        if dropped[i] {
            continue;
        }
        for j in i + 1..n {
            if !dropped[j] && sim[i][j] >= t {
                dropped[j] = true;
            }
        }
    }
    (0..n).filter(|&i| !dropped[i]).collect()
}

#[test]
fn dedup_matches_pairwise_oracle_and_ignores_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centers: Vec<Vec<f64>> = (0..10).map(|_| (0..6).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let feats: Vec<Vec<f64>> = (0..50)
        .map(|i| centers[i % 10].iter().map(|c| c + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let ids: Vec<String> = (0..50).map(|i| i.to_string()).collect();
    let kept = dedup_features(&ids, &feats, 0.9).unwrap();
    assert_eq!(kept, dedup_oracle(&feats, 0.9));
    assert!(kept.len() > 1 && kept.len() < 50);
    let scaled: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().map(|v| v * 13.0).collect()).collect();
    assert_eq!(dedup_features(&ids, &scaled, 0.9).unwrap(), kept);
}

#[test]
fn quality_filter_logs_and_is_order_independent() {
    let items: Vec<i32> = (0..20).collect();
    let even = |x: &i32| x % 2 == 0;
    let small = |x: &i32| *x < 12;
    let all = |_: &i32| true;
    let (kept, log) = quality_filter(&items, &[Predicate { name: "any", check: &all }]);
    assert_eq!(kept, (0..20).collect::<Vec<_>>());
    assert!(log.is_empty());
    let a = [Predicate { name: "even", check: &even }, Predicate { name: "small", check: &small }];
    let b = [Predicate { name: "small", check: &small }, Predicate { name: "even", check: &even }];
    let (ka, la) = quality_filter(&items, &a);
    let (kb, _) = quality_filter(&items, &b);
    assert_eq!(ka, kb);
    assert_eq!(ka, vec![0, 2, 4, 6, 8, 10]);
    assert!(la.contains(&(13, "even".to_string())) && la.contains(&(13, "small".to_string())));
}

#[test]
fn back_facing_candidates_are_rejected_by_name() {
    let r = &records(1, 4)[0];
    let cand = Candidate {
        garment_idx: 0,
        garment: r.garment,
        target_person: r.person_params,
        prompts: PromptPair { positive: "p".into(), negative: "n".into() },
        edited: Edited { image: r.reference.clone().unwrap(), person: Some(r.reference_person), flags: vec!["back-facing".into()] },
    };
    let preds = [Predicate { name: "not-back-facing", check: &not_back_facing }];
    let (kept, log) = quality_filter(std::slice::from_ref(&cand), &preds);
    assert!(kept.is_empty());
    assert_eq!(log, vec![(0, "not-back-facing".to_string())]);
}

#[test]
fn synthetic_editor_respects_reference_requirements() {
    let mut editor = SyntheticEditor { back_facing_rate: 0.0 };
    let bank = DescriptionBank::builtin();
    for (i, r) in records(40, 5).iter().enumerate() {
        let appearance = describe_appearance(&r.person, &mut TemplateDescriber, 0).unwrap();
        let prompts = assemble_prompts(&appearance, "standing with arms raised", "", &r.garment.name(), r.category(), &bank).unwrap();
        let req = EditRequest { image: &r.person, prompts: &prompts, seed: i as u64, world: Some((r.person_params, r.garment)) };
        let out = editor.edit(&req).unwrap();
        let p = out.person.unwrap();
        assert!(p.differing_fields(&r.person_params) >= 2);
        if r.category() == Category::Upper {
            assert_ne!(p.outfit_lower, r.person_params.outfit_lower);
        }
        assert_eq!(out.image, render_person(&p, &r.garment));
        let hue = dominant_hue(&out.image, &garment_mask(&p, &r.garment), 0.15).unwrap();
        assert!(hue_distance(hue, r.garment.hue()) <= 0.05);
    }
}

#[test]
fn reference_set_generation_is_reproducible() {
    let recs = records(12, 6);
    let run = |dir: &std::path::Path| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        generate_reference_set(
            &recs,
            &mut SyntheticEditor::default(),
            &mut TemplateDescriber,
            &DescriptionBank::builtin(),
            &PatchHistogramExtractor::default(),
            &RefgenConfig::default(),
            dir,
            &mut rng,
        )
        .unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ea = run(a.path());
    let eb = run(b.path());
    assert_eq!(ea.len(), 12);
    let ma = std::fs::read_to_string(a.path().join(PAIR_MANIFEST)).unwrap();
    assert_eq!(ma, std::fs::read_to_string(b.path().join(PAIR_MANIFEST)).unwrap());
    assert_eq!(ea.iter().map(|e| e.kept).collect::<Vec<_>>(), eb.iter().map(|e| e.kept).collect::<Vec<_>>());
    // one reference file per surviving garment
    for e in &ea {
        assert_eq!(e.kept, e.reference_path.as_ref().is_some_and(|p| p.is_file()));
        if e.kept {
            let img = Image::load_png(e.reference_path.as_ref().unwrap()).unwrap();
            assert_eq!((img.height, img.width), (BASE, BASE));
        }
    }
    assert!(ea.iter().filter(|e| e.kept).count() >= 8, "{ma}");
}

struct FailingEditor;

impl Editor for FailingEditor {
    fn edit(&mut self, request: &EditRequest<'_>) -> tryon_core::Result<Edited> {
        if request.seed % 2 == 0 {
            Err(Error::Service("boom".into()))
        } else {
            SyntheticEditor { back_facing_rate: 0.0 }.edit(request)
        }
    }
}

#[test]
fn editor_failures_are_logged_and_skipped() {
    let recs = records(10, 7);
    let dir = tempfile::tempdir().unwrap();
    let entries = generate_reference_set(
        &recs,
        &mut FailingEditor,
        &mut TemplateDescriber,
        &DescriptionBank::builtin(),
        &PatchHistogramExtractor::default(),
        &RefgenConfig::default(),
        dir.path(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    assert_eq!(entries.len(), 10);
    let failed = entries.iter().filter(|e| e.reason.starts_with("editor failed")).count();
    assert!(failed > 0 && failed < 10);
    assert!(entries.iter().any(|e| e.kept));
}

#[test]
fn patch_histogram_features_separate_distinct_references() {
    let recs = records(30, 8);
    let ex = PatchHistogramExtractor::default();
    let items: Vec<(String, Image)> = recs.iter().map(|r| (r.idx.to_string(), r.reference.clone().unwrap())).collect();
    let kept = dedup_by_features(&items, &ex, 0.95).unwrap();
    assert!(kept.len() >= 25, "kept {}", kept.len());
    let mut dup = items.clone();
    dup.push(("copy".into(), items[3].1.clone()));
    assert_eq!(dedup_by_features(&dup, &ex, 0.95).unwrap(), kept);
    let blank = vec![("blank".to_string(), Image::filled(BASE, BASE, &BACKGROUND))];
    assert!(matches!(dedup_by_features(&blank, &ex, 0.95), Err(Error::ZeroNormFeature(_))));
}

#[test]
fn socket_services_round_trip() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let work = tempfile::tempdir().unwrap();
    let out_path = work.path().join("service_out.png");
    let out_for_server = out_path.clone();
    let server = std::thread::spawn(move || {
        for (i, stream) in listener.incoming().take(3).enumerate() {
            let stream = stream.unwrap();
            let mut line = String::new();
            BufReader::new(&stream).read_line(&mut line).unwrap();
            let req: serde_json::Value = serde_json::from_str(&line).unwrap();
            let reply = if req.get("instruction").is_some() {
                serde_json::json!({"text": "Positive: tan skin. Negative: fair skin."})
            } else if i == 1 {
                let img = Image::load_png(std::path::Path::new(req["image_path"].as_str().unwrap())).unwrap();
                let mut inv = img.clone();
                inv.data.iter_mut().for_each(|v| *v = 1.0 - *v);
                inv.save_png(&out_for_server).unwrap();
                assert!(req["positive"].as_str().unwrap().contains("keep"));
                serde_json::json!({"image_path": out_for_server})
            } else {
                serde_json::json!({"error": "model not loaded"})
            };
            (&stream).write_all(format!("{reply}\n").as_bytes()).unwrap();
        }
    });
    let client = ServiceClient::new(addr, work.path());
    let img = Image::filled(BASE, BASE, &[0.2, 0.4, 0.6]);
    let mut describer = ServiceDescriber(client.clone());
    assert_eq!(describe_appearance(&img, &mut describer, 0).unwrap(), pair("tan skin", "fair skin"));
    let mut editor = ServiceEditor(client);
    let prompts = PromptPair { positive: "x, keep the red top cloth unchanged".into(), negative: "y".into() };
    let req = EditRequest { image: &img, prompts: &prompts, seed: 1, world: None };
    let out = editor.edit(&req).unwrap();
    assert!((out.image.pixel(0, 0)[0] - 0.8).abs() < 0.01);
    assert!(matches!(editor.edit(&req), Err(Error::Service(m)) if m.contains("model not loaded")));
    server.join().unwrap();
}
