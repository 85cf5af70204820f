//! Acceptance suite: one line per criterion, nonzero exit if any fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use afford_core::demo::{write_demo, DemoSpec};
use afford_core::features::{best_match, normalize_features, DenseFeatureMap, Embedding};
use afford_core::formats::{
    decode_depth, decode_embedding, decode_feature_map, decode_mask, encode_depth, encode_embedding,
    encode_feature_map, encode_mask, load_depth, load_embedding, load_feature_map, load_mask, save_depth,
    save_embedding, save_feature_map, save_mask,
};
use afford_core::geometry::{crop_cloud, depth_to_cloud, estimate_normals, DepthImage, PointCloud};
use afford_core::lift::{cluster_normals, lift_affordance, select_grasp, GraspCandidate, LiftParams};
use afford_core::memory::{load_memory, save_memory, AffordanceMemory};
use afford_core::retrieval::{geometric_retrieve, semantic_filter, GeometricCandidate, RetrievalQuery};
use afford_core::synth::{make_coordinate_features, Affine2, CoordinateFeatureSpec};
use afford_core::transfer::{ransac_line, transfer_affordance, TransferParams};
use afford_core::{AffordanceEntry, Error};
use nalgebra::{Point2, Point3, Vector2};
use rand::seq::SliceRandom;
use rand::Rng;

use common::*;

type Outcome = (bool, String);

fn identity_retrieval() -> Outcome {
    let start = Instant::now();
    let mut hits = 0;
    let mut zero = 0;
    let trials = 50;
    for seed in 0..trials {
        let mut r = rng(1000 + seed);
        let (g, c, scale) = (24, 32, 2);
        let target = random_map(&mut r, g, g, c, scale);
        let tmask = random_mask(&mut r, g * scale, g * scale, 0.6);
        let n = 20;
        let own = r.random_range(0..n);
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for i in 0..n {
            if i == own {
                maps.push(target.clone());
                masks.push(Some(tmask.clone()));
            } else if i % 2 == 0 {
                // near-duplicate of the target
                let data: Vec<f32> = target
                    .data()
                    .iter()
                    .map(|x| x + r.random_range(-0.05..0.05f32))
                    .collect();
                maps.push(normalize_features(DenseFeatureMap::new(g, g, c, g * scale, g * scale, false, data).unwrap()).0);
                masks.push(Some(tmask.clone()));
            } else {
                maps.push(random_map(&mut r, g, g, c, scale));
                masks.push(None);
            }
        }
        let entries: Vec<AffordanceEntry> = (0..n)
            .map(|i| entry(&format!("e{i:02}"), "t", vec![1.0], vec![1.0], g * scale, g * scale))
            .collect();
        let cands: Vec<GeometricCandidate> = (0..n)
            .map(|i| GeometricCandidate { entry: &entries[i], map: &maps[i], mask: masks[i].as_ref() })
            .collect();
        let (best, scores) = geometric_retrieve(&cands, &target, Some(&tmask)).unwrap();
        hits += (best == own) as usize;
        zero += (scores[own].imd == 0.0) as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    (
        hits == trials as usize && zero == trials as usize && secs < 10.0,
        format!("top-1 {hits}/{trials}, IMD exactly 0 in {zero}/{trials}, {secs:.2} s"),
    )
}

fn track_entry(contact: Point2<f64>, dir: Vector2<f64>, size: usize) -> AffordanceEntry {
    let mut e = entry("src", "t", vec![1.0], vec![1.0], size, size);
    e.waypoints = (0..6).map(|i| contact + dir * (2.0 * i as f64)).collect();
    e
}

fn warp_transfer() -> Outcome {
    let g = 64usize;
    let params = TransferParams { masked_search: false, ..TransferParams::default() };

    let mut exact = 0;
    let trials = 100;
    for seed in 0..trials {
        let mut r = rng(2000 + seed);
        let (dx, dy) = (r.random_range(-10..=10i32), r.random_range(-10..=10i32));
        let spec = CoordinateFeatureSpec::new(g, g, 32, Affine2::translation(dx as f64, dy as f64), seed);
        let (src, tgt) = make_coordinate_features(&spec).unwrap();
        let contact = Point2::new(r.random_range(12..52) as f64, r.random_range(12..52) as f64);
        let dir = Vector2::new(dx.signum() as f64, 1.0).normalize();
        let e = track_entry(contact, dir, g);
        let a = transfer_affordance(&e, &src, &tgt, None, &params).unwrap();
        let truth = Point2::new(contact.x + dx as f64, contact.y + dy as f64);
        exact += (a.contact == truth) as usize;
    }

    let mut within = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut r = rng(3000 + seed);
        let angle = r.random_range(-10.0..10.0f64).to_radians();
        let scale = r.random_range(0.95..1.05);
        let center = Point2::new((g as f64 - 1.0) / 2.0, (g as f64 - 1.0) / 2.0);
        let shift = Vector2::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0));
        let warp = Affine2::similarity(angle, scale, center, shift);
        let (src, tgt) = make_coordinate_features(&CoordinateFeatureSpec::new(g, g, 32, warp, seed)).unwrap();
        let contact = Point2::new(r.random_range(20..44) as f64, r.random_range(20..44) as f64);
        let e = track_entry(contact, Vector2::new(1.0, 0.5).normalize(), g);
        let a = transfer_affordance(&e, &src, &tgt, None, &params).unwrap();
        let err = (a.contact - warp.apply(&contact)).norm();
        worst = worst.max(err);
        within += (err <= 3.0) as usize;
    }
    (
        exact == trials as usize && within == trials as usize,
        format!("translations exact {exact}/{trials}; affine within 3 px {within}/{trials} (worst {worst:.3} px)"),
    )
}

fn ransac_robustness() -> Outcome {
    // 21 waypoints 4 px apart inside a 256 x 256 image, 9 mismatches
    // scattered uniformly over the image at random times
    let trials = 100;
    let (mut close, mut contract) = (0, 0);
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut r = rng(4000 + seed);
        let n = 30;
        let n_in = 21;
        let theta = r.random_range(0.0..std::f64::consts::TAU);
        let dir = Vector2::new(theta.cos(), theta.sin());
        let origin = Point2::new(128.0, 128.0) - dir * 40.0;
        let mut slots: Vec<bool> = (0..n).map(|i| i < n_in).collect();
        slots.shuffle(&mut r);
        let mut step = 0;
        let pts: Vec<Point2<f64>> = slots
            .iter()
            .map(|&inlier| {
                if inlier {
                    let p = origin + dir * (4.0 * step as f64);
                    step += 1;
                    p
                } else {
                    Point2::new(r.random_range(0.0..256.0), r.random_range(0.0..256.0))
                }
            })
            .collect();
        let fit = ransac_line(&pts, 256, 3.0, seed).unwrap();
        let d = fit.direction.into_inner();
        let line_angle = d.dot(&dir).abs().clamp(-1.0, 1.0).acos().to_degrees();
        worst = worst.max(line_angle);
        close += (line_angle <= 2.0) as usize;
        let first = fit.inliers.iter().position(|&b| b).unwrap();
        let last = fit.inliers.iter().rposition(|&b| b).unwrap();
        contract += (d.dot(&(pts[last] - pts[first])) >= 0.0) as usize;
    }
    (
        close >= 99 && contract == trials as usize,
        format!("line within 2 deg {close}/{trials} (worst {worst:.3} deg); temporal-order sign {contract}/{trials}"),
    )
}

fn lifting_accuracy() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for noise in [0.0, 0.002] {
        let (mut good_dir, mut good_pos) = (0, 0);
        let (mut worst_a, mut worst_p): (f64, f64) = (0.0, 0.0);
        for seed in 0..20 {
            let scene = drawer_front(seed, noise);
            let a2d = handle_affordance(&scene);
            match lift_affordance(&a2d, &scene.depth, &scene.intrinsics, &LiftParams::default()) {
                Ok(a3d) => {
                    let ang = angle_deg(&a3d.direction, &scene.directions["handle_normal"]);
                    let pos = (a3d.contact - scene.points["handle"]).norm();
                    worst_a = worst_a.max(ang);
                    worst_p = worst_p.max(pos);
                    good_dir += (ang <= 5.0) as usize;
                    good_pos += (pos <= 0.005) as usize;
                }
                Err(e) => lines.push(format!("seed {seed}: {e}")),
            }
        }
        ok &= good_dir == 20 && good_pos == 20;
        lines.push(format!(
            "noise {:.0} mm: direction {good_dir}/20 (worst {worst_a:.2} deg), contact {good_pos}/20 (worst {:.2} mm)",
            noise * 1000.0,
            worst_p * 1000.0
        ));
    }
    (ok, lines.join("; "))
}

fn normal_clustering() -> Outcome {
    let trials = 50;
    let mut good = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let (scene, edge, normals) = corner(seed);
        let cloud = depth_to_cloud(&scene.depth, &scene.intrinsics, None).unwrap();
        let local = crop_cloud(&cloud, &edge, 0.1).unwrap();
        let est = estimate_normals(&local, 30, &Point3::origin()).unwrap();
        let clusters = cluster_normals(&est, 4, seed);
        if clusters.len() < 2 {
            continue;
        }
        let a = [
            angle_deg(&clusters[0].center, &normals[0]).min(angle_deg(&clusters[1].center, &normals[0])),
            angle_deg(&clusters[0].center, &normals[1]).min(angle_deg(&clusters[1].center, &normals[1])),
        ];
        let distinct = angle_deg(&clusters[0].center, &clusters[1].center) > 45.0;
        worst = worst.max(a[0].max(a[1]));
        good += (a[0] <= 5.0 && a[1] <= 5.0 && distinct) as usize;
    }
    (
        good == trials as usize,
        format!("two dominant clusters match both faces in {good}/{trials} (worst {worst:.2} deg)"),
    )
}

fn brute_force() -> Outcome {
    let trials = 100;
    let mut counts = [0usize; 4];

    for seed in 0..trials {
        let mut r = rng(5000 + seed);
        let (gh, gw, c, sc) = (r.random_range(2..8), r.random_range(2..8), r.random_range(2..7), r.random_range(1..4));
        let mut data = random_vec(&mut r, gh * gw * c);
        let cells = gh * gw;
        // a zero cell and a duplicated cell exercise the exclusion and tie rules
        let z = r.random_range(0..cells);
        data[z * c..(z + 1) * c].fill(0.0);
        let (a, b) = (r.random_range(0..cells), r.random_range(0..cells));
        let dup: Vec<f32> = data[a * c..(a + 1) * c].to_vec();
        data[b * c..(b + 1) * c].copy_from_slice(&dup);
        let map = normalize_features(DenseFeatureMap::new(gh, gw, c, gh * sc, gw * sc, false, data).unwrap()).0;
        let mask = r.random_bool(0.5).then(|| random_mask(&mut r, gw * sc, gh * sc, 0.7));
        let query = if r.random_bool(0.3) { map.cell_at(a).to_vec() } else { random_vec(&mut r, c) };
        let got = best_match(&query, &map, mask.as_ref()).ok().map(|m| (m.row, m.col));
        let want = oracle_best_match(&query, &map, mask.as_ref()).map(|(r, c, _)| (r, c));
        counts[0] += (got == want) as usize;
    }

    for seed in 0..trials {
        let mut r = rng(6000 + seed);
        let n = r.random_range(1..10);
        let grasps: Vec<GraspCandidate> = (0..n)
            .map(|_| GraspCandidate {
                position: Point3::new(
                    r.random_range(-2..=2) as f64 * 0.01,
                    r.random_range(-2..=2) as f64 * 0.01,
                    r.random_range(-2..=2) as f64 * 0.01,
                ),
                quaternion: [1.0, 0.0, 0.0, 0.0],
                score: [0.1, 0.5, 0.9][r.random_range(0..3)],
            })
            .collect();
        let contact = Point3::new(0.0, 0.0, 0.0);
        counts[1] += (select_grasp(&grasps, &contact).unwrap().index == oracle_select_grasp(&grasps, &contact)) as usize;
    }

    for seed in 0..trials {
        let mut r = rng(7000 + seed);
        let (g, c) = (r.random_range(2..6), r.random_range(2..6));
        let target = random_map(&mut r, g, g, c, 1);
        let n = r.random_range(2..7);
        let mut maps: Vec<DenseFeatureMap> = (0..n).map(|_| random_map(&mut r, g, g, c, 1)).collect();
        if r.random_bool(0.5) {
            maps[n - 1] = maps[0].clone();
        }
        let mut ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        ids.shuffle(&mut r);
        let entries: Vec<AffordanceEntry> = ids.iter().map(|id| entry(id, "t", vec![1.0], vec![1.0], g, g)).collect();
        let cands: Vec<GeometricCandidate> = (0..n)
            .map(|i| GeometricCandidate { entry: &entries[i], map: &maps[i], mask: None })
            .collect();
        let (best, scores) = geometric_retrieve(&cands, &target, None).unwrap();
        let oracle: Vec<f64> = maps.iter().map(|m| oracle_imd(m, None, &target, None)).collect();
        let want = (0..n)
            .min_by(|&a, &b| oracle[a].total_cmp(&oracle[b]).then(ids[a].cmp(&ids[b])))
            .unwrap();
        let close = scores.iter().zip(&oracle).all(|(s, o)| (s.imd - o).abs() <= 1e-6);
        counts[2] += (best == want && close) as usize;
    }

    for seed in 0..trials {
        let mut r = rng(8000 + seed);
        let n = r.random_range(1..200);
        let pts: Vec<Point3<f64>> = (0..n)
            .map(|_| Point3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(0.5..2.0)))
            .collect();
        let center = Point3::new(r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(0.8..1.6));
        let radius = r.random_range(0.05..0.8);
        let want = oracle_crop(&pts, &center, radius);
        let got = match crop_cloud(&PointCloud::from_points(pts), &center, radius) {
            Ok(c) => c.points,
            Err(Error::EmptyCrop) => Vec::new(),
            Err(e) => panic!("{e}"),
        };
        counts[3] += (got == want) as usize;
    }

    let t = trials as usize;
    (
        counts.iter().all(|&c| c == t),
        format!(
            "best_match {}/{t}, select_grasp {}/{t}, geometric_retrieve {}/{t}, crop_cloud {}/{t}",
            counts[0], counts[1], counts[2], counts[3]
        ),
    )
}

fn determinism_and_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (paths, _) = write_demo(&DemoSpec::default(), dir.path()).unwrap();
    let outs = [dir.path().join("out1"), dir.path().join("out2")];
    let mut codes = Vec::new();
    for out in &outs {
        let (code, _, err) = cli(&[
            "infer",
            "--memory", s(&paths.memory_dir),
            "--scene", s(&paths.scene),
            "--instruction", s(&paths.instruction),
            "--object", s(&paths.object),
            "--grasps", s(&paths.grasps),
            "--out-dir", s(out),
        ]);
        codes.push((code, err));
    }
    let files = ["retrieval.json", "affordance2d.json", "affordance3d.json", "result.json", "overlay.png"];
    let identical = codes.iter().all(|(c, _)| *c == 0)
        && files
            .iter()
            .all(|f| std::fs::read(outs[0].join(f)).unwrap() == std::fs::read(outs[1].join(f)).unwrap());

    let mut formats_ok = 0;
    let trials = 20;
    for seed in 0..trials {
        let mut r = rng(9000 + seed);
        let (w, h) = (r.random_range(1..20), r.random_range(1..20));
        let depth = DepthImage::new(w, h, (0..w * h).map(|_| r.random_range(0.0..3.0f32)).collect()).unwrap();
        let (c, sc) = (r.random_range(1..9), r.random_range(1..3));
        let map = random_map(&mut r, h, w, c, sc);
        let emb = if r.random_bool(0.5) { Embedding::image(random_vec(&mut r, 7)) } else { Embedding::text(random_vec(&mut r, 5)) };
        let mask = random_mask(&mut r, w, h, 0.4);
        let p = dir.path().join(format!("rt{seed}"));
        std::fs::create_dir_all(&p).unwrap();
        save_depth(&depth, p.join("a.dpt")).unwrap();
        save_feature_map(&map, p.join("a.dfm")).unwrap();
        save_embedding(&emb, p.join("a.emb")).unwrap();
        save_mask(&mask, p.join("a.msk")).unwrap();
        let bytes = |f: &str| std::fs::read(p.join(f)).unwrap();
        let ok = encode_depth(&load_depth(p.join("a.dpt")).unwrap()) == bytes("a.dpt")
            && encode_feature_map(&load_feature_map(p.join("a.dfm")).unwrap()) == bytes("a.dfm")
            && encode_embedding(&load_embedding(p.join("a.emb")).unwrap()) == bytes("a.emb")
            && encode_mask(&load_mask(p.join("a.msk")).unwrap()) == bytes("a.msk")
            && decode_depth(&bytes("a.dpt")).unwrap() == depth
            && decode_feature_map(&bytes("a.dfm")).unwrap() == map
            && decode_embedding(&bytes("a.emb")).unwrap() == emb
            && decode_mask(&bytes("a.msk")).unwrap() == mask;
        formats_ok += ok as usize;
    }

    let memory = load_memory(&paths.manifest).unwrap();
    let copy = dir.path().join("copy.json");
    save_memory(&memory, &copy).unwrap();
    let reread: AffordanceMemory = {
        let text = std::fs::read_to_string(&copy).unwrap();
        std::fs::write(&paths.manifest, text).unwrap();
        load_memory(&paths.manifest).unwrap()
    };
    let manifest_ok = reread == memory;

    (
        identical && formats_ok == trials as usize && manifest_ok,
        format!(
            "infer outputs identical: {identical}; format round-trips {formats_ok}/{trials}; manifest round-trip: {manifest_ok}"
        ),
    )
}

fn monotone_filtering() -> Outcome {
    let trials = 1000;
    let mut good = 0;
    let dummy = DenseFeatureMap::new(1, 1, 1, 1, 1, true, vec![1.0]).unwrap();
    for seed in 0..trials {
        let mut r = rng(10_000 + seed);
        let dim = r.random_range(2..8);
        let n = r.random_range(1..12);
        let entries: Vec<AffordanceEntry> = (0..n)
            .map(|i| entry(&format!("e{i}"), "t", vec![1.0], random_vec(&mut r, dim), 4, 4))
            .collect();
        let refs: Vec<&AffordanceEntry> = entries.iter().collect();
        let instr = Embedding::text(vec![1.0]);
        let name = Embedding::text(random_vec(&mut r, dim));
        let img = Embedding::image(random_vec(&mut r, dim));
        let q = RetrievalQuery {
            instruction_embedding: &instr,
            object_name_embedding: &name,
            target_image_embedding: &img,
            target_map: &dummy,
            target_mask: None,
            fallback_tasks: &[],
        };
        let mut t = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        t.sort_by(f64::total_cmp);
        let ids = |th: f64| -> BTreeSet<String> {
            semantic_filter(&refs, &q, th)
                .unwrap()
                .retained
                .iter()
                .map(|(e, _)| e.id.clone())
                .collect()
        };
        good += ids(t[1]).is_subset(&ids(t[0])) as usize;
    }
    (good == trials as usize, format!("subset property {good}/{trials}"))
}

fn runtime() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = DemoSpec { entries: 100, tasks: 10, grid: 64, channels: 32, image_scale: 2, ..DemoSpec::default() };
    let (paths, truth) = write_demo(&spec, dir.path()).unwrap();
    let out = dir.path().join("out");
    let start = Instant::now();
    let (code, stdout, err) = cli(&[
        "infer",
        "--memory", s(&paths.memory_dir),
        "--scene", s(&paths.scene),
        "--instruction", s(&paths.instruction),
        "--object", s(&paths.object),
        "--out-dir", s(&out),
    ]);
    let secs = start.elapsed().as_secs_f64();
    let picked: serde_json::Value = serde_json::from_str(&stdout).unwrap_or_default();
    let correct = picked["entry_id"] == truth.entry_id.as_str();
    (
        code == 0 && secs < 5.0 && correct,
        format!("exit {code}, {secs:.2} s, retrieved {} {}", picked["entry_id"], err.trim()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("identity retrieval", identity_retrieval),
        ("warp-transfer contact error", warp_transfer),
        ("RANSAC robustness", ransac_robustness),
        ("lifting accuracy", lifting_accuracy),
        ("normal clustering", normal_clustering),
        ("brute-force equivalence", brute_force),
        ("determinism and round-trips", determinism_and_round_trips),
        ("monotone filtering", monotone_filtering),
        ("end-to-end runtime", runtime),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(outcome) => outcome,
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += (!ok) as usize;
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

