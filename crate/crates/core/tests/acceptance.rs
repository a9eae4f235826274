//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs on checked-in fixtures, the brightness mock and the
//! synthetic fixture model; nothing outside this crate is needed.

mod common;

use std::fs;
use std::sync::Arc;
use std::time::{Duration, Instant};

use image::{GenericImageView, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xfr_core::cam::{class_scores, compute_cam, Cam};
use xfr_core::eval::{run_experiment, EvalConfig, EvalSummary, RECORDS_FILE, SUMMARY_FILE};
use xfr_core::fixture::{export_set, FixtureModel};
use xfr_core::perturb::{
    apply_mask, random_mask_like, top_fraction_mask, Baseline, MaskSource, PerturbMode,
};
use xfr_core::render::{colorize, comparison_strip, overlay, OverlaySpec, Panel, GUTTER_PX, LABEL_BAND_PX};
use xfr_core::scorer::server::{spawn_tcp, BrightnessModel, LocalScorer, ScoringModel};
use xfr_core::scorer::{Endpoint, ScorerSession, SessionOptions};
use xfr_core::sdd::{alpha_param, divergence, scaling_factor, sdd_from_cams, SddConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn random_model(rng: &mut ChaCha8Rng) -> (Array3<f32>, Array2<f32>) {
    let (k, h, w, c) = (
        rng.random_range(1..=8),
        rng.random_range(1..=8),
        rng.random_range(1..=8),
        rng.random_range(1..=8),
    );
    let f = Array3::from_shape_fn((k, h, w), |_| rng.random_range(-3.0f32..3.0));
    let wt = Array2::from_shape_fn((c, k), |_| rng.random_range(-2.0f32..2.0));
    (f, wt)
}

/// Weighted sum over feature maps, written as explicit loops.
fn brute_force_cam(f: &Array3<f32>, w: &Array2<f32>, c: usize) -> Vec<Vec<f64>> {
    let (k, h, wd) = f.dim();
    let mut out = vec![vec![0.0; wd]; h];
    for (y, row) in out.iter_mut().enumerate() {
        for (x, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += f64::from(w[[c, kk]]) * f64::from(f[[kk, y, x]]);
            }
            *cell = acc;
        }
    }
    out
}

fn cam_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (f, w) = random_model(&mut rng);
        for c in 0..w.nrows() {
            let cam = compute_cam(f.view(), w.view(), c).map_err(|e| e.to_string())?;
            let oracle = brute_force_cam(&f, &w, c);
            for ((y, x), v) in cam.grid.indexed_iter() {
                worst = worst.max((v - oracle[y][x]).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    check(worst <= 1e-6, || format!("max error {worst:e}"))?;
    check(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("500 instances, max error {worst:.1e}, {elapsed:.2?}"))
}

fn score_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (f, w) = random_model(&mut rng);
        let scores = class_scores(f.view(), w.view()).map_err(|e| e.to_string())?;
        for c in 0..w.nrows() {
            let oracle = brute_force_cam(&f, &w, c);
            let n = oracle.len() * oracle[0].len();
            let mean = oracle.iter().flatten().sum::<f64>() / n as f64;
            worst = worst.max((scores.scores[c] - mean).abs());
        }
    }
    check(worst <= 1e-6, || format!("max error {worst:e}"))?;
    Ok(format!("500 instances, max error {worst:.1e}"))
}

fn constant(class_id: usize, v: f64) -> Cam {
    Cam {
        class_id,
        grid: Array2::from_elem((3, 3), v),
    }
}

fn random_cams(rng: &mut ChaCha8Rng, count: usize) -> Vec<Cam> {
    let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
    (0..count)
        .map(|class_id| Cam {
            class_id,
            grid: Array2::from_shape_fn((h, w), |_| rng.random_range(-4.0..4.0)),
        })
        .collect()
}

fn flat_argmax(g: &Array2<f64>) -> usize {
    let v: Vec<f64> = g.iter().copied().collect();
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn sdd_closed_forms() -> Outcome {
    let cfg = SddConfig::default();
    let err = |e: xfr_core::ComputeError| e.to_string();

    let five: Vec<Cam> = (0..5).map(|c| constant(c, 2.0)).collect();
    check(scaling_factor(&five[0], &five[1..], &cfg).map_err(err)? == 5.0, || "constant case F != 5".into())?;

    let mut capped = vec![constant(0, 0.1)];
    capped.extend((1..5).map(|c| constant(c, 1.0)));
    let f = scaling_factor(&capped[0], &capped[1..], &cfg).map_err(err)?;
    check(f == 50.0, || format!("cap case F = {f}"))?;

    let mut floored = vec![constant(0, 10.0)];
    floored.extend((1..5).map(|c| constant(c, 1.0)));
    let f = scaling_factor(&floored[0], &floored[1..], &cfg).map_err(err)?;
    check(f == 5.0, || format!("floor case F = {f}"))?;

    let ones: Vec<Cam> = (0..3).map(|c| constant(c, 1.0)).collect();
    let d = divergence(&ones[0], &ones[1..], 3.0).map_err(err)?;
    check(d.iter().all(|&v| v == 1.0), || "D != 1 for unit grids".into())?;
    let a0 = alpha_param(&d, &cfg);
    check(a0 == 0.2, || format!("alpha at sigma 0 = {a0}"))?;
    // cells -1 and +1 in equal number have population std 1
    let sigma_one = Array2::from_shape_fn((2, 2), |(y, _)| if y == 0 { -1.0 } else { 1.0 });
    let a1 = alpha_param(&sigma_one, &cfg);
    check((a1 - 0.3).abs() < 1e-15, || format!("alpha at sigma 1 = {a1}"))?;
    let r = sdd_from_cams(&ones[0], &ones[1..], &cfg).map_err(err)?;
    check(
        r.scaling_factor == 3.0 && r.sdd_map.iter().all(|&v| v == 0.2f64.exp()),
        || "chained unit case".into(),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..500 {
        let n = rng.random_range(2..=6);
        let set = random_cams(&mut rng, n);
        let r = sdd_from_cams(&set[0], &set[1..], &cfg).map_err(err)?;
        check(flat_argmax(&r.sdd_map) == flat_argmax(&r.divergence), || format!("argmax differs on instance {i}"))?;
    }
    Ok("worked examples exact; argmax(sdd) == argmax(D) on 500 instances".into())
}

fn mean_abs(g: &Array2<f64>) -> f64 {
    g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64
}

fn scaling_neutrality() -> Outcome {
    let cfg = SddConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tested = 0;
    let mut worst = 0.0f64;
    while tested < 300 {
        let n = rng.random_range(2..=6);
        let mut set = random_cams(&mut rng, n);
        let shrink = rng.random_range(0.02..1.0);
        set[0].grid.mapv_inplace(|v| v * shrink);
        let others = set[1..].iter().map(|c| mean_abs(&c.grid)).sum::<f64>() / (n - 1) as f64;
        let raw = n as f64 * others / mean_abs(&set[0].grid);
        for s in [0.5, 2.0, 10.0] {
            let in_window = |r: f64| r > n as f64 + 0.1 && r < 49.9;
            if !in_window(raw) || !in_window(raw / s) {
                continue;
            }
            let base = sdd_from_cams(&set[0], &set[1..], &cfg).map_err(|e| e.to_string())?;
            let scaled = Cam {
                class_id: 0,
                grid: set[0].grid.mapv(|v| v * s),
            };
            let other = sdd_from_cams(&scaled, &set[1..], &cfg).map_err(|e| e.to_string())?;
            for (a, b) in base.divergence.iter().zip(&other.divergence) {
                worst = worst.max((a - b).abs() / a.abs().max(1e-12));
            }
            tested += 1;
        }
    }
    check(worst <= 1e-6, || format!("max relative change {worst:e}"))?;
    Ok(format!("{tested} scaled instances, max relative change {worst:.1e}"))
}

fn mask_laws() -> Outcome {
    for (w, h) in [(10usize, 10usize), (16, 16), (7, 13), (224, 224)] {
        let g = Array2::from_shape_fn((h, w), |(y, x)| ((x * 31 + y * 17) % 23) as f64);
        let m = top_fraction_mask(&g, 0.2).map_err(|e| e.to_string())?;
        let n = w * h;
        // integer form of ceil(0.2 n)
        let expected = n.div_ceil(5);
        check(m.count() == expected, || format!("{w}x{h}: {} pixels, want {expected}", m.count()))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..40u32), rng.random_range(1..40u32));
        let img = RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
        let g = Array2::from_shape_fn((h as usize, w as usize), |_| rng.random_range(0.0..1.0));
        let m = top_fraction_mask(&g, rng.random_range(0.05..0.95)).map_err(|e| e.to_string())?;
        let del = apply_mask(&img, &m, PerturbMode::Deletion).map_err(|e| e.to_string())?;
        let ret = apply_mask(&img, &m, PerturbMode::Retention).map_err(|e| e.to_string())?;
        for ((a, b), o) in del.pixels().zip(ret.pixels()).zip(img.pixels()) {
            for ch in 0..3 {
                check(u16::from(a[ch]) + u16::from(b[ch]) == u16::from(o[ch]), || "complementarity broken".into())?;
            }
        }
    }

    let g = Array2::from_shape_fn((10, 10), |(y, x)| (y * 10 + x) as f64);
    let base = top_fraction_mask(&g, 0.2).map_err(|e| e.to_string())?;
    check(random_mask_like(&base, 7) == random_mask_like(&base, 7), || "seed 7 not deterministic".into())?;
    let mut hits = [0u32; 100];
    for seed in 0..10_000u64 {
        let m = random_mask_like(&base, seed);
        for (x, y) in m.pixels() {
            hits[(y * 10 + x) as usize] += 1;
        }
    }
    let worst = hits
        .iter()
        .map(|&c| (f64::from(c) / 10_000.0 - 0.2).abs())
        .fold(0.0, f64::max);
    check(worst <= 0.02, || format!("selection frequency off by {worst}"))?;
    Ok(format!("count, 100 complementarity pairs, determinism, uniformity (max deviation {worst:.4})"))
}

fn harness_exactness() -> Outcome {
    let start = Instant::now();
    let dir = common::fixtures_dir().join("mock8");
    let cfg = EvalConfig::default();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut scorer = LocalScorer::new(BrightnessModel::with_classes(4));
    let report = run_experiment(&dir, &cfg, &mut scorer, &tmp.path().join("a")).map_err(|e| e.to_string())?;

    let mut drops = [0.0f64; 4];
    let mut changes = [0usize; 4];
    for (id, bundle) in common::mock_set() {
        for (mode, source, drop, changed) in common::oracle_records(&id, &bundle, &cfg) {
            let cell = mode as usize * 2 + source as usize;
            drops[cell] += drop;
            changes[cell] += usize::from(changed);
        }
    }
    for mode in [PerturbMode::Deletion, PerturbMode::Retention] {
        for source in [MaskSource::Sdd, MaskSource::Random] {
            let cell = mode as usize * 2 + source as usize;
            let got = report.summary.cell(mode, source).ok_or("missing cell")?;
            check((got.average_confidence_drop - drops[cell] / 8.0).abs() < 1e-12, || {
                format!("{mode}/{source} drop {} vs {}", got.average_confidence_drop, drops[cell] / 8.0)
            })?;
            check(got.prediction_change_percentage == 12.5 * changes[cell] as f64, || {
                format!("{mode}/{source} change {}", got.prediction_change_percentage)
            })?;
        }
    }

    let model: Arc<dyn ScoringModel> = Arc::new(BrightnessModel::with_classes(4));
    let (addr, _server) = spawn_tcp(model).map_err(|e| e.to_string())?;
    let mut session = ScorerSession::connect(&Endpoint::Tcp(addr.to_string()), SessionOptions::default())
        .map_err(|e| e.to_string())?;
    run_experiment(&dir, &cfg, &mut session, &tmp.path().join("b")).map_err(|e| e.to_string())?;
    for file in [RECORDS_FILE, SUMMARY_FILE] {
        let a = fs::read(tmp.path().join("a").join(file)).map_err(|e| e.to_string())?;
        let b = fs::read(tmp.path().join("b").join(file)).map_err(|e| e.to_string())?;
        check(a == b, || format!("{file} differs between runs"))?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("8 bundles match the oracle, rerun byte-identical, {elapsed:.2?}"))
}

fn directional(baseline: Baseline) -> Outcome {
    const COUNT: usize = 240;
    const GAP: f64 = 2.0;
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bundles = tmp.path().join("bundles");
    let model = FixtureModel::new();
    export_set(&model, &bundles, COUNT, 2024).map_err(|e| e.to_string())?;
    let (addr, _server) = spawn_tcp(Arc::new(model)).map_err(|e| e.to_string())?;
    let mut session = ScorerSession::connect(&Endpoint::Tcp(addr.to_string()), SessionOptions::default())
        .map_err(|e| e.to_string())?;
    let cfg = EvalConfig {
        baseline,
        ..EvalConfig::default()
    };
    let report = run_experiment(&bundles, &cfg, &mut session, &tmp.path().join("report")).map_err(|e| e.to_string())?;
    let s: &EvalSummary = &report.summary;
    let cell = |m, src| s.cell(m, src).ok_or_else(|| "missing cell".to_string());
    let (ds, dr) = (cell(PerturbMode::Deletion, MaskSource::Sdd)?, cell(PerturbMode::Deletion, MaskSource::Random)?);
    let (rs, rr) = (cell(PerturbMode::Retention, MaskSource::Sdd)?, cell(PerturbMode::Retention, MaskSource::Random)?);
    let orderings = [
        ("deletion drop", ds.average_confidence_drop - dr.average_confidence_drop),
        ("deletion change", ds.prediction_change_percentage - dr.prediction_change_percentage),
        ("retention drop", rr.average_confidence_drop - rs.average_confidence_drop),
        ("retention change", rr.prediction_change_percentage - rs.prediction_change_percentage),
    ];
    for (name, gap) in orderings {
        check(gap >= GAP, || format!("{name} gap {gap:.2} pp below {GAP}"))?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{COUNT} bundles, {baseline} baseline: deletion drop {:.2} > {:.2}, change {:.2} > {:.2}; \
         retention drop {:.2} < {:.2}, change {:.2} < {:.2}; {elapsed:.2?}",
        ds.average_confidence_drop,
        dr.average_confidence_drop,
        ds.prediction_change_percentage,
        dr.prediction_change_percentage,
        rs.average_confidence_drop,
        rr.average_confidence_drop,
        rs.prediction_change_percentage,
        rr.prediction_change_percentage,
    ))
}

fn render_goldens() -> Outcome {
    let err = |e: xfr_core::ComputeError| e.to_string();
    let anchors = Array2::from_shape_vec((1, 4), vec![0.0, 0.33, 0.66, 1.0]).map_err(|e| e.to_string())?;
    let c = colorize(&anchors).map_err(err)?;
    let want = [[0, 0, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]];
    for (x, w) in want.iter().enumerate() {
        check(c.get_pixel(x as u32, 0).0 == *w, || format!("anchor {x} is {:?}", c.get_pixel(x as u32, 0)))?;
    }

    let img = RgbImage::from_fn(20, 12, |x, y| Rgb([(x * 12) as u8, (y * 20) as u8, 77]));
    let g = Array2::from_shape_fn((3, 5), |(y, x)| (x + y) as f64 / 6.0);
    let same = overlay(&img, &g, &OverlaySpec::new(0.0).map_err(err)?).map_err(err)?;
    check(same == img, || "opacity 0 changed the image".into())?;
    let white = RgbImage::from_pixel(4, 4, Rgb([255, 255, 255]));
    let half = overlay(&white, &Array2::zeros((2, 2)), &OverlaySpec::default()).map_err(err)?;
    check(half.get_pixel(0, 0).0 == [128, 128, 255], || format!("blend gave {:?}", half.get_pixel(0, 0)))?;

    let panels: Vec<Panel> = (0..6)
        .map(|i| Panel {
            grid: g.clone(),
            label: if i == 5 { "SDD".into() } else { format!("c{i}") },
        })
        .collect();
    let strip = comparison_strip(&img, &panels, &OverlaySpec::default()).map_err(err)?;
    let (w, h) = (6 * 20 + 5 * GUTTER_PX, 12 + LABEL_BAND_PX);
    check(strip.dimensions() == (w, h), || format!("strip is {:?}, want {w}x{h}", strip.dimensions()))?;
    let single = comparison_strip(&img, &panels[..1], &OverlaySpec::default()).map_err(err)?;
    let tile = overlay(&img, &g, &OverlaySpec::default()).map_err(err)?;
    check(single.view(0, 0, 20, 12).to_image() == tile, || "single panel differs from overlay".into())?;
    Ok(format!("anchors exact, opacity-0 identity, 6-panel strip {w}x{h}"))
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("CAM matches brute-force oracle", cam_oracle),
        ("class score equals CAM spatial mean", score_consistency),
        ("SDD closed forms and argmax", sdd_closed_forms),
        ("target scaling leaves divergence unchanged", scaling_neutrality),
        ("mask laws", mask_laws),
        ("harness exactness with mock scorer", harness_exactness),
        ("directional faithfulness on fixture model", || directional(Baseline::Scattered)),
        ("directional faithfulness, shifted baseline", || directional(Baseline::Shifted)),
        ("render goldens", render_goldens),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
