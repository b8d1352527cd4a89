//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test -p terraseg --test acceptance`.
//!
//! Reference values come from oracles written here, independently of the
//! library code they check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rand::Rng;
use terraseg::catalog::{build_catalog, TemporalWindow};
use terraseg::eval::{self, confusion, metrics, roc_auc, Scored};
use terraseg::model::{gradcheck, Checkpoint, UNet, UNetConfig};
use terraseg::raster::{resample, GeoBox, Raster, Resampling, Satellite};
use terraseg::seed;
use terraseg::splits::{spatial_kfold, temporal_split, SplitTile};
use terraseg::stacker::{build_tiles, dihedral, satellite_dropout, Dihedral, SceneCache, SlotLayout, StackSpec, TileSample};
use terraseg::synth::{self, SynthConfig};
use terraseg::train::{self, EpochLog, TrainConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(budget: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= budget, || format!("took {took:.1?}, budget {budget:?}"))
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

// ---------------------------------------------------------------- metrics

fn oracle_ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut doubled, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            doubled += if si > sj { 2 } else if si == sj { 1 } else { 0 };
        }
    }
    doubled as f64 / (2 * pairs) as f64
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(11, &[]);
    let mut dice_checked = 0;
    for case in 0..50 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let n = h * w;
        let pos_rate: f64 = rng.random();
        let pred: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(pos_rate))).collect();
        let gt: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(pos_rate))).collect();
        let ignore: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for i in (0..n).filter(|&i| !ignore[i]) {
            match (pred[i], gt[i]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => tn += 1,
            }
        }
        let c = confusion(&pred, &gt, &ignore).map_err(|e| e.to_string())?;
        ensure((c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn), || format!("case {case}: counts {c:?}"))?;
        let m = metrics(&c);
        let acc = oracle_ratio(tp + tn, tp + fp + fn_ + tn);
        let f1 = oracle_ratio(2 * tp, 2 * tp + fp + fn_);
        let iou = oracle_ratio(tp, tp + fp + fn_);
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
            (None, None) => true,
            _ => false,
        };
        ensure(close(m.pixel_accuracy, acc) && close(m.f1, f1) && close(m.iou, iou), || {
            format!("case {case}: {m:?} vs acc {acc:?} f1 {f1:?} iou {iou:?}")
        })?;
        if let (Some(f), Some(j)) = (m.f1, m.iou) {
            ensure((f - 2.0 * j / (1.0 + j)).abs() <= 1e-12, || format!("case {case}: Dice-Jaccard {f} vs {j}"))?;
            dice_checked += 1;
        }
    }
    for case in 0..100 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=12);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let got = roc_auc(&scores, &labels, &vec![false; n]).map_err(|e| e.to_string())?;
        let want = brute_auc(&scores, &labels);
        ensure(got == want, || format!("auc case {case}: {got} vs brute force {want}"))?;
    }
    within(Duration::from_secs(5), start)?;
    Ok(format!(
        "50 masks, {dice_checked} Dice-Jaccard checks, 100 AUC instances exact, {:.2?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- gradients

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let checks = gradcheck::run_all(0).map_err(|e| e.to_string())?;
    let mut worst_op = 0.0f64;
    let mut unet = None;
    for c in &checks {
        ensure(c.points >= 20, || format!("{} probed only {} points", c.name, c.points))?;
        if c.name.starts_with("unet") {
            ensure(c.max_rel_err < 1e-3, || format!("unet rel err {:.3e}", c.max_rel_err))?;
            unet = Some(c);
        } else {
            ensure(c.max_rel_err < 1e-4, || format!("{} rel err {:.3e}", c.name, c.max_rel_err))?;
            worst_op = worst_op.max(c.max_rel_err);
        }
    }
    let unet = unet.ok_or("no end-to-end check ran")?;
    within(Duration::from_secs(120), start)?;
    Ok(format!(
        "{} ops max {:.1e}; unet {:.1e} ({} of {} probes skipped at kinks), {:.1?}",
        checks.len() - 1,
        worst_op,
        unet.max_rel_err,
        unet.skipped_kinks,
        unet.coordinates + unet.skipped_kinks,
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- training

struct Corpus {
    _dir: tempfile::TempDir,
    train: Vec<TileSample>,
    val: Vec<TileSample>,
}

fn corpus() -> Result<Corpus, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SynthConfig::default();
    synth::generate(dir.path(), &cfg).map_err(|e| e.to_string())?;
    let build = build_catalog(dir.path()).map_err(|e| e.to_string())?;
    let spec = StackSpec::desk();
    let tiles = build_tiles(
        &build.catalog,
        &spec,
        TemporalWindow::PlusMinusMonths(2),
        false,
        &SceneCache::new(),
    )
    .map_err(|e| e.to_string())?;
    ensure(tiles.len() == 200, || format!("expected 200 tiles, built {}", tiles.len()))?;
    let split: Vec<SplitTile> = tiles
        .iter()
        .map(|s| SplitTile {
            id: s.id.clone(),
            geobox: s.geobox,
            target_date: s.target_date,
            has_positive: s.has_positive(),
        })
        .collect();
    let cell = 2.0 * spec.tile_size as f64 * tiles[0].geobox.pixel_size_x();
    let folds = spatial_kfold(&split, 5, cell, 0).map_err(|e| e.to_string())?;
    let (val, train): (Vec<_>, Vec<_>) = tiles.into_iter().partition(|s| folds.fold_of(&s.id) == Some(0));
    Ok(Corpus { _dir: dir, train, val })
}

struct Run {
    last: Checkpoint,
    log: Vec<EpochLog>,
}

fn train_seed(c: &Corpus, seed: u64) -> Result<Run, String> {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let model = UNet::init(UNetConfig::desk(16), seed).map_err(|e| e.to_string())?;
    let r = train::fit(model, &c.train, &c.val, &cfg, |_, _| Ok(())).map_err(|e| e.to_string())?;
    Ok(Run { last: r.last, log: r.log })
}

fn iou_of(ck: &Checkpoint, samples: &[TileSample]) -> Result<f64, String> {
    let prepared = train::prepare(samples, ck.meta.stats.as_deref()).map_err(|e| e.to_string())?;
    let s = train::score(&ck.model, &prepared).map_err(|e| e.to_string())?;
    metrics(&s.counts).iou.ok_or_else(|| "IoU undefined".to_string())
}

fn overfit(c: &Corpus, run: &Run, took: Duration) -> Outcome {
    let cfg = TrainConfig::default();
    ensure(cfg.epochs == 10, || format!("default epochs {}", cfg.epochs))?;
    ensure(run.log.len() == 10, || format!("{} epochs logged", run.log.len()))?;
    let losses: Vec<f64> = run.log.iter().take(5).map(|e| e.train_loss).collect();
    ensure(losses.windows(2).all(|w| w[1] < w[0]), || format!("train loss not strictly decreasing: {losses:?}"))?;
    let train_iou = iou_of(&run.last, &c.train)?;
    let val_iou = iou_of(&run.last, &c.val)?;
    ensure(train_iou >= 0.90, || format!("train IoU {train_iou:.4} < 0.90"))?;
    ensure(val_iou >= 0.70, || format!("val IoU {val_iou:.4} < 0.70"))?;
    ensure(took <= Duration::from_secs(600), || format!("training took {took:.1?}"))?;
    Ok(format!(
        "{} train / {} val tiles, train IoU {train_iou:.4}, val IoU {val_iou:.4}, first losses {:.3?}, {took:.1?}",
        c.train.len(),
        c.val.len(),
        losses
    ))
}

fn region_iou(tiles: &[TileSample], probs: &[Vec<f32>]) -> Result<f64, String> {
    let ignores: Vec<Vec<bool>> = tiles.iter().map(|t| t.ignore_mask()).collect();
    let scored: Vec<Scored> = tiles
        .iter()
        .zip(probs)
        .zip(&ignores)
        .map(|((t, p), ig)| Scored {
            id: &t.id,
            probs: p,
            labels: &t.target,
            ignore: ig,
        })
        .collect();
    let report = eval::evaluate(&scored, eval::DEFAULT_THRESHOLD, false).map_err(|e| e.to_string())?;
    report.metrics.iou.ok_or_else(|| "IoU undefined".to_string())
}

fn blending(c: &Corpus, first: &Run) -> Outcome {
    let start = Instant::now();
    let mut runs = vec![train::predict(&first.last, &c.val).map_err(|e| e.to_string())?];
    for s in 1..3 {
        let r = train_seed(c, s)?;
        runs.push(train::predict(&r.last, &c.val).map_err(|e| e.to_string())?);
    }
    let singles = runs.iter().map(|p| region_iou(&c.val, p)).collect::<Result<Vec<_>, _>>()?;
    let blended: Vec<Vec<f32>> = (0..c.val.len())
        .map(|t| {
            let maps: Vec<&[f32]> = runs.iter().map(|r| r[t].as_slice()).collect();
            eval::blend(&maps)
        })
        .collect::<terraseg::Result<_>>()
        .map_err(|e| e.to_string())?;
    let blend_iou = region_iou(&c.val, &blended)?;
    let best = singles.iter().copied().fold(f64::MIN, f64::max);
    ensure(blend_iou >= best - 0.01, || format!("blend IoU {blend_iou:.4} < best single {best:.4} - 0.01"))?;
    within(Duration::from_secs(1800), start)?;
    Ok(format!(
        "single-seed val IoU {:.4?}, blend {blend_iou:.4}, {:.1?}",
        singles,
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- determinism

fn terraseg(args: &[&str], out: &Path, threads: usize) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_terraseg"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--threads")
        .arg(threads.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || {
        format!("terraseg {} failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr))
    })
}

fn pipeline(out: &Path, threads: usize) -> Result<(), String> {
    for args in [
        &["synth"][..],
        &["catalog"],
        &["tiles"],
        &["split"],
        &["train", "--val-fold", "0"],
        &["predict", "--fold", "0"],
        &["eval", "--auc"],
    ] {
        terraseg(args, out, threads)?;
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("t1"), dir.path().join("t4"));
    pipeline(&a, 1)?;
    pipeline(&b, 4)?;
    let mut compared = [0usize; 3];
    for (k, sub) in ["checkpoints", "predictions", "reports"].iter().enumerate() {
        let fa = files_under(&a.join(sub));
        let fb = files_under(&b.join(sub));
        ensure(!fa.is_empty() && fa == fb, || format!("{sub}: file sets differ"))?;
        for f in &fa {
            let (x, y) = (fs::read(a.join(sub).join(f)), fs::read(b.join(sub).join(f)));
            ensure(x.is_ok() && x.ok() == y.ok(), || format!("{sub}/{} differs", f.display()))?;
            compared[k] += 1;
        }
    }
    Ok(format!(
        "--threads 1 vs 4: {} checkpoints, {} prediction files, {} report files byte-identical, {:.1?}",
        compared[0],
        compared[1],
        compared[2],
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- resampling

fn raster(g: GeoBox, data: Vec<f32>) -> Raster {
    Raster::new(Satellite::Synthetic, date(2020, 1, 1), g, vec!["b".into()], data).unwrap()
}

fn resampling_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(12, &[]);
    let px = 1e-4;
    let mut checked = [0usize; 4];
    for case in 0..200 {
        let (w, h) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let (west, north) = (rng.random_range(-60.0..-50.0), rng.random_range(-5.0..5.0));
        let coarse = px * rng.random_range(1..=4) as f64;
        let src_g = GeoBox::from_origin(west, north, coarse, w, h).unwrap();
        let f = rng.random_range(1..=4);
        let fine = GeoBox::from_origin(west, north, coarse / f as f64, w * f, h * f).unwrap();

        let c: f32 = rng.random_range(-100.0..100.0);
        let constant = raster(src_g, vec![c; w * h]);
        for method in [Resampling::Nearest, Resampling::Bilinear] {
            let out = resample(&constant, &fine, method).map_err(|e| e.to_string())?;
            for &v in out.data() {
                let ok = match method {
                    Resampling::Nearest => v == c,
                    Resampling::Bilinear => (v - c).abs() <= 1e-6 * c.abs().max(1.0),
                };
                ensure(ok, || format!("case {case}: constant {c} became {v} ({method:?})"))?;
            }
            checked[0] += 1;
        }

        let data: Vec<f32> = (0..w * h).map(|_| rng.random_range(-10.0..10.0)).collect();
        let src = raster(src_g, data.clone());
        let near = resample(&src, &fine, Resampling::Nearest).map_err(|e| e.to_string())?;
        for i in 0..h * f {
            for j in 0..w * f {
                let (got, want) = (near.data()[i * w * f + j], data[(i / f) * w + j / f]);
                ensure(got == want, || format!("case {case}: nearest ({i},{j}) = {got}, want {want}"))?;
            }
        }
        checked[1] += 1;

        let tw = rng.random_range(1..=12);
        let th = rng.random_range(1..=12);
        let tpx = coarse * rng.random_range(0.2..1.5);
        let tw_off = rng.random_range(-1.0..(w as f64)) * coarse;
        let tn_off = rng.random_range(-1.0..(h as f64)) * coarse;
        let target = GeoBox::from_origin(west + tw_off, north - tn_off, tpx, tw, th).unwrap();
        let bil = match resample(&src, &target, Resampling::Bilinear) {
            Ok(r) => r,
            Err(terraseg::Error::NoOverlap) => {
                checked[3] += 1;
                continue;
            }
            Err(e) => return Err(e.to_string()),
        };
        for r in 0..th {
            for col in 0..tw {
                let lon = target.west + (col as f64 + 0.5) * tpx;
                let lat = target.north - (r as f64 + 0.5) * tpx;
                let (x, y) = ((lon - west) / coarse, (north - lat) / coarse);
                let v = bil.data()[r * tw + col];
                if !(0.0..w as f64).contains(&x) || !(0.0..h as f64).contains(&y) {
                    ensure(v.is_nan(), || format!("case {case}: outside footprint gave {v}"))?;
                    continue;
                }
                let span = |t: f64, n: usize| {
                    let lo = (t - 0.5).floor().clamp(0.0, (n - 1) as f64) as usize;
                    let hi = ((t - 0.5).floor() + 1.0).clamp(0.0, (n - 1) as f64) as usize;
                    [lo, hi]
                };
                let neighbours: Vec<f32> = span(y, h)
                    .iter()
                    .flat_map(|&rr| span(x, w).map(|cc| data[rr * w + cc]))
                    .collect();
                let lo = neighbours.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = neighbours.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                ensure(v >= lo && v <= hi, || format!("case {case}: bilinear {v} outside [{lo}, {hi}]"))?;
                checked[2] += 1;
            }
        }
    }
    within(Duration::from_secs(5), start)?;
    Ok(format!(
        "{} constant fields, {} nearest replications, {} bounded bilinear pixels ({} disjoint grids rejected), {:.2?}",
        checked[0],
        checked[1],
        checked[2],
        checked[3],
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- splits

fn split_hygiene() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(13, &[]);
    let (mut layouts, mut pairs) = (0usize, 0u64);
    while layouts < 10_000 {
        let tile_px = rng.random_range(1..=4) as f64 * 1e-4 * 16.0;
        let n = rng.random_range(2..=30);
        let spread = rng.random_range(2..=12);
        let (west0, north0) = (rng.random_range(-70.0..-40.0), rng.random_range(-20.0..10.0));
        let jitter = rng.random_bool(0.3);
        let tiles: Vec<SplitTile> = (0..n)
            .map(|i| {
                let (r, c) = (rng.random_range(0..spread), rng.random_range(0..spread));
                let (dx, dy) = if jitter {
                    (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
                } else {
                    (0.0, 0.0)
                };
                let west = west0 + (c as f64 + dx) * tile_px;
                let north = north0 - (r as f64 + dy) * tile_px;
                SplitTile {
                    id: format!("t{i:02}"),
                    geobox: GeoBox::new(west, north - tile_px, west + tile_px, north, 16, 16).unwrap(),
                    target_date: date(2019, 8, 15),
                    has_positive: true,
                }
            })
            .collect();
        let k = rng.random_range(2..=6);
        let cell = tile_px * rng.random_range(1..=4) as f64;
        let folds = match spatial_kfold(&tiles, k, cell, rng.random()) {
            Ok(f) => f,
            Err(terraseg::Error::DegenerateExtent(_)) => continue,
            Err(e) => return Err(e.to_string()),
        };
        layouts += 1;
        let west = tiles.iter().map(|t| t.geobox.west).fold(f64::INFINITY, f64::min);
        let north = tiles.iter().map(|t| t.geobox.north).fold(f64::NEG_INFINITY, f64::max);
        let cell_of = |t: &SplitTile| {
            let (x, y) = t.geobox.center();
            (((north - y) / cell).floor() as i64, ((x - west) / cell).floor() as i64)
        };
        ensure(folds.folds.len() == n, || format!("{} of {n} tiles assigned", folds.folds.len()))?;
        for a in &tiles {
            for b in &tiles {
                if a.id < b.id && cell_of(a) == cell_of(b) {
                    pairs += 1;
                    ensure(folds.fold_of(&a.id) == folds.fold_of(&b.id), || {
                        format!("{} and {} share a cell but not a fold", a.id, b.id)
                    })?;
                }
            }
        }
    }

    let g = GeoBox::from_origin(-55.0, -3.0, 1e-4, 64, 64).unwrap();
    let dated: Vec<SplitTile> = [(2018, "a"), (2019, "b"), (2020, "c"), (2020, "d"), (2019, "e")]
        .iter()
        .map(|&(y, id)| SplitTile {
            id: id.into(),
            geobox: g,
            target_date: date(y, 6, 1),
            has_positive: true,
        })
        .collect();
    let t = temporal_split(&dated, 2020).map_err(|e| e.to_string())?;
    ensure(t.validation == ["c", "d"] && t.train == ["a", "b", "e"], || format!("temporal split {t:?}"))?;
    let mut future = dated.clone();
    future[0].target_date = date(2021, 1, 1);
    ensure(temporal_split(&future, 2020).is_err(), || "2021 tile accepted".into())?;
    Ok(format!(
        "10000 layouts, {pairs} same-cell pairs co-folded, 2020 routed to validation, {:.1?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------- augmentation

/// Source-coordinate map of each element on doubled centered coordinates
/// (u = 2j - (n-1), v = 2i - (n-1)): output (u, v) reads input M (u, v).
const ELEMENTS: [[[i32; 2]; 2]; 8] = [
    [[1, 0], [0, 1]],   // identity
    [[0, -1], [1, 0]],  // rot90
    [[-1, 0], [0, -1]], // rot180
    [[0, 1], [-1, 0]],  // rot270
    [[-1, 0], [0, 1]],  // horizontal flip
    [[1, 0], [0, -1]],  // vertical flip
    [[0, 1], [1, 0]],   // transpose
    [[0, -1], [-1, 0]], // anti-transpose
];

fn matmul(a: [[i32; 2]; 2], b: [[i32; 2]; 2]) -> [[i32; 2]; 2] {
    let mut c = [[0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn random_sample(rng: &mut impl Rng, n: usize, slots: usize) -> TileSample {
    let channels = slots;
    TileSample {
        id: "s".into(),
        input: (0..channels * n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        channels,
        height: n,
        width: n,
        target: (0..n * n).map(|_| [0, 1, 255][rng.random_range(0..3)]).collect(),
        geobox: GeoBox::from_origin(0.0, 0.0, 1e-4, n, n).unwrap(),
        target_date: date(2019, 8, 15),
        present: vec![true; slots],
        layout: (0..slots)
            .map(|s| SlotLayout {
                satellite: Satellite::Sentinel1,
                slot: s,
                channel_start: s,
                channel_count: 1,
            })
            .collect(),
        fill: -9999.0,
    }
}

fn augmentation_laws() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(14, &[]);
    let table: Vec<Vec<usize>> = (0..8)
        .map(|a| {
            (0..8)
                .map(|b| {
                    let m = matmul(ELEMENTS[a], ELEMENTS[b]);
                    ELEMENTS.iter().position(|e| *e == m).unwrap()
                })
                .collect()
        })
        .collect();
    let mut compositions = 0;
    for _ in 0..20 {
        let n = rng.random_range(1..=9);
        let s = random_sample(&mut rng, n, 3);
        let images: Vec<TileSample> = Dihedral::all().map(|d| dihedral(&s, d).unwrap()).collect();
        for (a, img) in images.iter().enumerate() {
            let m = ELEMENTS[a];
            let k = n as i32 - 1;
            for i in 0..n {
                for j in 0..n {
                    let (u, v) = (2 * j as i32 - k, 2 * i as i32 - k);
                    let (su, sv) = (m[0][0] * u + m[0][1] * v, m[1][0] * u + m[1][1] * v);
                    let (si, sj) = (((sv + k) / 2) as usize, ((su + k) / 2) as usize);
                    ensure(img.target[i * n + j] == s.target[si * n + sj], || format!("element {a} moves ({i},{j}) wrongly"))?;
                    for c in 0..3 {
                        ensure(img.input[c * n * n + i * n + j] == s.input[c * n * n + si * n + sj], || {
                            format!("element {a} channel {c} moves ({i},{j}) wrongly")
                        })?;
                    }
                }
            }
            for b in 0..8 {
                let twice = dihedral(img, Dihedral::new(b as u8).unwrap()).unwrap();
                ensure(twice == images[table[a][b]], || format!("{a} then {b} != {}", table[a][b]))?;
                compositions += 1;
            }
        }
    }

    let mut seen = [false; 5];
    let base = random_sample(&mut rng, 4, 8);
    for s in 0..1000u64 {
        let out = satellite_dropout(&base, s, 0.5);
        let dropped = out.present.iter().filter(|p| !**p).count();
        ensure(dropped <= 4, || format!("seed {s} dropped {dropped} of 8 slots"))?;
        seen[dropped] = true;
        for l in &base.layout {
            let n = base.pixel_count();
            let chunk = &out.input[l.channel_start * n..(l.channel_start + l.channel_count) * n];
            let ok = if out.present[l.slot] {
                chunk == &base.input[l.channel_start * n..(l.channel_start + l.channel_count) * n]
            } else {
                chunk.iter().all(|&v| v == base.fill)
            };
            ensure(ok, || format!("seed {s}: slot {} content inconsistent with its flag", l.slot))?;
        }
    }
    ensure(seen.iter().all(|&s| s), || format!("drop counts seen {seen:?}"))?;
    Ok(format!(
        "{compositions} compositions match the group table, dropout <= 4 of 8 over 1000 seeds, {:.2?}",
        start.elapsed()
    ))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(why) => {
            failed += 1;
            println!("FAIL {name}: {why}");
        }
    };
    report("metric oracles", metric_oracles());
    report("gradient correctness", gradient_correctness());
    report("resampling invariants", resampling_invariants());
    report("split hygiene", split_hygiene());
    report("augmentation laws", augmentation_laws());

    match corpus() {
        Ok(c) => {
            let start = Instant::now();
            match train_seed(&c, 0) {
                Ok(run) => {
                    report("overfit smoke test", overfit(&c, &run, start.elapsed()));
                    report("blending improves or matches", blending(&c, &run));
                }
                Err(e) => {
                    report("overfit smoke test", Err(e.clone()));
                    report("blending improves or matches", Err(e));
                }
            }
        }
        Err(e) => {
            report("overfit smoke test", Err(e.clone()));
            report("blending improves or matches", Err(e));
        }
    }
    report("determinism", determinism());

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
