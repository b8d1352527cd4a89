use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use terraseg::catalog::{build_catalog, Catalog};
use terraseg::eval::{self, Scored, DEFAULT_THRESHOLD};
use terraseg::model::{gradcheck, Checkpoint, UNet};
use terraseg::raster::{tsrf, Raster, Satellite};
use terraseg::splits::{self, FoldAssignment, SplitTile};
use terraseg::stacker::store::{self, TileStore};
use terraseg::stacker::{build_tiles, SceneCache, StackSpec, TileSample};
use terraseg::synth;
use terraseg::train;

use crate::config::{PipelineConfig, Task};
use crate::error::CliError;
use crate::Command;

pub const PROB_SUFFIX: &str = ".prob.tsrf";
pub const PROB_BAND: &str = "probability";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.tsck";
pub const BEST_CHECKPOINT: &str = "best.tsck";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";
pub const GRADCHECK_JSON: &str = "gradcheck.json";

type Result<T> = std::result::Result<T, CliError>;

pub struct Context {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn at(&self, rel: &Path) -> PathBuf {
        self.out.join(rel)
    }

    /// `--out` itself when it names a file with extension `ext`, else `default` inside it.
    fn file_target(&self, ext: &str, default: &Path) -> PathBuf {
        if self.out.extension().is_some_and(|e| e == ext) {
            self.out.clone()
        } else {
            self.at(default)
        }
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:02}.tsck")
}

pub fn prob_name(id: &str) -> String {
    format!("{id}{PROB_SUFFIX}")
}

fn io_err(what: String, e: std::io::Error) -> CliError {
    terraseg::Error::io(what, e).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(format!("create {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| io_err(format!("write {}", path.display()), e))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::runtime(format!("encode json: {e}")))
}

pub fn dispatch(ctx: &Context, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth_cmd(ctx, a),
        Command::Catalog(a) => catalog_cmd(ctx, a),
        Command::Tiles(a) => tiles_cmd(ctx, a),
        Command::Split(a) => split_cmd(ctx, a),
        Command::Train(a) => train_cmd(ctx, a),
        Command::Predict(a) => predict_cmd(ctx, a),
        Command::Blend(a) => blend_cmd(ctx, a),
        Command::Eval(a) => eval_cmd(ctx, a),
        Command::Gradcheck => gradcheck_cmd(ctx),
    }
}

fn synth_cmd(ctx: &Context, a: &crate::SynthArgs) -> Result<()> {
    let mut cfg = ctx.cfg.synth();
    if let Some(n) = a.n_tiles {
        cfg.n_tiles = n;
    }
    if let Some(t) = a.tile_size {
        cfg.tile_size = t;
    }
    let root = ctx.at(&ctx.cfg.paths.corpus);
    let manifest = synth::generate(&root, &cfg)?;
    println!(
        "synth: {} tiles of {}x{} px, {} scenes -> {}",
        cfg.n_tiles,
        cfg.tile_size,
        cfg.tile_size,
        manifest.files.len(),
        root.display()
    );
    Ok(())
}

fn catalog_cmd(ctx: &Context, a: &crate::CatalogArgs) -> Result<()> {
    let root = a.root.clone().unwrap_or_else(|| ctx.at(&ctx.cfg.paths.corpus));
    let build = build_catalog(&root)?;
    for d in &build.diagnostics {
        eprintln!("{}", serde_json::json!({ "diagnostic": d }));
    }
    let path = ctx.file_target("jsonl", &ctx.cfg.paths.catalog);
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    build.catalog.write_jsonl(&path)?;
    println!(
        "catalog: {} records, {} diagnostics -> {}",
        build.catalog.len(),
        build.diagnostics.len(),
        path.display()
    );
    Ok(())
}

fn tiles_cmd(ctx: &Context, a: &crate::TilesArgs) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(path) = &a.spec {
        let text = fs::read_to_string(path).map_err(|e| io_err(format!("read {}", path.display()), e))?;
        let spec: StackSpec =
            serde_json::from_str(&text).map_err(|e| CliError::input(format!("parse {}: {e}", path.display())))?;
        cfg.stack = Some(spec);
    }
    let spec = cfg.stack();
    let catalog_path = a.catalog.clone().unwrap_or_else(|| ctx.at(&cfg.paths.catalog));
    let catalog = Catalog::read_jsonl(&catalog_path)?;
    let use_land = a.land_mask || cfg.task == Task::Fire;
    let samples = build_tiles(&catalog, &spec, cfg.window(), use_land, &SceneCache::new())?;
    let dir = ctx.at(&cfg.paths.tiles);
    create_dir(&dir)?;
    let names = spec.channel_names();
    let entries = samples
        .par_iter()
        .map(|s| store::write_tile(&dir, s, &names))
        .collect::<terraseg::Result<Vec<_>>>()?;
    TileStore::create(&dir, &spec, entries)?;
    println!(
        "tiles: {} tiles of {} channels -> {}",
        samples.len(),
        spec.channel_count(),
        dir.display()
    );
    Ok(())
}

fn load_target(dir: &Path, id: &str) -> Result<Vec<u8>> {
    let r = tsrf::read(&store::target_path(dir, id))?;
    Ok(store::decode_target(r.band(0)))
}

fn split_cmd(ctx: &Context, a: &crate::SplitArgs) -> Result<()> {
    let dir = a.tiles.clone().unwrap_or_else(|| ctx.at(&ctx.cfg.paths.tiles));
    let store = TileStore::open(&dir)?;
    let entries: Vec<_> = store.entries().collect();
    let tiles = entries
        .par_iter()
        .map(|e| {
            Ok(SplitTile {
                id: e.id.clone(),
                geobox: e.geobox,
                target_date: e.target_date,
                has_positive: load_target(&dir, &e.id)?.contains(&1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if tiles.is_empty() {
        return Err(CliError::input(format!("tile store {} is empty", dir.display())));
    }
    let mut folds = match a.temporal {
        Some(year) => {
            let t = splits::temporal_split(&tiles, year)?;
            let folds = t
                .train
                .into_iter()
                .map(|id| (id, 0))
                .chain(t.validation.into_iter().map(|id| (id, 1)))
                .collect();
            FoldAssignment {
                folds,
                k: 2,
                cell_size: 0.0,
            }
        }
        None => {
            let k = a.k.unwrap_or(ctx.cfg.split.k);
            let pixel = tiles[0].geobox.pixel_size_x();
            let cell = a.cell_size.unwrap_or_else(|| ctx.cfg.cell_size(store.spec().tile_size, pixel));
            splits::spatial_kfold(&tiles, k, cell, ctx.cfg.seed)?
        }
    };
    if let Some(path) = &a.override_csv {
        folds.apply_override(&splits::read_fold_csv(path)?)?;
    }
    let path = ctx.file_target("csv", &ctx.cfg.paths.folds);
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    folds.write_csv(&path)?;
    let sizes: Vec<usize> = (0..folds.k).map(|f| folds.ids_in(f).len()).collect();
    println!("split: {} tiles, fold sizes {:?} -> {}", tiles.len(), sizes, path.display());
    Ok(())
}

fn load_samples(store: &TileStore, ids: &[String]) -> Result<Vec<TileSample>> {
    Ok(ids
        .par_iter()
        .map(|id| store.load(id))
        .collect::<terraseg::Result<Vec<_>>>()?)
}

fn read_folds(path: &Path, store: &TileStore) -> Result<BTreeMap<String, usize>> {
    let folds = splits::read_fold_csv(path)?;
    if let Some(id) = folds.keys().find(|id| store.entry(id).is_none()) {
        return Err(CliError::input(format!(
            "{} lists tile {id}, which is not in the tile store",
            path.display()
        )));
    }
    Ok(folds)
}

fn split_tile(s: &TileSample) -> SplitTile {
    SplitTile {
        id: s.id.clone(),
        geobox: s.geobox,
        target_date: s.target_date,
        has_positive: s.has_positive(),
    }
}

fn train_cmd(ctx: &Context, a: &crate::TrainArgs) -> Result<()> {
    let mut cfg = ctx.cfg.train();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr_max = lr;
    }
    let keep_prob = a.keep_prob.unwrap_or(ctx.cfg.split.keep_prob);
    let dir = a.tiles.clone().unwrap_or_else(|| ctx.at(&ctx.cfg.paths.tiles));
    let store = TileStore::open(&dir)?;
    let folds_path = a.folds.clone().or_else(|| {
        let p = ctx.at(&ctx.cfg.paths.folds);
        p.exists().then_some(p)
    });
    let (train_ids, val_ids) = match &folds_path {
        Some(p) => {
            let mut train_ids = Vec::new();
            let mut val_ids = Vec::new();
            for (id, fold) in read_folds(p, &store)? {
                if fold == a.val_fold {
                    val_ids.push(id);
                } else {
                    train_ids.push(id);
                }
            }
            (train_ids, val_ids)
        }
        None => (store.entries().map(|e| e.id.clone()).collect(), Vec::new()),
    };
    if folds_path.is_some() && val_ids.is_empty() {
        return Err(CliError::input(format!("validation fold {} has no tiles", a.val_fold)));
    }
    let all_train = load_samples(&store, &train_ids)?;
    let descriptors: Vec<SplitTile> = all_train.iter().map(split_tile).collect();
    let kept: BTreeSet<&str> = splits::downsample_easy(&descriptors, keep_prob, ctx.cfg.seed)?
        .into_iter()
        .map(|t| t.id.as_str())
        .collect();
    let train_set: Vec<TileSample> = all_train.iter().filter(|s| kept.contains(s.id.as_str())).cloned().collect();
    let val_set = load_samples(&store, &val_ids)?;

    let model_cfg = ctx.cfg.model(store.spec().channel_count());
    let model = UNet::init(model_cfg, ctx.cfg.seed)?;
    let ck_dir = ctx.at(&ctx.cfg.paths.checkpoints);
    create_dir(&ck_dir)?;
    let log_path = ctx.at(&ctx.cfg.paths.reports).join(TRAIN_LOG);
    write_text(&log_path, "")?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(format!("open {}", log_path.display()), e))?;
    println!(
        "train: {} tiles ({} easy tiles dropped), {} validation tiles, {} epochs",
        train_set.len(),
        all_train.len() - train_set.len(),
        val_set.len(),
        cfg.epochs
    );
    let result = train::fit(model, &train_set, &val_set, &cfg, |entry, ck| {
        ck.save(&ck_dir.join(checkpoint_name(entry.epoch)))?;
        let line = serde_json::to_string(entry).map_err(|e| terraseg::Error::json("encode epoch log", e))?;
        writeln!(log, "{line}").map_err(|e| terraseg::Error::io(format!("write {}", log_path.display()), e))?;
        println!("{line}");
        Ok(())
    })?;
    result.last.save(&ck_dir.join(LAST_CHECKPOINT))?;
    if let Some(best) = &result.best {
        best.save(&ck_dir.join(BEST_CHECKPOINT))?;
    }
    println!("train: checkpoints -> {}", ck_dir.display());
    Ok(())
}

pub fn probability_raster(s: &TileSample, probs: Vec<f32>) -> terraseg::Result<Raster> {
    Raster::new(
        Satellite::Synthetic,
        s.target_date,
        s.geobox,
        vec![PROB_BAND.to_string()],
        probs,
    )
}

fn predict_cmd(ctx: &Context, a: &crate::PredictArgs) -> Result<()> {
    let ck_path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| ctx.at(&ctx.cfg.paths.checkpoints).join(LAST_CHECKPOINT));
    let ck = Checkpoint::load(&ck_path)?;
    let dir = a.tiles.clone().unwrap_or_else(|| ctx.at(&ctx.cfg.paths.tiles));
    let store = TileStore::open(&dir)?;
    let ids: Vec<String> = match a.fold {
        Some(fold) => {
            let p = a.folds.clone().unwrap_or_else(|| ctx.at(&ctx.cfg.paths.folds));
            read_folds(&p, &store)?
                .into_iter()
                .filter(|(_, f)| *f == fold)
                .map(|(id, _)| id)
                .collect()
        }
        None => store.entries().map(|e| e.id.clone()).collect(),
    };
    let samples = load_samples(&store, &ids)?;
    let probs = train::predict(&ck, &samples)?;
    let out = ctx.at(&ctx.cfg.paths.predictions);
    create_dir(&out)?;
    samples
        .par_iter()
        .zip(probs)
        .map(|(s, p)| tsrf::write(&out.join(prob_name(&s.id)), &probability_raster(s, p)?))
        .collect::<terraseg::Result<()>>()?;
    println!("predict: {} maps -> {}", samples.len(), out.display());
    Ok(())
}

/// Sorted `(id, path)` of every probability map in `dir`.
pub fn list_maps(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| io_err(format!("read {}", dir.display()), e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| io_err(format!("read {}", dir.display()), e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(id) = name.strip_suffix(PROB_SUFFIX) {
            out.push((id.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

fn read_map(path: &Path) -> Result<Raster> {
    let r = tsrf::read(path)?;
    if r.band_count() != 1 {
        return Err(CliError::input(format!(
            "{} has {} bands; a probability map has one",
            path.display(),
            r.band_count()
        )));
    }
    Ok(r)
}

fn blend_files(paths: &[PathBuf], out: &Path) -> Result<()> {
    let maps = paths.iter().map(|p| read_map(p)).collect::<Result<Vec<_>>>()?;
    let first = &maps[0];
    if let Some((p, _)) = paths.iter().zip(&maps).find(|(_, m)| m.geobox() != first.geobox()) {
        return Err(CliError::input(format!(
            "{} is not on the grid of {}",
            p.display(),
            paths[0].display()
        )));
    }
    let data: Vec<&[f32]> = maps.iter().map(|m| m.data()).collect();
    let mean = eval::blend(&data)?;
    let r = Raster::new(
        Satellite::Synthetic,
        first.timestamp(),
        *first.geobox(),
        vec![PROB_BAND.to_string()],
        mean,
    )?;
    tsrf::write(out, &r)?;
    Ok(())
}

fn blend_cmd(ctx: &Context, a: &crate::BlendArgs) -> Result<()> {
    let dirs = a.inputs.iter().filter(|p| p.is_dir()).count();
    if dirs == 0 {
        let out = ctx.file_target("tsrf", &ctx.cfg.paths.blend.with_extension("tsrf"));
        if let Some(parent) = out.parent() {
            create_dir(parent)?;
        }
        blend_files(&a.inputs, &out)?;
        println!("blend: {} maps -> {}", a.inputs.len(), out.display());
        return Ok(());
    }
    if dirs != a.inputs.len() {
        return Err(CliError::input("blend inputs must be all files or all directories"));
    }
    let listings = a.inputs.iter().map(|d| list_maps(d)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<&String> = listings[0].iter().map(|(id, _)| id).collect();
    for (dir, listing) in a.inputs.iter().zip(&listings) {
        let other: Vec<&String> = listing.iter().map(|(id, _)| id).collect();
        if other != ids {
            return Err(CliError::input(format!(
                "{} and {} hold different tiles",
                dir.display(),
                a.inputs[0].display()
            )));
        }
    }
    let out = ctx.at(&ctx.cfg.paths.blend);
    create_dir(&out)?;
    ids.par_iter()
        .enumerate()
        .map(|(i, id)| {
            let paths: Vec<PathBuf> = listings.iter().map(|l| l[i].1.clone()).collect();
            blend_files(&paths, &out.join(prob_name(id)))
        })
        .collect::<Result<()>>()?;
    println!("blend: {} tiles from {} models -> {}", ids.len(), a.inputs.len(), out.display());
    Ok(())
}

struct Pair {
    id: String,
    probs: Vec<f32>,
    labels: Vec<u8>,
}

fn eval_cmd(ctx: &Context, a: &crate::EvalArgs) -> Result<()> {
    let threshold = a.threshold.or(ctx.cfg.threshold).unwrap_or(DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::input(format!("threshold {threshold} outside [0, 1]")));
    }
    let pred = a.pred.clone().unwrap_or_else(|| ctx.at(&ctx.cfg.paths.predictions));
    let gt = a.gt.clone().unwrap_or_else(|| ctx.at(&ctx.cfg.paths.tiles));
    if !pred.exists() {
        return Err(CliError::input(format!("{} does not exist", pred.display())));
    }
    let pairs: Vec<Pair> = if pred.is_dir() {
        let maps = list_maps(&pred)?;
        if maps.is_empty() {
            return Err(CliError::input(format!("no probability maps in {}", pred.display())));
        }
        maps.par_iter()
            .map(|(id, path)| {
                Ok(Pair {
                    id: id.clone(),
                    probs: read_map(path)?.into_data(),
                    labels: load_target(&gt, id)?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let id = pred
            .file_name()
            .and_then(|n| n.to_str())
            .map(|n| n.strip_suffix(PROB_SUFFIX).unwrap_or(n).to_string())
            .unwrap_or_default();
        let target = tsrf::read(&gt)?;
        vec![Pair {
            id,
            probs: read_map(&pred)?.into_data(),
            labels: store::decode_target(target.band(0)),
        }]
    };
    let ignores: Vec<Vec<bool>> = pairs
        .iter()
        .map(|p| p.labels.iter().map(|&l| l > 1).collect())
        .collect();
    let scored: Vec<Scored> = pairs
        .iter()
        .zip(&ignores)
        .map(|(p, ig)| Scored {
            id: &p.id,
            probs: &p.probs,
            labels: &p.labels,
            ignore: ig,
        })
        .collect();
    let report = eval::evaluate(&scored, threshold, a.auc)?;
    let reports = ctx.at(&ctx.cfg.paths.reports);
    write_text(&reports.join(METRICS_JSON), &to_json(&report)?)?;
    let table = report.to_table();
    write_text(&reports.join(METRICS_TABLE), &table)?;
    print!("{table}");
    Ok(())
}

fn gradcheck_cmd(ctx: &Context) -> Result<()> {
    let checks = gradcheck::run_all(ctx.cfg.seed)?;
    println!(
        "{:<16} {:>6} {:>8} {:>12} {:>10}  result",
        "check", "points", "skipped", "max rel err", "tolerance"
    );
    for c in &checks {
        println!(
            "{:<16} {:>6} {:>8} {:>12.3e} {:>10.0e}  {}",
            c.name,
            c.points,
            c.skipped_kinks,
            c.max_rel_err,
            c.tolerance,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    write_text(&ctx.at(&ctx.cfg.paths.reports).join(GRADCHECK_JSON), &to_json(&checks)?)?;
    match checks.iter().find(|c| !c.passed()) {
        Some(c) => Err(CliError::runtime(format!(
            "gradient check {} failed: {:.3e} >= {:.0e}",
            c.name, c.max_rel_err, c.tolerance
        ))),
        None => Ok(()),
    }
}
