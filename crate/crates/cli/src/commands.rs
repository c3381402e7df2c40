use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use promptcount::benchmark::{calibrate, run_scene, run_split, summarize, BenchMetrics, Protocol, SceneResult};
use promptcount::checkpoint;
use promptcount::embed::EmbedderBackend;
use promptcount::model::Model;
use promptcount::pipeline::{Detection, PromptMode};
use promptcount::synth::{make_dataset, Dataset, Split};
use promptcount::train::{new_optimizer, prepare_scene, train, EmbeddingCache, PreparedScene, Stage, StepRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{resolve, RunConfig};
use crate::report;

/// Written once at the end of a command; never modified afterwards.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub diagnostics: Option<PathBuf>,
    pub wall_clock_s: f64,
}

fn write_record(dir: &Path, name: &str, rec: &RunRecord) -> Result<()> {
    let path = dir.join(name);
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&path)
        .with_context(|| format!("run record {} already exists", path.display()))?;
    f.write_all(&serde_json::to_vec_pretty(rec)?)?;
    Ok(())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn gen_data(cfg: &RunConfig, root: &Path, out: Option<&Path>, force: bool) -> Result<()> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| resolve(root, &cfg.dataset));
    if is_nonempty_dir(&dir) {
        if !force {
            bail!("{} is not empty; pass --force to overwrite", dir.display());
        }
        fs::remove_dir_all(&dir)?;
    }
    let t = Instant::now();
    let manifest = make_dataset(&dir, &cfg.data)?;
    log::info!("wrote {} scenes to {} in {:.1}s", manifest.scenes.len(), dir.display(), t.elapsed().as_secs_f64());
    println!("{}", serde_json::json!({ "dataset": dir, "scenes": manifest.scenes.len(), "config_hash": manifest.config_hash }));
    Ok(())
}

/// Open the dataset and check it was generated with the configured settings.
pub fn open_dataset(cfg: &RunConfig, root: &Path) -> Result<Dataset> {
    let dir = resolve(root, &cfg.dataset);
    let ds = Dataset::open(&dir).with_context(|| format!("opening dataset {}", dir.display()))?;
    if ds.manifest.config != cfg.data {
        let a = serde_json::to_value(&ds.manifest.config)?;
        let b = serde_json::to_value(&cfg.data)?;
        let mut diff = Vec::new();
        json_diff("data", &a, &b, &mut diff);
        bail!("dataset {} was generated with different settings:\n{}", dir.display(), diff.join("\n"));
    }
    Ok(ds)
}

fn json_diff(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, v) in x {
                let p = format!("{path}.{k}");
                match y.get(k) {
                    Some(w) => json_diff(&p, v, w, out),
                    None => out.push(format!("  {p}: dataset {v}, config <missing>")),
                }
            }
        }
        _ if a != b => out.push(format!("  {path}: dataset {a}, config {b}")),
        _ => {}
    }
}

pub struct TrainArgs {
    pub run: String,
    pub stage: Option<Stage>,
    pub no_kd: bool,
    pub resume: bool,
    pub force: bool,
    pub init: Option<PathBuf>,
    pub save_every: u64,
}

const FINAL_CKPT: &str = "checkpoint";
const STATE_CKPT: &str = "state";
const LOSS_CSV: &str = "loss.csv";

pub fn cmd_train(mut cfg: RunConfig, root: &Path, args: &TrainArgs) -> Result<()> {
    let t0 = Instant::now();
    let run_dir = root.join(&args.run);
    if let Some(s) = args.stage {
        cfg.train.stage = s;
    }
    if args.no_kd {
        cfg.train.weights.kd = 0.0;
    }
    if !args.resume && is_nonempty_dir(&run_dir) {
        if !args.force {
            bail!("run directory {} exists; pass --resume or --force", run_dir.display());
        }
        fs::remove_dir_all(&run_dir)?;
    }
    if args.resume {
        let stored = RunConfig::load(Some(&run_dir.join(crate::config::CONFIG_FILE)), &[])?;
        if stored.train.seed != cfg.train.seed || stored.model != cfg.model || stored.data != cfg.data {
            bail!("resume: the configuration differs from the stored run in seed, model or data");
        }
    }
    cfg.dataset = absolute(&resolve(root, &cfg.dataset))?;
    let ds = open_dataset(&cfg, root)?;
    fs::create_dir_all(&run_dir)?;
    cfg.save(&run_dir)?;
    let config_hash = cfg.hash()?;

    let (mut model, mut adam) = if args.resume && run_dir.join(STATE_CKPT).exists() {
        let ck = checkpoint::load(&run_dir.join(STATE_CKPT))?;
        let adam = ck.adam.context("resume state has no optimizer moments")?;
        log::info!("resuming at step {}", adam.step);
        (ck.model, adam)
    } else {
        let mut model = Model::init(cfg.model.clone(), cfg.train.seed)?;
        if let Some(init) = &args.init {
            let ck = checkpoint::load(init)?;
            model.load_subset(&ck.model.params)?;
        } else if cfg.train.stage == Stage::Cls {
            bail!("--stage cls trains on a frozen encoder; pass --init <checkpoint>");
        }
        let adam = new_optimizer(&model, cfg.train.stage);
        (model, adam)
    };
    let start = adam.step;

    let embedder = ds.registry.embedder.clone();
    let classes = ds.plan().classes(Split::Train).to_vec();
    let rows: Vec<Vec<f64>> = classes.iter().map(|&c| embedder.embed_name(c)).collect::<promptcount::Result<_>>()?;
    let scenes = ds.load_split(Split::Train)?;
    let cache = EmbeddingCache::new(&root.join("cache").join("embeddings"))?;
    let stride = model.stride();
    let prepared: Vec<PreparedScene> = scenes
        .par_iter()
        .map(|s| prepare_scene(s, stride, &embedder, &classes, &cfg.train, Some(&cache)))
        .collect::<promptcount::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    log::info!("prepared {} of {} training scenes in {:.1}s", prepared.len(), scenes.len(), t0.elapsed().as_secs_f64());

    let csv_path = run_dir.join(LOSS_CSV);
    let mut lines: Vec<String> = match fs::read_to_string(&csv_path) {
        Ok(text) if start > 0 => text.lines().skip(1).take(start as usize).map(String::from).collect(),
        _ => Vec::new(),
    };
    let mut csv = fs::File::create(&csv_path)?;
    writeln!(csv, "{}", StepRecord::CSV_HEADER)?;
    for l in &lines {
        writeln!(csv, "{l}")?;
    }
    lines.clear();
    let state_dir = run_dir.join(STATE_CKPT);
    let seed = cfg.train.seed;
    let steps = cfg.train.steps;
    let save_every = args.save_every;
    train(&mut model, &mut adam, &prepared, &rows, &cfg.train, |rec, m, a| {
        writeln!(csv, "{}", rec.csv_line())?;
        if rec.step % 50 == 0 || rec.step == 1 {
            log::info!("step {} loss {:.5} (point {:.5} cls {:.4} kd {:.4})", rec.step, rec.total, rec.point, rec.cls, rec.kd);
        }
        if save_every > 0 && (rec.step % save_every == 0 || rec.step == steps) {
            csv.flush()?;
            checkpoint::save(&state_dir, m, Some(a), seed, &config_hash)?;
        }
        Ok(())
    })?;
    csv.flush()?;
    let final_dir = run_dir.join(FINAL_CKPT);
    checkpoint::save(&final_dir, &model, None, seed, &config_hash)?;
    let rec = RunRecord {
        command: "train".into(),
        config_hash,
        checkpoints: vec![absolute(&final_dir)?],
        metrics: None,
        diagnostics: None,
        wall_clock_s: t0.elapsed().as_secs_f64(),
    };
    let _ = fs::remove_file(run_dir.join("record.json"));
    write_record(&run_dir, "record.json", &rec)?;
    println!("{}", serde_json::json!({ "run": run_dir, "checkpoint": final_dir, "steps": steps }));
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub dataset_config_hash: String,
    pub checkpoint_config_hash: String,
    pub split: Split,
    pub prompt_mode: PromptMode,
    pub calibrated_on: Option<Split>,
    pub metrics: BenchMetrics,
}

#[derive(Serialize)]
struct DetectionLine<'a> {
    image_id: &'a str,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class: u32,
    score: f64,
    prompt_group: usize,
    level: &'static str,
}

fn detection_line<'a>(id: &'a str, d: &Detection) -> DetectionLine<'a> {
    DetectionLine { image_id: id, bbox: d.bbox.to_array(), class: d.class_id, score: d.score, prompt_group: d.prompt_group, level: d.level.as_str() }
}

pub fn cmd_eval(mut cfg: RunConfig, root: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let t0 = Instant::now();
    let ck_path = cfg.eval.checkpoint.clone().context("no checkpoint: pass --checkpoint or set eval.checkpoint")?;
    let ck_path = absolute(&resolve(root, &ck_path))?;
    let ck = checkpoint::load(&ck_path).with_context(|| format!("loading checkpoint {}", ck_path.display()))?;
    cfg.eval.checkpoint = Some(ck_path.clone());
    cfg.dataset = absolute(&resolve(root, &cfg.dataset))?;
    cfg.model = ck.model.config.clone();
    let ds = open_dataset(&cfg, root)?;
    let hash = cfg.hash()?;
    let out_dir = match out {
        Some(p) => p.to_path_buf(),
        None => root.join(format!("eval-{}-{}-{}", cfg.eval.protocol.as_str(), cfg.pipeline.mode.as_str(), &hash[..8])),
    };
    if is_nonempty_dir(&out_dir) {
        bail!("output directory {} is not empty", out_dir.display());
    }
    fs::create_dir_all(&out_dir)?;
    cfg.save(&out_dir)?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.eval.jobs).build()?;
    let embedder = &ds.registry.embedder;
    let model = &ck.model;
    let proto = cfg.eval.protocol;
    let (threshold, calibrated_on) = match cfg.eval.calibrate_on {
        Some(split) => {
            let scenes = ds.load_split(split)?;
            let res = pool.install(|| run_split(model, embedder, &scenes, proto, &cfg.pipeline))?;
            (calibrate(&res)?, Some(split))
        }
        None => (cfg.pipeline.count_threshold, None),
    };
    let scenes = ds.load_split(cfg.eval.split)?;
    let results = pool.install(|| run_split(model, embedder, &scenes, proto, &cfg.pipeline))?;
    let metrics = summarize(&results, &scenes, proto, threshold, cfg.eval.interpolation)?;

    let mut jl = fs::File::create(out_dir.join("detections.jsonl"))?;
    for r in &results {
        for d in &r.detections {
            writeln!(jl, "{}", serde_json::to_string(&detection_line(&r.image_id, d))?)?;
        }
    }
    let em = EvalMetrics {
        dataset_config_hash: ds.manifest.config_hash.clone(),
        checkpoint_config_hash: ck.manifest.config_hash.clone(),
        split: cfg.eval.split,
        prompt_mode: cfg.pipeline.mode,
        calibrated_on,
        metrics,
    };
    fs::write(out_dir.join("metrics.json"), serde_json::to_vec_pretty(&em)?)?;
    let diag: Vec<serde_json::Value> = results
        .iter()
        .map(|r| serde_json::json!({ "image_id": r.image_id, "gt_count": r.gt_count, "diagnostics": r.diagnostics }))
        .collect();
    fs::write(
        out_dir.join("diagnostics.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "avg_candidate_points": em.metrics.avg_candidate_points,
            "max_candidate_points": em.metrics.max_candidate_points,
            "k": cfg.pipeline.k,
            "scenes": diag,
        }))?,
    )?;
    let table = report::render_table(&[report::Row::from_eval(&out_dir.display().to_string(), &em)]);
    fs::write(out_dir.join("report.txt"), &table)?;
    if cfg.eval.plots {
        report::count_scatter(&results, threshold, &out_dir.join("counts.png"))?;
        report::pr_curve(&results, &scenes, &out_dir.join("pr50.png"))?;
    }
    let rec = RunRecord {
        command: "eval".into(),
        config_hash: hash,
        checkpoints: vec![ck_path],
        metrics: Some(absolute(&out_dir.join("metrics.json"))?),
        diagnostics: Some(absolute(&out_dir.join("diagnostics.json"))?),
        wall_clock_s: t0.elapsed().as_secs_f64(),
    };
    write_record(&out_dir, "record.json", &rec)?;
    print!("{table}");
    Ok(out_dir)
}

pub fn cmd_infer(mut cfg: RunConfig, root: &Path, scene_id: &str, out: &Path) -> Result<()> {
    let ck_path = cfg.eval.checkpoint.clone().context("no checkpoint: pass --checkpoint or set eval.checkpoint")?;
    let ck = checkpoint::load(&resolve(root, &ck_path))?;
    cfg.model = ck.model.config.clone();
    let ds = open_dataset(&cfg, root)?;
    let entry = ds.manifest.scenes.iter().find(|e| e.id == scene_id).with_context(|| format!("no scene {scene_id:?} in the dataset"))?;
    let scene = ds.load_scene(entry)?;
    let result: SceneResult = run_scene(&ck.model, &ds.registry.embedder, &scene, cfg.eval.protocol, &cfg.pipeline)?;
    let threshold = cfg.pipeline.count_threshold;
    fs::create_dir_all(out)?;
    let counted: Vec<&Detection> = result.detections.iter().filter(|d| d.score > threshold).collect();
    let overlay = report::overlay(&scene.image, &result.detections, threshold, cfg.eval.protocol == Protocol::Few, &scene.exemplar_boxes());
    overlay.save(out.join("overlay.png"))?;
    let dets: Vec<DetectionLine> = result.detections.iter().map(|d| detection_line(scene_id, d)).collect();
    let json = serde_json::json!({
        "image_id": scene_id,
        "count": counted.len(),
        "gt_count": result.gt_count,
        "threshold": threshold,
        "detections": dets,
        "diagnostics": result.diagnostics,
    });
    fs::write(out.join("result.json"), serde_json::to_vec_pretty(&json)?)?;
    println!("{}", serde_json::json!({ "image_id": scene_id, "count": counted.len(), "gt_count": result.gt_count, "out": out }));
    Ok(())
}

pub fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if dirs.is_empty() {
        bail!("report needs at least one eval directory");
    }
    let mut rows = Vec::new();
    for d in dirs {
        let path = d.join("metrics.json");
        let em: EvalMetrics = serde_json::from_slice(&fs::read(&path).with_context(|| format!("reading {}", path.display()))?)?;
        rows.push(report::Row::from_eval(&d.display().to_string(), &em));
    }
    let table = report::render_table(&rows);
    if let Some(p) = out {
        fs::write(p, &table)?;
    }
    print!("{table}");
    Ok(())
}
