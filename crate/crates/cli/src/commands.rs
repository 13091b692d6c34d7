use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use monet_core::data::{
    self, generate_multidsprites, image_batch, load_png, save_png, DatasetHeader, DatasetWriter, LabeledScene,
    SpriteConfig,
};
use monet_core::evaluation::{render_panels, score_source, segment, traverse_latent, AblationReport, AblationRun};
use monet_core::model::MonetArch;
use monet_core::training::{read_metrics, Checkpoint, MetricWriter, TrainConfig, Trainer};
use serde_json::{json, Map, Value};

use crate::manifest::{now, source_revision, Outputs, RunManifest, CHECKPOINT_DIR, MANIFEST_VERSION, METRICS_FILE};
use crate::source::Source;
use crate::{AblateArgs, ArchChoice, EvalArgs, GenDataArgs, PreprocessArgs, TrainArgs, TraverseArgs};

pub const EVAL_METRICS_VERSION: u32 = 1;
const GEN_CHUNK: u64 = 1024;

pub fn init_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("starting the thread pool")
}

fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    let config = SpriteConfig { max_sprites: a.max_sprites, ..SpriteConfig::new(a.size) };
    config.validate()?;
    if a.out.exists() && !a.force {
        bail!("{} already exists; pass --force to overwrite it", a.out.display());
    }
    let mut header = DatasetHeader::new(a.count, a.size, a.size, config.mask_slots(), a.max_sprites, "multi-dsprites");
    header.seed = Some(a.seed);
    let tmp = partial_path(&a.out);
    let mut writer = DatasetWriter::create(&tmp, header)?;
    let mut histogram = vec![0u64; a.max_sprites + 1];
    let mut start = 0;
    while start < a.count {
        let n = GEN_CHUNK.min(a.count - start);
        for scene in generate_multidsprites(a.seed, start, n as usize, &config)? {
            histogram[scene.sprites.len()] += 1;
            writer.write(&scene)?;
        }
        start += n;
    }
    writer.finish()?;
    fs::rename(&tmp, &a.out).with_context(|| format!("moving dataset to {}", a.out.display()))?;
    println!("wrote {} scenes of {}x{} to {}", a.count, a.size, a.size, a.out.display());
    let hist: Vec<String> = histogram.iter().enumerate().map(|(k, n)| format!("{k}:{n}")).collect();
    println!("sprites per scene {}", hist.join(" "));
    Ok(())
}

fn flag_layer(a: &TrainArgs) -> Result<Value> {
    let mut m = Map::new();
    let mut set = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(k.into(), v);
        }
    };
    set("iterations", a.iterations.map(Value::from));
    set("batch_size", a.batch.map(Value::from));
    set("slots", a.slots.map(Value::from));
    set("seed", a.seed.map(Value::from));
    set("learning_rate", a.learning_rate.map(Value::from));
    set("checkpoint_interval", a.checkpoint_interval.map(Value::from));
    if let Some(mode) = &a.mask_mode {
        let mode: monet_core::training::MaskMode = mode.parse()?;
        set("mask_mode", Some(Value::from(mode.as_str())));
    }
    Ok(Value::Object(m))
}

/// Only the step budget and checkpoint cadence may change on resume.
fn check_resume_config(saved: &TrainConfig, resolved: &TrainConfig) -> Result<()> {
    let (a, b) = (serde_json::to_value(saved)?, serde_json::to_value(resolved)?);
    let diffs: Vec<String> = a
        .as_object()
        .into_iter()
        .flatten()
        .filter(|(k, _)| !matches!(k.as_str(), "iterations" | "checkpoint_interval"))
        .filter(|(k, v)| b.get(k.as_str()) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint has {v}, resume asks for {}", b[k.as_str()]))
        .collect();
    if !diffs.is_empty() {
        bail!("resumed run must keep the checkpoint's configuration ({})", diffs.join("; "));
    }
    Ok(())
}

fn relative(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

pub fn train(a: &TrainArgs, threads: usize) -> Result<()> {
    let source = Source::open(&a.data)?;
    let resume = match &a.from_checkpoint {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
        None => None,
    };
    let mut layers = Vec::new();
    if let Some(ck) = &resume {
        layers.push(serde_json::to_value(&ck.config)?);
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        layers.push(serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?);
    }
    layers.push(flag_layer(a)?);
    let config = TrainConfig::from_layers(&layers)?;

    let manifest_path = RunManifest::path(&a.out);
    let metrics_path = a.out.join(METRICS_FILE);
    let ckpt_dir = a.out.join(CHECKPOINT_DIR);
    let previous = if manifest_path.exists() { RunManifest::load(&a.out).ok() } else { None };
    if resume.is_none() && manifest_path.exists() && !a.force {
        bail!(
            "{} already holds a run; pass --force to replace it or --from-checkpoint to continue it",
            a.out.display()
        );
    }
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;

    let (mut trainer, mut metrics, mut checkpoints, started_at) = match resume {
        Some(ck) => {
            check_resume_config(&ck.config, &config)?;
            let mut t = Trainer::from_checkpoint(ck)?;
            t.config.iterations = config.iterations;
            t.config.checkpoint_interval = config.checkpoint_interval;
            let metrics = MetricWriter::resume(&metrics_path, t.step)?;
            let (old, started) = match previous {
                Some(m) => (m.outputs.checkpoints, m.started_at),
                None => (Vec::new(), now()),
            };
            (t, metrics, old, started)
        }
        None => {
            let (h, w) = source.as_dyn().size();
            let arch = match a.arch {
                ArchChoice::Paper => MonetArch::new(h, w),
                ArchChoice::Tiny => MonetArch::tiny(h, w),
            };
            (Trainer::new(arch, config)?, MetricWriter::create(&metrics_path)?, Vec::new(), now())
        }
    };
    trainer.check_source(source.as_dyn())?;

    let mut manifest = RunManifest {
        version: MANIFEST_VERSION,
        config: trainer.config.clone(),
        arch: trainer.arch.clone(),
        seed: trainer.config.seed,
        data: a.data.clone(),
        threads,
        source_revision: source_revision(),
        resumed_from: a.from_checkpoint.clone(),
        first_step: trainer.step,
        final_step: trainer.step,
        started_at,
        finished_at: None,
        outputs: Outputs { metrics: PathBuf::from(METRICS_FILE), checkpoints: checkpoints.clone() },
    };
    manifest.save(&a.out)?;

    let until = trainer.config.iterations;
    log::info!("training steps {}..{until} on {}", trainer.step, a.data);
    let report = trainer.run(source.as_dyn(), until, Some(&mut metrics), Some(&ckpt_dir))?;
    drop(metrics);

    for p in &report.checkpoints {
        let rel = relative(p, &a.out);
        if !checkpoints.contains(&rel) {
            checkpoints.push(rel);
        }
    }
    manifest.final_step = report.final_step;
    manifest.finished_at = Some(now());
    manifest.outputs.checkpoints = checkpoints;
    manifest.save(&a.out)?;
    match report.last_loss {
        Some(l) => println!(
            "steps {}..{} done: nll {:.4} latent_kl {:.4} mask_kl {:.4} total {:.4}",
            report.first_step, report.final_step, l.nll, l.latent_kl, l.mask_kl, l.total
        ),
        None => println!("already at step {}; nothing to train", report.final_step),
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ck.check_arch(&ck.arch)?;
    Ok(ck)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let slots = a.slots.unwrap_or(ck.config.slots);
    if slots == 0 {
        bail!("--slots must be at least 1");
    }
    if ck.config.mask_mode.is_provided() {
        log::warn!("checkpoint was trained with {} masks; its attention network is untrained", ck.config.mask_mode);
    }
    let source = Source::open(&a.data)?;
    let data = source.as_dyn();
    let n = a.limit.map_or(data.len(), |l| l.min(data.len()));
    if n == 0 {
        bail!("no scenes to evaluate");
    }
    let loss = ck.config.loss();
    let scores = score_source(&ck.arch, &ck.params, data, 0..n, slots, a.batch, &loss)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let shown = a.panels.min(n);
    if shown > 0 {
        let scenes = (0..shown).map(|i| source.scene(i)).collect::<Result<Vec<LabeledScene>>>()?;
        let refs: Vec<&LabeledScene> = scenes.iter().collect();
        let seg = segment(&ck.arch, &ck.params, &image_batch::<f32>(&refs)?, slots, Some(&refs), &loss)?;
        render_panels(&seg.log_masks, &seg.decode, a.out.join("panels.png"))?;
    }
    let per_scene: Vec<Value> = scores
        .results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            json!({
                "index": i,
                "ari": r.ari,
                "fg_ari": r.fg_ari,
                "normalization_error": r.normalization_error,
                "per_slot_mass": r.per_slot_mass,
            })
        })
        .collect();
    let report = json!({
        "version": EVAL_METRICS_VERSION,
        "checkpoint": a.checkpoint.display().to_string(),
        "data": a.data,
        "step": ck.step,
        "slots": slots,
        "trained_slots": ck.config.slots,
        "scenes": n,
        "ari": scores.ari_mean(),
        "fg_ari": scores.fg_ari_mean(),
        "fg_ari_median": scores.fg_ari_median(),
        "nll": scores.nll,
        "max_normalization_error": scores.max_normalization_error(),
        "per_scene": per_scene,
    });
    let path = a.out.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{n} scenes, K={slots}: ari {} fg_ari {} (median {}) nll {:.4}",
        fmt(scores.ari_mean()),
        fmt(scores.fg_ari_mean()),
        fmt(scores.fg_ari_median()),
        scores.nll
    );
    Ok(())
}

pub fn traverse(a: &TraverseArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let img = load_png(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let (h, w) = (ck.arch.height(), ck.arch.width());
    if (img.height, img.width) != (h, w) {
        bail!("{} is {}x{} but the model expects {w}x{h}", a.image.display(), img.width, img.height);
    }
    let x = img.to_chw::<f32>().reshape(&[1, 3, h, w])?;
    let slots = a.slots.unwrap_or(ck.config.slots);
    let t = traverse_latent(&ck.arch, &ck.params, &x, slots, a.slot, a.dim, a.steps)?;
    save_png(&a.out, &t.strip())?;
    println!(
        "slot {} dim {}: posterior mean {:.4}, sensitivity {:.5}, wrote {}",
        a.slot,
        a.dim,
        t.mu[a.dim],
        t.sensitivity(),
        a.out.display()
    );
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mut arch: Option<MonetArch> = None;
    let mut runs = Vec::new();
    for dir in &a.runs {
        let m = RunManifest::load(dir)?;
        match &arch {
            Some(first) if *first != m.arch => {
                bail!("{} uses a different architecture from {}", dir.display(), a.runs[0].display())
            }
            _ => arch = Some(m.arch.clone()),
        }
        let metrics = read_metrics(dir.join(&m.outputs.metrics))
            .with_context(|| format!("reading metrics of {}", dir.display()))?;
        runs.push(AblationRun { config: m.config, metrics });
    }
    let report = AblationReport::from_runs(&runs)?;
    report.write(&runs, &a.out)?;
    print!("{}", report.to_csv());
    let kl_holds = report.check_ordering(true).is_ok();
    match report.check_ordering(false) {
        Ok(()) => println!("nll ordering holds; latent KL wrong > element: {kl_holds}"),
        Err(e) if a.require_ordering => return Err(e.into()),
        Err(e) => println!("nll ordering does not hold: {e}"),
    }
    Ok(())
}

pub fn preprocess_clevr(a: &PreprocessArgs) -> Result<()> {
    let mut inputs: Vec<PathBuf> = fs::read_dir(&a.in_dir)
        .with_context(|| format!("listing {}", a.in_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        bail!("no PNG files in {}", a.in_dir.display());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for p in &inputs {
        let img = load_png(p).with_context(|| format!("reading {}", p.display()))?;
        let out = data::preprocess_clevr(&img).with_context(|| format!("preprocessing {}", p.display()))?;
        save_png(a.out.join(p.file_name().expect("file")), &out)?;
    }
    println!("preprocessed {} images into {}", inputs.len(), a.out.display());
    Ok(())
}
