//! Subcommand implementations. Each returns the JSON payload printed on stdout.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use duet_core::config::{ConfigBuilder, Preset, Resolved, RunConfig, Source};
use duet_core::features::mdseq;
use duet_core::features::{synth_dataset, write_manifest, ChordSeed, DanceSequence, MusicSequence, PairedDataset, Split};
use duet_core::gw::{entropic_gw, GwConfig};
use duet_core::losses::{LogRow, TrainingLog};
use duet_core::metrics::{self, EvalOptions, EvalReport, SequenceRow};
use duet_core::model::{load_checkpoint, random_start, save_checkpoint, Checkpoint, Trainer};
use duet_core::rng;
use duet_core::{Direction, Skeleton, Tensor};
use log::{info, warn};
use serde_json::{json, Value};

use crate::errors::CliError;
use crate::{ConfigArgs, EvalArgs, GenerateArgs, GwArgs, PlotArgs, SynthArgs, TrainArgs, DATA_DIR_ENV};

fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::new("invalid-override", format!("--set expects KEY=VALUE, got `{s}`")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
    Ok((k.trim().to_owned(), value))
}

fn env_manifest() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()).map(|d| PathBuf::from(d).join("manifest.json"))
}

/// Preset, then `--config`, then the data directory from the environment,
/// then flags.
pub fn resolve(a: &ConfigArgs) -> Result<Resolved> {
    let preset: Preset = a.preset.parse()?;
    let mut b = ConfigBuilder::new(preset);
    if let Some(p) = &a.config {
        b = b.merge_file(p)?;
    }
    if let Some(m) = env_manifest() {
        b = b.set("data.manifest", json!(m), Source::Env)?;
    }
    if let Some(s) = a.seed {
        b = b.set("seed", json!(s), Source::Flag)?;
    }
    if let Some(s) = a.steps {
        b = b.set("steps", json!(s), Source::Flag)?;
    }
    if a.no_gw {
        b = b.set("train.use_gw", json!(false), Source::Flag)?;
    }
    if a.no_cycle {
        b = b.set("train.use_cycle", json!(false), Source::Flag)?;
    }
    if let Some(o) = &a.out {
        b = b.set("out_dir", json!(o), Source::Flag)?;
    }
    if let Some(d) = &a.data {
        b = b.set("data.manifest", json!(d), Source::Flag)?;
    }
    for s in &a.overrides {
        let (k, v) = parse_override(s)?;
        b = b.set(&k, v, Source::Flag)?;
    }
    let r = b.build()?;
    r.config.train.validate()?;
    r.config.music_to_dance.validate()?;
    r.config.dance_to_music.validate()?;
    Ok(r)
}

fn dataset(cfg: &RunConfig) -> Result<PairedDataset> {
    match &cfg.data.manifest {
        Some(m) => Ok(duet_core::features::load_manifest(m)?),
        None => {
            let d = &cfg.data;
            Ok(synth_dataset(cfg.seed, d.synth_train, d.synth_test, d.synth_frames, d.synth_alignment))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn show_config(a: &ConfigArgs) -> Result<Value> {
    Ok(serde_json::to_value(resolve(a)?)?)
}

pub fn train(a: &TrainArgs) -> Result<Value> {
    let resolved = resolve(&a.cfg)?;
    let cfg = &resolved.config;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("config.json"), &serde_json::to_string_pretty(&resolved)?)?;
    let ds = dataset(cfg)?;
    info!("{} pairs ({} train)", ds.len(), ds.split(Split::Train).len());

    let mut trainer =
        Trainer::new(cfg.train.clone(), cfg.music_to_dance.clone(), cfg.dance_to_music.clone(), &ds, cfg.seed)?;
    let log_path = out.join("train_log.csv");
    let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = TrainingLog::new(BufWriter::new(file));
    let run = serde_json::to_value(&resolved)?;
    let started = Instant::now();
    let mut last = None;
    for _ in 0..cfg.steps {
        let r = trainer.step()?;
        log.push(&LogRow::new(r.step, &r.breakdown, r.learning_rate))?;
        if r.step % 100 == 0 || r.step == 1 {
            info!(
                "step {}: dance {:.4} music {:.4} gw {:.5}",
                r.step, r.breakdown.dance_reconstruction, r.breakdown.music_reconstruction, r.breakdown.gw
            );
        }
        if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 && r.step < cfg.steps {
            let ck = snapshot(&trainer, cfg.seed, &run);
            save_checkpoint(&ck, out.join(format!("checkpoint_{:06}.mdck", r.step)))?;
        }
        last = Some(r);
    }
    drop(log);
    let ck_path = out.join("checkpoint.mdck");
    save_checkpoint(&snapshot(&trainer, cfg.seed, &run), &ck_path)?;
    let seconds = started.elapsed().as_secs_f64();

    let test = ds.split(Split::Test);
    let report = if test.is_empty() {
        warn!("no test pairs; skipping evaluation");
        None
    } else {
        let eval_opts = EvalOptions { seed: cfg.seed, ..cfg.eval.clone() };
        let r = metrics::evaluate(
            &trainer.music_to_dance,
            &trainer.dance_to_music,
            &test,
            &Skeleton::canonical(),
            &eval_opts,
        )?;
        write_text(&out.join("eval.json"), &r.to_json())?;
        write_text(&out.join("eval.csv"), &r.to_csv())?;
        Some(r)
    };
    Ok(json!({
        "out_dir": out,
        "checkpoint": ck_path,
        "log": log_path,
        "steps": trainer.steps_taken(),
        "seconds": seconds,
        "final": last.map(|r| r.breakdown),
        "eval": report,
    }))
}

fn snapshot(t: &Trainer, seed: u64, run: &Value) -> Checkpoint {
    Checkpoint::new(t.steps_taken(), seed, t.music_to_dance.clone(), t.dance_to_music.clone(), run.clone())
}

fn run_config(ck: &Checkpoint) -> Option<RunConfig> {
    serde_json::from_value(ck.meta.run.get("config")?.clone()).ok()
}

fn parse_key(k: &Option<String>) -> Result<Option<ChordSeed>> {
    k.as_deref()
        .map(|s| s.parse::<ChordSeed>().map_err(|m| CliError::new("invalid-key", m).into()))
        .transpose()
}

pub fn generate(a: &GenerateArgs) -> Result<Value> {
    let ck = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let g = ck.generator(a.direction);
    let chunk = a.chunk.or_else(|| run_config(&ck).map(|c| c.train.t)).unwrap_or(75);
    if chunk == 0 {
        return Err(CliError::new("invalid-chunk", "--chunk must be positive").into());
    }
    let mut starts = rng::substream(a.seed, rng::stream::START_TOKENS);
    let start = random_start(a.direction, &mut starts);
    let (frames, channels) = match a.direction {
        Direction::MusicToDance => {
            let music = mdseq::load_music(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
            let y = g.generate_chunked(&music.full(), &start, chunk)?;
            let dance = DanceSequence::new(y, music.fps)?;
            mdseq::save_dance(&dance, &a.out)?;
            (dance.len(), dance.frames().cols())
        }
        Direction::DanceToMusic => {
            let dance = mdseq::load_dance(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
            let raw = g.generate_chunked(dance.frames(), &start, chunk)?;
            let music = MusicSequence::from_generated(&raw, dance.fps)?;
            mdseq::save_music(&music, &a.out)?;
            (music.len(), music.channels())
        }
    };
    Ok(json!({
        "output": a.out,
        "direction": a.direction,
        "frames": frames,
        "channels": channels,
        "chunk": chunk,
        "seed": a.seed,
    }))
}

pub fn eval(a: &EvalArgs) -> Result<Value> {
    let report = match &a.checkpoint {
        Some(p) => eval_checkpoint(a, p)?,
        None => eval_files(a)?,
    };
    if let Some(csv) = &a.csv {
        write_text(csv, &report.to_csv())?;
    }
    Ok(serde_json::to_value(report)?)
}

fn eval_checkpoint(a: &EvalArgs, path: &Path) -> Result<EvalReport> {
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let run = run_config(&ck);
    let manifest = a.data.clone().or_else(env_manifest);
    let ds = match (&manifest, &run) {
        (Some(m), _) => duet_core::features::load_manifest(m)?,
        (None, Some(r)) => dataset(r)?,
        (None, None) => {
            return Err(CliError::new("missing-data", format!("pass --data or set {DATA_DIR_ENV}")).into());
        }
    };
    let test = ds.split(Split::Test);
    if test.is_empty() {
        return Err(CliError::new("missing-data", "dataset has no test pairs").into());
    }
    let opts = match run {
        Some(r) => EvalOptions { seed: a.seed, ..r.eval },
        None => EvalOptions { seed: a.seed, ..EvalOptions::default() },
    };
    Ok(metrics::evaluate(
        ck.generator(Direction::MusicToDance),
        ck.generator(Direction::DanceToMusic),
        &test,
        &Skeleton::canonical(),
        &opts,
    )?)
}

fn eval_files(a: &EvalArgs) -> Result<EvalReport> {
    let (Some(dance_truth), Some(music_truth), Some(music)) = (&a.dance_truth, &a.music_truth, &a.music) else {
        return Err(CliError::new(
            "missing-argument",
            "file mode needs --dance, --dance-truth, --music and --music-truth (or --checkpoint)",
        )
        .into());
    };
    if a.dance.is_empty() {
        return Err(CliError::new("missing-argument", "at least one --dance is required").into());
    }
    let sk = Skeleton::canonical();
    let load_d = |p: &PathBuf| mdseq::load_dance(p).with_context(|| format!("loading {}", p.display()));
    let load_m = |p: &PathBuf| mdseq::load_music(p).with_context(|| format!("loading {}", p.display()));
    let dances = a.dance.iter().map(load_d).collect::<Result<Vec<_>>>()?;
    let truth = load_d(dance_truth)?;
    let mut mt = load_m(music_truth)?;
    let mut mg = load_m(music)?;
    if let Some(k) = parse_key(&a.key)? {
        mt.key = Some(k);
        mg.key = Some(k);
    }
    let diversity = if dances.len() >= 2 {
        metrics::diversity(&dances, &sk)?
    } else {
        warn!("diversity needs at least two generated dances");
        f64::NAN
    };
    let beats = metrics::beats_alignment(&dances[0], &mt, &sk)?;
    let notes = metrics::notes_accuracy(&mg, &mt)?;
    let row = SequenceRow {
        index: 0,
        genre: a.genre.clone(),
        frames: truth.len(),
        frechet: metrics::frechet_distance(&dances[0], &truth, &sk)?,
        diversity,
        beats_alignment: beats.percent,
        kinematic_beats: beats.kinematic_beats,
        notes_accuracy: notes.accuracy,
        skipped_frames: notes.skipped,
    };
    Ok(EvalReport::from_rows(vec![row]))
}

fn load_embedding(p: &Path) -> Result<Tensor> {
    if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let rows: Vec<Vec<f64>> = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        Tensor::from_rows(&rows).map_err(|e| CliError::new("invalid-input", format!("{}: {e}", p.display())).into())
    } else {
        Ok(mdseq::load_matrix(p).with_context(|| format!("loading {}", p.display()))?)
    }
}

pub fn gw(a: &GwArgs) -> Result<Value> {
    let x = load_embedding(&a.x)?;
    let y = load_embedding(&a.y)?;
    let cfg = GwConfig {
        epsilon: a.epsilon,
        sinkhorn_iters: a.sinkhorn_iters,
        projection_iters: a.projection_iters,
        ..GwConfig::default()
    };
    let sol = entropic_gw(&x, &y, &cfg)?;
    let plan: Vec<&[f64]> = (0..sol.plan.m()).map(|i| sol.plan.plan.row(i)).collect();
    Ok(json!({
        "value": sol.value,
        "plan": plan,
        "marginal_residual": sol.plan.marginal_residual(),
        "history": sol.history,
        "log_domain": sol.log_domain,
    }))
}

fn series_name(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "music".into())
}

pub fn plot(a: &PlotArgs) -> Result<Value> {
    let key = parse_key(&a.key)?;
    let load = |p: &PathBuf| -> Result<MusicSequence> {
        let mut m = mdseq::load_music(p).with_context(|| format!("loading {}", p.display()))?;
        if key.is_some() {
            m.key = key;
        }
        Ok(m)
    };
    let music = load(&a.music)?;
    let truth = a.truth.as_ref().map(load).transpose()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut series = vec![(series_name(&a.music), &music)];
    if let (Some(p), Some(t)) = (&a.truth, &truth) {
        series.push((series_name(p), t));
    }
    let named: Vec<(&str, &MusicSequence)> = series.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    let svg = a.out.join("notes.svg");
    let csv = a.out.join("notes.csv");
    write_text(&svg, &metrics::note_histogram_svg(&named))?;
    write_text(&csv, &metrics::notes_csv(&music))?;
    Ok(json!({
        "svg": svg,
        "csv": csv,
        "frames": music.len(),
        "histogram": metrics::note_histogram(&music),
    }))
}

pub fn synth(a: &SynthArgs) -> Result<Value> {
    if a.frames == 0 || a.train + a.test == 0 {
        return Err(CliError::new("invalid-input", "need at least one pair of at least one frame").into());
    }
    if !(0.0..=1.0).contains(&a.alignment) {
        return Err(CliError::new("invalid-input", "--alignment must lie in [0, 1]").into());
    }
    let ds = synth_dataset(a.seed, a.train, a.test, a.frames, a.alignment);
    let manifest = write_manifest(&ds, &a.out)?;
    Ok(json!({
        "manifest": manifest,
        "pairs": ds.len(),
        "train": a.train,
        "test": a.test,
        "frames": a.frames,
    }))
}
