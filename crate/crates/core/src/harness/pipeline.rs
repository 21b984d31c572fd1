//! The end-to-end commands behind the CLI. Every function takes a validated
//! [`RunConfig`] and explicit paths, writes its artifacts and returns a
//! summary for the caller to print.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::{list_ppm, load_dir, severity_in};
use super::enhancer_train::{
    baseline_loss, build_enhancer, enhancer_total_steps, enhancer_training_images,
    train_enhancer_steps, validation_loss, validation_set, Frozen, ENHANCER_LOG_HEADER,
};
use super::evaluate::{evaluate, MetricsReport};
use super::gendeg_train::{
    build_gendeg, gendeg_total_steps, holdout_corpus, probe_accuracy, train_gendeg_steps,
    training_corpus, GENDEG_LOG_HEADER,
};
use crate::degrade::{
    read_ppm, synthesize_pair, write_ppm, DegradationKind, DegradationSpec, ImageRGB, NUM_KINDS,
};
use crate::error::{Error, Result};
use crate::mvssem::{format_stats, BlockStats, Layout, MvSsem};
use crate::rng::SeededRng;
use crate::tensor::{ParamStore, Tape, Tensor};

pub const LABELS_FILE: &str = "labels.tsv";
pub const GENDEG_CHECKPOINT: &str = "gendeg.ckpt";
pub const GENDEG_LOG: &str = "gendeg.log";
pub const ENHANCER_CHECKPOINT: &str = "enhancer.ckpt";
pub const ENHANCER_LOG: &str = "enhancer.log";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const FEATURES_FILE: &str = "features.txt";

/// Stream for per-file degradation draws.
const DEGRADE_FILES: u64 = 11;

/// Degrades every PPM in `input` into `out` under the same file name and
/// writes the labels file. File `i` (in sorted order) draws its kind,
/// severity and seed from its own stream, so files are processed in
/// parallel without affecting the result.
pub fn degrade_dir(
    cfg: &RunConfig,
    input: &Path,
    out: &Path,
) -> Result<Vec<(String, DegradationSpec)>> {
    let files = list_ppm(input)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no .ppm images in {}",
            input.display()
        )));
    }
    fs::create_dir_all(out)?;
    let root = SeededRng::new(cfg.seed).split(DEGRADE_FILES);
    let specs: Vec<(String, DegradationSpec)> = files
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let mut rng = root.split(i as u64);
            let kind = DegradationKind::ALL[rng.below(NUM_KINDS)];
            let severity = severity_in(cfg.severity_range(), rng.uniform());
            let spec = DegradationSpec::new(kind, severity, rng.split(0).seed())?;
            let img =
                read_ppm(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let (degraded, _) = synthesize_pair(&img, &spec)?;
            let name = file_name(path);
            write_ppm(out.join(&name), &degraded)?;
            Ok((name, spec))
        })
        .collect::<Result<_>>()?;
    let mut labels = String::new();
    for (name, spec) in &specs {
        labels.push_str(&format!(
            "{name}\t{}\t{}\n",
            spec.kind.label(),
            spec.severity
        ));
    }
    fs::write(out.join(LABELS_FILE), labels)?;
    Ok(specs)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Parses a labels file back into `(file, label, severity)` rows.
pub fn read_labels(path: &Path) -> Result<Vec<(String, usize, f64)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("labels line {}: `{line}`", i + 1));
            if f.len() != 3 {
                return Err(bad());
            }
            let label: usize = f[1].parse().map_err(|_| bad())?;
            let severity: f64 = f[2].parse().map_err(|_| bad())?;
            if label >= NUM_KINDS {
                return Err(bad());
            }
            Ok((f[0].to_string(), label, severity))
        })
        .collect()
}

fn write_log(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn resume_from(resume: Option<&Path>, store: &mut ParamStore) -> Result<u64> {
    match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            ckpt.restore_into(store)?;
            Ok(ckpt.train_step)
        }
        None => Ok(0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenDegSummary {
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub holdout_accuracy: f64,
    pub checkpoint: PathBuf,
}

/// Trains GenDeg to the configured number of steps (continuing from
/// `resume` if given), writing the loss log and checkpoint into `out`.
pub fn train_gendeg(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<GenDegSummary> {
    fs::create_dir_all(out)?;
    let corpus = training_corpus(cfg)?;
    let (mut store, model) = build_gendeg(cfg)?;
    let start = resume_from(resume, &mut store)?;
    let end = gendeg_total_steps(cfg, corpus.len()).max(start);
    let records = train_gendeg_steps(cfg, &corpus, &mut store, &model, start, end, |_| {})?;
    write_log(
        &out.join(GENDEG_LOG),
        GENDEG_LOG_HEADER,
        &records.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
    )?;
    let checkpoint = out.join(GENDEG_CHECKPOINT);
    Checkpoint::from_store(&store, cfg.to_text(), end).save(&checkpoint)?;
    let holdout_accuracy = probe_accuracy(&model, &store, &holdout_corpus(cfg)?)?;
    Ok(GenDegSummary {
        steps: end,
        first_loss: records.first().map(|r| r.total),
        last_loss: records.last().map(|r| r.total),
        holdout_accuracy,
        checkpoint,
    })
}

fn gendeg_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.gendeg_checkpoint.as_deref().ok_or_else(|| {
        Error::Data("no GenDeg checkpoint configured (set gendeg_checkpoint)".into())
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancerSummary {
    pub steps: u64,
    pub validation_loss: f64,
    pub baseline_loss: f64,
    pub checkpoint: PathBuf,
}

/// Trains the enhancer against a frozen GenDeg checkpoint.
pub fn train_enhancer(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<EnhancerSummary> {
    fs::create_dir_all(out)?;
    let frozen = Frozen::load(cfg, gendeg_path(cfg)?)?;
    let images = enhancer_training_images(cfg)?;
    let (mut store, model) = build_enhancer(cfg)?;
    let start = resume_from(resume, &mut store)?;
    let end = enhancer_total_steps(cfg, images.len()).max(start);
    let records = train_enhancer_steps(
        cfg,
        &images,
        &frozen,
        &mut store,
        &model,
        start,
        end,
        |_| {},
    )?;
    write_log(
        &out.join(ENHANCER_LOG),
        ENHANCER_LOG_HEADER,
        &records.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
    )?;
    let checkpoint = out.join(ENHANCER_CHECKPOINT);
    Checkpoint::from_store(&store, cfg.to_text(), end).save(&checkpoint)?;
    let val = validation_set(cfg, &frozen)?;
    Ok(EnhancerSummary {
        steps: end,
        validation_loss: validation_loss(cfg, &store, &model, &val)?,
        baseline_loss: baseline_loss(&val),
        checkpoint,
    })
}

/// Rebuilds a trained enhancer from its checkpoint. The architecture comes
/// from the config stored in the checkpoint; `gendeg_checkpoint` is taken
/// from `cfg` when set there.
pub fn load_enhancer(
    cfg: &RunConfig,
    path: &Path,
) -> Result<(RunConfig, ParamStore, MvSsem, Frozen)> {
    let ckpt = Checkpoint::load(path)?;
    let mut run = RunConfig::parse(&ckpt.config)?;
    if cfg.gendeg_checkpoint.is_some() {
        run.gendeg_checkpoint = cfg.gendeg_checkpoint.clone();
    }
    let (mut store, model) = build_enhancer(&run)?;
    ckpt.restore_into(&mut store)?;
    store.freeze_all();
    let frozen = Frozen::load(&run, gendeg_path(&run)?)?;
    Ok((run, store, model, frozen))
}

/// Enhances the PPMs of `input` into `out`. Consecutive files in sorted
/// order form the two views of one scene (a trailing odd file is a
/// single-view scene). Returns the number of images written.
pub fn enhance_dir(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    dump_features: bool,
) -> Result<usize> {
    let (run, store, model, frozen) = load_enhancer(cfg, checkpoint)?;
    let files = load_dir(input)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no .ppm images in {}",
            input.display()
        )));
    }
    fs::create_dir_all(out)?;
    let scenes: Vec<&[(String, ImageRGB)]> = files.chunks(2).collect();
    let results: Vec<SceneOutput> = scenes
        .par_iter()
        .map(|scene| enhance_scene(&run, &store, &model, &frozen, scene))
        .collect::<Result<_>>()?;
    let mut dump = String::new();
    let mut written = 0;
    for (scene, (images, stats)) in scenes.iter().zip(&results) {
        for (name, img) in images {
            write_ppm(out.join(name), img)?;
            written += 1;
        }
        if dump_features {
            let names: Vec<&str> = scene.iter().map(|(n, _)| n.as_str()).collect();
            dump.push_str(&format!("# scene {}\n", names.join(" ")));
            dump.push_str(&format_stats(stats));
        }
    }
    if dump_features {
        fs::write(out.join(FEATURES_FILE), dump)?;
    }
    Ok(written)
}

/// Named enhanced views of one scene and their block statistics.
type SceneOutput = (Vec<(String, ImageRGB)>, Vec<BlockStats>);

fn enhance_scene(
    cfg: &RunConfig,
    store: &ParamStore,
    model: &MvSsem,
    frozen: &Frozen,
    scene: &[(String, ImageRGB)],
) -> Result<SceneOutput> {
    let first = &scene[0].1;
    if scene.iter().any(|(_, img)| !img.same_size(first)) {
        return Err(Error::Data(format!(
            "views {} and {} differ in size",
            scene[0].0, scene[1].0
        )));
    }
    let grid = 2 * frozen.backbone.patch;
    if !first.height().is_multiple_of(grid) || !first.width().is_multiple_of(grid) {
        return Err(Error::Data(format!(
            "{}: {}x{} is not divisible by {grid}",
            scene[0].0,
            first.height(),
            first.width()
        )));
    }
    let views: Vec<&ImageRGB> = scene.iter().map(|(_, img)| img).collect();
    let (h, w) = frozen.backbone.grid(first);
    let layout = Layout {
        views: views.len(),
        height: h,
        width: w,
    };
    let mut tokens = Vec::new();
    for v in &views {
        tokens.extend_from_slice(frozen.backbone.encode(v)?.data());
    }
    let c = frozen.backbone.channels;
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![layout.tokens(), c], tokens)?)?;
    let z = if cfg.deg_injection {
        Some(tape.constant(frozen.embedding(&views)?)?)
    } else {
        None
    };
    let mut stats = Vec::new();
    let y = model
        .enhance(
            &tape,
            store,
            x,
            layout,
            z,
            cfg.scan_mode,
            None,
            Some(&mut stats),
        )?
        .value();
    let per_view = layout.per_view() * c;
    let images = scene
        .iter()
        .enumerate()
        .map(|(v, (name, img))| {
            let rows = Tensor::new(
                vec![layout.per_view(), c],
                y.data()[v * per_view..(v + 1) * per_view].to_vec(),
            )?;
            Ok((
                name.clone(),
                frozen.backbone.decode(&rows, img.height(), img.width())?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok((images, stats))
}

/// Evaluates a trained enhancer on the held-out pairs and writes the text
/// and JSON reports into `out`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<MetricsReport> {
    let (run, store, model, frozen) = load_enhancer(cfg, checkpoint)?;
    let report = evaluate(
        &run,
        &store,
        &model,
        &frozen,
        (run.holdout_images / NUM_KINDS).max(1),
    )?;
    fs::create_dir_all(out)?;
    fs::write(out.join(REPORT_TEXT), report.to_text())?;
    fs::write(out.join(REPORT_JSON), report.to_json())?;
    Ok(report)
}
