//! Training and probing the degradation learner.

use std::fmt;

use super::config::RunConfig;
use super::data::{load_dir, synthetic_images, Corpus};
use super::optim::{halving_lr, Adam};
use crate::degrade::{ImageRGB, NUM_KINDS};
use crate::error::{Error, Result};
use crate::gendeg::{GenDeg, GenDegConfig};
use crate::rng::SeededRng;
use crate::tensor::{ParamStore, Tape};

/// Stream indices split off the run seed.
pub(crate) mod streams {
    pub const INIT: u64 = 1;
    pub const STEPS: u64 = 2;
    pub const TRAIN_IMAGES: u64 = 3;
    pub const TRAIN_CORPUS: u64 = 4;
    pub const HOLDOUT_IMAGES: u64 = 5;
    pub const HOLDOUT_CORPUS: u64 = 6;
    pub const BACKBONE: u64 = 7;
    pub const ENHANCER_INIT: u64 = 8;
    pub const VALIDATION: u64 = 9;
    pub const EVALUATION: u64 = 10;
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenDegRecord {
    pub step: u64,
    pub reconstruction: f64,
    pub contrastive: f64,
    pub classification: f64,
    pub total: f64,
}

impl fmt::Display for GenDegRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            self.step, self.reconstruction, self.contrastive, self.classification, self.total
        )
    }
}

pub const GENDEG_LOG_HEADER: &str = "# step\trec\tcon\tcls\ttotal";

pub fn gendeg_config(cfg: &RunConfig) -> GenDegConfig {
    GenDegConfig {
        patch: cfg.patch_size,
        z_dim: cfg.z_dim,
        tau: cfg.tau,
        pixel_weight: cfg.lambda_pixel,
        loss_weights: [cfg.lambda_rec, cfg.lambda_con, cfg.lambda_cls],
        ..GenDegConfig::default()
    }
}

/// A freshly initialized model; identical for identical configs.
pub fn build_gendeg(cfg: &RunConfig) -> Result<(ParamStore, GenDeg)> {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(cfg.seed).split(streams::INIT);
    let model = GenDeg::new(&mut store, "gendeg", gendeg_config(cfg), &mut rng)?;
    Ok((store, model))
}

/// Clean training images: the data directory if configured, otherwise
/// `train_images` synthetic ones.
pub fn clean_training_images(cfg: &RunConfig) -> Result<Vec<ImageRGB>> {
    match &cfg.data_dir {
        Some(dir) => Ok(load_dir(dir)?.into_iter().map(|(_, img)| img).collect()),
        None => synthetic_images(
            cfg.train_images,
            cfg.image_size,
            SeededRng::new(cfg.seed).split(streams::TRAIN_IMAGES).seed(),
        ),
    }
}

/// Training corpus: `train_images` degraded samples cycling over the clean set.
pub fn training_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let clean = clean_training_images(cfg)?;
    let seed = SeededRng::new(cfg.seed).split(streams::TRAIN_CORPUS).seed();
    Corpus::build(
        clean,
        cfg.train_images.max(NUM_KINDS),
        cfg.severity_range(),
        seed,
    )
}

/// Held-out corpus on synthetic images disjoint from the training streams.
pub fn holdout_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let root = SeededRng::new(cfg.seed);
    let clean = synthetic_images(
        cfg.holdout_images,
        cfg.image_size,
        root.split(streams::HOLDOUT_IMAGES).seed(),
    )?;
    Corpus::build(
        clean,
        cfg.holdout_images,
        cfg.severity_range(),
        root.split(streams::HOLDOUT_CORPUS).seed(),
    )
}

pub fn steps_per_epoch(corpus_len: usize, batch: usize) -> usize {
    (corpus_len / batch).max(1)
}

/// Runs optimizer steps `start..end` (global step numbering) and returns
/// their loss records. The batch at step `s` depends only on the seed and
/// `s`, so a run resumed from a checkpoint continues identically.
pub fn train_gendeg_steps(
    cfg: &RunConfig,
    corpus: &Corpus,
    store: &mut ParamStore,
    model: &GenDeg,
    start: u64,
    end: u64,
    mut on_step: impl FnMut(&GenDegRecord),
) -> Result<Vec<GenDegRecord>> {
    if corpus.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let per_class = (cfg.batch_size / NUM_KINDS).max(2);
    let spe = steps_per_epoch(corpus.len(), cfg.batch_size);
    let adam = Adam::default();
    let root = SeededRng::new(cfg.seed).split(streams::STEPS);
    let mut records = Vec::with_capacity((end.saturating_sub(start)) as usize);
    for step in start..end {
        let mut rng = root.split(step);
        let batch = corpus.balanced_batch(per_class, &mut rng);
        if batch.len() < 2 {
            return Err(Error::Data(
                "corpus has too few samples per class for a contrastive batch".into(),
            ));
        }
        let clean: Vec<&ImageRGB> = batch
            .iter()
            .map(|&i| &corpus.clean[corpus.samples[i].clean])
            .collect();
        let degraded: Vec<&ImageRGB> = batch.iter().map(|&i| &corpus.samples[i].degraded).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| corpus.samples[i].label()).collect();

        store.zero_grads();
        let record = {
            let tape = Tape::new();
            let parts = model.losses(&tape, store, &clean, &degraded, &labels)?;
            let record = GenDegRecord {
                step,
                reconstruction: parts.reconstruction.item()?,
                contrastive: parts.contrastive.item()?,
                classification: parts.classification.item()?,
                total: parts.total.item()?,
            };
            tape.backward(parts.total)?.accumulate_into(store)?;
            record
        };
        let lr = halving_lr(cfg.learning_rate, step as usize / spe, cfg.lr_period);
        adam.step(store, lr)?;
        on_step(&record);
        records.push(record);
    }
    store.zero_grads();
    Ok(records)
}

/// Total optimizer steps of a full run.
pub fn gendeg_total_steps(cfg: &RunConfig, corpus_len: usize) -> u64 {
    (cfg.epochs * steps_per_epoch(corpus_len, cfg.batch_size)) as u64
}

/// Classifier accuracy over a corpus, evaluated in chunks.
pub fn probe_accuracy(model: &GenDeg, store: &ParamStore, corpus: &Corpus) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in corpus.samples.chunks(32) {
        let imgs: Vec<&ImageRGB> = chunk.iter().map(|s| &s.degraded).collect();
        let pred = model.predict(store, &imgs)?;
        correct += pred
            .iter()
            .zip(chunk)
            .filter(|(p, s)| **p == s.label())
            .count();
    }
    Ok(correct as f64 / corpus.len() as f64)
}
