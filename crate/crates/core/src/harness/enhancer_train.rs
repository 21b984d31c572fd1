//! Training the enhancer on paired views with a frozen degradation learner.

use std::fmt;
use std::path::Path;

use super::backbone::Backbone;
use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::{severity_in, synthetic_images, view_pair};
use super::gendeg_train::{build_gendeg, clean_training_images, steps_per_epoch, streams};
use super::optim::{halving_lr, Adam};
use crate::degrade::{synthesize_pair, DegradationKind, DegradationSpec, ImageRGB, NUM_KINDS};
use crate::error::{Error, Result};
use crate::gendeg::GenDeg;
use crate::mvssem::{Ablation, Layout, MvSsem, MvSsemConfig};
use crate::rng::{mix_seed, SeededRng};
use crate::router::RouterConfig;
use crate::tensor::{concat, ParamStore, Tape, Tensor, Var};

pub const VIEWS: usize = 2;

pub fn mvssem_config(cfg: &RunConfig) -> MvSsemConfig {
    MvSsemConfig {
        channels: cfg.channels,
        state: cfg.state_dim,
        z_dim: cfg.z_dim,
        router: RouterConfig {
            classes: cfg.classes,
            d_inner: cfg.d_inner,
            temperature: cfg.gumbel_temperature,
            hard: true,
        },
        ablation: Ablation {
            deg_injection: cfg.deg_injection,
            semantic_reorder: cfg.semantic_reorder,
            multi_view: cfg.multi_view,
            feedback_hidden: cfg.feedback_hidden,
            feedback_offset: cfg.feedback_offset,
        },
        ..MvSsemConfig::default()
    }
}

/// A freshly initialized enhancer; identical for identical configs.
pub fn build_enhancer(cfg: &RunConfig) -> Result<(ParamStore, MvSsem)> {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(cfg.seed).split(streams::ENHANCER_INIT);
    let model = MvSsem::new(&mut store, "mvssem", mvssem_config(cfg), &mut rng)?;
    Ok((store, model))
}

pub fn build_backbone(cfg: &RunConfig) -> Result<Backbone> {
    Backbone::new(
        cfg.backbone_patch,
        cfg.channels,
        SeededRng::new(cfg.seed).split(streams::BACKBONE).seed(),
    )
}

/// The frozen degradation learner plus the extractor: everything the
/// enhancer consumes but never updates.
pub struct Frozen {
    pub backbone: Backbone,
    pub gendeg_store: ParamStore,
    pub gendeg: GenDeg,
}

impl Frozen {
    /// Loads a GenDeg checkpoint; the model is rebuilt from the config
    /// stored inside it and every parameter is frozen.
    pub fn load(cfg: &RunConfig, gendeg_checkpoint: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(gendeg_checkpoint)?;
        Self::from_checkpoint(cfg, &ckpt)
    }

    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let gcfg = RunConfig::parse(&ckpt.config)?;
        if gcfg.z_dim != cfg.z_dim {
            return Err(Error::Config(format!(
                "GenDeg checkpoint has z_dim {}, run config has {}",
                gcfg.z_dim, cfg.z_dim
            )));
        }
        let (mut gendeg_store, gendeg) = build_gendeg(&gcfg)?;
        ckpt.restore_into(&mut gendeg_store)?;
        gendeg_store.freeze_all();
        Ok(Self {
            backbone: build_backbone(cfg)?,
            gendeg_store,
            gendeg,
        })
    }

    /// Mean embedding `[1, z_dim]` of the views.
    pub fn embedding(&self, views: &[&ImageRGB]) -> Result<Tensor> {
        let z = self.gendeg.embed_images(&self.gendeg_store, views)?;
        let (n, d) = (z.shape()[0], z.shape()[1]);
        Tensor::from_fn(vec![1, d], |j| {
            (0..n).map(|i| z.data()[i * d + j]).sum::<f64>() / n as f64
        })
    }
}

/// A clean view pair, its degraded counterpart and the shared degradation.
#[derive(Clone, Debug)]
pub struct PairItem {
    pub clean: [ImageRGB; VIEWS],
    pub degraded: [ImageRGB; VIEWS],
    pub kind: Option<DegradationKind>,
    pub severity: f64,
}

/// Two overlapping crops of a random image, degraded with one kind and
/// severity. Each view draws its own particles and noise from a child seed.
pub fn sample_pair(
    images: &[ImageRGB],
    cfg: &RunConfig,
    kind: Option<DegradationKind>,
    rng: &mut SeededRng,
) -> Result<PairItem> {
    if images.is_empty() {
        return Err(Error::Data("no clean images".into()));
    }
    let img = &images[rng.below(images.len())];
    let crops = view_pair(img, cfg.crop_size, cfg.crop_shift, rng)?;
    let severity = severity_in(cfg.severity_range(), rng.uniform());
    let seed = rng.split(0).seed();
    let mut clean = Vec::with_capacity(VIEWS);
    let mut degraded = Vec::with_capacity(VIEWS);
    for (v, &(y, x)) in crops.iter().enumerate() {
        let c = img.crop(y, x, cfg.crop_size, cfg.crop_size)?;
        let d = match kind {
            Some(k) => {
                synthesize_pair(
                    &c,
                    &DegradationSpec::new(k, severity, mix_seed(seed, v as u64))?,
                )?
                .0
            }
            None => c.clone(),
        };
        clean.push(c);
        degraded.push(d);
    }
    let to_pair = |v: Vec<ImageRGB>| -> [ImageRGB; VIEWS] { v.try_into().expect("two views") };
    Ok(PairItem {
        clean: to_pair(clean),
        degraded: to_pair(degraded),
        kind,
        severity,
    })
}

/// Network-ready tensors of one pair.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub layout: Layout,
    /// `[L, C]` tokens of the clean views.
    pub clean: Tensor,
    /// `[L, C]` tokens of the degraded views.
    pub degraded: Tensor,
    /// `[1, z_dim]`, absent when degradation injection is off.
    pub z: Option<Tensor>,
}

fn stack_views(backbone: &Backbone, views: &[ImageRGB]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for v in views {
        let f = backbone.encode(v)?;
        rows += f.shape()[0];
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![rows, backbone.channels], data)
}

pub fn prepare(item: &PairItem, frozen: &Frozen, deg_injection: bool) -> Result<Prepared> {
    let (h, w) = frozen.backbone.grid(&item.clean[0]);
    let layout = Layout {
        views: VIEWS,
        height: h,
        width: w,
    };
    let z = if deg_injection {
        Some(frozen.embedding(&[&item.degraded[0], &item.degraded[1]])?)
    } else {
        None
    };
    Ok(Prepared {
        layout,
        clean: stack_views(&frozen.backbone, &item.clean)?,
        degraded: stack_views(&frozen.backbone, &item.degraded)?,
        z,
    })
}

/// Enhanced tokens of one prepared pair.
pub fn enhance_prepared<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    model: &MvSsem,
    cfg: &RunConfig,
    item: &Prepared,
    rng: Option<&mut SeededRng>,
) -> Result<Var<'t>> {
    let x = tape.constant(item.degraded.clone())?;
    let z = item
        .z
        .as_ref()
        .map(|z| tape.constant(z.clone()))
        .transpose()?;
    model.enhance(tape, store, x, item.layout, z, cfg.scan_mode, rng, None)
}

/// Mean absolute difference between two equally shaped tensors.
pub fn mean_l1(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnhancerRecord {
    pub step: u64,
    pub loss: f64,
}

impl fmt::Display for EnhancerRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.9e}", self.step, self.loss)
    }
}

pub const ENHANCER_LOG_HEADER: &str = "# step\tl1";

/// Total optimizer steps of a full run.
pub fn enhancer_total_steps(cfg: &RunConfig, images: usize) -> u64 {
    (cfg.epochs * steps_per_epoch(images, cfg.batch_size)) as u64
}

/// Runs optimizer steps `start..end`. The pairs and routing noise of step
/// `s` depend only on the seed and `s`; kinds cycle so every batch covers
/// the six kinds evenly over consecutive steps.
#[allow(clippy::too_many_arguments)]
pub fn train_enhancer_steps(
    cfg: &RunConfig,
    images: &[ImageRGB],
    frozen: &Frozen,
    store: &mut ParamStore,
    model: &MvSsem,
    start: u64,
    end: u64,
    mut on_step: impl FnMut(&EnhancerRecord),
) -> Result<Vec<EnhancerRecord>> {
    if images.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let spe = steps_per_epoch(images.len(), cfg.batch_size);
    let adam = Adam::default();
    let root = SeededRng::new(cfg.seed).split(streams::STEPS);
    let mut records = Vec::new();
    for step in start..end {
        let mut rng = root.split(step);
        store.zero_grads();
        let tape = Tape::new();
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let kind = DegradationKind::ALL[(step as usize * cfg.batch_size + b) % NUM_KINDS];
            let item = sample_pair(images, cfg, Some(kind), &mut rng)?;
            let prepared = prepare(&item, frozen, cfg.deg_injection)?;
            let y = enhance_prepared(&tape, store, model, cfg, &prepared, Some(&mut rng))?;
            let target = tape.constant(prepared.clean)?;
            losses.push(y.sub(target)?.abs()?.mean()?.reshape([1])?);
        }
        let loss = concat(&losses, 0)?.mean()?;
        let record = EnhancerRecord {
            step,
            loss: loss.item()?,
        };
        tape.backward(loss)?.accumulate_into(store)?;
        let lr = halving_lr(cfg.learning_rate, step as usize / spe, cfg.lr_period);
        adam.step(store, lr)?;
        on_step(&record);
        records.push(record);
    }
    store.zero_grads();
    Ok(records)
}

/// Clean images for validation and evaluation, disjoint from training.
pub fn holdout_images(cfg: &RunConfig) -> Result<Vec<ImageRGB>> {
    let root = SeededRng::new(cfg.seed);
    synthetic_images(
        cfg.holdout_images,
        cfg.image_size,
        root.split(streams::HOLDOUT_IMAGES).seed(),
    )
}

/// Training images for the enhancer: the same clean set as GenDeg.
pub fn enhancer_training_images(cfg: &RunConfig) -> Result<Vec<ImageRGB>> {
    clean_training_images(cfg)
}

/// A fixed set of `per_kind` degraded pairs of every kind from the
/// held-out images, drawn from `stream`.
pub fn holdout_pairs(
    cfg: &RunConfig,
    images: &[ImageRGB],
    per_kind: usize,
    stream: u64,
) -> Result<Vec<PairItem>> {
    let root = SeededRng::new(cfg.seed).split(stream);
    (0..per_kind * NUM_KINDS)
        .map(|i| {
            sample_pair(
                images,
                cfg,
                Some(DegradationKind::ALL[i % NUM_KINDS]),
                &mut root.split(i as u64),
            )
        })
        .collect()
}

/// The validation set used for model selection and ablations.
pub fn validation_set(cfg: &RunConfig, frozen: &Frozen) -> Result<Vec<Prepared>> {
    let images = holdout_images(cfg)?;
    let per_kind = (cfg.holdout_images / NUM_KINDS).max(1);
    holdout_pairs(cfg, &images, per_kind, streams::VALIDATION)?
        .iter()
        .map(|p| prepare(p, frozen, cfg.deg_injection))
        .collect()
}

/// Mean L1 of enhanced to clean tokens, without routing noise.
pub fn validation_loss(
    cfg: &RunConfig,
    store: &ParamStore,
    model: &MvSsem,
    set: &[Prepared],
) -> Result<f64> {
    let mut total = 0.0;
    for item in set {
        let tape = Tape::new();
        let y = enhance_prepared(&tape, store, model, cfg, item, None)?;
        total += mean_l1(&y.value(), &item.clean);
    }
    Ok(total / set.len() as f64)
}

/// Mean L1 of degraded to clean tokens: the do-nothing baseline.
pub fn baseline_loss(set: &[Prepared]) -> f64 {
    set.iter()
        .map(|p| mean_l1(&p.degraded, &p.clean))
        .sum::<f64>()
        / set.len() as f64
}
