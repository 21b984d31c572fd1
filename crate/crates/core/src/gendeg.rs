//! The degradation-representation learner.
//!
//! A degradation encoder maps a degraded image to an embedding `z`. A content
//! encoder/decoder pair reconstructs the degraded image from its clean
//! counterpart, conditioned on `z` by feature-wise scale and shift, and a
//! linear classifier predicts the degradation kind from `z`. Training
//! combines reconstruction, supervised contrastive and classification losses.

use crate::degrade::{ImageRGB, NUM_KINDS};
use crate::error::{Error, Result};
use crate::nn::{patchify, Init, LayerNorm, Linear, Mlp};
use crate::rng::SeededRng;
use crate::tensor::{concat, ParamId, ParamStore, Tape, Tensor, Var};

/// Sharpness of the log-mean-exp pooling in the degradation encoder.
const SOFT_MAX_SHARPNESS: f64 = 8.0;

/// Large negative logit used to drop the self-similarity term.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenDegConfig {
    pub patch: usize,
    /// Per-pixel features computed before the degradation encoder's patch
    /// embedding.
    pub pixel_features: usize,
    pub width: usize,
    pub z_dim: usize,
    pub proxy_patch: usize,
    pub proxy_dim: usize,
    pub proxy_seed: u64,
    /// Contrastive temperature `τ`.
    pub tau: f64,
    /// Weight of the pixel L1 term inside the reconstruction loss.
    pub pixel_weight: f64,
    /// Weights of the reconstruction, contrastive and classification losses.
    pub loss_weights: [f64; 3],
}

impl Default for GenDegConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            pixel_features: 8,
            width: 64,
            z_dim: 128,
            proxy_patch: 4,
            proxy_dim: 32,
            proxy_seed: 0x5eed_f00d,
            tau: 0.07,
            pixel_weight: 0.1,
            loss_weights: [1.0, 0.5, 0.3],
        }
    }
}

/// `λ1·rec + λ2·con + λ3·cls`.
pub fn weighted_total(weights: [f64; 3], parts: [f64; 3]) -> f64 {
    weights.iter().zip(parts).map(|(w, p)| w * p).sum()
}

/// Fixed, randomly initialized patch features `tanh(patch · W)`, used as a
/// stand-in perceptual network. Never trained.
#[derive(Clone, Debug)]
pub struct PerceptualProxy {
    pub patch: usize,
    pub dim: usize,
    /// `[patch²·3, dim]`
    pub kernel: Tensor,
}

impl PerceptualProxy {
    pub fn new(patch: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let fan_in = patch * patch * 3;
        let bound = (3.0 / fan_in as f64).sqrt();
        let kernel = Tensor::from_fn(vec![fan_in, dim], |_| rng.uniform_range(-bound, bound))?;
        Ok(Self { patch, dim, kernel })
    }

    /// Features of one image, `[tiles, dim]`, computed directly on its own
    /// tiling.
    pub fn features(&self, img: &ImageRGB) -> Result<Tensor> {
        let tiles = patchify(img.data(), img.height(), img.width(), self.patch)?;
        let tape = Tape::new();
        let out = tape
            .constant(tiles)?
            .matmul(tape.constant(self.kernel.clone())?)?
            .tanh()?;
        Ok((*out.value()).clone())
    }

    /// Features `[rows·s², dim]` of patch rows of side `outer`, where every
    /// row holds `s² = (outer/patch)²` proxy tiles.
    pub fn apply<'t>(&self, patches: Var<'t>, outer: usize) -> Result<Var<'t>> {
        if !outer.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch {outer} is not a multiple of the proxy patch {}",
                self.patch
            )));
        }
        let s = outer / self.patch;
        let p = self.patch;
        let rows = patches.shape()[0];
        let tiles = patches
            .reshape([rows, s, p, s, p, 3])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape([rows * s * s, p * p * 3])?;
        tiles
            .matmul(patches.tape().constant(self.kernel.clone())?)?
            .tanh()
    }
}

/// Stacks `patchify` of every image into `[B·P, patch²·3]`.
pub fn patch_batch(images: &[&ImageRGB], patch: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("empty image batch"))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for img in images {
        if !img.same_size(first) {
            return Err(Error::shape("patch-batch", "images differ in size"));
        }
        let t = patchify(img.data(), img.height(), img.width(), patch)?;
        rows += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![rows, patch * patch * 3], data)
}

/// Reconstruction loss on patch rows of side `patch`:
/// `w·mean|p − t| + mean (φ(p) − φ(t))²` where `φ` is the proxy.
pub fn loss_reconstruction<'t>(
    pred: Var<'t>,
    target: Var<'t>,
    proxy: &PerceptualProxy,
    patch: usize,
    pixel_weight: f64,
) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "reconstruction-loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let l1 = pred.sub(target)?.abs()?.mean()?;
    let fp = proxy.apply(pred, patch)?;
    let ft = proxy.apply(target, patch)?;
    let perceptual = fp.sub(ft)?.powf(2.0)?.mean()?;
    l1.scale(pixel_weight)?.add(perceptual)
}

/// Supervised contrastive loss over cosine similarities of the rows of `z`.
/// Each anchor averages `−log softmax` over its same-label partners, the
/// softmax running over all other items; anchors without partners are
/// skipped.
pub fn loss_contrastive<'t>(z: Var<'t>, labels: &[usize], tau: f64) -> Result<Var<'t>> {
    let shape = z.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "contrastive-loss",
            format!("embeddings {shape:?} with {} labels", labels.len()),
        ));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::invalid(
            "contrastive loss needs a batch of at least 2",
        ));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let norms = z.mul(z)?.sum_axis(1)?;
    if norms.value().data().contains(&0.0) {
        return Err(Error::invalid("zero-norm embedding in contrastive loss"));
    }
    let unit = z.div(norms.powf(0.5)?.reshape([n, 1])?)?;
    let tape = z.tape();
    let mask = tape.constant(Tensor::from_fn(vec![n, n], |i| {
        if i / n == i % n {
            MASKED_LOGIT
        } else {
            0.0
        }
    })?)?;
    let logp = unit
        .matmul(unit.transpose()?)?
        .scale(1.0 / tau)?
        .add(mask)?
        .log_softmax(1)?;

    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return Err(Error::invalid(
            "no anchor in the batch has a positive partner",
        ));
    }
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                w[i * n + j] = -1.0 / (positives[i] * anchors) as f64;
            }
        }
    }
    logp.mul(tape.constant(Tensor::new(vec![n, n], w)?)?)?.sum()
}

/// Mean cross-entropy of `logits` (`[B, classes]`) against `labels`.
pub fn loss_classification<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "classification-loss",
            format!("logits {shape:?} with {} labels", labels.len()),
        ));
    }
    let (b, k) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::IndexOutOfRange {
            op: "classification-loss",
            index: bad,
            extent: k,
        });
    }
    let mut w = vec![0.0; b * k];
    for (i, &l) in labels.iter().enumerate() {
        w[i * k + l] = -1.0 / b as f64;
    }
    let tape = logits.tape();
    logits
        .log_softmax(1)?
        .mul(tape.constant(Tensor::new(vec![b, k], w)?)?)?
        .sum()
}

/// Loss components of one batch, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<'t> {
    pub reconstruction: Var<'t>,
    pub contrastive: Var<'t>,
    pub classification: Var<'t>,
    pub total: Var<'t>,
    /// `[B, NUM_KINDS]`
    pub logits: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct GenDeg {
    pub config: GenDegConfig,
    pub pixel: Linear,
    pub embed: Linear,
    pub block_norm: LayerNorm,
    pub block: Mlp,
    pub project: Linear,
    pub classifier: Linear,
    pub content: Linear,
    pub film_scale: Linear,
    pub film_shift: Linear,
    pub decode_hidden: Linear,
    pub decode_out: Linear,
    pub proxy: PerceptualProxy,
}

impl GenDeg {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: GenDegConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let pd = config.patch * config.patch * 3;
        let (w, z) = (config.width, config.z_dim);
        let proxy = PerceptualProxy::new(config.proxy_patch, config.proxy_dim, config.proxy_seed)?;
        if !config.patch.is_multiple_of(config.proxy_patch) {
            return Err(Error::Config(format!(
                "patch {} is not a multiple of the proxy patch {}",
                config.patch, config.proxy_patch
            )));
        }
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            config,
            pixel: Linear::new(
                store,
                &n("pixel"),
                3,
                config.pixel_features,
                Init::DEFAULT,
                true,
                rng,
            )?,
            embed: Linear::new(
                store,
                &n("embed"),
                config.patch * config.patch * config.pixel_features,
                w,
                Init::DEFAULT,
                true,
                rng,
            )?,
            block_norm: LayerNorm::new(store, &n("block_norm"), w)?,
            block: Mlp::new(store, &n("block"), (w, 2 * w, w), Init::DEFAULT, rng)?,
            project: Linear::new(store, &n("project"), 2 * w, z, Init::DEFAULT, true, rng)?,
            classifier: Linear::new(
                store,
                &n("classifier"),
                z,
                NUM_KINDS,
                Init::DEFAULT,
                true,
                rng,
            )?,
            content: Linear::new(store, &n("content"), pd, w, Init::DEFAULT, true, rng)?,
            film_scale: Linear::new(store, &n("film_scale"), z, w, Init::Zeros, true, rng)?,
            film_shift: Linear::new(store, &n("film_shift"), z, w, Init::Zeros, true, rng)?,
            decode_hidden: Linear::new(store, &n("decode_hidden"), w, w, Init::DEFAULT, true, rng)?,
            decode_out: Linear::new(store, &n("decode_out"), w, pd, Init::DEFAULT, true, rng)?,
            proxy,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.encoder_params();
        for l in [
            &self.classifier,
            &self.content,
            &self.film_scale,
            &self.film_shift,
            &self.decode_hidden,
            &self.decode_out,
        ] {
            v.extend(l.params());
        }
        v
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut v = self.pixel.params();
        v.extend(self.embed.params());
        v.extend([self.block_norm.gamma, self.block_norm.beta]);
        v.extend(self.block.params());
        v.extend(self.project.params());
        v
    }

    fn batch_size(&self, patches: Var<'_>, batch: usize) -> Result<usize> {
        let shape = patches.shape();
        let pd = self.config.patch * self.config.patch * 3;
        if batch == 0 || shape.len() != 2 || shape[1] != pd || !shape[0].is_multiple_of(batch) {
            return Err(Error::shape(
                "gendeg",
                format!("patch rows {shape:?} for a batch of {batch} with patch width {pd}"),
            ));
        }
        Ok(shape[0] / batch)
    }

    /// Embeddings `[B, z_dim]` from degraded-image patch rows `[B·P, patch²·3]`.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        patches: Var<'t>,
        batch: usize,
    ) -> Result<Var<'t>> {
        let per = self.batch_size(patches, batch)?;
        let rows = patches.shape()[0];
        let pixels = patches.reshape([rows * self.config.patch * self.config.patch, 3])?;
        let feats = self.pixel.forward(tape, store, pixels)?.silu()?;
        let feats = feats.reshape([
            rows,
            self.config.patch * self.config.patch * self.config.pixel_features,
        ])?;
        let h = self.embed.forward(tape, store, feats)?;
        let h = h.add(self.block.forward(
            tape,
            store,
            self.block_norm.forward(tape, store, h)?,
        )?)?;
        let h = h.reshape([batch, per, self.config.width])?;
        // average pooling plus a soft maximum, so sparse local evidence is not
        // washed out by the mean
        let mean = h.mean_axis(1)?;
        let soft_max = h
            .tanh()?
            .scale(SOFT_MAX_SHARPNESS)?
            .exp()?
            .mean_axis(1)?
            .ln()?
            .scale(1.0 / SOFT_MAX_SHARPNESS)?;
        self.project
            .forward(tape, store, concat(&[mean, soft_max], 1)?)
    }

    /// Encodes a list of images into plain embedding rows.
    pub fn embed_images(&self, store: &ParamStore, images: &[&ImageRGB]) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(patch_batch(images, self.config.patch)?)?;
        let z = self.encode(&tape, store, x, images.len())?;
        Ok((*z.value()).clone())
    }

    pub fn classify<'t>(&self, tape: &'t Tape, store: &ParamStore, z: Var<'t>) -> Result<Var<'t>> {
        self.classifier.forward(tape, store, z)
    }

    /// Predicted degraded patches `[B·P, patch²·3]` in `(0, 1)` from clean
    /// patch rows and embeddings `[B, z_dim]`.
    pub fn reconstruct<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        clean: Var<'t>,
        z: Var<'t>,
    ) -> Result<Var<'t>> {
        let batch = z.shape()[0];
        let per = self.batch_size(clean, batch)?;
        let w = self.config.width;
        let h = self
            .content
            .forward(tape, store, clean)?
            .reshape([batch, per, w])?;
        let scale = self
            .film_scale
            .forward(tape, store, z)?
            .add_scalar(1.0)?
            .reshape([batch, 1, w])?;
        let shift = self
            .film_shift
            .forward(tape, store, z)?
            .reshape([batch, 1, w])?;
        let h = h
            .mul(scale)?
            .add(shift)?
            .reshape([batch * per, w])?
            .silu()?;
        let h = self.decode_hidden.forward(tape, store, h)?.silu()?;
        self.decode_out.forward(tape, store, h)?.sigmoid()
    }

    /// All three losses on a batch of `(clean, degraded, label)` triples.
    pub fn losses<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        clean: &[&ImageRGB],
        degraded: &[&ImageRGB],
        labels: &[usize],
    ) -> Result<LossParts<'t>> {
        if clean.len() != degraded.len() || clean.len() != labels.len() {
            return Err(Error::shape(
                "gendeg-losses",
                "clean/degraded/label counts differ",
            ));
        }
        let b = labels.len();
        let deg = tape.constant(patch_batch(degraded, self.config.patch)?)?;
        let cln = tape.constant(patch_batch(clean, self.config.patch)?)?;
        let z = self.encode(tape, store, deg, b)?;
        let pred = self.reconstruct(tape, store, cln, z)?;
        let reconstruction = loss_reconstruction(
            pred,
            deg,
            &self.proxy,
            self.config.patch,
            self.config.pixel_weight,
        )?;
        let contrastive = loss_contrastive(z, labels, self.config.tau)?;
        let logits = self.classify(tape, store, z)?;
        let classification = loss_classification(logits, labels)?;
        let [l1, l2, l3] = self.config.loss_weights;
        let total = reconstruction
            .scale(l1)?
            .add(contrastive.scale(l2)?)?
            .add(classification.scale(l3)?)?;
        Ok(LossParts {
            reconstruction,
            contrastive,
            classification,
            total,
            logits,
        })
    }

    /// Predicted kinds for a list of degraded images.
    pub fn predict(&self, store: &ParamStore, images: &[&ImageRGB]) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let x = tape.constant(patch_batch(images, self.config.patch)?)?;
        let z = self.encode(&tape, store, x, images.len())?;
        let logits = self.classify(&tape, store, z)?.value();
        Ok(logits
            .data()
            .chunks_exact(NUM_KINDS)
            .map(crate::tensor::argmax)
            .collect())
    }
}
