//! Run configuration: a flat set of `key = value` lines with `#` comments.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ssm::ScanMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenDeg,
    Enhancer,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::GenDeg => "gendeg",
            Stage::Enhancer => "enhancer",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gendeg" => Ok(Stage::GenDeg),
            "enhancer" => Ok(Stage::Enhancer),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

/// Every tunable of a run. Defaults describe the desk-scale setting.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub state_dim: usize,
    pub classes: usize,
    pub d_inner: usize,
    pub z_dim: usize,
    pub tau: f64,
    pub gumbel_temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_period: usize,
    pub lambda_pixel: f64,
    pub lambda_rec: f64,
    pub lambda_con: f64,
    pub lambda_cls: f64,
    pub severity_min: f64,
    pub severity_max: f64,
    /// Synthetic clean images used when no data directory is given.
    pub train_images: usize,
    pub holdout_images: usize,
    /// Enhancer views are square crops of this side.
    pub crop_size: usize,
    pub crop_shift: usize,
    pub backbone_patch: usize,
    pub scan_mode: ScanMode,
    pub deg_injection: bool,
    pub semantic_reorder: bool,
    pub multi_view: bool,
    pub feedback_hidden: bool,
    pub feedback_offset: bool,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub gendeg_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::GenDeg,
            seed: 7,
            image_size: 64,
            patch_size: 8,
            channels: 64,
            state_dim: 16,
            classes: 64,
            d_inner: 128,
            z_dim: 128,
            tau: 0.07,
            gumbel_temperature: 1.0,
            batch_size: 12,
            epochs: 40,
            learning_rate: 1e-4,
            lr_period: 100,
            lambda_pixel: 0.1,
            lambda_rec: 1.0,
            lambda_con: 0.5,
            lambda_cls: 0.3,
            severity_min: 0.0,
            severity_max: 1.0,
            train_images: 600,
            holdout_images: 120,
            crop_size: 32,
            crop_shift: 8,
            backbone_patch: 4,
            scan_mode: ScanMode::Sequential,
            deg_injection: true,
            semantic_reorder: true,
            multi_view: true,
            feedback_hidden: true,
            feedback_offset: true,
            data_dir: None,
            out_dir: PathBuf::from("out"),
            gendeg_checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean `{value}` for `{key}`"
        ))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "stage" => self.stage = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "state_dim" => self.state_dim = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "d_inner" => self.d_inner = parse(key, v)?,
            "z_dim" => self.z_dim = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "gumbel_temperature" => self.gumbel_temperature = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "lr_period" => self.lr_period = parse(key, v)?,
            "lambda_pixel" => self.lambda_pixel = parse(key, v)?,
            "lambda_rec" => self.lambda_rec = parse(key, v)?,
            "lambda_con" => self.lambda_con = parse(key, v)?,
            "lambda_cls" => self.lambda_cls = parse(key, v)?,
            "severity_min" => self.severity_min = parse(key, v)?,
            "severity_max" => self.severity_max = parse(key, v)?,
            "train_images" => self.train_images = parse(key, v)?,
            "holdout_images" => self.holdout_images = parse(key, v)?,
            "crop_size" => self.crop_size = parse(key, v)?,
            "crop_shift" => self.crop_shift = parse(key, v)?,
            "backbone_patch" => self.backbone_patch = parse(key, v)?,
            "scan_mode" => {
                self.scan_mode = v
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid scan mode `{v}`")))?
            }
            "deg_injection" => self.deg_injection = parse_bool(key, v)?,
            "semantic_reorder" => self.semantic_reorder = parse_bool(key, v)?,
            "multi_view" => self.multi_view = parse_bool(key, v)?,
            "feedback_hidden" => self.feedback_hidden = parse_bool(key, v)?,
            "feedback_offset" => self.feedback_offset = parse_bool(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "gendeg_checkpoint" => self.gendeg_checkpoint = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("state_dim", self.state_dim),
            ("classes", self.classes),
            ("d_inner", self.d_inner),
            ("z_dim", self.z_dim),
            ("batch_size", self.batch_size),
            ("lr_period", self.lr_period),
            ("crop_size", self.crop_size),
            ("backbone_patch", self.backbone_patch),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        let reals = [
            ("tau", self.tau),
            ("gumbel_temperature", self.gumbel_temperature),
            ("learning_rate", self.learning_rate),
        ];
        if let Some((k, _)) = reals.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        let weights = [
            self.lambda_pixel,
            self.lambda_rec,
            self.lambda_con,
            self.lambda_cls,
        ];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0 <= self.severity_min
            && self.severity_min <= self.severity_max
            && self.severity_max <= 1.0)
        {
            return Err(Error::Config(format!(
                "severity range [{}, {}] is not inside [0, 1]",
                self.severity_min, self.severity_max
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.crop_size > self.image_size
            || !self.crop_size.is_multiple_of(2 * self.backbone_patch)
        {
            return Err(Error::Config(format!(
                "crop_size {} must fit the image and be divisible by {}",
                self.crop_size,
                2 * self.backbone_patch
            )));
        }
        Ok(())
    }

    pub fn severity_range(&self) -> (f64, f64) {
        (self.severity_min, self.severity_max)
    }

    /// The configuration as parseable text; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines = vec![
            format!("stage = {}", self.stage),
            format!("seed = {}", self.seed),
            format!("image_size = {}", self.image_size),
            format!("patch_size = {}", self.patch_size),
            format!("channels = {}", self.channels),
            format!("state_dim = {}", self.state_dim),
            format!("classes = {}", self.classes),
            format!("d_inner = {}", self.d_inner),
            format!("z_dim = {}", self.z_dim),
            format!("tau = {:?}", self.tau),
            format!("gumbel_temperature = {:?}", self.gumbel_temperature),
            format!("batch_size = {}", self.batch_size),
            format!("epochs = {}", self.epochs),
            format!("learning_rate = {:?}", self.learning_rate),
            format!("lr_period = {}", self.lr_period),
            format!("lambda_pixel = {:?}", self.lambda_pixel),
            format!("lambda_rec = {:?}", self.lambda_rec),
            format!("lambda_con = {:?}", self.lambda_con),
            format!("lambda_cls = {:?}", self.lambda_cls),
            format!("severity_min = {:?}", self.severity_min),
            format!("severity_max = {:?}", self.severity_max),
            format!("train_images = {}", self.train_images),
            format!("holdout_images = {}", self.holdout_images),
            format!("crop_size = {}", self.crop_size),
            format!("crop_shift = {}", self.crop_shift),
            format!("backbone_patch = {}", self.backbone_patch),
            format!("scan_mode = {}", self.scan_mode),
            format!("deg_injection = {}", self.deg_injection),
            format!("semantic_reorder = {}", self.semantic_reorder),
            format!("multi_view = {}", self.multi_view),
            format!("feedback_hidden = {}", self.feedback_hidden),
            format!("feedback_offset = {}", self.feedback_offset),
            format!("out_dir = {}", self.out_dir.display()),
        ];
        if let Some(d) = path(&self.data_dir) {
            lines.push(format!("data_dir = {d}"));
        }
        if let Some(g) = path(&self.gendeg_checkpoint) {
            lines.push(format!("gendeg_checkpoint = {g}"));
        }
        lines.join("\n") + "\n"
    }
}
