//! Held-out evaluation: decoded-image PSNR/SSIM and feature L1 per
//! degradation kind, against the clean views and for the degraded baseline.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::RunConfig;
use super::enhancer_train::{
    enhance_prepared, holdout_images, holdout_pairs, mean_l1, prepare, Frozen, PairItem, VIEWS,
};
use super::gendeg_train::streams;
use super::metrics::{psnr, ssim};
use crate::degrade::DegradationKind;
use crate::error::Result;
use crate::mvssem::MvSsem;
use crate::tensor::{ParamStore, Tape, Tensor};

/// Metrics of one group of pairs; every figure is a mean over views.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KindMetrics {
    pub kind: String,
    pub items: usize,
    pub psnr_enhanced: f64,
    pub psnr_degraded: f64,
    pub ssim_enhanced: f64,
    pub ssim_degraded: f64,
    pub l1_enhanced: f64,
    pub l1_degraded: f64,
}

impl KindMetrics {
    pub fn psnr_gain(&self) -> f64 {
        self.psnr_enhanced - self.psnr_degraded
    }

    /// `1 − enhanced / degraded` feature L1.
    pub fn l1_reduction(&self) -> f64 {
        1.0 - self.l1_enhanced / self.l1_degraded
    }

    fn mean_of(kind: &str, rows: &[&ItemMetrics]) -> Self {
        let n = rows.len() as f64;
        let avg = |f: fn(&ItemMetrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        Self {
            kind: kind.to_string(),
            items: rows.len(),
            psnr_enhanced: avg(|r| r.psnr_enhanced),
            psnr_degraded: avg(|r| r.psnr_degraded),
            ssim_enhanced: avg(|r| r.ssim_enhanced),
            ssim_degraded: avg(|r| r.ssim_degraded),
            l1_enhanced: avg(|r| r.l1_enhanced),
            l1_degraded: avg(|r| r.l1_degraded),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    /// One row per degradation kind, in label order.
    pub kinds: Vec<KindMetrics>,
    /// Unweighted mean of the per-kind rows.
    pub average: KindMetrics,
    /// Undegraded inputs, outside the average.
    pub clean: KindMetrics,
    pub parameters: usize,
    pub seconds_per_item: f64,
}

#[derive(Clone, Copy, Debug)]
struct ItemMetrics {
    psnr_enhanced: f64,
    psnr_degraded: f64,
    ssim_enhanced: f64,
    ssim_degraded: f64,
    l1_enhanced: f64,
    l1_degraded: f64,
}

fn measure(
    cfg: &RunConfig,
    store: &ParamStore,
    model: &MvSsem,
    frozen: &Frozen,
    item: &PairItem,
) -> Result<ItemMetrics> {
    let prepared = prepare(item, frozen, cfg.deg_injection)?;
    let tape = Tape::new();
    let enhanced = enhance_prepared(&tape, store, model, cfg, &prepared, None)?.value();
    let per_view = prepared.layout.per_view();
    let c = frozen.backbone.channels;
    let mut m = ItemMetrics {
        psnr_enhanced: 0.0,
        psnr_degraded: 0.0,
        ssim_enhanced: 0.0,
        ssim_degraded: 0.0,
        l1_enhanced: mean_l1(&enhanced, &prepared.clean),
        l1_degraded: mean_l1(&prepared.degraded, &prepared.clean),
    };
    for v in 0..VIEWS {
        let rows = Tensor::new(
            vec![per_view, c],
            enhanced.data()[v * per_view * c..(v + 1) * per_view * c].to_vec(),
        )?;
        let clean = &item.clean[v];
        let decoded = frozen
            .backbone
            .decode(&rows, clean.height(), clean.width())?;
        m.psnr_enhanced += psnr(&decoded, clean)? / VIEWS as f64;
        m.psnr_degraded += psnr(&item.degraded[v], clean)? / VIEWS as f64;
        m.ssim_enhanced += ssim(&decoded, clean)? / VIEWS as f64;
        m.ssim_degraded += ssim(&item.degraded[v], clean)? / VIEWS as f64;
    }
    Ok(m)
}

/// Evaluates on `per_kind` held-out pairs of every kind plus as many
/// undegraded pairs. Items are processed in parallel; aggregation runs in
/// item order, so the report does not depend on scheduling.
pub fn evaluate(
    cfg: &RunConfig,
    store: &ParamStore,
    model: &MvSsem,
    frozen: &Frozen,
    per_kind: usize,
) -> Result<MetricsReport> {
    let images = holdout_images(cfg)?;
    let items = holdout_pairs(cfg, &images, per_kind, streams::EVALUATION)?;
    let clean_items: Vec<PairItem> = items
        .iter()
        .map(|p| PairItem {
            degraded: p.clean.clone(),
            kind: None,
            severity: 0.0,
            ..p.clone()
        })
        .collect();
    let start = Instant::now();
    let measured: Vec<ItemMetrics> = items
        .par_iter()
        .chain(clean_items.par_iter())
        .map(|item| measure(cfg, store, model, frozen, item))
        .collect::<Result<_>>()?;
    let seconds_per_item = start.elapsed().as_secs_f64() / measured.len() as f64;
    let (degraded, clean) = measured.split_at(items.len());

    let kinds: Vec<KindMetrics> = DegradationKind::ALL
        .iter()
        .map(|&k| {
            let rows: Vec<&ItemMetrics> = degraded
                .iter()
                .zip(&items)
                .filter(|(_, it)| it.kind == Some(k))
                .map(|(m, _)| m)
                .collect();
            KindMetrics::mean_of(k.name(), &rows)
        })
        .collect();
    let average = average_of(&kinds);
    let clean_rows: Vec<&ItemMetrics> = clean.iter().collect();
    Ok(MetricsReport {
        kinds,
        average,
        clean: KindMetrics::mean_of("clean", &clean_rows),
        parameters: store.scalar_count(),
        seconds_per_item,
    })
}

/// Unweighted mean of per-kind rows.
pub fn average_of(kinds: &[KindMetrics]) -> KindMetrics {
    let n = kinds.len() as f64;
    let avg = |f: fn(&KindMetrics) -> f64| kinds.iter().map(f).sum::<f64>() / n;
    KindMetrics {
        kind: "average".into(),
        items: kinds.iter().map(|k| k.items).sum(),
        psnr_enhanced: avg(|k| k.psnr_enhanced),
        psnr_degraded: avg(|k| k.psnr_degraded),
        ssim_enhanced: avg(|k| k.ssim_enhanced),
        ssim_degraded: avg(|k| k.ssim_degraded),
        l1_enhanced: avg(|k| k.l1_enhanced),
        l1_degraded: avg(|k| k.l1_degraded),
    }
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14}{:>6}{:>10}{:>10}{:>9}{:>9}{:>10}{:>10}",
            "kind", "items", "psnr-enh", "psnr-deg", "ssim-enh", "ssim-deg", "l1-enh", "l1-deg"
        );
        for k in self.kinds.iter().chain([&self.average, &self.clean]) {
            let _ = writeln!(
                out,
                "{:<14}{:>6}{:>10.3}{:>10.3}{:>9.4}{:>9.4}{:>10.5}{:>10.5}",
                k.kind,
                k.items,
                k.psnr_enhanced,
                k.psnr_degraded,
                k.ssim_enhanced,
                k.ssim_degraded,
                k.l1_enhanced,
                k.l1_degraded
            );
        }
        let _ = writeln!(out, "parameters {}", self.parameters);
        let _ = writeln!(out, "seconds per item {:.4}", self.seconds_per_item);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn kind(&self, kind: DegradationKind) -> &KindMetrics {
        &self.kinds[kind.label()]
    }
}
