//! Per-curve error metrics in MPa, aggregate reports and overlay plots.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Result, SptError};
use crate::features::PreparedSample;
use crate::material::{CurvePair, Dataset, GridSpec, NormStats};
use crate::model::Seq2Seq;

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(SptError::LengthMismatch {
            expected: target.len(),
            actual: pred.len(),
        });
    }
    if target.is_empty() {
        return Err(SptError::InvalidArgument("empty sequence".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / target.len() as f64)
}

/// Coefficient of determination about the target mean.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(SptError::ZeroVariance);
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTag {
    Proposed,
    #[serde(rename = "1d-baseline")]
    Baseline1d,
}

impl ModelTag {
    pub fn for_model(model: &Seq2Seq) -> Self {
        if model.config().gaf_enabled {
            Self::Proposed
        } else {
            Self::Baseline1d
        }
    }
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Proposed => "proposed",
            Self::Baseline1d => "1d-baseline",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: usize,
    pub mae: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelTag,
    pub samples: Vec<SampleMetrics>,
    pub max_mae: f64,
    pub min_mae: f64,
    pub max_r2: f64,
    pub min_r2: f64,
    pub mean_mae: f64,
    pub mean_r2: f64,
    /// Anything the caller wants carried along, such as the checkpoint's
    /// training config.
    #[serde(default)]
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

impl EvalReport {
    pub fn from_samples(model: ModelTag, samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(SptError::InvalidArgument("no samples to report".into()));
        }
        let n = samples.len() as f64;
        let fold =
            |f: fn(f64, f64) -> f64, init: f64, get: fn(&SampleMetrics) -> f64| samples.iter().map(get).fold(init, f);
        Ok(Self {
            model,
            max_mae: fold(f64::max, f64::NEG_INFINITY, |s| s.mae),
            min_mae: fold(f64::min, f64::INFINITY, |s| s.mae),
            max_r2: fold(f64::max, f64::NEG_INFINITY, |s| s.r2),
            min_r2: fold(f64::min, f64::INFINITY, |s| s.r2),
            mean_mae: samples.iter().map(|s| s.mae).sum::<f64>() / n,
            mean_r2: samples.iter().map(|s| s.r2).sum::<f64>() / n,
            samples,
            provenance: Default::default(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| SptError::io(path, e))
    }

    /// Four-column summary: max/min MAE (MPa), max/min R².
    pub fn summary(&self) -> String {
        format!(
            "{:<12} max MAE {:>9.3} MPa  min MAE {:>9.3} MPa  max R2 {:>8.4}  min R2 {:>8.4}",
            self.model.to_string(),
            self.max_mae,
            self.min_mae,
            self.max_r2,
            self.min_r2
        )
    }
}

/// Stress predictions in MPa, one row per sample.
pub fn predict_mpa(model: &Seq2Seq, norm: &NormStats, samples: &[CurvePair]) -> Result<Vec<Vec<f64>>> {
    let prepared = samples
        .iter()
        .map(|p| PreparedSample::new(p, norm, model.config().gaf_enabled))
        .collect::<Result<Vec<_>>>()?;
    Ok(model
        .predict(&prepared)?
        .into_iter()
        .map(|row| row.into_iter().map(|v| norm.denormalize_stress(v)).collect())
        .collect())
}

fn check_grid(expected: &GridSpec, found: &GridSpec) -> Result<()> {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    if expected.l_in != found.l_in
        || expected.l_out != found.l_out
        || !close(expected.delta_max, found.delta_max)
        || !close(expected.eps_max, found.eps_max)
    {
        return Err(SptError::InvalidArgument(format!(
            "dataset grid {found:?} does not match the model grid {expected:?}"
        )));
    }
    Ok(())
}

/// Autoregressive inference over `ds` with the model's own normalization.
pub fn evaluate_model(model: &Seq2Seq, norm: &NormStats, grid: &GridSpec, ds: &Dataset) -> Result<EvalReport> {
    check_grid(grid, &ds.grid)?;
    let preds = predict_mpa(model, norm, &ds.samples)?;
    let samples = ds
        .samples
        .iter()
        .zip(&preds)
        .map(|(pair, pred)| {
            Ok(SampleMetrics {
                id: pair.id,
                mae: mae(pred, &pair.stress)?,
                r2: r2(pred, &pair.stress)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_samples(ModelTag::for_model(model), samples)
}

pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset) -> Result<EvalReport> {
    let model = ckpt.to_model()?;
    let mut report = evaluate_model(&model, &ckpt.meta.norm_stats, &ckpt.meta.grid, ds)?;
    report
        .provenance
        .insert("train_config".into(), serde_json::to_value(&ckpt.meta.train_config)?);
    report
        .provenance
        .insert("dataset_seed".into(), serde_json::to_value(ckpt.meta.dataset_seed)?);
    Ok(report)
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 420.0;
const MARGIN: f64 = 60.0;

/// Writes `strain,true_stress,pred_stress` to `csv_path` and a standalone
/// line chart of both curves to `svg_path`.
pub fn emit_plot(pair: &CurvePair, pred: &[f64], csv_path: &Path, svg_path: &Path) -> Result<()> {
    if pred.len() != pair.stress.len() || pair.strain_grid.len() != pair.stress.len() {
        return Err(SptError::LengthMismatch {
            expected: pair.stress.len(),
            actual: pred.len(),
        });
    }
    let mut csv = String::from("strain,true_stress,pred_stress\n");
    for ((e, t), p) in pair.strain_grid.iter().zip(&pair.stress).zip(pred) {
        writeln!(csv, "{e},{t},{p}").expect("string write");
    }
    std::fs::write(csv_path, csv).map_err(|e| SptError::io(csv_path, e))?;
    std::fs::write(svg_path, overlay_svg(&pair.strain_grid, &pair.stress, pred, pair.id))
        .map_err(|e| SptError::io(svg_path, e))
}

fn overlay_svg(x: &[f64], truth: &[f64], pred: &[f64], id: usize) -> String {
    let x_max = x.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let y_max = truth
        .iter()
        .chain(pred)
        .filter(|v| v.is_finite())
        .cloned()
        .fold(f64::MIN_POSITIVE, f64::max)
        * 1.05;
    let y_min = truth
        .iter()
        .chain(pred)
        .filter(|v| v.is_finite())
        .cloned()
        .fold(0.0, f64::min);
    let px = |v: f64| MARGIN + v / x_max * (SVG_W - 2.0 * MARGIN);
    let py = |v: f64| SVG_H - MARGIN - (v - y_min) / (y_max - y_min) * (SVG_H - 2.0 * MARGIN);
    let polyline = |ys: &[f64], color: &str, dash: &str| {
        let pts: Vec<String> = x
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(&a, &b)| format!("{:.2},{:.2}", px(a), py(b)))
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash} points=\"{}\"/>\n",
            pts.join(" ")
        )
    };

    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">"
    )
    .expect("string write");
    writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").expect("string write");
    let (x0, y0, x1, y1) = (MARGIN, SVG_H - MARGIN, SVG_W - MARGIN, MARGIN);
    writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>"
    )
    .expect("string write");
    writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    )
    .expect("string write");
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (f * x_max, y_min + f * (y_max - y_min));
        writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{xv:.3}</text>",
            px(xv),
            y0 + 16.0
        )
        .expect("string write");
        writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{yv:.0}</text>",
            x0 - 6.0,
            py(yv) + 4.0
        )
        .expect("string write");
    }
    writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">true strain</text>",
        SVG_W / 2.0,
        SVG_H - 16.0
    )
    .expect("string write");
    writeln!(
        s,
        "<text x=\"16\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">stress (MPa)</text>",
        SVG_H / 2.0,
        SVG_H / 2.0
    )
    .expect("string write");
    writeln!(
        s,
        "<text x=\"{:.2}\" y=\"30\" font-size=\"14\" text-anchor=\"middle\">sample {id}</text>",
        SVG_W / 2.0
    )
    .expect("string write");
    s.push_str(&polyline(truth, "#1f77b4", ""));
    s.push_str(&polyline(pred, "#d62728", " stroke-dasharray=\"6 4\""));
    writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" fill=\"#1f77b4\">true</text>",
        x0 + 12.0,
        y1 + 14.0
    )
    .expect("string write");
    writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" fill=\"#d62728\">predicted</text>",
        x0 + 12.0,
        y1 + 30.0
    )
    .expect("string write");
    s.push_str("</svg>\n");
    s
}
