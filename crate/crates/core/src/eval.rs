//! Metrics on the km/h scale, causal ablation and attention-map export.
//!
//! ```
//! use causnet::eval::{format_triple, metrics};
//!
//! let r = metrics(&[10.0, 13.0], &[7.0, 10.0]).unwrap();
//! assert_eq!(format_triple(&r), "3.000 / 9.000 / 3.000");
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpn::{predict, CpnError, ModelState};
use crate::data::LedgerEntry;
use crate::dataset::{Batch, ForecastData, WindowRef};

/// Denominator floor for MAPE, km/h.
pub const MAPE_FLOOR_KMH: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics need equal-length, non-empty inputs (got {0} and {1})")]
    Length(usize, usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] CpnError),
    #[error("no windows to evaluate")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub n: usize,
    pub horizon: usize,
}

/// MAE, MSE, RMSE and floored MAPE of flat, de-normalized values.
pub fn metrics(y_hat: &[f64], y: &[f64]) -> Result<MetricReport, EvalError> {
    if y_hat.len() != y.len() || y.is_empty() {
        return Err(EvalError::Length(y_hat.len(), y.len()));
    }
    let mut acc = [0.0; 3];
    for (i, (&p, &t)) in y_hat.iter().zip(y).enumerate() {
        if !(p.is_finite() && t.is_finite()) {
            return Err(EvalError::NonFinite(i));
        }
        let d = p - t;
        acc[0] += d.abs();
        acc[1] += d * d;
        acc[2] += d.abs() / t.abs().max(MAPE_FLOOR_KMH);
    }
    let n = y.len() as f64;
    let mse = acc[1] / n;
    Ok(MetricReport {
        mae: acc[0] / n,
        mse,
        rmse: mse.sqrt(),
        mape: acc[2] / n * 100.0,
        n: y.len(),
        horizon: 1,
    })
}

/// `MAE / MSE / RMSE` with three decimals.
pub fn format_triple(r: &MetricReport) -> String {
    format!("{:.3} / {:.3} / {:.3}", r.mae, r.mse, r.rmse)
}

/// Model outputs for one window, km/h.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub window: WindowRef,
    pub y_hat: Vec<f64>,
    pub y_base: Vec<f64>,
    /// Speed difference, so only the scale is converted.
    pub a_causal: Vec<f64>,
    pub y: Vec<f64>,
    pub event_window: bool,
}

/// Runs the model over `windows` in chunks of `batch_size`, with neutral
/// causal features when `neutral` is set, and converts back to km/h.
pub fn predict_windows(
    state: &ModelState,
    data: &ForecastData,
    windows: &[WindowRef],
    neutral: bool,
    batch_size: usize,
) -> Result<Vec<PredictionRow>, CpnError> {
    let norm = &data.normalizer;
    let h = data.horizon();
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let mut batch = data.batch(chunk);
        if neutral {
            batch = batch.neutralized(&data.neutral);
        }
        let p = predict(state, &batch)?;
        for (i, w) in chunk.iter().enumerate() {
            let row = |a: &crate::numerics::Array, f: &dyn Fn(f64) -> f64| -> Vec<f64> { a.data()[i * h..(i + 1) * h].iter().map(|&v| f(v)).collect() };
            let y = data.targets_kmh(*w).to_vec();
            for (&raw, &z) in y.iter().zip(&batch.y.data()[i * h..(i + 1) * h]) {
                debug_assert!((norm.inverse(z) - raw).abs() <= 1e-9 * raw.abs().max(1.0));
            }
            out.push(PredictionRow {
                window: *w,
                y_hat: row(&p.y_hat, &|v| norm.inverse(v)),
                y_base: row(&p.y_base, &|v| norm.inverse(v)),
                a_causal: row(&p.a_causal, &|v| v * norm.std),
                y,
                event_window: data.is_event_window(*w),
            });
        }
    }
    Ok(out)
}

/// Metrics over every horizon step of every row.
pub fn report_rows(rows: &[PredictionRow]) -> Result<MetricReport, EvalError> {
    let y_hat: Vec<f64> = rows.iter().flat_map(|r| r.y_hat.iter().copied()).collect();
    let y: Vec<f64> = rows.iter().flat_map(|r| r.y.iter().copied()).collect();
    let mut r = metrics(&y_hat, &y)?;
    r.horizon = rows.first().map_or(1, |row| row.y.len());
    r.n = rows.len();
    Ok(r)
}

/// Paired evaluation with real and with neutral causal features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub causal: MetricReport,
    pub neutral: MetricReport,
    /// `100·(neutral − causal)/neutral` for MAE; positive means the causal
    /// stream helps.
    pub mae_reduction_pct: f64,
    pub mse_reduction_pct: f64,
    pub rmse_reduction_pct: f64,
}

fn reduction(with: f64, without: f64) -> f64 {
    if without == 0.0 {
        0.0
    } else {
        100.0 * (without - with) / without
    }
}

pub fn ablation_compare(
    state: &ModelState,
    data: &ForecastData,
    windows: &[WindowRef],
    batch_size: usize,
) -> Result<(AblationReport, Vec<PredictionRow>), EvalError> {
    if windows.is_empty() {
        return Err(EvalError::Empty);
    }
    let on = predict_windows(state, data, windows, false, batch_size)?;
    let off = predict_windows(state, data, windows, true, batch_size)?;
    let causal = report_rows(&on)?;
    let neutral = report_rows(&off)?;
    Ok((
        AblationReport {
            mae_reduction_pct: reduction(causal.mae, neutral.mae),
            mse_reduction_pct: reduction(causal.mse, neutral.mse),
            rmse_reduction_pct: reduction(causal.rmse, neutral.rmse),
            causal,
            neutral,
        },
        on,
    ))
}

/// Share of event windows whose summed `a_causal` has the sign of the true
/// effect still acting on their first target step.
///
/// A ground-truth event acts on an instant from its onset to the end of its
/// duration; the latest such event on the window's segment supplies the
/// sign. Returns `(agreeing, counted)`; event windows whose targets carry no
/// injected effect, or a zero one, are skipped.
pub fn sign_agreement(rows: &[PredictionRow], data: &ForecastData, ledger: &[LedgerEntry]) -> (usize, usize) {
    let mut agree = 0;
    let mut counted = 0;
    for r in rows.iter().filter(|r| r.event_window) {
        let seg = &data.segment_ids[r.window.segment];
        let first_target = data.timestamp(r.window.start + data.lookback());
        let tau = ledger
            .iter()
            .filter(|e| &e.segment_id == seg && e.onset <= first_target)
            .filter(|e| (first_target - e.onset).num_seconds() as f64 / 60.0 <= e.duration_min)
            .max_by_key(|e| e.onset)
            .map(|e| e.tau_true);
        let Some(tau) = tau.filter(|t| *t != 0.0) else { continue };
        let a = r.a_causal.iter().sum::<f64>();
        counted += 1;
        if a * tau > 0.0 {
            agree += 1;
        }
    }
    (agree, counted)
}

/// Per-cell mean and variance of head-averaged final-block attention;
/// `None` marks cells blocked by the autoregressive mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub size: usize,
    pub mean: Vec<Option<f64>>,
    pub variance: Vec<Option<f64>>,
}

pub fn export_attention(state: &ModelState, batch: &Batch) -> Result<AttentionMaps, EvalError> {
    if batch.size == 0 {
        return Err(EvalError::Empty);
    }
    let p = predict(state, batch)?;
    let t = batch.lookback;
    let a = p.attention.data();
    let n = batch.size as f64;
    let mut mean = vec![None; t * t];
    let mut variance = vec![None; t * t];
    for r in 0..t {
        for s in 0..=r {
            let vals = (0..batch.size).map(|b| a[(b * t + r) * t + s]);
            let m = vals.clone().sum::<f64>() / n;
            let v = vals.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean[r * t + s] = Some(m);
            variance[r * t + s] = Some(v);
        }
    }
    Ok(AttentionMaps {
        size: t,
        mean,
        variance,
    })
}

/// Rows of comma-separated cells, empty where masked.
pub fn map_to_csv(size: usize, cells: &[Option<f64>]) -> String {
    let mut out = String::new();
    for r in 0..size {
        let line: Vec<String> = cells[r * size..(r + 1) * size]
            .iter()
            .map(|c| c.map_or(String::new(), |v| format!("{v:.6}")))
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Heatmap with one square per cell, darker for larger values; masked cells
/// are left undrawn.
pub fn map_to_svg(size: usize, cells: &[Option<f64>], title: &str) -> String {
    const CELL: usize = 24;
    const PAD: usize = 40;
    let max = cells.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let side = PAD + size * CELL + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="14" font-size="12">{title}</text>"#);
    for r in 0..size {
        let _ = writeln!(s, r#"<text x="4" y="{}">t={r}</text>"#, PAD + r * CELL + CELL / 2 + 3);
        for c in 0..size {
            if let Some(v) = cells[r * size + c] {
                let level = if max > 0.0 { v / max } else { 0.0 };
                let shade = (255.0 * (1.0 - level)).round() as u8;
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)"><title>{r},{c}: {v:.4}</title></rect>"#,
                    PAD + c * CELL,
                    PAD + r * CELL
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}
