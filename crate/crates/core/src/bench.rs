//! Inference benchmarking: ledger-measured peak memory and wall-clock
//! latency per (summary kind, input length), plus log-log scaling fits.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{measure_peak, Tensor};
use crate::config::{ModelConfig, SummaryKind};
use crate::detector::Detector;
use crate::error::{FtmError, Result};
use crate::model::Bound;

/// Input frames of a 4 s utterance at 30 ms per frame.
pub const FOUR_SECONDS_FRAMES: usize = 134;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: SummaryKind,
    pub t_frames: usize,
    /// Peak live tensor bytes during one inference.
    pub peak_bytes: usize,
    pub median_ms: f64,
    pub q1_ms: f64,
    pub q3_ms: f64,
    pub repeats: usize,
    /// `100·(A2A − this)/A2A` for peak memory, when an A2A row of the same
    /// length exists.
    pub mem_reduction_pct: Option<f64>,
    pub time_reduction_pct: Option<f64>,
}

/// Standard-normal input of `t` frames.
pub fn synthetic_input(cfg: &ModelConfig, t: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0f32, 1.0).expect("unit normal");
    let data = (0..t * cfg.input_dim).map(|_| n.sample(&mut rng)).collect();
    Tensor::from_vec(&[t, cfg.input_dim], data).expect("shape")
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times `repeats` inferences of a `t_frames` synthetic utterance after one
/// warm-up run, and measures the peak in a separate ledger scope. Weights are
/// loaded and prepared before either, so neither counts load-time work. Streaming
/// kinds consume the input in chunks of S frames; A2A takes it whole.
pub fn bench_inference(
    cfg: &ModelConfig,
    params: &Bound<f32>,
    kind: SummaryKind,
    t_frames: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchRow> {
    if repeats < 3 {
        return Err(FtmError::Config(format!("repeats must be at least 3, got {repeats}")));
    }
    if kind.is_streaming() && t_frames < cfg.block_size() {
        return Err(FtmError::Config(format!(
            "{kind} needs at least one complete block of {} frames, got {t_frames}",
            cfg.block_size()
        )));
    }
    let x = synthetic_input(cfg, t_frames, seed);
    let det = Detector::new(cfg, params, kind)?;
    det.run(&x)?;
    let (res, peak_bytes) = measure_peak(|| det.run(&x))?;
    res?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        det.run(&x)?;
        times.push(start.elapsed().as_secs_f64() * 1000.0);
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchRow {
        kind,
        t_frames,
        peak_bytes,
        median_ms: quantile(&times, 0.5),
        q1_ms: quantile(&times, 0.25),
        q3_ms: quantile(&times, 0.75),
        repeats,
        mem_reduction_pct: None,
        time_reduction_pct: None,
    })
}

/// Peak live tensor bytes of one inference on a `t_frames` synthetic input,
/// without timing. Weights are prepared outside the measured scope.
pub fn peak_inference_bytes(
    cfg: &ModelConfig,
    params: &Bound<f32>,
    kind: SummaryKind,
    t_frames: usize,
    seed: u64,
) -> Result<usize> {
    let x = synthetic_input(cfg, t_frames, seed);
    let det = Detector::new(cfg, params, kind)?;
    let (res, peak) = measure_peak(|| det.run(&x))?;
    res?;
    Ok(peak)
}

/// Fills the reduction columns from A2A rows of equal length.
pub fn add_reductions(rows: &mut [BenchRow]) {
    let refs: Vec<(usize, usize, f64)> = rows
        .iter()
        .filter(|r| r.kind == SummaryKind::A2aLstm)
        .map(|r| (r.t_frames, r.peak_bytes, r.median_ms))
        .collect();
    for r in rows.iter_mut() {
        if let Some(&(_, mem, time)) = refs.iter().find(|(t, _, _)| *t == r.t_frames) {
            r.mem_reduction_pct = Some(100.0 * (mem as f64 - r.peak_bytes as f64) / mem as f64);
            r.time_reduction_pct = Some(100.0 * (time - r.median_ms) / time);
        }
    }
}

/// Least-squares slope of `ln(value)` against `ln(t)`.
pub fn scaling_fit(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 4 {
        return Err(FtmError::Data(format!(
            "scaling fit needs at least 4 lengths, got {}",
            points.len()
        )));
    }
    if let Some(&(t, v)) = points.iter().find(|&&(t, v)| t == 0 || v.is_nan() || v <= 0.0) {
        return Err(FtmError::Data(format!("cannot fit non-positive point ({t}, {v})")));
    }
    let xs: Vec<f64> = points.iter().map(|&(t, _)| (t as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, v)| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(FtmError::Data("scaling fit needs distinct lengths".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Latency scaling exponent of every kind with at least 4 rows.
pub fn time_exponents(rows: &[BenchRow]) -> Vec<(SummaryKind, f64)> {
    SummaryKind::ALL
        .iter()
        .filter_map(|&k| {
            let pts: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| r.kind == k)
                .map(|r| (r.t_frames, r.median_ms))
                .collect();
            scaling_fit(&pts).ok().map(|s| (k, s))
        })
        .collect()
}

pub fn write_bench_csv<W: Write>(w: W, rows: &[BenchRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn format_bench_table(rows: &[BenchRow]) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |p| format!("{p:.1}%"));
    let mut s = format!(
        "{:<6} {:>7} {:>12} {:>10} {:>10} {:>10} {:>10}\n",
        "kind", "frames", "peak_bytes", "median_ms", "iqr_ms", "mem_red", "time_red"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<6} {:>7} {:>12} {:>10.3} {:>10.3} {:>10} {:>10}\n",
            r.kind.name(),
            r.t_frames,
            r.peak_bytes,
            r.median_ms,
            r.q3_ms - r.q1_ms,
            pct(r.mem_reduction_pct),
            pct(r.time_reduction_pct)
        ));
    }
    s
}
