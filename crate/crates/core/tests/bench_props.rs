use ftm_core::bench::{add_reductions, bench_inference, peak_inference_bytes, scaling_fit, FOUR_SECONDS_FRAMES};
use ftm_core::checkpoint::ParamStore;
use ftm_core::config::{ModelConfig, SummaryKind};
use ftm_core::detector::{detect_tensor, Detector};
use ftm_core::error::FtmError;
use ftm_core::model::{init_params, Bound};

fn model(kind: SummaryKind) -> (ModelConfig, ParamStore<f32>) {
    let cfg = ModelConfig::desk().with_kind(kind);
    let p = init_params::<f32>(&cfg, 11).unwrap();
    (cfg, p)
}

#[test]
fn streaming_peak_does_not_grow_with_stream_length() {
    for kind in [SummaryKind::Stcn, SummaryKind::Slstm, SummaryKind::Save] {
        let (cfg, p) = model(kind);
        let b = Bound::new(&p, false);
        let short = peak_inference_bytes(&cfg, &b, kind, 256, 1).unwrap();
        let long = peak_inference_bytes(&cfg, &b, kind, 1024, 1).unwrap();
        assert!(long as f64 <= 1.2 * short as f64, "{kind}: {short} -> {long}");
    }
}

#[test]
fn a2a_peak_grows_faster_than_length() {
    let (cfg, p) = model(SummaryKind::A2aLstm);
    let b = Bound::new(&p, false);
    let a = peak_inference_bytes(&cfg, &b, SummaryKind::A2aLstm, 256, 1).unwrap();
    let c = peak_inference_bytes(&cfg, &b, SummaryKind::A2aLstm, 1024, 1).unwrap();
    // Four times the frames: linear terms give 4x, the score matrices 16x.
    assert!(c as f64 >= 8.0 * a as f64, "{a} -> {c}");
}

#[test]
fn peaks_are_deterministic_and_input_independent() {
    for kind in SummaryKind::ALL {
        let (cfg, p) = model(kind);
        let b = Bound::new(&p, false);
        let a = peak_inference_bytes(&cfg, &b, kind, FOUR_SECONDS_FRAMES, 1).unwrap();
        assert_eq!(a, peak_inference_bytes(&cfg, &b, kind, FOUR_SECONDS_FRAMES, 1).unwrap());
        assert_eq!(a, peak_inference_bytes(&cfg, &b, kind, FOUR_SECONDS_FRAMES, 2).unwrap());
    }
}

#[test]
fn streaming_kinds_use_less_memory_than_a2a_at_four_seconds() {
    let peak = |kind| {
        let (cfg, p) = model(kind);
        peak_inference_bytes(&cfg, &Bound::new(&p, false), kind, FOUR_SECONDS_FRAMES, 1).unwrap()
    };
    let a2a = peak(SummaryKind::A2aLstm);
    for kind in [SummaryKind::Stcn, SummaryKind::Slstm, SummaryKind::Save] {
        assert!(peak(kind) < a2a, "{kind}");
    }
}

#[test]
fn bench_rows_and_reductions() {
    let mut rows = Vec::new();
    for kind in [SummaryKind::Save, SummaryKind::A2aLstm] {
        let (cfg, p) = model(kind);
        rows.push(bench_inference(&cfg, &Bound::new(&p, false), kind, 128, 3, 1).unwrap());
    }
    add_reductions(&mut rows);
    let (save, a2a) = (&rows[0], &rows[1]);
    assert!(save.q1_ms <= save.median_ms && save.median_ms <= save.q3_ms);
    let want = 100.0 * (a2a.peak_bytes as f64 - save.peak_bytes as f64) / a2a.peak_bytes as f64;
    assert_eq!(save.mem_reduction_pct, Some(want));
    assert_eq!(a2a.mem_reduction_pct, Some(0.0));
}

#[test]
fn bench_rejects_bad_requests() {
    let (cfg, p) = model(SummaryKind::Stcn);
    let b = Bound::new(&p, false);
    let short = bench_inference(&cfg, &b, SummaryKind::Stcn, 2 * cfg.block_shift - 1, 3, 1);
    assert!(matches!(short, Err(FtmError::Config(_))));
    assert!(matches!(bench_inference(&cfg, &b, SummaryKind::Stcn, 128, 2, 1), Err(FtmError::Config(_))));
    assert!(scaling_fit(&[(256, 1.0), (512, 2.0), (1024, 4.0)]).is_err());
}

#[test]
fn prepared_detector_matches_one_shot_scoring() {
    for kind in SummaryKind::ALL {
        let (cfg, p) = model(kind);
        let b = Bound::new(&p, false);
        let det = Detector::new(&cfg, &b, kind).unwrap();
        for t in [40, 64, 100, 167] {
            let x = ftm_core::bench::synthetic_input(&cfg, t, t as u64);
            assert_eq!(det.run(&x).unwrap(), detect_tensor(&cfg, &b, kind, &x).unwrap());
            assert_eq!(det.run(&x).unwrap(), det.run(&x).unwrap());
        }
    }
}
