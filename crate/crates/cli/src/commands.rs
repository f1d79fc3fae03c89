use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use reefpipe_core::eval::{default_sweep, evaluate_run, predictions_from_tracks, render_table, EvalMode, EvalReport};
use reefpipe_core::ingest::{open_source, AnnotationTable};
use reefpipe_core::pipeline::{build_detector, read_tracks_jsonl, OverflowPolicy, TrackSink, TracksFileSink};
use reefpipe_core::{FrameSource, Pipeline, PipelineConfig, RunReport, RunStatus, SourceSpec, StageMetrics};
use reefpipe_service::{export_archive, Include, Server, StoreOptions, StoreSink, TrackStore};
use serde::Serialize;
use tokio::sync::watch;

use crate::config::AppConfig;
use crate::UsageError;

fn open(cfg: &AppConfig) -> Result<(FrameSource, Option<Arc<AnnotationTable>>)> {
    let spec = SourceSpec::from_str(cfg.source()?).map_err(|e| UsageError(format!("--source: {e}")))?;
    let source = open_source(&spec).context("opening source")?;
    let truth = match &cfg.truth {
        Some(p) => Some(Arc::new(
            AnnotationTable::read_csv(p).with_context(|| format!("reading truth {}", p.display()))?,
        )),
        None => source.truth(),
    };
    Ok((source, truth))
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .context("starting async runtime")
}

/// First interrupt sets `stop` and flips the returned watch; a second one
/// exits immediately.
fn install_interrupt(rt: &tokio::runtime::Runtime, stop: Arc<AtomicBool>) -> watch::Receiver<bool> {
    let (tx, rx) = watch::channel(false);
    rt.spawn(async move {
        if tokio::signal::ctrl_c().await.is_err() {
            return;
        }
        eprintln!("reefpipe: interrupted, draining queues");
        stop.store(true, Ordering::SeqCst);
        let _ = tx.send(true);
        if tokio::signal::ctrl_c().await.is_ok() {
            std::process::exit(130);
        }
    });
    rx
}

fn announce(server: &Server) {
    println!("listening on http://{}", server.addr());
    let _ = std::io::stdout().flush();
}

#[derive(Serialize)]
struct RunFile<'a> {
    #[serde(flatten)]
    status: &'a RunStatus,
    tracks: usize,
    metrics: &'a StageMetrics,
    config: &'a PipelineConfig,
}

pub fn run(cfg: &AppConfig) -> Result<()> {
    let out = cfg.out.clone().unwrap_or_else(|| "reefpipe-out".into());
    let (source, truth) = open(cfg)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut detector = build_detector(&cfg.pipeline, truth).context("starting detector")?;

    let store = TrackStore::open(StoreOptions {
        summary_len: cfg.pipeline.summary_len,
        frame_store_capacity: cfg.pipeline.frame_store_capacity,
        config: serde_json::to_value(cfg)?,
        ..StoreOptions::for_run_dir(&out)
    })?;
    let rt = runtime()?;
    let stop = Arc::new(AtomicBool::new(false));
    let mut interrupted = install_interrupt(&rt, Arc::clone(&stop));
    let pipeline = Pipeline::new(cfg.pipeline.clone())?
        .with_stop_flag(Arc::clone(&stop))
        .record_to(&out);
    store.attach_metrics(pipeline.metrics());

    let server = match &cfg.serve {
        Some(addr) => {
            let s = rt.block_on(Server::start(Arc::clone(&store), addr, cfg.static_dir.clone()))?;
            announce(&s);
            Some(s)
        }
        None => None,
    };

    let mut store_sink = StoreSink::new(Arc::clone(&store));
    let mut file_sink = TracksFileSink::new(out.join("tracks.jsonl"));
    let report = pipeline.run(
        source,
        detector.as_mut(),
        &mut [&mut store_sink as &mut dyn TrackSink, &mut file_sink],
    );
    let report: RunReport = match report {
        Ok(r) => r,
        Err(e) => {
            if let Some(s) = server {
                rt.block_on(s.shutdown());
            }
            return Err(e).context("pipeline failed");
        }
    };
    store.finish_run(report.status.clone());
    let summary = RunFile {
        status: &report.status,
        tracks: report.tracks.len(),
        metrics: &report.metrics,
        config: &cfg.pipeline,
    };
    let report_path = out.join("report.json");
    std::fs::write(&report_path, serde_json::to_vec_pretty(&summary)?)
        .with_context(|| format!("writing {}", report_path.display()))?;

    let m = &report.metrics;
    println!(
        "{}: {} frames in, {} detected, {} propagated, {} dropped, {} tracks, {:.2} FPS",
        status_word(&report.status),
        m.frames_in,
        m.frames_detected,
        m.frames_propagated,
        m.frames_dropped,
        report.tracks.len(),
        m.end_to_end_fps
    );
    println!("wrote {}", out.join("tracks.jsonl").display());
    let _ = std::io::stdout().flush();

    if let Some(s) = server {
        if !stop.load(Ordering::SeqCst) {
            info!("run finished; still serving until interrupted");
            rt.block_on(async {
                let _ = interrupted.wait_for(|v| *v).await;
            });
        }
        rt.block_on(s.shutdown());
    }
    if let RunStatus::DetectorFailed { message } = &report.status {
        bail!("detector failed: {message}");
    }
    Ok(())
}

fn status_word(s: &RunStatus) -> &'static str {
    match s {
        RunStatus::Completed => "completed",
        RunStatus::Stopped => "stopped",
        RunStatus::DetectorFailed { .. } => "detector failed",
    }
}

/// Replays are not live, so frames queue up instead of being shed.
fn replay_config(cfg: &AppConfig) -> PipelineConfig {
    if cfg.pipeline.frame_queue_policy != OverflowPolicy::Block {
        info!("replay uses the block frame queue policy");
    }
    PipelineConfig {
        frame_queue_policy: OverflowPolicy::Block,
        ..cfg.pipeline.clone()
    }
}

fn replay(cfg: &AppConfig, pcfg: &PipelineConfig) -> Result<(RunReport, Arc<AnnotationTable>)> {
    let (source, truth) = open(cfg)?;
    let truth = truth.ok_or_else(|| UsageError("no ground truth: pass --truth or use an annotated source".into()))?;
    let mut detector = build_detector(pcfg, Some(Arc::clone(&truth))).context("starting detector")?;
    let report = Pipeline::new(pcfg.clone())?.run(source, detector.as_mut(), &mut [])?;
    if let RunStatus::DetectorFailed { message } = &report.status {
        bail!("detector failed: {message}");
    }
    Ok((report, truth))
}

fn score(cfg: &AppConfig, pcfg: &PipelineConfig, report: &RunReport, truth: &AnnotationTable) -> Result<EvalReport> {
    let thresholds = match cfg.eval.iou_threshold {
        Some(t) => vec![t],
        None => default_sweep(),
    };
    let tracks;
    let preds = match cfg.eval.mode {
        EvalMode::Detections => &report.detections,
        EvalMode::Tracks => {
            tracks = predictions_from_tracks(&report.tracks);
            &tracks
        }
    };
    let mut r = evaluate_run(preds, truth, &thresholds, cfg.eval.mode)?;
    r.end_to_end_fps = Some(report.metrics.end_to_end_fps);
    r.config = pcfg.to_json_value();
    Ok(r)
}

pub fn eval(cfg: &AppConfig) -> Result<()> {
    let pcfg = replay_config(cfg);
    let (report, truth) = replay(cfg, &pcfg)?;
    let r = score(cfg, &pcfg, &report, &truth)?;
    if cfg.eval.json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        print!("{}", r.to_text());
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    batch_size: usize,
    input_size: u32,
    skip_interval: u32,
    mean_f2: f64,
    end_to_end_fps: f64,
    frames_dropped: u64,
}

/// Grid values for one axis; the base value when none are given.
fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

pub fn sweep(cfg: &AppConfig) -> Result<()> {
    let base = replay_config(cfg);
    let batches = axis(&cfg.sweep.batch_sizes, base.batch_size);
    let sizes = axis(&cfg.sweep.input_sizes, base.input_size);
    let skips = axis(&cfg.sweep.skip_intervals, base.skip_interval);

    let mut rows = Vec::new();
    for &input_size in &sizes {
        for &skip_interval in &skips {
            for &batch_size in &batches {
                let pcfg = PipelineConfig {
                    batch_size,
                    input_size,
                    skip_interval,
                    frame_queue_capacity: base.frame_queue_capacity.max(batch_size),
                    ..base.clone()
                };
                pcfg.validate().map_err(|e| UsageError(e.to_string()))?;
                let (report, truth) = replay(cfg, &pcfg)?;
                let r = score(cfg, &pcfg, &report, &truth)?;
                rows.push(SweepRow {
                    batch_size,
                    input_size,
                    skip_interval,
                    mean_f2: r.mean_f2,
                    end_to_end_fps: report.metrics.end_to_end_fps,
                    frames_dropped: report.metrics.frames_dropped,
                });
            }
        }
    }
    if cfg.eval.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    let table: Vec<(String, f64, f64)> = rows
        .iter()
        .map(|r| {
            let mut name = format!("batch {} @ {}", r.batch_size, r.input_size);
            if skips.len() > 1 || r.skip_interval != 1 {
                name.push_str(&format!(", skip {}", r.skip_interval));
            }
            (name, r.mean_f2, r.end_to_end_fps)
        })
        .collect();
    print!("{}", render_table(&table));
    Ok(())
}

fn open_run_store(cfg: &AppConfig, run_dir: &Path) -> Result<Arc<TrackStore>> {
    if !run_dir.is_dir() {
        bail!("run directory {} does not exist", run_dir.display());
    }
    let config = std::fs::read(run_dir.join("report.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
        .and_then(|v| v.get("config").cloned())
        .unwrap_or(serde_json::Value::Null);
    let store = TrackStore::open(StoreOptions {
        summary_len: cfg.pipeline.summary_len,
        config,
        ..StoreOptions::for_run_dir(run_dir)
    })?;
    let tracks_path = run_dir.join("tracks.jsonl");
    if tracks_path.exists() {
        store.load_tracks(read_tracks_jsonl(&tracks_path)?);
    } else {
        warn!("{} not found; starting with no tracks", tracks_path.display());
    }
    Ok(store)
}

pub fn export(cfg: &AppConfig) -> Result<()> {
    let run_dir = cfg.out()?;
    let dest = cfg
        .export
        .dest
        .as_deref()
        .ok_or_else(|| UsageError("missing --dest".into()))?;
    let store = open_run_store(cfg, run_dir)?;
    let include = if cfg.export.labeled_only { Include::LabeledOnly } else { Include::All };
    let m = export_archive(&store, dest, include)?;
    println!(
        "exported {} tracks ({} labeled), {} frames to {}",
        m.counts.tracks,
        m.counts.labeled,
        m.counts.frames,
        dest.display()
    );
    Ok(())
}

pub fn serve_only(cfg: &AppConfig) -> Result<()> {
    let run_dir = cfg.out()?;
    let addr = cfg
        .serve
        .as_deref()
        .ok_or_else(|| UsageError("missing --serve".into()))?;
    let store = open_run_store(cfg, run_dir)?;
    let rt = runtime()?;
    let mut interrupted = install_interrupt(&rt, Arc::new(AtomicBool::new(false)));
    let server = rt.block_on(Server::start(store, addr, cfg.static_dir.clone()))?;
    announce(&server);
    rt.block_on(async {
        let _ = interrupted.wait_for(|v| *v).await;
    });
    rt.block_on(server.shutdown());
    Ok(())
}
