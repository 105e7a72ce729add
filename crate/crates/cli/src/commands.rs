use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use edgevad::bench::{
    compare_with_paper, count_head, count_params_flops, measure_pipeline, reference, BenchReport, Counts,
};
use edgevad::eval::{evaluate, parse_records, roc_auc, Labels};
use edgevad::extractor::{build_extractor, ParamInit};
use edgevad::graph::{optimize as optimize_graph, ComputeGraph, OptimizeFlags};
use edgevad::params::{load_params, save_params};
use edgevad::pipeline::{log_event, run_pipeline, Detector, PipelineError};
use edgevad::rtfm::{
    score_features, synthetic_dataset, train as train_head, FeatureVideo, RtfmParams, SyntheticConfig,
};
use edgevad::source::load_video_source;
use serde_json::{json, Value};

use crate::config::Settings;
use crate::CliError;

fn config_err(what: &str) -> impl Fn(&dyn std::fmt::Display) -> CliError + '_ {
    move |e| CliError::Config(format!("{what}: {e}"))
}

fn runtime_err(what: &str) -> impl Fn(&dyn std::fmt::Display) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{what}: {e}"))
}

fn pipeline_err(e: PipelineError) -> CliError {
    match e {
        PipelineError::Config(_) | PipelineError::Model(_) => CliError::Config(e.to_string()),
        PipelineError::Source(_) | PipelineError::Stage { .. } => CliError::Runtime(e.to_string()),
    }
}

/// Where results go. With a directory every artifact is a file there, next
/// to `config.json`; without one the main result is written to stdout.
struct Sink {
    dir: Option<PathBuf>,
}

impl Sink {
    fn open(dir: Option<&Path>, settings: &Settings) -> Result<Sink, CliError> {
        let config = serde_json::to_string_pretty(&settings.to_json()).expect("settings serialize");
        if dir.is_none() {
            log::info!(
                "config {}",
                serde_json::to_string(&settings.to_json()).expect("settings serialize")
            );
        }
        let sink = Sink {
            dir: dir.map(Path::to_path_buf),
        };
        if let Some(d) = &sink.dir {
            fs::create_dir_all(d).map_err(|e| runtime_err(&d.display().to_string())(&e))?;
            sink.file("config.json", &config)?;
        }
        Ok(sink)
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn file(&self, name: &str, contents: &str) -> Result<(), CliError> {
        if let Some(p) = self.path(name) {
            fs::write(&p, contents).map_err(|e| runtime_err(&p.display().to_string())(&e))?;
        }
        Ok(())
    }

    /// Writes `name` into the directory, or `contents` to stdout without one.
    fn main(&self, name: &str, contents: &str) -> Result<(), CliError> {
        match self.dir {
            Some(_) => self.file(name, contents),
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(contents.as_bytes())
                    .and_then(|_| out.flush())
                    .map_err(|e| runtime_err("stdout")(&e))
            }
        }
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s
}

fn extractor_graph(s: &Settings, init: ParamInit) -> Result<ComputeGraph, CliError> {
    build_extractor(&s.extractor, init).map_err(|e| config_err("extractor")(&e))
}

fn head_params(s: &Settings) -> Result<RtfmParams, CliError> {
    match &s.head_params {
        Some(path) => {
            let named = load_params(path).map_err(|e| runtime_err("head_params")(&e))?;
            RtfmParams::from_named(s.head.clone(), named).map_err(|e| config_err("head_params")(&e))
        }
        None => RtfmParams::init(s.head.clone(), s.seed.wrapping_add(1)).map_err(|e| config_err("head")(&e)),
    }
}

fn detector(s: &Settings, flags: OptimizeFlags) -> Result<Detector, CliError> {
    let graph = extractor_graph(s, ParamInit::Seeded(s.seed))?;
    let o = optimize_graph(&graph, flags).map_err(|e| config_err("optimize")(&e))?;
    let det = Detector {
        extractor: o.graph,
        plan: o.plan,
        head: head_params(s)?,
    };
    det.check(&s.pipeline.preprocess).map_err(pipeline_err)?;
    Ok(det)
}

fn system_counts(s: &Settings, graph: &ComputeGraph) -> Result<Counts, CliError> {
    let ex = count_params_flops(graph).map_err(|e| config_err("extractor")(&e))?;
    Ok(ex.plus(count_head(&s.head, s.pipeline.preprocess.snippets)))
}

pub fn run(s: &Settings, out: Option<&Path>) -> Result<(), CliError> {
    let det = detector(s, s.optimize)?;
    let sink = Sink::open(out, s)?;
    let video = load_video_source(&s.video).map_err(|e| runtime_err("source")(&e))?;
    let outcome = run_pipeline(&video, &det, &s.pipeline).map_err(pipeline_err)?;

    let mut records = String::new();
    let mut log = String::new();
    for r in &outcome.records {
        records.push_str(&serde_json::to_string(r).expect("record serializes"));
        records.push('\n');
        log.push_str(&log_event(r));
        log.push('\n');
    }
    log.push_str(&outcome.summary.log_line());
    log.push('\n');
    if let Some(f) = &outcome.failure {
        log.push_str(&format!("failure {f}\n"));
    }

    sink.main("records.jsonl", &records)?;
    match sink.dir {
        Some(_) => sink.file("run.log", &log)?,
        None => eprint!("{log}"),
    }
    sink.file(
        "summary.json",
        &pretty(&json!({
            "config": s.to_json(),
            "summary": outcome.summary,
            "failure": outcome.failure.as_ref().map(|f| f.to_string()),
        })),
    )?;
    match outcome.failure {
        Some(f) => Err(pipeline_err(f)),
        None => Ok(()),
    }
}

pub fn bench(s: &Settings, out: Option<&Path>) -> Result<(), CliError> {
    let counts = system_counts(s, &extractor_graph(s, ParamInit::ShapeOnly)?)?;
    // The fingerprint must match across both runs, so the flags stay out of it.
    let mut config = s.to_json();
    config
        .as_object_mut()
        .expect("settings are an object")
        .remove("optimize");
    let label = s.bench.label.clone().unwrap_or_else(|| s.extractor.name.clone());
    let period = Duration::from_millis(s.bench.period_ms.max(1));

    let detectors = [detector(s, OptimizeFlags::none())?, detector(s, s.optimize)?];
    let sink = Sink::open(out, s)?;
    let video = load_video_source(&s.video).map_err(|e| runtime_err("source")(&e))?;
    let mut reports = Vec::new();
    for (det, flags) in detectors.iter().zip([OptimizeFlags::none(), s.optimize]) {
        log::info!("measuring {}", flags.label());
        let m = measure_pipeline(&video, det, &s.pipeline, period).map_err(|e| runtime_err("bench")(&e))?;
        reports.push(BenchReport::assemble(&label, &flags.label(), config.clone(), counts, m));
    }
    let cmp = compare_with_paper(&reports[1], &reports[0]).map_err(|e| runtime_err("bench")(&e))?;

    let as_json = |r: &BenchReport| pretty(&serde_json::to_value(r).expect("report serializes"));
    sink.file("baseline.json", &as_json(&reports[0]))?;
    sink.file("report.json", &as_json(&reports[1]))?;
    sink.file("comparison.csv", &cmp.to_csv())?;
    sink.file("comparison.txt", &cmp.to_text())?;
    print!("{}", cmp.to_text());
    Ok(())
}

fn snippet_auc(data: &[FeatureVideo], params: &RtfmParams) -> Result<Option<f64>, CliError> {
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for v in data.iter().filter(|v| v.snippet_labels.len() == v.features.shape()[0]) {
        let s = score_features(&v.features, params).map_err(|e| runtime_err("score")(&e))?;
        scores.extend(s.data().iter().map(|&x| x as f64));
        labels.extend_from_slice(&v.snippet_labels);
    }
    Ok(roc_auc(&scores, &labels).ok())
}

pub fn train(s: &Settings, out: Option<&Path>) -> Result<(), CliError> {
    if s.head.feature_dim != s.dataset.dim {
        return Err(CliError::Config(format!(
            "head.feature_dim {} must equal dataset.dim {}",
            s.head.feature_dim, s.dataset.dim
        )));
    }
    let data = synthetic_dataset(&s.dataset).map_err(|e| config_err("dataset")(&e))?;
    let held_out = synthetic_dataset(&SyntheticConfig {
        seed: s.dataset.seed.wrapping_add(1),
        ..s.dataset.clone()
    })
    .map_err(|e| config_err("dataset")(&e))?;
    let init = RtfmParams::init(s.head.clone(), s.seed.wrapping_add(1)).map_err(|e| config_err("head")(&e))?;
    let sink = Sink::open(out, s)?;

    let every = (s.train.epochs / 10).max(1);
    let outcome = train_head(&data, init, &s.train, |epoch, loss| {
        if (epoch + 1) % every == 0 {
            log::info!("epoch {}/{}: loss {loss:.4}", epoch + 1, s.train.epochs);
        }
    })
    .map_err(|e| runtime_err("train")(&e))?;

    let mut csv = String::from("epoch,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    sink.main("loss.csv", &csv)?;
    if let Some(bin) = sink.path("head.bin") {
        save_params(&bin, &outcome.params.named()).map_err(|e| runtime_err("save")(&e))?;
    }
    let (train_auc, held_out_auc) = (
        snippet_auc(&data, &outcome.params)?,
        snippet_auc(&held_out, &outcome.params)?,
    );
    log::info!(
        "snippet AUC: training {} held-out {}",
        train_auc.map_or("n/a".into(), |a| format!("{a:.4}")),
        held_out_auc.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    sink.file(
        "train.json",
        &pretty(&json!({
            "config": s.to_json(),
            "epochs": outcome.losses.len(),
            "final_loss": outcome.losses.last(),
            "train_snippet_auc": train_auc,
            "held_out_snippet_auc": held_out_auc,
            "held_out_dataset_seed": s.dataset.seed.wrapping_add(1),
            "params": sink.path("head.bin"),
        })),
    )
}

pub fn eval(s: &Settings, out: Option<&Path>) -> Result<(), CliError> {
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone()
            .ok_or_else(|| CliError::Config(format!("{key} is required for eval")))
    };
    let (records_path, labels_path) = (
        need(&s.eval.records, "eval.records")?,
        need(&s.eval.labels, "eval.labels")?,
    );
    let rule = s.verdict()?;
    let sink = Sink::open(out, s)?;
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| runtime_err(&p.display().to_string())(&e));
    let records = parse_records(&read(&records_path)?).map_err(|e| runtime_err("records")(&e))?;
    let labels = Labels::parse_csv(&read(&labels_path)?).map_err(|e| runtime_err("labels")(&e))?;
    let m = evaluate(&records, &labels, s.eval.unit, rule).map_err(|e| runtime_err("eval")(&e))?;
    log::info!(
        "{:?} AUC {}; detected {}/{} abnormal videos, {} false alarms on {} normal",
        m.unit,
        m.auc.map_or("n/a".into(), |a| format!("{a:.4}")),
        m.detected_abnormal,
        m.abnormal_videos,
        m.false_alarms,
        m.normal_videos
    );
    sink.main("metrics.json", &pretty(&json!({ "config": s.to_json(), "metrics": m })))
}

pub fn optimize(s: &Settings, out: Option<&Path>) -> Result<(), CliError> {
    let graph = extractor_graph(s, ParamInit::Seeded(s.seed))?;
    let o = optimize_graph(&graph, s.optimize).map_err(|e| config_err("optimize")(&e))?;
    let counts = count_params_flops(&o.graph).map_err(|e| config_err("extractor")(&e))?;
    let sink = Sink::open(out, s)?;

    let fused = o.graph.nodes.iter().filter(|n| n.op.is_fused()).count();
    let mut text = format!(
        "passes {}\nnodes {} -> {} ({fused} fused)\nparams {} flops {}\n",
        s.optimize.label(),
        o.nodes_before,
        o.graph.nodes.len(),
        counts.params,
        counts.flops
    );
    let plan_stats = o.plan.as_ref().map(|p| {
        json!({
            "steps": p.steps,
            "peak_bytes": p.peak_bytes,
            "arena_bytes": p.arena_bytes,
            "naive_bytes": p.naive_bytes,
        })
    });
    match &o.plan {
        Some(p) => {
            text.push_str(p.table().lines().last().unwrap_or_default());
            text.push('\n');
            sink.file("plan.txt", &p.table())?;
        }
        None => text.push_str("memory planning disabled\n"),
    }
    let graph_json = o.graph.to_json().map_err(|e| runtime_err("graph")(&e))?;
    sink.file("graph.json", &graph_json)?;
    sink.file(
        "optimize.json",
        &pretty(&json!({
            "config": s.to_json(),
            "passes": s.optimize.label(),
            "nodes_before": o.nodes_before,
            "nodes_after": o.graph.nodes.len(),
            "fused_nodes": fused,
            "params": counts.params,
            "flops": counts.flops,
            "plan": plan_stats,
        })),
    )?;
    print!("{text}");
    Ok(())
}

pub fn count(s: &Settings, out: Option<&Path>) -> Result<(), CliError> {
    let ex = count_params_flops(&extractor_graph(s, ParamInit::ShapeOnly)?).map_err(|e| config_err("extractor")(&e))?;
    let head = count_head(&s.head, s.pipeline.preprocess.snippets);
    let total = ex.plus(head);
    let sink = Sink::open(out, s)?;

    let rows = [
        ("extractor", ex, reference::EXTRACTOR),
        ("head", head, reference::HEAD),
        ("total", total, reference::TOTAL),
    ];
    let mut text = format!(
        "{:<9}  {:>12}  {:>12}  {:>14}  {:>14}\n",
        "model", "params (M)", "GFLOPs", "published (M)", "published GFLOPs"
    );
    for (name, c, (rp, rf)) in rows {
        text.push_str(&format!(
            "{name:<9}  {:>12.3}  {:>12.3}  {:>14.3}  {:>14.3}\n",
            c.params as f64 / 1e6,
            c.flops as f64 / 1e9,
            rp / 1e6,
            rf / 1e9
        ));
    }
    text.push_str(&format!(
        "published figures are for the full-scale models; this config counts {} snippets per video\n",
        s.pipeline.preprocess.snippets
    ));
    let rows_json: Value = rows
        .iter()
        .map(|(name, c, (rp, rf))| {
            (
                name.to_string(),
                json!({ "params": c.params, "flops": c.flops, "published_params": rp, "published_flops": rf }),
            )
        })
        .collect::<serde_json::Map<_, _>>()
        .into();
    sink.file(
        "count.json",
        &pretty(&json!({ "config": s.to_json(), "counts": rows_json })),
    )?;
    print!("{text}");
    Ok(())
}
