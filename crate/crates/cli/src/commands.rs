//! Subcommand implementations. Every command writes into the output
//! directory and is deterministic given the config (with a fixed
//! annotation timestamp).

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;

use dosing_ope::annotate::{
    aggregate_sources, annotate_targets, annotation_budget, select_annotation_targets, write_jsonl, AnnotationSet,
    Annotator, LlmAnnotator, OracleAnnotator,
};
use dosing_ope::bandit::{BehaviorDataset, Task};
use dosing_ope::exec::Execution;
use dosing_ope::harness::{
    action_entropy, entropy_curve_of_actions, run_experiment, BootstrapConfig, EntropyCurve, EvalReport,
    ExperimentData, ExperimentSpec,
};
use dosing_ope::llm::mock::{lab_responder, MockServer};
use dosing_ope::llm::{LlmClient, ResponseCache};
use dosing_ope::policy::clone_policy;
use dosing_ope::sim::{generate_cohort, split_cohort, OutcomeModel, SimConfig};

use crate::config::{AnnotatorKind, DataSource, ExperimentConfig};
use crate::io::{read_cohort, write_cohort};
use crate::plot::{Chart, Series};

fn exec(cfg: &ExperimentConfig) -> Execution {
    if cfg.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// The cohort and, for simulated data, its outcome model.
pub fn load_cohort(
    cfg: &ExperimentConfig,
) -> anyhow::Result<(BehaviorDataset, Option<OutcomeModel>, Option<SimConfig>)> {
    match &cfg.data {
        DataSource::Simulate { .. } => {
            let sim = cfg.simulator().expect("simulated source");
            let cohort = generate_cohort(&sim)?;
            Ok((cohort, Some(sim.outcome_model()), Some(sim)))
        }
        DataSource::Ingest { cohort } => {
            let f = fs::File::open(cohort).with_context(|| format!("opening cohort {}", cohort.display()))?;
            let ds =
                read_cohort(cfg.task, BufReader::new(f)).with_context(|| format!("reading {}", cohort.display()))?;
            Ok((ds, None, None))
        }
    }
}

pub struct Split {
    pub behavior: BehaviorDataset,
    pub target: BehaviorDataset,
    pub threshold: Option<f64>,
    pub model: Option<OutcomeModel>,
}

pub fn load_split(cfg: &ExperimentConfig) -> anyhow::Result<(BehaviorDataset, Split, Option<SimConfig>)> {
    let (cohort, model, sim) = load_cohort(cfg)?;
    let split = split_cohort(&cohort, cfg.split, cfg.dosage_threshold)?;
    Ok((
        cohort,
        Split {
            behavior: split.behavior,
            target: split.target,
            threshold: split.threshold,
            model,
        },
        sim,
    ))
}

/// Builds the configured annotators and hands them to `f`. Any mock server
/// lives for the duration of the call.
pub fn with_annotators<T>(
    cfg: &ExperimentConfig,
    model: Option<&OutcomeModel>,
    f: impl FnOnce(&[&dyn Annotator]) -> anyhow::Result<T>,
) -> anyhow::Result<T> {
    let a = &cfg.annotator;
    match a.kind {
        AnnotatorKind::Oracle | AnnotatorKind::Noisy => {
            let model = model.context("oracle annotators need simulated data")?;
            let (sd, seeds) = if a.kind == AnnotatorKind::Oracle {
                (0.0, &a.seeds[..1])
            } else {
                (a.noise_sd, &a.seeds[..])
            };
            let oracles: Vec<OracleAnnotator> = seeds
                .iter()
                .map(|&seed| {
                    let o = OracleAnnotator::new(*model, sd, seed)?;
                    Ok(if seeds.len() > 1 {
                        let id = format!("{}#{seed}", o.source_id);
                        o.with_source_id(id)
                    } else {
                        o
                    })
                })
                .collect::<dosing_ope::error::Result<_>>()?;
            let refs: Vec<&dyn Annotator> = oracles.iter().map(|o| o as &dyn Annotator).collect();
            f(&refs)
        }
        AnnotatorKind::Llm | AnnotatorKind::Mock => {
            let mut endpoint = a.endpoint.clone();
            let server = if a.kind == AnnotatorKind::Mock && !a.offline {
                let server = MockServer::start(lab_responder(a.mock_gain)).context("starting mock server")?;
                endpoint.base_url = server.url();
                endpoint.api_key_env = None;
                Some(server)
            } else {
                None
            };
            let cache_dir = a.cache_dir.clone().unwrap_or_else(|| cfg.output_dir.join("llm_cache"));
            let cache =
                ResponseCache::open(&cache_dir).with_context(|| format!("opening cache {}", cache_dir.display()))?;
            let mut client = LlmClient::new(endpoint, Some(cache))?;
            if a.offline {
                client = client.offline();
            }
            let annotator = LlmAnnotator::new(&client, a.domain_text.clone());
            let out = f(&[&annotator]);
            log::info!("{} network request(s) issued", client.network_requests());
            drop(server);
            out
        }
    }
}

#[derive(Debug, Serialize)]
struct SplitManifest<'a> {
    task: Task,
    split: &'a str,
    dosage_threshold: Option<f64>,
    n_cohort: usize,
    n_behavior: usize,
    n_target: usize,
    behavior_ids: Vec<u64>,
    target_ids: Vec<u64>,
    simulator: Option<&'a SimConfig>,
}

fn sorted_ids(ds: &BehaviorDataset) -> Vec<u64> {
    let mut ids: Vec<u64> = ds.samples.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    ids
}

fn write_dataset(path: &Path, ds: &BehaviorDataset) -> anyhow::Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_cohort(ds, BufWriter::new(f))
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> anyhow::Result<Vec<PathBuf>> {
    if !matches!(cfg.data, DataSource::Simulate { .. }) {
        bail!("`simulate` needs data.source = \"simulate\"");
    }
    let dir = out_dir(cfg)?;
    let (cohort, split, sim) = load_split(cfg)?;
    let paths = [
        dir.join("cohort.csv"),
        dir.join("behavior.csv"),
        dir.join("target.csv"),
        dir.join("split.json"),
    ];
    write_dataset(&paths[0], &cohort)?;
    write_dataset(&paths[1], &split.behavior)?;
    write_dataset(&paths[2], &split.target)?;
    write_json(
        &paths[3],
        &SplitManifest {
            task: cfg.task,
            split: cfg.split.as_str(),
            dosage_threshold: split.threshold,
            n_cohort: cohort.len(),
            n_behavior: split.behavior.len(),
            n_target: split.target.len(),
            behavior_ids: sorted_ids(&split.behavior),
            target_ids: sorted_ids(&split.target),
            simulator: sim.as_ref(),
        },
    )?;
    Ok(paths.to_vec())
}

#[derive(Debug, Serialize)]
struct CloneSummary {
    policy: &'static str,
    validation_accuracy: f64,
    degenerate: bool,
    converged: bool,
    iterations: usize,
    n_train: usize,
    n_validation: usize,
}

pub fn cmd_clone_policy(cfg: &ExperimentConfig) -> anyhow::Result<Vec<PathBuf>> {
    let dir = out_dir(cfg)?;
    let (_, split, _) = load_split(cfg)?;
    let mut summaries = Vec::new();
    let mut paths = Vec::new();
    for (name, ds) in [("behavior", &split.behavior), ("target", &split.target)] {
        let cloned = clone_policy(ds, &cfg.clone)?;
        let path = dir.join(format!("{name}_policy.json"));
        let mut text = cloned.policy.to_json()?;
        text.push('\n');
        fs::write(&path, text)?;
        paths.push(path);
        summaries.push(CloneSummary {
            policy: name,
            validation_accuracy: cloned.validation_accuracy,
            degenerate: cloned.degenerate,
            converged: cloned.converged,
            iterations: cloned.iterations,
            n_train: cloned.n_train,
            n_validation: cloned.n_validation,
        });
    }
    let path = dir.join("cloning.json");
    write_json(&path, &summaries)?;
    paths.push(path);
    Ok(paths)
}

#[derive(Debug, Serialize)]
pub struct AnnotateSummary {
    pub budget: usize,
    pub requested_per_source: usize,
    pub sources: Vec<String>,
    pub realized: Vec<usize>,
    pub dropped: Vec<DroppedTarget>,
    pub aggregated: usize,
    pub entropy_before: f64,
    pub entropy_after: f64,
}

#[derive(Debug, Serialize)]
pub struct DroppedTarget {
    pub source: String,
    pub sample_id: u64,
    pub action_index: usize,
    pub reason: String,
}

fn annotation_count(cfg: &ExperimentConfig) -> usize {
    let max = cfg.schedule.iter().copied().max().unwrap_or(0);
    cfg.headline.map_or(max, |h| h.max(max))
}

pub fn cmd_annotate(cfg: &ExperimentConfig) -> anyhow::Result<(Vec<PathBuf>, AnnotateSummary)> {
    let dir = out_dir(cfg)?;
    let (_, split, _) = load_split(cfg)?;
    let k = annotation_count(cfg);
    let targets = select_annotation_targets(&split.behavior, k, cfg.seeds.selection)?;
    let (sets, dropped, sources) = with_annotators(cfg, split.model.as_ref(), |annotators| {
        let mut sets = Vec::new();
        let mut dropped = Vec::new();
        let mut sources = Vec::new();
        for a in annotators {
            let run = annotate_targets(&split.behavior, &targets, *a, exec(cfg), cfg.fixed_timestamp)?;
            for ((sample_id, action_index), reason) in &run.dropped {
                dropped.push(DroppedTarget {
                    source: a.source_id().to_string(),
                    sample_id: *sample_id,
                    action_index: *action_index,
                    reason: reason.clone(),
                });
            }
            sources.push(a.source_id().to_string());
            sets.push(run.annotations);
        }
        Ok((sets, dropped, sources))
    })?;
    let aggregated = aggregate_sources(&sets, cfg.aggregation, cfg.average_stage)?;
    let mut paths = Vec::new();
    if sets.len() > 1 {
        for (i, s) in sets.iter().enumerate() {
            let p = dir.join(format!("annotations.source{i}.jsonl"));
            write_jsonl(s, BufWriter::new(fs::File::create(&p)?))?;
            paths.push(p);
        }
    }
    let p = dir.join("annotations.jsonl");
    write_jsonl(&aggregated, BufWriter::new(fs::File::create(&p)?))?;
    paths.push(p);
    let summary = AnnotateSummary {
        budget: annotation_budget(split.behavior.len(), &split.behavior.action_space()),
        requested_per_source: targets.len(),
        sources,
        realized: sets.iter().map(AnnotationSet::len).collect(),
        dropped,
        aggregated: aggregated.len(),
        entropy_before: action_entropy(&split.behavior, None)?,
        entropy_after: action_entropy(&split.behavior, Some(&aggregated))?,
    };
    let p = dir.join("annotate_summary.json");
    write_json(&p, &summary)?;
    paths.push(p);
    Ok((paths, summary))
}

pub fn experiment_spec(cfg: &ExperimentConfig, threshold: Option<f64>) -> ExperimentSpec {
    ExperimentSpec {
        split: cfg.split,
        dosage_threshold: threshold,
        clone: cfg.clone.clone(),
        reward: cfg.reward_model,
        schedule: cfg.schedule.clone(),
        headline: cfg.headline,
        aggregation: cfg.aggregation,
        average_stage: cfg.average_stage,
        bootstrap: BootstrapConfig {
            n_boot: cfg.n_boot,
            seed: cfg.seeds.bootstrap,
            exec: exec(cfg),
            ..BootstrapConfig::default()
        },
        selection_seed: cfg.seeds.selection,
        truth: cfg.truth,
        entropy_step: cfg.entropy_step,
        include_is: cfg.include_is,
        timestamp: cfg.fixed_timestamp,
        exec: exec(cfg),
    }
}

pub fn evaluate(cfg: &ExperimentConfig) -> anyhow::Result<EvalReport> {
    let (_, split, _) = load_split(cfg)?;
    let spec = experiment_spec(cfg, split.threshold);
    let model = split.model;
    let needs_annotator = cfg.schedule.iter().chain(cfg.headline.iter()).any(|&k| k > 0);
    let data = ExperimentData::Split {
        behavior: split.behavior,
        target: split.target,
        model,
    };
    if !needs_annotator {
        return Ok(run_experiment(&spec, data, &[])?);
    }
    with_annotators(cfg, model.as_ref(), |annotators| {
        Ok(run_experiment(&spec, data, annotators)?)
    })
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> anyhow::Result<(Vec<PathBuf>, EvalReport)> {
    let dir = out_dir(cfg)?;
    let report = evaluate(cfg)?;
    let path = dir.join("report.json");
    write_json(&path, &report)?;
    let mut paths = vec![path];
    paths.extend(render_report(&report, &dir)?);
    Ok((paths, report))
}

pub fn cmd_entropy_curve(cfg: &ExperimentConfig, full_budget: bool) -> anyhow::Result<(Vec<PathBuf>, EntropyCurve)> {
    let dir = out_dir(cfg)?;
    let (_, split, _) = load_split(cfg)?;
    let k = if full_budget {
        annotation_budget(split.behavior.len(), &split.behavior.action_space())
    } else {
        annotation_count(cfg)
    };
    let targets = select_annotation_targets(&split.behavior, k, cfg.seeds.selection)?;
    let actions: Vec<usize> = targets.iter().map(|t| t.1).collect();
    let curve = entropy_curve_of_actions(&split.behavior, &actions, cfg.entropy_step)?;
    let csv_path = dir.join("entropy_curve.csv");
    write_entropy_csv(&csv_path, &curve)?;
    let svg_path = dir.join("entropy_curve.svg");
    fs::write(&svg_path, entropy_chart(&curve, cfg.task).render())?;
    Ok((vec![csv_path, svg_path], curve))
}

pub fn cmd_report(cfg: &ExperimentConfig) -> anyhow::Result<Vec<PathBuf>> {
    let dir = out_dir(cfg)?;
    let path = dir.join("report.json");
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading {} (run `evaluate` first)", path.display()))?;
    let report: EvalReport = serde_json::from_str(&text)?;
    render_report(&report, &dir)
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn write_entropy_csv(path: &Path, curve: &EntropyCurve) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["annotations", "entropy", "max_entropy"])?;
    for (n, h) in &curve.points {
        w.write_record([n.to_string(), f(*h), f(curve.max_entropy)])?;
    }
    w.flush()?;
    Ok(())
}

fn entropy_chart(curve: &EntropyCurve, task: Task) -> Chart {
    Chart {
        title: format!("Action entropy as annotations are added ({task})"),
        x_label: "annotations".into(),
        y_label: "H(A) (nats)".into(),
        series: vec![Series {
            name: "H(A)".into(),
            points: curve.points.iter().map(|(n, h)| (*n as f64, *h, None)).collect(),
        }],
        reference: Some((curve.max_entropy, "ln |A|".into())),
    }
}

/// Writes the CSV tables, charts and a Markdown summary for a report.
pub fn render_report(report: &EvalReport, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut paths = Vec::new();

    let p = dir.join("estimators.csv");
    let mut w = csv_writer(&p)?;
    w.write_record([
        "estimator",
        "annotations",
        "point_estimate",
        "truth",
        "rmse",
        "standard_error",
        "lower",
        "upper",
    ])?;
    for e in &report.estimators {
        w.write_record([
            e.estimator.clone(),
            e.annotations.to_string(),
            f(e.point_estimate),
            f(report.truth),
            f(e.rmse),
            f(e.standard_error),
            f(e.lower),
            f(e.upper),
        ])?;
    }
    w.flush()?;
    paths.push(p);

    let p = dir.join("comparisons.csv");
    let mut w = csv_writer(&p)?;
    w.write_record([
        "baseline",
        "candidate",
        "annotations",
        "t",
        "df",
        "p_two_sided",
        "p_one_sided",
        "significant",
    ])?;
    for c in &report.comparisons {
        w.write_record([
            c.baseline.clone(),
            c.candidate.clone(),
            c.annotations.to_string(),
            f(c.test.t),
            f(c.test.df),
            f(c.test.p_two_sided),
            f(c.test.p_one_sided),
            c.test.significant.to_string(),
        ])?;
    }
    w.flush()?;
    paths.push(p);

    let p = dir.join("rmse_curve.csv");
    let mut w = csv_writer(&p)?;
    w.write_record([
        "requested",
        "realized",
        "rmse",
        "standard_error",
        "lower",
        "upper",
        "entropy",
    ])?;
    for r in &report.rmse_curve {
        w.write_record([
            r.requested.to_string(),
            r.realized.to_string(),
            f(r.rmse),
            f(r.standard_error),
            f(r.lower),
            f(r.upper),
            f(r.entropy),
        ])?;
    }
    w.flush()?;
    paths.push(p);

    let p = dir.join("entropy_curve.csv");
    write_entropy_csv(&p, &report.entropy_curve)?;
    paths.push(p);

    let p = dir.join("replicates.csv");
    let mut w = csv_writer(&p)?;
    let mut head = vec!["replicate".to_string()];
    head.extend(report.estimators.iter().map(|e| format!("{}_abs_error", e.estimator)));
    w.write_record(&head)?;
    let n = report
        .estimators
        .iter()
        .map(|e| e.replicate_errors.len())
        .max()
        .unwrap_or(0);
    for i in 0..n {
        let mut rec = vec![i.to_string()];
        rec.extend(
            report
                .estimators
                .iter()
                .map(|e| e.replicate_errors.get(i).map(|v| f(*v)).unwrap_or_default()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    paths.push(p);

    if !report.f1.is_empty() {
        let p = dir.join("f1.csv");
        let mut w = csv_writer(&p)?;
        w.write_record(["source", "n", "weighted_f1", "mean_absolute_error"])?;
        for r in &report.f1 {
            w.write_record([
                r.source.clone(),
                r.n.to_string(),
                f(r.weighted_f1),
                f(r.mean_absolute_error),
            ])?;
        }
        w.flush()?;
        paths.push(p);

        let p = dir.join("stratified_error.csv");
        let mut w = csv_writer(&p)?;
        w.write_record(["source", "strata", "stratum", "n", "mean_absolute_error"])?;
        for r in &report.stratified {
            w.write_record([
                r.source.clone(),
                r.strata.clone(),
                r.stratum.clone(),
                r.n.to_string(),
                f(r.mean_absolute_error),
            ])?;
        }
        w.flush()?;
        paths.push(p);
    }

    let dm = report.estimator("DM");
    let chart = Chart {
        title: format!(
            "DM+ RMSE vs annotations ({}, {} split)",
            report.task,
            report.split.as_str()
        ),
        x_label: "annotations per source".into(),
        y_label: "RMSE".into(),
        series: vec![Series {
            name: "DM+".into(),
            points: report
                .rmse_curve
                .iter()
                .map(|r| (r.requested as f64, r.rmse, Some((r.lower, r.upper))))
                .collect(),
        }],
        reference: dm.map(|d| (d.rmse, "DM".to_string())),
    };
    let p = dir.join("rmse_curve.svg");
    fs::write(&p, chart.render())?;
    paths.push(p);
    let p = dir.join("entropy_curve.svg");
    fs::write(&p, entropy_chart(&report.entropy_curve, report.task).render())?;
    paths.push(p);

    let p = dir.join("summary.md");
    fs::write(&p, summary_markdown(report))?;
    paths.push(p);
    Ok(paths)
}

fn summary_markdown(r: &EvalReport) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "# {} / {} split\n", r.task, r.split.as_str());
    let _ = writeln!(
        s,
        "Behavior samples: {}. Target samples: {}. True value: {:.6} ({:?}).\n",
        r.n_behavior, r.n_target, r.truth, r.truth_mode
    );
    let _ = writeln!(
        s,
        "Cloned policy validation accuracy: behavior {:.3}, target {:.3}.\n",
        r.behavior_policy_accuracy, r.target_policy_accuracy
    );
    let _ = writeln!(s, "| estimator | annotations | estimate | RMSE | SE |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|");
    for e in &r.estimators {
        let _ = writeln!(
            s,
            "| {} | {} | {:.6} | {:.6} | {:.6} |",
            e.estimator, e.annotations, e.point_estimate, e.rmse, e.standard_error
        );
    }
    let _ = writeln!(s, "\n| comparison | annotations | t | p (two-sided) | significant |");
    let _ = writeln!(s, "|---|---:|---:|---:|---|");
    for c in &r.comparisons {
        let _ = writeln!(
            s,
            "| {} vs {} | {} | {:.3} | {:.3e} | {} |",
            c.baseline, c.candidate, c.annotations, c.test.t, c.test.p_two_sided, c.test.significant
        );
    }
    if let Some(d) = &r.is_diagnostics {
        if d.high_variance {
            let _ = writeln!(
                s,
                "\nIS weights show poor overlap (effective sample size {:.1}, mean weight {:.3}).",
                d.effective_sample_size, d.mean_weight
            );
        }
    }
    if r.annotations_dropped > 0 {
        let _ = writeln!(
            s,
            "\n{} annotation request(s) failed and were dropped.",
            r.annotations_dropped
        );
    }
    s
}
