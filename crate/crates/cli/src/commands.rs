use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use shrinknet::bench::{
    run_model_sim, run_split_harness, run_stability, MeanSd, Method, ModelSimConfig, SplitConfig, SplitMetrics,
    StabilityConfig,
};
use shrinknet::data::{parse_expression_matrix, ExpressionMatrix, TableFormat};
use shrinknet::eb::{EbMethod, EmConfig};
use shrinknet::pipeline::{infer_network, InferConfig};
use shrinknet::select::StopConfig;
use shrinknet::sim::{make_structure, sample_mvn, sample_precision_retry, stream_rng, GraphKind, GraphParams};

use crate::error::CliError;
use crate::manifest::RunRecorder;
use crate::{BenchmarkArgs, InferArgs, InputArgs, ModelArgs, SimulateArgs, StabilityArgs};

/// Fresh precision draws allowed when graph completion stalls.
const GENERATION_ATTEMPTS: usize = 10;

fn json_value<T: Serialize>(value: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(value).map_err(CliError::Encode)
}

/// Shortest representation that reads back to the same `f64`.
fn num(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else {
        format!("{x}")
    }
}

fn table_format(name: Option<&str>, path: &Path) -> Result<TableFormat, CliError> {
    match name.map(str::to_ascii_lowercase).as_deref() {
        None => Ok(TableFormat::from_path(path)),
        Some("csv") => Ok(TableFormat::Csv),
        Some("tsv") => Ok(TableFormat::Tsv),
        Some(other) => Err(CliError::Usage(format!("unknown format '{other}' (expected csv or tsv)"))),
    }
}

fn load_input(rec: &mut RunRecorder, path: &Path, format: Option<&str>, transpose: bool) -> Result<ExpressionMatrix, CliError> {
    let format = table_format(format, path)?;
    let bytes = rec.read_input(path)?;
    let m = parse_expression_matrix(&bytes, format, transpose)?;
    log::info!("{}: {} samples x {} genes", path.display(), m.n_samples(), m.n_genes());
    Ok(m)
}

fn infer_config(model: &ModelArgs, global_shrinkage: bool) -> Result<InferConfig, CliError> {
    let eb_method: EbMethod = model.eb.parse()?;
    Ok(InferConfig {
        em: EmConfig {
            tol: model.tol,
            max_iter: model.max_iter,
            global_shrinkage,
            eb_method,
            ..EmConfig::default()
        },
        alpha: model.alpha,
        p0: model.p0,
        stop: StopConfig {
            patience: (model.patience > 0).then_some(model.patience),
            use_rmax: !model.no_rmax,
        },
        scale: !model.no_scale,
    })
}

fn input_snapshot(input: &Path, format: Option<&str>, transpose: bool) -> serde_json::Value {
    json!({ "path": input.display().to_string(), "format": format, "transpose": transpose })
}

fn tsv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new())
}

fn into_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, CliError> {
    w.into_inner().map_err(|e| CliError::Table(e.into_error().into()))
}

#[derive(Serialize)]
struct GeneFit<'a> {
    gene: &'a str,
    lower_bound: f64,
    iterations: usize,
    converged: bool,
    a_star: f64,
    b_star: f64,
    c_star: f64,
    d_star: f64,
}

#[derive(Serialize)]
struct FitSummary<'a> {
    global_shrinkage: bool,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    em_iterations: usize,
    converged: bool,
    mean_lower_bound: Option<f64>,
    hyper_history: &'a [(f64, f64)],
    genes: Vec<GeneFit<'a>>,
    p0: f64,
    p0_estimated: bool,
    gamma: f64,
    alpha: f64,
    selected_edges: usize,
    stop_reason: shrinknet::select::StopReason,
}

pub fn infer(args: &InferArgs) -> Result<PathBuf, CliError> {
    let InputArgs { input, transpose, format } = &args.input;
    let config = infer_config(&args.model, !args.no_global_shrinkage)?;
    let snapshot = json!({
        "input": input_snapshot(input, format.as_deref(), *transpose),
        "infer": json_value(&config)?,
    });
    let mut rec = RunRecorder::new(&args.out, "infer", None, snapshot)?;
    let m = load_input(&mut rec, input, format.as_deref(), *transpose)?;
    rec.lap("load");

    let inf = infer_network(&m, &config)?;
    rec.lap("infer");

    let genes = m.gene_ids();
    let sel = &inf.selection;
    let mut decisions = vec![None; inf.ranking.len()];
    for d in &sel.decisions {
        decisions[d.rank - 1] = Some(d);
    }
    let mut w = tsv_writer();
    w.write_record(["gene_a", "gene_b", "rank", "kappa_bar", "bf_max", "p0_bound", "selected"])?;
    for e in &inf.ranking.edges {
        let d = decisions[e.rank - 1];
        let (bf, bound) = d.map_or(("NA".into(), "NA".into()), |d| (num(d.bayes_factor_max), num(d.p0_posterior_bound)));
        let selected = d.is_some_and(|d| d.selected);
        w.write_record([
            genes[e.i].as_str(),
            genes[e.j].as_str(),
            &e.rank.to_string(),
            &num(e.kappa_bar),
            &bf,
            &bound,
            if selected { "1" } else { "0" },
        ])?;
    }
    rec.write("edges.tsv", "edges-tsv", &into_bytes(w)?)?;

    let fit = &inf.fit;
    let summary = FitSummary {
        global_shrinkage: fit.global_shrinkage,
        a: fit.hyper.a,
        b: fit.hyper.b,
        c: fit.hyper.c,
        d: fit.hyper.d,
        em_iterations: fit.em_iterations,
        converged: fit.converged,
        mean_lower_bound: fit.mean_lower_bound.last().copied(),
        hyper_history: &fit.hyper_history,
        genes: fit
            .posteriors
            .iter()
            .zip(genes)
            .map(|(v, g)| GeneFit {
                gene: g,
                lower_bound: v.lower_bound,
                iterations: v.iterations,
                converged: v.converged,
                a_star: v.a_star,
                b_star: v.b_star,
                c_star: v.c_star,
                d_star: v.d_star,
            })
            .collect(),
        p0: inf.p0,
        p0_estimated: inf.p0_estimated,
        gamma: sel.gamma,
        alpha: sel.alpha,
        selected_edges: sel.selected.len(),
        stop_reason: sel.stop_reason,
    };
    rec.write_json("fit.json", "fit-json", &summary)?;
    rec.set_summary(json!({
        "genes": m.n_genes(),
        "samples": m.n_samples(),
        "selected_edges": sel.selected.len(),
        "p0": inf.p0,
    }));
    rec.lap("write");
    rec.finish()
}

pub fn simulate(args: &SimulateArgs) -> Result<PathBuf, CliError> {
    let kind: GraphKind = args.kind.parse()?;
    let params = match (kind, args.bandwidth, args.density) {
        (GraphKind::Band, Some(bw), None) => GraphParams::Bandwidth(bw),
        (GraphKind::Random, None, Some(d)) => GraphParams::Density(d),
        (_, None, None) => GraphParams::default_for(kind, args.p),
        _ => {
            return Err(CliError::Usage(format!(
                "--bandwidth applies to band graphs and --density to random graphs, not to {kind}"
            )))
        }
    };
    let snapshot = json!({
        "kind": kind,
        "params": json_value(&params)?,
        "p": args.p,
        "n": args.n,
        "dof": args.dof,
    });
    let mut rec = RunRecorder::new(&args.out, "simulate", Some(args.seed), snapshot)?;

    // the structure uses the master seed directly, the draws stream 0
    let g = make_structure(kind, args.p, &params, args.seed)?;
    let mut rng = stream_rng(args.seed, 0);
    let omega = sample_precision_retry(&g, args.dof, &mut rng, GENERATION_ATTEMPTS)?;
    let x = sample_mvn(&omega, args.n, &mut rng)?;
    rec.lap("sample");

    let genes = x.gene_ids();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("gene").chain(genes.iter().map(String::as_str)))?;
    for (i, row) in omega.matrix().row_iter().enumerate() {
        w.write_record(std::iter::once(genes[i].clone()).chain(row.iter().map(|v| num(*v))))?;
    }
    rec.write("precision.csv", "precision-csv", &into_bytes(w)?)?;

    let mut w = tsv_writer();
    w.write_record(["gene_a", "gene_b"])?;
    for (i, j) in g.edges() {
        w.write_record([genes[i].as_str(), genes[j].as_str()])?;
    }
    rec.write("adjacency.tsv", "edge-list-tsv", &into_bytes(w)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("sample").chain(genes.iter().map(String::as_str)))?;
    for (s, row) in x.sample_ids().iter().zip(x.values().row_iter()) {
        w.write_record(std::iter::once(s.clone()).chain(row.iter().map(|v| num(*v))))?;
    }
    rec.write("data.csv", "expression-csv", &into_bytes(w)?)?;

    rec.set_summary(json!({
        "n_edges": g.n_edges(),
        "n_pairs": g.n_pairs(),
        "density": g.density(),
    }));
    rec.lap("write");
    rec.finish()
}

fn parse_kinds(names: &[String]) -> Result<Vec<GraphKind>, CliError> {
    let mut kinds = Vec::new();
    for name in names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let kind: GraphKind = name.parse()?;
        if !kinds.contains(&kind) {
            kinds.push(kind);
        }
    }
    Ok(kinds)
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<PathBuf, CliError> {
    match &args.input {
        Some(input) => split_benchmark(args, input),
        None => model_benchmark(args),
    }
}

fn model_benchmark(args: &BenchmarkArgs) -> Result<PathBuf, CliError> {
    let config = ModelSimConfig {
        kinds: parse_kinds(&args.kinds)?,
        p: args.p,
        n_list: args.n_list.clone(),
        reps: args.reps,
        seed: args.seed,
        dof: args.dof,
        fpr_max: args.fpr_max,
        infer: infer_config(&args.model, true)?,
        keep_curves: args.roc,
    };
    let mut rec = RunRecorder::new(&args.out, "benchmark", Some(args.seed), json_value(&config)?)?;
    let result = run_model_sim(&config)?;
    rec.lap("simulate");

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "kind", "n", "rep", "method", "n_true_edges", "tp", "fp", "fn", "tn", "tpr", "fpr", "precision", "f_score",
        "pauc", "p0", "prior_a", "prior_b", "error",
    ])?;
    for r in &result.rows {
        w.write_record([
            r.kind.name().to_string(),
            r.n.to_string(),
            r.rep.to_string(),
            r.method.name().to_string(),
            r.n_true_edges.to_string(),
            r.counts.tp.to_string(),
            r.counts.fp.to_string(),
            r.counts.fn_.to_string(),
            r.counts.tn.to_string(),
            num(r.scores.tpr),
            num(r.scores.fpr),
            num(r.scores.precision),
            num(r.scores.f_score),
            num(r.pauc),
            num(r.p0),
            num(r.prior_a),
            num(r.prior_b),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    rec.write("metrics.csv", "metrics-csv", &into_bytes(w)?)?;
    rec.write_json("summary.json", "aggregate-json", &result.aggregates)?;

    if args.roc {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "n", "rep", "method", "fpr", "tpr"])?;
        for r in &result.rows {
            for (fpr, tpr) in r.curve.iter().flatten() {
                w.write_record([
                    r.kind.name().to_string(),
                    r.n.to_string(),
                    r.rep.to_string(),
                    r.method.name().to_string(),
                    num(*fpr),
                    num(*tpr),
                ])?;
            }
        }
        rec.write("roc.csv", "roc-csv", &into_bytes(w)?)?;
    }
    let failed = result.rows.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        log::warn!("{failed} of {} replicate fits failed; see the error column", result.rows.len());
    }
    rec.set_summary(json!({ "rows": result.rows.len(), "failed": failed }));
    rec.lap("write");
    rec.finish()
}

#[derive(Serialize)]
struct SplitSummary {
    method: Method,
    succeeded: usize,
    failed: usize,
    tpr: Option<MeanSd>,
    fpr: Option<MeanSd>,
    n_selected_small: Option<MeanSd>,
    n_selected_large: Option<MeanSd>,
    kappa_bar_correlation: Option<MeanSd>,
}

fn summarize_splits(rows: &[SplitMetrics], method: Method) -> SplitSummary {
    let ok: Vec<&SplitMetrics> = rows.iter().filter(|r| r.method == method && r.error.is_none()).collect();
    let stat = |f: &dyn Fn(&SplitMetrics) -> f64| MeanSd::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
    SplitSummary {
        method,
        succeeded: ok.len(),
        failed: rows.iter().filter(|r| r.method == method && r.error.is_some()).count(),
        tpr: stat(&|r| r.scores.tpr),
        fpr: stat(&|r| r.scores.fpr),
        n_selected_small: stat(&|r| r.n_selected_small as f64),
        n_selected_large: stat(&|r| r.n_selected_large as f64),
        kappa_bar_correlation: MeanSd::of(&ok.iter().filter_map(|r| r.kappa_bar_correlation).collect::<Vec<_>>()),
    }
}

fn split_benchmark(args: &BenchmarkArgs, input: &Path) -> Result<PathBuf, CliError> {
    let n_small = args.n_small.ok_or_else(|| CliError::Usage("--n-small is required with --input".into()))?;
    let config = SplitConfig {
        n_small,
        splits: args.splits,
        seed: args.seed,
        infer: infer_config(&args.model, true)?,
    };
    let snapshot = json!({
        "input": input_snapshot(input, args.format.as_deref(), args.transpose),
        "split": json_value(&config)?,
    });
    let mut rec = RunRecorder::new(&args.out, "benchmark", Some(args.seed), snapshot)?;
    let m = load_input(&mut rec, input, args.format.as_deref(), args.transpose)?;
    rec.lap("load");
    let rows = run_split_harness(&m, &config)?;
    rec.lap("splits");

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "split", "method", "n_selected_small", "n_selected_large", "tp", "fp", "fn", "tn", "tpr", "fpr", "precision",
        "f_score", "kappa_bar_spearman", "error",
    ])?;
    for r in &rows {
        w.write_record([
            r.split.to_string(),
            r.method.name().to_string(),
            r.n_selected_small.to_string(),
            r.n_selected_large.to_string(),
            r.counts.tp.to_string(),
            r.counts.fp.to_string(),
            r.counts.fn_.to_string(),
            r.counts.tn.to_string(),
            num(r.scores.tpr),
            num(r.scores.fpr),
            num(r.scores.precision),
            num(r.scores.f_score),
            r.kappa_bar_correlation.map(num).unwrap_or_else(|| "NA".into()),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    rec.write("splits.csv", "splits-csv", &into_bytes(w)?)?;
    let summary: Vec<SplitSummary> = Method::ALL.into_iter().map(|method| summarize_splits(&rows, method)).collect();
    rec.write_json("summary.json", "split-summary-json", &summary)?;
    rec.lap("write");
    rec.finish()
}

#[derive(Serialize)]
struct StableEdge<'a> {
    gene_a: &'a str,
    gene_b: &'a str,
    frequency: f64,
}

#[derive(Serialize)]
struct StabilityOutput<'a> {
    report: &'a shrinknet::bench::StabilityReport,
    stable: Vec<StableEdge<'a>>,
}

pub fn stability(args: &StabilityArgs) -> Result<PathBuf, CliError> {
    let InputArgs { input, transpose, format } = &args.input;
    let method: Method = args.method.parse()?;
    let config = StabilityConfig {
        n_small: args.n_small,
        resamples: args.resamples,
        seed: args.seed,
        e_v: args.expected_false,
        method,
        infer: infer_config(&args.model, method == Method::ShrinkNet)?,
    };
    let snapshot = json!({
        "input": input_snapshot(input, format.as_deref(), *transpose),
        "stability": json_value(&config)?,
    });
    let mut rec = RunRecorder::new(&args.out, "stability", Some(args.seed), snapshot)?;
    let m = load_input(&mut rec, input, format.as_deref(), *transpose)?;
    rec.lap("load");
    let run = run_stability(&m, &config)?;
    rec.lap("resample");

    let genes = m.gene_ids();
    let report = &run.report;
    // frequencies are sorted, so the stable edges form a prefix
    let output = StabilityOutput {
        report,
        stable: report
            .selection_frequency
            .iter()
            .take(report.stable_edges.len())
            .map(|f| StableEdge {
                gene_a: &genes[f.i],
                gene_b: &genes[f.j],
                frequency: f.frequency,
            })
            .collect(),
    };
    rec.write_json("stability.json", "stability-json", &output)?;

    let mut w = tsv_writer();
    w.write_record(["gene_a", "gene_b", "frequency", "stable"])?;
    for f in &report.selection_frequency {
        let stable = f.frequency >= report.pi_thr;
        w.write_record([
            genes[f.i].as_str(),
            genes[f.j].as_str(),
            &num(f.frequency),
            if stable { "1" } else { "0" },
        ])?;
    }
    rec.write("frequencies.tsv", "frequencies-tsv", &into_bytes(w)?)?;
    rec.set_summary(json!({
        "q_hat": report.q_hat,
        "pi_thr": report.pi_thr,
        "stable_edges": report.stable_edges.len(),
    }));
    rec.lap("write");
    rec.finish()
}
