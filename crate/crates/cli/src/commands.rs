use std::collections::HashSet;
use std::time::Instant;

use log::{info, warn};
use serde_json::{json, Value};

use ltsv_core::experiments::{
    ablate_block_length, bench_scaling, cross_model_generalization, prepare, pretrain, run_pipeline_with,
    value_target, BenchConfig, PipelineConfig,
};
use ltsv_core::forecaster::{Checkpoint, ForecastInstance, ModelSpec, ParamVector};
use ltsv_core::oracles::{
    build_hessian, exact_shapley, loo_instances, mc_shapley, rank_agreement, retrain_all, ContextInfluence, Memoized, RankMethod,
    TrainedUtility, MAX_ENUMERATION_BLOCKS,
};
use ltsv_core::report::{block_table, eval_table, num, point_table, sample_table, write_file, write_json, Provenance, Table};
use ltsv_core::selection::{detection_auroc, inject_corruption, CorruptionLabels, EvalReport};
use ltsv_core::series::{segment_blocks, split_holdout, TimeSeries};
use ltsv_core::synth::{Generator, SyntheticSpec};
use ltsv_core::valuation::{block_to_instance, block_value, grad_inner_influence};
use ltsv_core::Error;

use crate::config::{hash_value, OracleMethod, ShapleyMode};
use crate::{CliResult, Context, Failure, SynthArgs, TOOL};

fn provenance(hash: &str) -> Provenance {
    Provenance::new(TOOL, env!("CARGO_PKG_VERSION"), hash)
}

fn write_timing(ctx: &Context, name: &str, prov: &Provenance, seconds: &[(&str, f64)]) -> CliResult<()> {
    let payload: serde_json::Map<String, Value> = seconds.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    write_json(&ctx.out.join(format!("{name}_timing.json")), prov, "timing", None, &payload)?;
    Ok(())
}

/// Reports as JSON without their wall times, which go to the timing file.
fn reports_json(reports: &[EvalReport], target: &std::ops::Range<usize>) -> Value {
    Value::Array(
        reports
            .iter()
            .map(|r| {
                let mut v = serde_json::to_value(r).expect("report serializes");
                if let Value::Object(map) = &mut v {
                    map.remove("wall_time");
                    map.insert("leak_free".into(), json!(r.is_leak_free(target)));
                }
                v
            })
            .collect(),
    )
}

struct Loaded {
    series: TimeSeries,
    dataset: String,
    checkpoint: Option<Checkpoint>,
    pipeline: PipelineConfig,
    labels: Option<CorruptionLabels>,
}

/// Reads the data, resolves the pipeline and applies any configured corruption.
fn load(ctx: &Context, use_checkpoint: bool) -> CliResult<Loaded> {
    let (series, dataset) = ctx.config.load_series()?;
    let checkpoint = if use_checkpoint { ctx.config.load_checkpoint()? } else { None };
    let pipeline = ctx.config.pipeline(series.channels(), checkpoint.as_ref())?;
    let (series, labels) = match &ctx.config.corruption {
        None => (series, None),
        Some(spec) => {
            let split = split_holdout(series.len(), pipeline.test_fraction, pipeline.valuation.block_length)?;
            let (corrupted, labels) = inject_corruption(&series, split.target, spec)?;
            (corrupted, Some(labels))
        }
    };
    Ok(Loaded { series, dataset, checkpoint, pipeline, labels })
}

fn labels_table(labels: &CorruptionLabels) -> Table {
    let mut t = Table::new(["start", "length", "corrupted"]);
    for (r, c) in labels.regions.iter().zip(&labels.corrupted) {
        t.push(vec![r.start.to_string(), r.length.to_string(), (*c as u8).to_string()]);
    }
    t
}

pub fn synth(ctx: &Context, args: &SynthArgs, seed_flag: Option<u64>) -> CliResult<()> {
    let base = ctx.config.data.as_ref().and_then(|d| d.synthetic.clone());
    let generator = match (&args.generator, &base) {
        (Some(name), _) => serde_json::from_value::<Generator>(Value::String(name.clone()))
            .map_err(|_| Failure::config(format!("unknown generator {name:?}")))?,
        (None, Some(b)) => b.generator,
        (None, None) => return Err(Failure::config("synth needs --generator or [data.synthetic]")),
    };
    let t = args
        .length
        .or(base.as_ref().map(|b| b.t))
        .ok_or_else(|| Failure::config("synth needs --length or [data.synthetic]"))?;
    let mut spec = base.unwrap_or_else(|| SyntheticSpec::new(generator, t, 1, 0.1, 0));
    spec.generator = generator;
    spec.t = t;
    if let Some(m) = args.channels {
        spec.m = m;
    }
    if let Some(s) = args.noise_std {
        spec.noise_std = s;
    }
    if let Some(seed) = seed_flag {
        spec.seed = seed;
    }
    let series = spec.generate()?;
    let prov = provenance(&hash_value(&serde_json::to_value(&spec).expect("spec serializes")));
    let mut bytes = format!("# tool={} version={} config_hash={}\n", prov.tool, prov.version, prov.config_hash).into_bytes();
    series.write_csv(&mut bytes)?;
    let path = args.output.clone().unwrap_or_else(|| ctx.out.join("synthetic.csv"));
    write_file(&path, &bytes)?;
    info!("wrote {} rows x {} channels to {}", series.len(), series.channels(), path.display());
    Ok(())
}

pub fn value(ctx: &Context) -> CliResult<()> {
    let started = Instant::now();
    let loaded = load(ctx, true)?;
    let cfg = &loaded.pipeline;
    let prov = provenance(&ctx.config.hash());
    let prepared = prepare(&loaded.series, cfg.test_fraction, cfg.valuation.block_length, cfg.normalize)?;
    let params = loaded.checkpoint.as_ref().map(|c| &c.params);
    let valued = value_target(&prepared, cfg, params, ctx.workers)?;
    let scores = &valued.scores;

    block_table(&scores.blocks).write_csv(&ctx.out.join("block_scores.csv"), &prov)?;
    point_table(&scores.points).write_csv(&ctx.out.join("point_scores.csv"), &prov)?;
    sample_table(&scores.samples).write_csv(&ctx.out.join("sample_scores.csv"), &prov)?;
    let ckpt = Checkpoint::new(cfg.value_model.clone(), valued.params.clone())?;
    write_file(&ctx.out.join("value_model.json"), ckpt.to_json().as_bytes())?;

    let detection = match &loaded.labels {
        None => Value::Null,
        Some(labels) => {
            labels_table(labels).write_csv(&ctx.out.join("corruption_labels.csv"), &prov)?;
            match detection_auroc(&scores.blocks, labels) {
                Ok(auroc) => json!({ "auroc": auroc, "n_corrupted": labels.n_corrupted(), "n_regions": labels.len() }),
                Err(e @ (Error::LengthMismatch { .. } | Error::ShapeMismatch(_))) => {
                    warn!("no detection AUROC: {e}");
                    json!({ "auroc": null, "reason": e.to_string() })
                }
                Err(e) => return Err(e.into()),
            }
        }
    };
    let payload = json!({
        "dataset": loaded.dataset,
        "split": prepared.split,
        "normalization": prepared.stats,
        "value_model": cfg.value_model,
        "n_blocks": scores.blocks.len(),
        "n_samples": scores.samples.len(),
        "folds": valued.valuation.folds,
        "context_sizes": valued.valuation.contexts.iter().map(Vec::len).collect::<Vec<_>>(),
        "detection": detection,
        "blocks": scores.blocks,
        "samples": scores.samples,
    });
    write_json(&ctx.out.join("scores.json"), &prov, "valuation", Some(&ctx.config.echo()), &payload)?;
    write_timing(ctx, "value", &prov, &[("total_seconds", started.elapsed().as_secs_f64())])?;
    info!("valued {} blocks in {:.2}s", scores.blocks.len(), started.elapsed().as_secs_f64());
    Ok(())
}

pub fn select_eval(ctx: &Context) -> CliResult<()> {
    let started = Instant::now();
    let loaded = load(ctx, true)?;
    let prov = provenance(&ctx.config.hash());
    let params = loaded.checkpoint.as_ref().map(|c| &c.params);
    let outcome = run_pipeline_with(&loaded.series, &loaded.pipeline, params, &loaded.dataset, ctx.workers)?;
    eval_table(&outcome.reports, &[]).write_csv(&ctx.out.join("select_eval.csv"), &prov)?;
    let payload = json!({
        "dataset": loaded.dataset,
        "reports": reports_json(&outcome.reports, &outcome.prepared.split.target),
    });
    write_json(&ctx.out.join("select_eval.json"), &prov, "select_eval", Some(&ctx.config.echo()), &payload)?;
    let mut timing: Vec<(&str, f64)> = outcome.reports.iter().map(|r| (r.strategy.as_str(), r.wall_time)).collect();
    timing.push(("total_seconds", started.elapsed().as_secs_f64()));
    write_timing(ctx, "select_eval", &prov, &timing)
}

pub fn ablate(ctx: &Context) -> CliResult<()> {
    let started = Instant::now();
    let loaded = load(ctx, false)?;
    let mut cfg = loaded.pipeline.clone();
    let section = &ctx.config.ablate;
    if let Some(r) = section.ratio {
        cfg.ratio = r;
    }
    if let Some(s) = &section.strategies {
        cfg.strategies = s.clone();
    }
    let prov = provenance(&ctx.config.hash());
    let table = ablate_block_length(&loaded.series, &section.block_lengths, &cfg, &loaded.dataset, ctx.workers)?;

    let mut wide = Table::new(std::iter::once("strategy".to_string()).chain(table.block_lengths.iter().map(|l| format!("L={l}"))));
    for &s in &table.strategies {
        let mut row = vec![s.to_string()];
        row.extend(table.block_lengths.iter().map(|&l| table.mse(s, l).map_or_else(|| "NA".into(), num)));
        wide.push(row);
    }
    wide.write_csv(&ctx.out.join("ablation.csv"), &prov)?;
    let reports: Vec<EvalReport> = table.cells.iter().map(|c| c.report.clone()).collect();
    let lengths: Vec<String> = table.cells.iter().map(|c| c.block_length.to_string()).collect();
    eval_table(&reports, &[("block_length", lengths)]).write_csv(&ctx.out.join("ablation_cells.csv"), &prov)?;
    write_timing(ctx, "ablate", &prov, &[("total_seconds", started.elapsed().as_secs_f64())])
}

pub fn generalize(ctx: &Context) -> CliResult<()> {
    let started = Instant::now();
    let loaded = load(ctx, false)?;
    let mut cfg = loaded.pipeline.clone();
    if cfg.downstream_model.is_none() {
        let v = &cfg.value_model;
        cfg.downstream_model = Some(ModelSpec::mlp(v.lookback, v.horizon, v.channels, 32, ctx.config.seed));
    }
    cfg.validate()?;
    if cfg.downstream() == &cfg.value_model {
        warn!("downstream model equals the value model; this is the plain pipeline");
    }
    let prov = provenance(&ctx.config.hash());
    let cells = cross_model_generalization(&loaded.series, &cfg, &ctx.config.generalize.ratios, &loaded.dataset, ctx.workers)?;
    let reports: Vec<EvalReport> = cells.iter().map(|c| c.report.clone()).collect();
    eval_table(&reports, &[]).write_csv(&ctx.out.join("generalize.csv"), &prov)?;
    write_timing(ctx, "generalize", &prov, &[("total_seconds", started.elapsed().as_secs_f64())])
}

/// Timings are the product here, so these files differ between runs.
pub fn bench(ctx: &Context) -> CliResult<()> {
    let mut config = ctx.config.bench.clone().unwrap_or_else(|| BenchConfig::new(vec![10, 100, 1000]));
    config.seed = ctx.config.seed;
    let prov = provenance(&ctx.config.hash());
    let table = bench_scaling(&config)?;
    let mut rows = Table::new(["method", "hidden", "params", "median_seconds"]);
    for r in &table.rows {
        rows.push(vec![r.method.as_str().into(), r.hidden.to_string(), r.params.to_string(), num(r.median_seconds)]);
    }
    rows.write_csv(&ctx.out.join("bench.csv"), &prov)?;
    let mut slopes = Table::new(["method", "loglog_slope"]);
    for (m, s) in &table.slopes {
        slopes.push(vec![m.as_str().into(), num(*s)]);
    }
    slopes.write_csv(&ctx.out.join("bench_slopes.csv"), &prov)?;
    write_json(&ctx.out.join("bench.json"), &prov, "bench", Some(&ctx.config.echo()), &table)?;
    Ok(())
}

struct OracleInstance {
    spec: ModelSpec,
    params: ParamVector,
    train: Vec<ForecastInstance>,
    context: Vec<ForecastInstance>,
    starts: Vec<usize>,
}

fn oracle_instance(ctx: &Context, loaded: &Loaded) -> CliResult<OracleInstance> {
    let oc = &ctx.config.oracle;
    let cfg = &loaded.pipeline;
    let length = cfg.valuation.block_length;
    let prepared = prepare(&loaded.series, cfg.test_fraction, length, cfg.normalize)?;
    let blocks = segment_blocks(prepared.split.target.clone(), length, length)?;
    let needed = oc.n_blocks + oc.context_blocks;
    if blocks.len() < needed {
        return Err(Error::TargetTooShort { target: prepared.split.target_len(), required: needed * length }.into());
    }
    let spec = cfg.value_model.clone();
    let instances = blocks[..needed]
        .iter()
        .map(|b| block_to_instance(&prepared.series, b, spec.horizon))
        .collect::<ltsv_core::Result<Vec<_>>>()?;
    let params = match &loaded.checkpoint {
        Some(c) => c.params.clone(),
        None => pretrain(&spec, &prepared, &cfg.pretrain)?,
    };
    Ok(OracleInstance {
        params,
        train: instances[..oc.n_blocks].to_vec(),
        context: instances[oc.n_blocks..].to_vec(),
        starts: blocks[..oc.n_blocks].iter().map(|b| b.start).collect(),
        spec,
    })
}

/// Scores from one method plus optional per-block standard errors.
struct MethodScores {
    values: Vec<f64>,
    std_errors: Option<Vec<f64>>,
    extra: Value,
}

fn run_method(ctx: &Context, cfg: &PipelineConfig, inst: &OracleInstance, method: OracleMethod) -> ltsv_core::Result<MethodScores> {
    let oc = &ctx.config.oracle;
    let (spec, params) = (&inst.spec, &inst.params);
    let plain = |values| MethodScores { values, std_errors: None, extra: Value::Null };
    match method {
        OracleMethod::Ltsv => Ok(plain(
            inst.train
                .iter()
                .map(|b| block_value(spec, params, b, &inst.context, &cfg.valuation))
                .collect::<ltsv_core::Result<_>>()?,
        )),
        OracleMethod::GradInner => Ok(plain(
            inst.train
                .iter()
                .map(|b| grad_inner_influence(spec, params, b, &inst.context, cfg.valuation.lr))
                .collect::<ltsv_core::Result<_>>()?,
        )),
        OracleMethod::ExactInfluence => {
            let mode = ctx.config.hessian_mode(spec);
            let hessian = build_hessian(spec, params, &inst.train, mode, oc.damping, ctx.workers)?;
            let ci = ContextInfluence::new(spec, params, &hessian, &inst.context)?;
            let values = inst.train.iter().map(|b| ci.influence(spec, params, b)).collect::<ltsv_core::Result<_>>()?;
            Ok(MethodScores { values, std_errors: None, extra: json!({ "mode": mode, "damping": hessian.damping() }) })
        }
        OracleMethod::Loo => {
            let values = loo_instances(spec, &inst.train, &inst.context, oc.ridge)?;
            Ok(MethodScores { values, std_errors: None, extra: json!({ "ridge": oc.ridge }) })
        }
        OracleMethod::Retrain => {
            let mut train_cfg = oc.retrain.clone();
            train_cfg.seed = ctx.config.seed;
            Ok(plain(retrain_all(spec, params, &inst.train, &train_cfg, &inst.context, ctx.workers)?))
        }
        OracleMethod::Shapley => {
            let sh = &oc.shapley;
            let mut train_cfg = sh.train.clone();
            train_cfg.seed = ctx.config.seed;
            let utility = Memoized::new(TrainedUtility {
                spec,
                base: params,
                blocks: &inst.train,
                context: &inst.context,
                config: train_cfg,
            });
            let n = inst.train.len();
            let est = match sh.mode {
                ShapleyMode::Enumeration => exact_shapley(n, &utility)?,
                ShapleyMode::MonteCarlo => {
                    mc_shapley(n, &utility, sh.permutations, ctx.config.seed, sh.truncation_tol, ctx.workers)?
                }
            };
            Ok(MethodScores {
                values: est.values,
                std_errors: Some(est.std_errors),
                extra: json!({ "mode": sh.mode, "permutations": est.permutations, "utility_evaluations": utility.evaluations() }),
            })
        }
    }
}

pub fn oracle_compare(ctx: &Context) -> CliResult<()> {
    let started = Instant::now();
    let oc = &ctx.config.oracle;
    if oc.methods.is_empty() {
        return Err(Failure::config("[oracle] lists no methods"));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = oc.methods.iter().find(|m| !seen.insert(**m)) {
        return Err(Failure::config(format!("method {} is listed twice", dup.as_str())));
    }
    if oc.n_blocks == 0 {
        return Err(Failure::config("[oracle] n_blocks must be positive"));
    }
    if oc.methods.contains(&OracleMethod::Shapley)
        && oc.shapley.mode == ShapleyMode::Enumeration
        && oc.n_blocks > MAX_ENUMERATION_BLOCKS
    {
        return Err(Error::GuardViolation(format!(
            "Shapley enumeration over {} blocks; at most {MAX_ENUMERATION_BLOCKS} allowed, use monte_carlo",
            oc.n_blocks
        ))
        .into());
    }
    let loaded = load(ctx, true)?;
    let prov = provenance(&ctx.config.hash());
    let inst = oracle_instance(ctx, &loaded)?;

    let mut results = Vec::new();
    let mut timing = Vec::new();
    for &method in &oc.methods {
        let t0 = Instant::now();
        let scores = run_method(ctx, &loaded.pipeline, &inst, method)
            .map_err(|e| Failure::from(e).within(&format!("method {}", method.as_str())))?;
        timing.push((method.as_str(), t0.elapsed().as_secs_f64()));
        results.push((method, scores));
    }

    let mut header = vec!["index".to_string(), "start".to_string()];
    for (m, s) in &results {
        header.push(m.as_str().into());
        if s.std_errors.is_some() {
            header.push(format!("{}_se", m.as_str()));
        }
    }
    let mut table = Table { header, rows: Vec::new() };
    for (i, start) in inst.starts.iter().enumerate() {
        let mut row = vec![i.to_string(), start.to_string()];
        for (_, s) in &results {
            row.push(num(s.values[i]));
            if let Some(se) = &s.std_errors {
                row.push(num(se[i]));
            }
        }
        table.push(row);
    }
    table.write_csv(&ctx.out.join("oracle_scores.csv"), &prov)?;

    let k = results.len();
    let mut matrix = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let r = rank_agreement(&results[i].1.values, &results[j].1.values, RankMethod::Spearman)
                .map_err(|e| Failure::from(e).within("rank agreement"))?;
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    let mut agreement = Table::new(std::iter::once("method").chain(results.iter().map(|(m, _)| m.as_str())));
    for (i, (m, _)) in results.iter().enumerate() {
        agreement.push(std::iter::once(m.as_str().to_string()).chain(matrix[i].iter().map(|&v| num(v))).collect());
    }
    agreement.write_csv(&ctx.out.join("rank_agreement.csv"), &prov)?;

    let methods: serde_json::Map<String, Value> = results
        .iter()
        .map(|(m, s)| {
            (m.as_str().to_string(), json!({ "values": s.values, "std_errors": s.std_errors, "details": s.extra }))
        })
        .collect();
    let payload = json!({
        "dataset": loaded.dataset,
        "value_model": inst.spec,
        "n_params": inst.spec.n_params(),
        "block_starts": inst.starts,
        "context_blocks": inst.context.len(),
        "methods": methods,
        "rank_agreement": { "method": "spearman", "order": results.iter().map(|(m, _)| m.as_str()).collect::<Vec<_>>(), "matrix": matrix },
    });
    write_json(&ctx.out.join("oracle.json"), &prov, "oracle_compare", Some(&ctx.config.echo()), &payload)?;
    timing.push(("total_seconds", started.elapsed().as_secs_f64()));
    write_timing(ctx, "oracle_compare", &prov, &timing)
}
