use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use deid_core::backends::sim::LatencyModel;
use deid_core::backends::Registry;
use deid_core::dataset::{generate, load_manifest, write_dataset, DatasetManifest, GeneratorConfig};
use deid_core::metrics::{aggregate_runs, ocr_table, Comparison, ComparisonRow, MatchCriterion};
use deid_core::orchestrator::{bench_ocr, Pipeline, RunResult};
use deid_core::protocol::prompt_hash;
use deid_core::{DatasetStyle, MetricsReport, RunConfig, Setup};
use deid_serving::autoscale::{spawn_autoscaler, AutoscalePolicy};
use deid_serving::loadtest::{run_load_test, with_load_backend, LoadTestConfig};
use deid_serving::{spawn_worker, start_proxy, AppState, FileStore, HttpSource, JobSource, JobStore, MemoryStore};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::args::*;
use crate::error::CliError;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    write(path, text + "\n")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn file_sha256(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| hex::encode(Sha256::digest(b)))
}

fn registry(args: &RegistryArgs, image_latency_ms: Option<u64>) -> Result<Registry, CliError> {
    let mut reg = Registry::builtin();
    if let Some(path) = &args.backends {
        let extra = Registry::load(path).map_err(|e| CliError::Data(e.to_string()))?;
        for d in extra.backends {
            reg.insert(d);
        }
    }
    if let Some(ms) = image_latency_ms {
        reg = with_load_backend(reg, LatencyModel::fixed(ms as f64 / 1000.0));
    }
    Ok(reg)
}

fn manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    Ok(load_manifest(path)?)
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Everything needed to repeat an invocation.
fn write_invocation(
    out: &Path,
    cli: &Cli,
    argv: &[OsString],
    registry: Option<&Registry>,
    inputs: &[&Path],
) -> Result<(), CliError> {
    let inputs: Vec<_> =
        inputs.iter().map(|p| json!({"path": p.display().to_string(), "sha256": file_sha256(p)})).collect();
    let doc = json!({
        "tool": "deid-bench",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.name(),
        "argv": argv.iter().skip(1).map(|a| a.to_string_lossy()).collect::<Vec<_>>(),
        "flags": cli,
        "seed": cli.seed,
        "prompt_hash": prompt_hash(),
        "registry_hash": registry.map(Registry::hash),
        "inputs": inputs,
    });
    write_json(&out.join("invocation.json"), &doc)
}

pub fn dispatch(cli: &Cli, argv: &[OsString]) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(cli, argv, a),
        Command::Run(a) => cmd_run(cli, argv, a),
        Command::BenchOcr(a) => cmd_bench_ocr(cli, argv, a),
        Command::Evaluate(a) => cmd_evaluate(cli, argv, a),
        Command::Report(a) => cmd_report(cli, argv, a),
        Command::ServeProxy(a) => runtime()?.block_on(serve_proxy(a)),
        Command::ServeWorker(a) => runtime()?.block_on(serve_worker(a)),
        Command::LoadTest(a) => runtime()?.block_on(load_test(cli, argv, a)),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Runtime::new().map_err(|e| CliError::Backend(format!("cannot start async runtime: {e}")))
}

fn cmd_generate(cli: &Cli, argv: &[OsString], a: &GenerateArgs) -> Result<(), CliError> {
    let style = match a.style {
        StyleArg::Radphi => DatasetStyle::RadphiLike,
        StyleArg::Midi => DatasetStyle::MidiLike,
    };
    let mut config = GeneratorConfig::for_style(style, a.n, cli.seed);
    config.render_pixels = a.render;
    let mut m = generate(&config)?;
    let path = write_dataset(&mut m, &a.out)?;
    write_invocation(&a.out, cli, argv, None, &[])?;
    tracing::info!(path = %path.display(), images = m.records.len(), phi_imprints = m.counts.phi_imprints, "dataset written");
    println!("{}", path.display());
    Ok(())
}

fn cmd_run(cli: &Cli, argv: &[OsString], a: &RunArgs) -> Result<(), CliError> {
    let reg = registry(&a.registry, None)?;
    let m = manifest(&a.manifest)?;
    let setup = match a.setup {
        SetupArg::A => Setup::A,
        SetupArg::B => Setup::B,
    };
    let mut config =
        RunConfig::new(setup, &a.localizer, &a.extractor, &a.analyzer).with_seed(cli.seed).with_repeats(a.repeats);
    if let Some(n) = a.chunk_size {
        config = config.with_chunk_size(n);
    }
    if let Some(n) = a.retry_limit {
        config = config.with_retry_limit(n);
    }
    config.verifier_id = a.verifier.clone();
    let pipeline = Pipeline::from_registry(&reg, config)?.with_base_dir(base_dir(&a.manifest));
    create_dir(&a.out)?;
    write_invocation(&a.out, cli, argv, Some(&reg), &[&a.manifest])?;
    for k in 0..a.repeats {
        let result = match a.hybrid_threshold {
            Some(t) => pipeline.run_hybrid(&m, t, k)?,
            None => pipeline.run(&m, k)?,
        };
        write_json(&a.out.join(format!("run-{k}.json")), &result)?;
        result.write_events(&a.out.join(format!("events-{k}.log"))).map_err(|e| CliError::io(&a.out, e))?;
        tracing::info!(run = k, wall_time = result.wall_time, "run finished");
    }
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_bench_ocr(cli: &Cli, argv: &[OsString], a: &BenchOcrArgs) -> Result<(), CliError> {
    let reg = registry(&a.registry, None)?;
    let m = manifest(&a.manifest)?;
    let scores = bench_ocr(&m, &reg, &a.extractors, cli.seed, Some(&base_dir(&a.manifest)))?;
    create_dir(&a.out)?;
    write_invocation(&a.out, cli, argv, Some(&reg), &[&a.manifest])?;
    let table = ocr_table(&scores);
    write_json(&a.out.join("ocr.json"), &scores)?;
    write(&a.out.join("ocr.md"), &table)?;
    for s in scores.iter().filter(|s| s.failures > 0) {
        tracing::warn!(model = %s.model, failures = s.failures, "extraction failures scored as empty text");
    }
    print!("{table}");
    Ok(())
}

fn load_runs(dir: &Path) -> Result<Vec<RunResult>, CliError> {
    let mut runs = Vec::new();
    for k in 0.. {
        let path = dir.join(format!("run-{k}.json"));
        if !path.exists() {
            break;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        runs.push(serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?);
    }
    if runs.is_empty() {
        return Err(CliError::Data(format!("{}: no run-0.json found", dir.display())));
    }
    Ok(runs)
}

fn row(config: &RunConfig, report: &MetricsReport) -> ComparisonRow {
    ComparisonRow {
        lmm: config.analyzer_id.clone(),
        setup: config.setup,
        precision: report.precision,
        recall: report.recall,
        latency_per_image: report.latency_per_image,
        runs: report.runs,
    }
}

fn cmd_evaluate(cli: &Cli, argv: &[OsString], a: &EvaluateArgs) -> Result<(), CliError> {
    let criterion: MatchCriterion =
        a.criterion.parse().map_err(|e: deid_core::metrics::MetricsError| CliError::Usage(e.to_string()))?;
    let m = manifest(&a.manifest)?;
    let runs = load_runs(&a.run_dir)?;
    let report = aggregate_runs(&m, &runs, criterion)?;
    let out = a.out.clone().unwrap_or_else(|| a.run_dir.clone());
    create_dir(&out)?;
    write_json(&out.join("report.json"), &report)?;
    let mut md = Comparison::new(vec![row(&runs[0].run_config, &report)]).to_markdown();
    md.push_str(&format!(
        "\nWER {:.3}, CER {:.3} over {} run(s); TP {} FP {} FN {}; criterion {criterion}.\n",
        report.wer, report.cer, report.runs, report.tp, report.fp, report.fn_
    ));
    write(&out.join("report.md"), &md)?;
    if a.out.is_some() {
        write_invocation(&out, cli, argv, None, &[&a.manifest])?;
    }
    print!("{md}");
    Ok(())
}

fn cmd_report(cli: &Cli, argv: &[OsString], a: &ReportArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for dir in &a.run_dirs {
        let path = dir.join("report.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("missing metrics file {}: {e}", path.display())))?;
        let report: MetricsReport =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let runs = load_runs(dir)?;
        rows.push(row(&runs[0].run_config, &report));
    }
    let comparison = Comparison::new(rows);
    create_dir(&a.out)?;
    write_json(&a.out.join("comparison.json"), &comparison)?;
    let md = comparison.to_markdown();
    write(&a.out.join("comparison.md"), &md)?;
    write_invocation(&a.out, cli, argv, None, &[])?;
    print!("{md}");
    Ok(())
}

async fn shutdown_signal() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        tracing::error!(error = %e, "cannot listen for ctrl-c");
        std::future::pending::<()>().await;
    }
}

async fn serve_proxy(a: &ServeProxyArgs) -> Result<(), CliError> {
    let reg = registry(&a.registry, a.image_latency_ms)?;
    let store: Arc<dyn JobStore> = match &a.store {
        Some(path) => Arc::new(FileStore::open(path).map_err(|e| CliError::Data(e.to_string()))?),
        None => {
            tracing::warn!("no --store given, jobs are kept in memory only");
            Arc::new(MemoryStore::new())
        }
    };
    let addr: SocketAddr =
        format!("{}:{}", a.host, a.port).parse().map_err(|e| CliError::Usage(format!("bad listen address: {e}")))?;
    let proxy = start_proxy(AppState { store, registry: Arc::new(reg) }, addr)
        .await
        .map_err(|e| CliError::Backend(format!("cannot listen on {addr}: {e}")))?;
    println!("{}", proxy.url());
    shutdown_signal().await;
    proxy.shutdown().await.map_err(|e| CliError::Backend(e.to_string()))
}

async fn serve_worker(a: &ServeWorkerArgs) -> Result<(), CliError> {
    if a.concurrency == 0 {
        return Err(CliError::Usage("--concurrency must be at least 1".into()));
    }
    let reg = Arc::new(registry(&a.registry, a.image_latency_ms)?);
    let source: Arc<dyn JobSource> = Arc::new(HttpSource::new(&a.proxy));
    let mut config = deid_serving::WorkerConfig::new(a.concurrency);
    config.lease = Duration::from_secs(a.lease_s.max(1));
    config.base_dir = a.base_dir.clone();
    tracing::info!(worker = %config.worker_id, proxy = %a.proxy, concurrency = a.concurrency, "worker starting");
    let worker = spawn_worker(source.clone(), reg, config);
    let scaler = a
        .autoscale_max
        .map(|max| spawn_autoscaler(source, worker.limit.clone(), AutoscalePolicy::new(a.concurrency, max)));
    shutdown_signal().await;
    if let Some(s) = scaler {
        s.shutdown().await;
    }
    worker.shutdown().await;
    Ok(())
}

async fn load_test(cli: &Cli, argv: &[OsString], a: &LoadTestArgs) -> Result<(), CliError> {
    let config = LoadTestConfig {
        requests: a.requests,
        images_per_request: a.images,
        image_latency: LatencyModel::fixed(a.image_latency_ms as f64 / 1000.0),
        concurrency: a.concurrency,
        seed: cli.seed,
        poll_interval: Duration::from_millis(a.poll_ms.max(1)),
        autoscale: a.autoscale_max.map(|max| AutoscalePolicy::new(1, max)),
        proxy_url: a.proxy.clone(),
        ..LoadTestConfig::default()
    };
    let report = run_load_test(&config).await.map_err(|e| match e {
        deid_serving::loadtest::LoadTestError::Config(m) => CliError::Usage(m),
        other => CliError::Backend(other.to_string()),
    })?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("load-test.json"), &report)?;
        write(&out.join("load-test.md"), report.to_markdown())?;
        write_invocation(out, cli, argv, None, &[])?;
    }
    println!("{}", report.summary());
    if report.degraded {
        return Err(CliError::Backend(format!("{} of {} requests failed", report.failures.len(), report.requests)));
    }
    Ok(())
}
