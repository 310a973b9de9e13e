use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context};
use asymmkit::arch::{builtin_spec, scale_spec, NetworkSpec};
use asymmkit::cost::{format_millions, network_cost, CostReport};
use asymmkit::data::DatasetSource;
use asymmkit::gradcheck::{check_named, threshold_of, GradcheckReport, NAMED_TARGETS};
use asymmkit::network::{build_network, Network};
use asymmkit::params::ParamStore;
use asymmkit::specfile::{dump_spec as render_spec, parse_spec};
use asymmkit::train::{train_toy, MetricRecord, TrainConfig};
use asymmkit::{weights, Element, Tensor};
use serde::Serialize;

use crate::{
    AnalyzeArgs, CompareArgs, DumpSpecArgs, ExportArgs, Format, GradcheckArgs, ImportArgs, NetArgs,
    Precision, TrainArgs, WeightNetArgs,
};

/// Failure categories mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Numeric(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(anyhow!(msg.into()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "{e:#}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<asymmkit::Error> for CliError {
    fn from(e: asymmkit::Error) -> Self {
        match e {
            asymmkit::Error::NonFinite(m) => CliError::Numeric(m),
            other => CliError::Usage(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<asymmkit::Error>() {
            Ok(inner) => inner.into(),
            Err(e) => CliError::Usage(e),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Usage(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn load_spec(net: &NetArgs) -> CliResult<NetworkSpec> {
    let mut spec = match (&net.source.arch, &net.source.spec) {
        (Some(name), _) => builtin_spec(name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            parse_spec(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, None) => return Err(CliError::usage("one of --arch or --spec is required")),
    };
    if let Some(alpha) = net.multiplier {
        spec = scale_spec(&spec, alpha)?;
    }
    if let Some(res) = net.input {
        spec = spec.with_resolution(res);
    }
    spec.validate()?;
    Ok(spec)
}

fn print_json<T: Serialize + ?Sized>(value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    println!("{text}");
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs) -> CliResult {
    let spec = load_spec(&args.net)?;
    let report = network_cost(&spec)?;
    match args.format {
        Format::Table => print!("{}", report.to_table()),
        Format::Struct => print_json(&report)?,
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct GridRow {
    arch: String,
    multiplier: f64,
    rate: Option<usize>,
    madds: u64,
    params: u64,
}

pub fn compare(args: &CompareArgs) -> CliResult {
    let multipliers = if args.multipliers.is_empty() {
        vec![1.0]
    } else {
        args.multipliers.clone()
    };
    let rates: Vec<Option<usize>> = if args.rate.is_empty() {
        vec![None]
    } else {
        args.rate.iter().copied().map(Some).collect()
    };
    let mut rows = Vec::new();
    for arch in &args.archs {
        let base = builtin_spec(arch)?;
        for &alpha in &multipliers {
            for &rate in &rates {
                let mut spec = scale_spec(&base, alpha)?;
                if let Some(r) = rate {
                    spec = spec.with_rate(r);
                }
                if let Some(res) = args.input {
                    spec = spec.with_resolution(res);
                }
                let CostReport {
                    total_madds,
                    total_params,
                    ..
                } = network_cost(&spec)?;
                rows.push(GridRow {
                    arch: arch.clone(),
                    multiplier: alpha,
                    rate,
                    madds: total_madds,
                    params: total_params,
                });
            }
        }
    }
    match args.format {
        Format::Struct => print_json(&rows)?,
        Format::Table => {
            let width = rows.iter().map(|r| r.arch.len()).max().unwrap_or(4).max(4);
            println!(
                "{:<width$}  {:>10}  {:>4}  {:>9}  {:>9}",
                "arch", "multiplier", "rate", "MAdds(M)", "Params(M)"
            );
            for r in &rows {
                let rate = r.rate.map_or_else(|| "-".to_string(), |v| v.to_string());
                println!(
                    "{:<width$}  {:>10}  {:>4}  {:>9}  {:>9}",
                    r.arch,
                    format!("{:.2}", r.multiplier),
                    rate,
                    format_millions(r.madds),
                    format_millions(r.params)
                );
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CheckOutcome {
    #[serde(flatten)]
    report: GradcheckReport,
    threshold: f64,
    passed: bool,
}

pub fn gradcheck(args: &GradcheckArgs) -> CliResult {
    let names: Vec<&str> = if args.target == "all" {
        NAMED_TARGETS.iter().map(|(n, _)| *n).collect()
    } else {
        vec![args.target.as_str()]
    };
    let mut outcomes = Vec::with_capacity(names.len());
    for name in names {
        let threshold = threshold_of(name).ok_or_else(|| {
            CliError::usage(format!(
                "unknown gradcheck target `{name}`; choose from {}, all",
                NAMED_TARGETS
                    .iter()
                    .map(|(n, _)| *n)
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })?;
        let report = check_named(name, args.seed)?;
        let passed = report.passes(threshold);
        outcomes.push(CheckOutcome {
            report,
            threshold,
            passed,
        });
    }
    match args.format {
        Format::Struct => print_json(&outcomes)?,
        Format::Table => {
            println!(
                "{:<14}  {:>11}  {:>9}  {:>6}  {:>6}  {:>5}  result",
                "target", "max_rel_err", "threshold", "params", "inputs", "kinks"
            );
            for o in &outcomes {
                let r = &o.report;
                println!(
                    "{:<14}  {:>11.3e}  {:>9.0e}  {:>6}  {:>6}  {:>5}  {}",
                    r.target,
                    r.max_rel_err,
                    o.threshold,
                    r.params_checked,
                    r.inputs_checked,
                    r.kinks_skipped,
                    if o.passed { "PASS" } else { "FAIL" }
                );
            }
        }
    }
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.report.target.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check exceeded threshold for {}",
            failed.join(", ")
        )))
    }
}

fn load_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        cfg.epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_with<T: Element>(
    args: &TrainArgs,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    source: &DatasetSource,
) -> CliResult {
    let data = source.load::<T>(args.classes, spec.resolution)?;
    let (net, mut store) = build_network::<T>(spec, cfg.seed)?;
    let mut out: Box<dyn Write> = match &args.metrics {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut sink = |r: &MetricRecord| -> asymmkit::Result<()> {
        let line =
            serde_json::to_string(r).map_err(|e| asymmkit::Error::Io(io::Error::other(e)))?;
        writeln!(out, "{line}")?;
        Ok(())
    };
    let summary = train_toy(&net, &mut store, &data, cfg, &mut sink)?;
    out.flush()?;
    drop(out);
    if let Some(path) = &args.weights {
        weights::save(path, &store)?;
    }
    let line = format!(
        "trained {} steps: final accuracy {:.4}, best {:.4} at step {}",
        summary.steps, summary.final_accuracy, summary.best_accuracy, summary.best_at_step
    );
    if args.metrics.is_some() {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> CliResult {
    let mut spec = load_spec(&args.net)?.with_classes(args.classes);
    if args.net.input.is_none() {
        spec = spec.with_resolution(32);
    }
    spec.resolve()?;
    let cfg = load_config(args)?;
    let source: DatasetSource = args.data.parse()?;
    match args.dtype {
        Precision::F32 => train_with::<f32>(args, &spec, &cfg, &source),
        Precision::F64 => train_with::<f64>(args, &spec, &cfg, &source),
    }
}

fn weight_spec(args: &WeightNetArgs) -> CliResult<NetworkSpec> {
    let spec = load_spec(&args.net)?.with_classes(args.classes);
    spec.resolve()?;
    Ok(spec)
}

fn print_probe<T: Element>(net: &Network, store: &ParamStore<T>, resolution: usize) -> CliResult {
    let images = asymmkit::data::synthetic::<T>(2, 1, resolution, 0)?;
    let (x, _): (Tensor<T>, _) = images.batch(&[0, 1])?;
    let logits = net.predict(&x, store)?;
    let classes = logits.shape().sample();
    for (i, row) in logits.data().chunks(classes).enumerate() {
        let values: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        println!("logits[{i}] {}", values.join(" "));
    }
    Ok(())
}

fn export_with<T: Element>(args: &ExportArgs, spec: &NetworkSpec) -> CliResult {
    let (net, store) = build_network::<T>(spec, args.seed)?;
    weights::save(&args.out, &store)?;
    println!("wrote {} tensors to {}", store.len(), args.out.display());
    if args.target.probe {
        print_probe(&net, &store, spec.resolution)?;
    }
    Ok(())
}

pub fn export(args: &ExportArgs) -> CliResult {
    let spec = weight_spec(&args.target)?;
    match args.target.dtype {
        Precision::F32 => export_with::<f32>(args, &spec),
        Precision::F64 => export_with::<f64>(args, &spec),
    }
}

fn import_with<T: Element>(args: &ImportArgs, spec: &NetworkSpec) -> CliResult {
    let (net, mut store) = build_network::<T>(spec, 0)?;
    weights::load(&args.input_file, &mut store)
        .with_context(|| format!("loading {}", args.input_file.display()))?;
    println!(
        "loaded {} tensors from {}",
        store.len(),
        args.input_file.display()
    );
    if let Some(out) = &args.out {
        weights::save(out, &store)?;
        println!("wrote {} tensors to {}", store.len(), out.display());
    }
    if args.target.probe {
        print_probe(&net, &store, spec.resolution)?;
    }
    Ok(())
}

pub fn import(args: &ImportArgs) -> CliResult {
    let spec = weight_spec(&args.target)?;
    match args.target.dtype {
        Precision::F32 => import_with::<f32>(args, &spec),
        Precision::F64 => import_with::<f64>(args, &spec),
    }
}

pub fn dump_spec(args: &DumpSpecArgs) -> CliResult {
    let mut spec = builtin_spec(&args.arch)?;
    if let Some(alpha) = args.multiplier {
        spec = scale_spec(&spec, alpha)?;
    }
    let text = render_spec(&spec);
    match &args.out {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
