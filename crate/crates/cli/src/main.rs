use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dla::analysis::{
    cost_report, infer_shapes, structural_violations, structure_stats, AnalysisError,
};
use dla::architectures::{
    arch_spec, build_classifier, build_classifier_with, build_dense_decoder,
    build_dense_decoder_with, list_architectures, BuildOptions, DenseHeadSpec,
};
use dla::document::{parse_document, serialize_graph};
use dla::dot::{export_dot, Collapse};
use dla::ir::{Graph, TensorShape};
use dla::numerics::{
    grad_check, init_params, sample_input, GradCheckConfig, ParamStore, Stencil,
    DEFAULT_GRADCHECK_BATCH,
};
use dla::BuildError;

const FMA_CONVENTION: &str =
    "fused multiply-adds of convolution, transposed convolution and linear layers at batch 1";

#[derive(Parser)]
#[command(
    name = "dla",
    version,
    about = "Build, analyze and verify deep layer aggregation networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Head {
    Classify,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum StencilArg {
    Three,
    Five,
}

#[derive(Clone, Copy, ValueEnum)]
enum CollapseArg {
    None,
    Blocks,
}

#[derive(Subcommand)]
enum Command {
    /// List the catalog architectures.
    List,
    /// Build a catalog architecture and write its graph document.
    Build {
        arch: String,
        /// Input as HxWxC.
        #[arg(long, default_value = "224x224x3")]
        input: String,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
        #[arg(long, value_enum, default_value = "classify")]
        head: Head,
        /// Clamp every channel width to this value.
        #[arg(long)]
        width_cap: Option<usize>,
        /// Output path; standard output when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print parameter, FMA and structure statistics as JSON.
    Report {
        graph: PathBuf,
        /// Input as HxWxC; defaults to the shape recorded in the document.
        #[arg(long)]
        input: Option<String>,
    },
    /// Print the graph in Graphviz DOT.
    ExportDot {
        graph: PathBuf,
        #[arg(long, value_enum, default_value = "none")]
        collapse: CollapseArg,
    },
    /// Validate a graph document and its structural claims.
    Check { graph: PathBuf },
    /// Compare analytic and finite-difference gradients on a toy variant.
    Gradcheck {
        arch: String,
        #[arg(long, default_value_t = 16)]
        width_cap: usize,
        /// Square input extent.
        #[arg(long, default_value_t = 16)]
        input: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = DEFAULT_GRADCHECK_BATCH)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, value_enum, default_value = "classify")]
        head: Head,
        #[arg(long, value_enum, default_value = "five")]
        stencil: StencilArg,
        /// Let perturbations cross ReLU and max-pool kinks.
        #[arg(long)]
        no_freeze_branches: bool,
        /// Sign-flip one analytic gradient before comparing.
        #[arg(long)]
        corrupt_backward: bool,
    },
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn new(code: u8, err: impl Into<anyhow::Error>) -> Self {
        Failure {
            code,
            err: err.into(),
        }
    }
}

const EXIT_CHECK: u8 = 1;
const EXIT_ARG: u8 = 2;
const EXIT_SHAPE: u8 = 3;
const EXIT_PARSE: u8 = 4;

type CmdResult = Result<(), Failure>;

fn parse_hwc(s: &str) -> Result<TensorShape, Failure> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let dims: Option<Vec<usize>> = parts
        .iter()
        .map(|p| p.trim().parse().ok().filter(|&d| d > 0))
        .collect();
    match dims.as_deref() {
        Some(&[h, w, c]) => Ok(TensorShape::image(c, h, w)),
        _ => Err(Failure::new(
            EXIT_ARG,
            anyhow!("input {s:?} is not HxWxC with positive integers"),
        )),
    }
}

fn build_failure(e: BuildError) -> Failure {
    let code = match e {
        BuildError::UnknownArchitecture(_) => EXIT_ARG,
        BuildError::IndivisibleInput { .. }
        | BuildError::InputChannels(_)
        | BuildError::InvalidInputShape(_) => EXIT_SHAPE,
        _ => EXIT_CHECK,
    };
    Failure::new(code, e)
}

fn read_graph(path: &Path) -> Result<(Graph, Option<TensorShape>), Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| Failure::new(EXIT_PARSE, e))?;
    let (graph, meta) = parse_document(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(|e| Failure::new(EXIT_PARSE, e))?;
    Ok((graph, meta.input_shape))
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating file in {}", dir.display()))?;
    tmp.write_all(contents.as_bytes())?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes to standard output; a reader that went away early is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: writing output: {e}");
        }
    }
}

fn print_json(v: &serde_json::Value) {
    emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(v).expect("values serialize")
    ));
}

#[allow(clippy::too_many_arguments)]
fn cmd_build(
    arch: &str,
    input: &str,
    classes: usize,
    head: Head,
    width_cap: Option<usize>,
    out: Option<&Path>,
) -> CmdResult {
    let mut spec = arch_spec(arch).map_err(build_failure)?;
    let shape = parse_hwc(input)?;
    let graph = match (head, width_cap) {
        (Head::Classify, None) => build_classifier(&spec, classes, shape),
        (Head::Dense, None) => build_dense_decoder(&spec, &DenseHeadSpec::new(classes), shape),
        (head, Some(cap)) => {
            spec = spec.width_capped(cap);
            let opts = BuildOptions {
                require_divisible: false,
            };
            match head {
                Head::Classify => build_classifier_with(&spec, classes, shape, &opts),
                Head::Dense => {
                    let mut h = DenseHeadSpec::new(classes);
                    h.project_channels = h.project_channels.min(cap);
                    build_dense_decoder_with(&spec, &h, shape, &opts)
                }
            }
        }
    }
    .map_err(build_failure)?;
    let text = serialize_graph(&graph);
    match out {
        Some(path) => write_atomic(path, &text).map_err(|e| Failure::new(EXIT_ARG, e))?,
        None => emit(&text),
    }
    Ok(())
}

fn cmd_report(path: &Path, input: Option<&str>) -> CmdResult {
    let (graph, recorded) = read_graph(path)?;
    let shape = match input {
        Some(s) => parse_hwc(s)?,
        None => recorded.ok_or_else(|| {
            Failure::new(
                EXIT_ARG,
                anyhow!("document records no input shape; pass --input"),
            )
        })?,
    };
    let costs = cost_report(&graph, shape).map_err(|e| Failure::new(EXIT_SHAPE, e))?;
    let stats = match structure_stats(&graph) {
        Ok(s) => Some(s),
        Err(AnalysisError::MissingTags) => None,
        Err(e) => return Err(Failure::new(EXIT_CHECK, e)),
    };
    print_json(&json!({
        "fma_convention": FMA_CONVENTION,
        "input_shape": shape,
        "params": costs.params,
        "fmas": costs.fmas,
        "per_stage": costs.per_stage,
        "blocks": stats.as_ref().map_or(0, |s| s.blocks),
        "agg_nodes": stats.as_ref().map_or(0, |s| s.agg_nodes),
        "max_root_fanin": stats.as_ref().map_or(0, |s| s.max_root_fanin),
        "max_block_to_output_hops": stats.as_ref().map_or(0, |s| s.max_block_to_output_hops),
        "per_stage_hda_depth": stats.as_ref().map(|s| &s.per_stage_hda_depth),
    }));
    Ok(())
}

fn cmd_export_dot(path: &Path, collapse: CollapseArg) -> CmdResult {
    let (graph, _) = read_graph(path)?;
    if graph.is_empty() {
        return Err(Failure::new(
            EXIT_PARSE,
            anyhow!("{} contains no nodes", path.display()),
        ));
    }
    let collapse = match collapse {
        CollapseArg::None => Collapse::None,
        CollapseArg::Blocks => Collapse::Blocks,
    };
    emit(&export_dot(&graph, collapse));
    Ok(())
}

fn check_violations(graph: &Graph, recorded: Option<TensorShape>) -> Vec<String> {
    let report = graph.validate();
    if !report.is_valid() {
        return report.violations.iter().map(|v| v.to_string()).collect();
    }
    let Some(shape) = recorded.or_else(|| graph.input_shape()) else {
        return vec!["MissingInput: graph declares no input shape".to_string()];
    };
    if let Err(e) = infer_shapes(graph, shape) {
        return vec![match e {
            AnalysisError::ShapeConflict { node, message } => {
                format!("ShapeConflict: {node}: {message}")
            }
            other => format!("ShapeConflict: {other}"),
        }];
    }
    match structure_stats(graph) {
        Ok(stats) => structural_violations(&stats),
        Err(AnalysisError::MissingTags) => Vec::new(),
        Err(e) => vec![e.to_string()],
    }
}

fn cmd_check(path: &Path) -> CmdResult {
    let (graph, recorded) = read_graph(path)?;
    let violations = check_violations(&graph, recorded);
    for v in &violations {
        emit(&format!("{v}\n"));
    }
    if violations.is_empty() {
        eprintln!("{}: ok ({} nodes)", path.display(), graph.len());
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_CHECK,
            anyhow!("{} violation(s)", violations.len()),
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    arch: &str,
    width_cap: usize,
    input: usize,
    config: GradCheckConfig,
    batch: usize,
    classes: usize,
    head: Head,
) -> CmdResult {
    let spec = arch_spec(arch)
        .map_err(build_failure)?
        .width_capped(width_cap);
    if input == 0 || batch == 0 || width_cap == 0 {
        return Err(Failure::new(
            EXIT_ARG,
            anyhow!("input extent, batch and width cap must be positive"),
        ));
    }
    let shape = TensorShape::image(3, input, input);
    let opts = BuildOptions {
        require_divisible: false,
    };
    let graph = match head {
        Head::Classify => build_classifier_with(&spec, classes, shape, &opts),
        Head::Dense => {
            let mut h = DenseHeadSpec::new(classes);
            h.project_channels = h.project_channels.min(width_cap);
            build_dense_decoder_with(&spec, &h, shape, &opts)
        }
    }
    .map_err(build_failure)?;
    let params: ParamStore<f64> = init_params(&graph, config.seed);
    let x = sample_input(shape.with_batch(batch), config.seed);
    let report =
        grad_check(&graph, &params, &x, &config).map_err(|e| Failure::new(EXIT_SHAPE, e))?;
    print_json(&serde_json::to_value(&report).expect("reports serialize"));
    if report.passed {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_CHECK,
            anyhow!(
                "max relative error {:.3e} not below tolerance {:.3e}",
                report.max_rel_error,
                report.tolerance
            ),
        ))
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::List => {
            let rows: Vec<_> = list_architectures()
                .into_iter()
                .map(|a| json!({ "name": a.name, "block": format!("{:?}", a.block_kind), "params": a.params }))
                .collect();
            print_json(&json!(rows));
            Ok(())
        }
        Command::Build {
            arch,
            input,
            classes,
            head,
            width_cap,
            out,
        } => cmd_build(&arch, &input, classes, head, width_cap, out.as_deref()),
        Command::Report { graph, input } => cmd_report(&graph, input.as_deref()),
        Command::ExportDot { graph, collapse } => cmd_export_dot(&graph, collapse),
        Command::Check { graph } => cmd_check(&graph),
        Command::Gradcheck {
            arch,
            width_cap,
            input,
            tol,
            seed,
            samples,
            epsilon,
            batch,
            classes,
            head,
            stencil,
            no_freeze_branches,
            corrupt_backward,
        } => {
            let stencil = match stencil {
                StencilArg::Three => Stencil::ThreePoint,
                StencilArg::Five => Stencil::FivePoint,
            };
            let config = GradCheckConfig {
                epsilon,
                tolerance: tol,
                samples,
                seed,
                stencil,
                freeze_branches: !no_freeze_branches,
                corrupt_backward,
                ..GradCheckConfig::default()
            };
            cmd_gradcheck(&arch, width_cap, input, config, batch, classes, head)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
