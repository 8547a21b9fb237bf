use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stagemix::dynamics::{self, LossTrace, DEFAULT_SPIKE_WINDOW, DEFAULT_WINDOW};
use stagemix::exposure::compare_exposure;
use stagemix::metrics::{
    self, comparison_table, convergence_step, trajectory, EvalSnapshot, DEFAULT_CONVERGENCE_FRACTION,
};
use stagemix::sampler::{write_events, Checkpoint, ManifestWriter, Sampler};
use stagemix::simulator::{synth_capability, synth_loss, SimulationSpec};
use stagemix::{builtin_condition, validate_condition, Error, Preset, Registry, ScheduleCondition};

const DEFAULTS_HELP: &str = "Defaults: window w = 50, spike window u = 50, exposure warn threshold 0.10.\n\
Exit codes: 0 ok, 1 validation violations, 2 usage or precondition error, 3 I/O or parse error.";

#[derive(Parser)]
#[command(
    name = "stagemix",
    version,
    about = "Multi-stage data-mixture schedules and training-run analytics",
    after_help = DEFAULTS_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a schedule against the dataset registry
    Validate(ValidateArgs),
    /// Expected per-dataset exposure of one or more conditions
    Exposure(ExposureArgs),
    /// Generate a deterministic sample manifest
    Manifest(ManifestArgs),
    /// Loss fluctuation, spike frequency and stage-transition stability of a loss log
    Analyze(AnalyzeArgs),
    /// Capability aggregates, trajectories and condition comparisons from eval logs
    Metrics(MetricsArgs),
    /// Write synthetic loss/eval logs with a ground-truth sidecar
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Data,
}

#[derive(Args)]
struct OutputArgs {
    /// Output format: human-readable text or machine-readable data
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Write output here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Schedule file (TOML, one condition)
    #[arg(long, conflicts_with = "condition")]
    schedule: Option<PathBuf>,
    /// Built-in condition: A, B, C or D
    #[arg(long)]
    condition: Option<String>,
    /// Stage step counts for a built-in condition, e.g. 1000,5000,5000
    #[arg(long, value_parser = parse_steps)]
    steps: Option<[u64; 3]>,
    /// Dataset registry file (TOML); defaults to the built-in six-dataset registry
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Args)]
#[command(after_help = DEFAULTS_HELP)]
struct ValidateArgs {
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
#[command(after_help = DEFAULTS_HELP)]
struct ExposureArgs {
    /// Schedule files to compare (repeatable)
    #[arg(long)]
    schedule: Vec<PathBuf>,
    /// Built-in conditions to compare: A, B, C or D (repeatable)
    #[arg(long)]
    condition: Vec<String>,
    /// Stage step counts applied to every built-in condition
    #[arg(long, value_parser = parse_steps)]
    steps: Option<[u64; 3]>,
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Relative deviation above which a dataset or group is flagged
    #[arg(long, default_value = "0.10")]
    warn_threshold: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
#[command(after_help = DEFAULTS_HELP)]
struct ManifestArgs {
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Generator seed (required; there is no time-based default)
    #[arg(long, required_unless_present = "resume")]
    seed: Option<u64>,
    /// Manifest file to write (appended to when resuming)
    #[arg(long)]
    out: PathBuf,
    /// Stop after this many events and write a checkpoint
    #[arg(long, requires = "checkpoint")]
    stop_after: Option<u64>,
    /// Checkpoint file written by --stop-after
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint, appending to --out
    #[arg(long, conflicts_with_all = ["seed", "schedule", "condition"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
#[command(after_help = DEFAULTS_HELP)]
struct AnalyzeArgs {
    /// Loss log: JSON lines {step, stage, loss}, or step,loss CSV with --stages (repeatable, one row each)
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// Stage boundary sidecar (CSV stage,start_step), one per --input, for two-column loss CSVs
    #[arg(long)]
    stages: Vec<PathBuf>,
    /// Window size w for the local fluctuation σ
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Window size u for spike detection
    #[arg(long, default_value_t = DEFAULT_SPIKE_WINDOW)]
    spike_window: usize,
    /// Row labels in the stability table, one per --input [default: file stem]
    #[arg(long)]
    label: Vec<String>,
    /// Also write the machine-readable report here
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricsMode {
    /// Aggregates for every snapshot
    Aggregate,
    /// Capability series over steps, with convergence step
    Trajectory,
    /// Final-snapshot comparison table across conditions
    Compare,
}

#[derive(Args)]
#[command(after_help = DEFAULTS_HELP)]
struct MetricsArgs {
    #[arg(value_enum)]
    mode: MetricsMode,
    /// Eval logs: JSON lines {condition?, step, task, score} (repeatable)
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// Fraction of the final Overall score that counts as converged
    #[arg(long, default_value_t = DEFAULT_CONVERGENCE_FRACTION)]
    fraction: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
#[command(after_help = DEFAULTS_HELP)]
struct SimulateArgs {
    /// Simulation spec (TOML)
    #[arg(long)]
    spec: PathBuf,
    /// Seed for all simulator noise
    #[arg(long)]
    seed: u64,
    /// Output directory for loss.jsonl, eval.jsonl and truth.json
    #[arg(long)]
    out: PathBuf,
}

fn parse_steps(s: &str) -> Result<[u64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated step counts, got `{s}`"));
    }
    let mut out = [0u64; 3];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p.parse().map_err(|_| format!("`{p}` is not a non-negative integer"))?;
    }
    Ok(out)
}

/// Failure of a subcommand, carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidCondition { .. } | Error::InvalidData(_) | Error::RegistryMismatch(_) => 1,
            Error::UnknownCondition(_) | Error::Precondition(_) | Error::UnknownStage(_) | Error::Exhausted(_) => 2,
            Error::Parse { .. } | Error::Io(_) => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::from(Error::Io(e))
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn io_at(path: &Path, e: io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_at(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| io_at(path, e))
}

fn emit(output: &OutputArgs, body: &str) -> Result<(), Failure> {
    match &output.out {
        Some(path) => fs::write(path, body).map_err(|e| io_at(path, e)),
        None => {
            io::stdout().write_all(body.as_bytes())?;
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn load_registry(path: Option<&Path>) -> Result<Registry, Failure> {
    match path {
        Some(p) => Ok(Registry::from_toml(&read_text(p)?)?),
        None => Ok(Registry::builtin()),
    }
}

fn builtin(id: &str, steps: Option<[u64; 3]>) -> Result<ScheduleCondition, Failure> {
    let preset: Preset = id.parse()?;
    let steps = steps.ok_or_else(|| usage("--steps is required with --condition"))?;
    Ok(builtin_condition(preset, steps))
}

fn load_schedule(args: &ScheduleArgs) -> Result<ScheduleCondition, Failure> {
    match (&args.schedule, &args.condition) {
        (Some(path), _) => Ok(ScheduleCondition::from_toml(&read_text(path)?)?),
        (None, Some(id)) => builtin(id, args.steps),
        (None, None) => Err(usage("one of --schedule or --condition is required")),
    }
}

fn validate(args: ValidateArgs) -> Result<u8, Failure> {
    let cond = load_schedule(&args.schedule)?;
    let registry = load_registry(args.schedule.registry.as_deref())?;
    let verdict = validate_condition(&cond, &registry);
    let body = match args.output.format {
        Format::Text => format!("{verdict}\n"),
        Format::Data => to_json(&verdict),
    };
    emit(&args.output, &body)?;
    Ok(if verdict.is_ok() { 0 } else { 1 })
}

fn exposure(args: ExposureArgs) -> Result<u8, Failure> {
    let mut conds = Vec::new();
    for path in &args.schedule {
        conds.push(ScheduleCondition::from_toml(&read_text(path)?)?);
    }
    for id in &args.condition {
        conds.push(builtin(id, args.steps)?);
    }
    if conds.is_empty() {
        return Err(usage("give at least one --schedule or --condition"));
    }
    let registry = load_registry(args.registry.as_deref())?;
    let cmp = compare_exposure(&conds, &registry, args.warn_threshold)?;
    let body = match args.output.format {
        Format::Text => cmp.render_text(),
        Format::Data => to_json(&cmp),
    };
    emit(&args.output, &body)?;
    Ok(0)
}

fn manifest(args: ManifestArgs) -> Result<u8, Failure> {
    let (mut sampler, append) = match &args.resume {
        Some(path) => (Sampler::resume(&Checkpoint::from_json(&read_text(path)?)?)?, true),
        None => {
            let cond = load_schedule(&args.schedule)?;
            let registry = load_registry(args.schedule.registry.as_deref())?;
            let seed = args.seed.ok_or_else(|| usage("--seed is required"))?;
            (Sampler::new(&cond, &registry, seed)?, false)
        }
    };
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&args.out)
        .map_err(|e| io_at(&args.out, e))?;
    let mut writer = ManifestWriter::new(BufWriter::new(file), sampler.dataset_names());
    if !append {
        writer.write_header(&sampler.header())?;
    }
    let written = write_events(&mut sampler, &mut writer, args.stop_after)?;
    writer.into_inner().flush()?;
    if let Some(path) = &args.checkpoint {
        fs::write(path, sampler.checkpoint().to_json()).map_err(|e| io_at(path, e))?;
    }
    eprintln!(
        "wrote {written} events ({} of {} steps)",
        sampler.step(),
        sampler.total_steps()
    );
    Ok(0)
}

fn load_trace(input: &Path, stages: Option<&PathBuf>) -> Result<LossTrace, Failure> {
    match stages {
        Some(stages) => Ok(dynamics::read_loss_csv(open(input)?, open(stages)?)?),
        None => Ok(dynamics::read_loss_jsonl(open(input)?)?),
    }
}

fn analyze(args: AnalyzeArgs) -> Result<u8, Failure> {
    if args.window < 2 || args.spike_window < 2 {
        return Err(usage("window sizes must be at least 2"));
    }
    let n = args.input.len();
    if !args.stages.is_empty() && args.stages.len() != n {
        return Err(usage("give one --stages per --input, or none"));
    }
    if !args.label.is_empty() && args.label.len() != n {
        return Err(usage("give one --label per --input, or none"));
    }
    let mut runs = Vec::with_capacity(n);
    for (i, input) in args.input.iter().enumerate() {
        let label = match args.label.get(i) {
            Some(l) => l.clone(),
            None => input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into()),
        };
        let trace = load_trace(input, args.stages.get(i))?;
        runs.push((
            label,
            dynamics::stability_summary(&trace, args.window, args.spike_window)?,
        ));
    }
    let data = if n == 1 {
        to_json(&runs[0].1)
    } else {
        to_json(
            &runs
                .iter()
                .map(|(l, s)| (l.as_str(), s))
                .collect::<std::collections::BTreeMap<_, _>>(),
        )
    };
    if let Some(path) = &args.report {
        fs::write(path, &data).map_err(|e| io_at(path, e))?;
    }
    let body = match args.output.format {
        Format::Data => data,
        Format::Text => render_analysis(&runs),
    };
    emit(&args.output, &body)?;
    Ok(0)
}

/// Spike steps printed in the text report; the data report lists all of them.
const SPIKES_LISTED: usize = 20;

fn render_analysis(runs: &[(String, dynamics::StabilitySummary)]) -> String {
    let rows: Vec<(String, &dynamics::StabilitySummary)> = runs.iter().map(|(l, s)| (l.clone(), s)).collect();
    let mut out = dynamics::render_stability_table(&rows);
    for (label, s) in runs {
        out.push('\n');
        if runs.len() > 1 {
            out.push_str(&format!("[{label}]\n"));
        }
        render_details(&mut out, s);
    }
    out
}

fn render_details(out: &mut String, s: &dynamics::StabilitySummary) {
    out.push_str(&format!(
        "window w = {}, spike window u = {}\nglobal loss std: {:.3}\n",
        s.window, s.spike_window, s.global_loss_std
    ));
    out.push_str(&format!(
        "spikes: {} of {} windows",
        s.spikes.spike_steps.len(),
        s.spikes.valid_windows
    ));
    if !s.spikes.spike_steps.is_empty() {
        let shown = &s.spikes.spike_steps[..s.spikes.spike_steps.len().min(SPIKES_LISTED)];
        let steps: Vec<String> = shown.iter().map(u64::to_string).collect();
        out.push_str(&format!(" at steps {}", steps.join(", ")));
        if shown.len() < s.spikes.spike_steps.len() {
            out.push_str(", ...");
        }
    }
    out.push('\n');
    if let Some(t) = &s.transitions {
        for b in &t.boundaries {
            out.push_str(&format!(
                "stage {} -> {}: loss {} (step {}) -> {} (step {}), ratio {:+.4}\n",
                b.from_stage, b.to_stage, b.loss_before, b.last_step, b.loss_after, b.first_step, b.ratio
            ));
        }
    }
    if !s.gaps.is_empty() {
        let missing: u64 = s.gaps.iter().map(|g| g.missing()).sum();
        out.push_str(&format!("gaps: {} ({missing} steps missing)\n", s.gaps.len()));
    }
}

fn load_snapshots(paths: &[PathBuf]) -> Result<Vec<(String, Vec<EvalSnapshot>)>, Failure> {
    let mut out: Vec<(String, Vec<EvalSnapshot>)> = Vec::new();
    for path in paths {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let records = metrics::read_eval_jsonl(open(path)?)?;
        for (cond, snaps) in metrics::group_snapshots(&records, &stem)? {
            if out.iter().any(|(c, _)| *c == cond) {
                return Err(Failure::from(Error::InvalidData(format!(
                    "condition `{cond}` appears in more than one input"
                ))));
            }
            out.push((cond, snaps));
        }
    }
    Ok(out)
}

fn metrics_cmd(args: MetricsArgs) -> Result<u8, Failure> {
    let groups = load_snapshots(&args.input)?;
    let body = match args.mode {
        MetricsMode::Compare => {
            let rows: Vec<(String, EvalSnapshot)> = groups
                .into_iter()
                .map(|(c, snaps)| (c, snaps.last().cloned().expect("grouped snapshots are non-empty")))
                .collect();
            let cmp = comparison_table(&rows)?;
            match args.output.format {
                Format::Text => cmp.render_text(),
                Format::Data => {
                    let mut buf = Vec::new();
                    cmp.export_csv(&mut buf)?;
                    String::from_utf8(buf).expect("csv is utf-8")
                }
            }
        }
        MetricsMode::Aggregate => {
            let mut out = String::new();
            if args.output.format == Format::Data {
                out.push_str("condition,step,general,reasoning,detail,overall\n");
            } else {
                out.push_str("condition  step  General  Reasoning    OCR  Overall\n");
            }
            for (cond, snaps) in &groups {
                for s in snaps {
                    let a = metrics::aggregate(s)?;
                    if args.output.format == Format::Data {
                        out.push_str(&format!(
                            "{cond},{},{},{},{},{}\n",
                            s.step,
                            a.general.render_exact(),
                            a.reasoning.render_exact(),
                            a.detail.render_exact(),
                            a.overall.render_exact()
                        ));
                    } else {
                        out.push_str(&format!(
                            "{cond:<9} {:>5}  {:>7}  {:>9}  {:>5}  {:>7}\n",
                            s.step,
                            a.general.render(),
                            a.reasoning.render(),
                            a.detail.render(),
                            a.overall.render()
                        ));
                    }
                }
            }
            out
        }
        MetricsMode::Trajectory => {
            let mut out = String::new();
            for (cond, snaps) in &groups {
                let traj = trajectory(snaps)?;
                match args.output.format {
                    Format::Data => {
                        let mut buf = Vec::new();
                        traj.export_csv(&mut buf)?;
                        let text = String::from_utf8(buf).expect("csv is utf-8");
                        if groups.len() > 1 {
                            out.push_str(&format!("# condition {cond}\n"));
                        }
                        out.push_str(&text);
                    }
                    Format::Text => {
                        let conv = convergence_step(&traj.overall(), args.fraction)?;
                        out.push_str(&format!("condition {cond}\n"));
                        out.push_str("   step  General  Reasoning    OCR  Overall\n");
                        for p in &traj.points {
                            let s = &p.scores;
                            out.push_str(&format!(
                                "{:>7}  {:>7}  {:>9}  {:>5}  {:>7}\n",
                                p.step,
                                s.general.render(),
                                s.reasoning.render(),
                                s.detail.render(),
                                s.overall.render()
                            ));
                        }
                        match conv {
                            Some(step) => out.push_str(&format!(
                                "converged (Overall >= {} x final) at step {step}\n",
                                args.fraction
                            )),
                            None => out.push_str("did not converge\n"),
                        }
                    }
                }
            }
            out
        }
    };
    emit(&args.output, &body)?;
    Ok(0)
}

fn simulate(args: SimulateArgs) -> Result<u8, Failure> {
    let spec = SimulationSpec::from_toml(&read_text(&args.spec)?)?;
    fs::create_dir_all(&args.out).map_err(|e| io_at(&args.out, e))?;
    let mut truth = serde_json::Map::new();
    truth.insert("seed".into(), args.seed.into());
    if let Some(loss) = &spec.loss {
        let (trace, gt) = synth_loss(loss, args.seed)?;
        let path = args.out.join("loss.jsonl");
        let file = File::create(&path).map_err(|e| io_at(&path, e))?;
        let mut w = BufWriter::new(file);
        dynamics::write_loss_jsonl(&trace, &mut w)?;
        w.flush()?;
        truth.insert("loss".into(), serde_json::to_value(gt).expect("serializes"));
    }
    if let Some(cap) = &spec.capability {
        let cond = builtin_condition(cap.condition.parse()?, cap.steps);
        let mut model = cap.model.clone();
        model.seed = args.seed;
        let (snaps, gt) = synth_capability(&cond, &Registry::builtin(), &model)?;
        let path = args.out.join("eval.jsonl");
        let file = File::create(&path).map_err(|e| io_at(&path, e))?;
        let mut w = BufWriter::new(file);
        metrics::write_eval_jsonl(&metrics::snapshots_to_records(Some(&cond.id), &snaps), &mut w)?;
        w.flush()?;
        truth.insert("capability".into(), serde_json::to_value(gt).expect("serializes"));
    }
    if spec.loss.is_none() && spec.capability.is_none() {
        return Err(usage("simulation spec has neither [loss] nor [capability]"));
    }
    let path = args.out.join("truth.json");
    fs::write(&path, to_json(&truth)).map_err(|e| io_at(&path, e))?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(a) => validate(a),
        Command::Exposure(a) => exposure(a),
        Command::Manifest(a) => manifest(a),
        Command::Analyze(a) => analyze(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Simulate(a) => simulate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
