use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};
use log::warn;

use asmem::accounting::{bench_csv, run_scaling_bench, BenchConfig, BenchMode};
use asmem::calibration::{
    build_bank_with, merge_chunk_traces, BuildOptions, CentroidOrg, ClusterSpec, KeyMode, RopeMode,
};
use asmem::config::parse_config;
use asmem::inference::{infer_merge, reconstruction_errors, InferenceRequest};
use asmem::memory_bank::{deserialize_bank, serialize_bank, MemoryBank, DEFAULT_TOP_M};
use asmem::synth::{generate, write_synth, Oracle, SynthSpec, DEFAULT_LOCAL_LEN};
use asmem::tensorstore::{load_trace_set, ModelGeometry, TraceSet};
use asmem::verify::{check_bank, compare_banks, run_builtin_suite, CheckResult, Precision, BANK_MATCH_TOL};
use asmem::{derive_seed, Error};

/// Stream id for first-level index seeds.
const HIER_STREAM: u64 = u64::MAX - 1;

#[derive(Parser, Debug)]
#[command(name = "asmem", version, about = "Attention-state memory: build, query and check prefix-state banks")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Element precision for the decomposition check.
    #[arg(long, global = true, default_value = "f32", value_parser = parse_precision)]
    precision: Precision,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// `key = value` file of flag defaults; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-cluster trace set and its oracle.
    Synth(SynthArgs),
    /// Build a memory bank from a trace set.
    Build(BuildArgs),
    /// Retrieve and merge for every token of a request.
    Query(QueryArgs),
    /// Measure retrieval cost against bank size.
    Bench(BenchArgs),
    /// Print bank metadata and per-layer statistics.
    Inspect(InspectArgs),
    /// Run the invariant suite, optionally against a bank and its traces.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    hq: usize,
    #[arg(long, default_value_t = 2)]
    hkv: usize,
    #[arg(long, default_value_t = 16)]
    dh: usize,
    /// Prefix length in tokens.
    #[arg(long, default_value_t = 512)]
    prefix: usize,
    /// Number of planted query clusters.
    #[arg(long, default_value_t = 16)]
    clusters: usize,
    #[arg(long, default_value_t = 32)]
    per_cluster: usize,
    /// Angular spread of cluster members, radians.
    #[arg(long, default_value_t = 0.05)]
    spread: f64,
    /// Also write per-chunk traces when > 1.
    #[arg(long, default_value_t = 1)]
    chunks: usize,
    /// Local (non-prefix) context length of the request.
    #[arg(long, default_value_t = DEFAULT_LOCAL_LEN)]
    local: usize,
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Trace file; with --chunked, the chunk trace files in prefix order.
    #[arg(long, required = true, value_delimiter = ',', num_args = 1..)]
    traces: Vec<PathBuf>,
    /// Entries per slot.
    #[arg(long, default_value_t = 64)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 1024)]
    batch: usize,
    #[arg(long, default_value = "pre", value_parser = parse_rope_mode)]
    mode: RopeMode,
    #[arg(long)]
    whiten: bool,
    /// Rotation position of unified keys (default: the prefix length).
    #[arg(long)]
    virtual_position: Option<u64>,
    /// Lookup key width (default: 2 d_h when it divides G d_h, else G d_h).
    #[arg(long)]
    dprime: Option<usize>,
    #[arg(long, default_value = "individual", value_parser = parse_org)]
    org: CentroidOrg,
    /// Also build a two-level index with this many first-level centroids.
    #[arg(long)]
    hier_nl1: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TOP_M)]
    top_m: usize,
    /// Treat --traces as chunk traces over consecutive prefix pieces.
    #[arg(long)]
    chunked: bool,
    /// Fail on any empty cluster instead of warning.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    bank: PathBuf,
    /// Request file (an oracle file also works).
    #[arg(long)]
    request: Option<PathBuf>,
    /// Oracle file; adds the reconstruction error column.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Use the two-level index.
    #[arg(long)]
    hier: bool,
    /// Buckets expanded by the two-level index.
    #[arg(long)]
    top_m: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![1024usize, 2048, 4096, 8192, 16384])]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "full,flat,hier", value_parser = parse_bench_mode)]
    modes: Vec<BenchMode>,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Queries timed per trial.
    #[arg(long, default_value_t = 64)]
    queries: usize,
    /// Key dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = DEFAULT_TOP_M)]
    top_m: usize,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    bank: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Traces the bank was built from; with several files, chunk traces in prefix order.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    traces: Vec<PathBuf>,
    /// Monolithic traces to compare chunk traces against.
    #[arg(long)]
    monolithic: Option<PathBuf>,
    /// A second bank that must match --bank per entry.
    #[arg(long)]
    reference_bank: Option<PathBuf>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_rope_mode(s: &str) -> Result<RopeMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_org(s: &str) -> Result<CentroidOrg, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_bench_mode(s: &str) -> Result<BenchMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure classes mapped onto the exit-code contract.
enum Failure {
    Checks,
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn long_flag(arg: &clap::Arg) -> Option<&str> {
    arg.get_long()
}

/// Appends config-file settings that the command line does not already set.
fn apply_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let pos = argv.iter().position(|a| a == "--config" || a.to_string_lossy().starts_with("--config="));
    let Some(pos) = pos else { return Ok(argv) };
    let path = match argv[pos].to_string_lossy().strip_prefix("--config=") {
        Some(p) => PathBuf::from(p),
        None => argv.get(pos + 1).map(PathBuf::from).ok_or_else(|| usage("--config needs a path"))?,
    };
    let text = std::fs::read_to_string(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let entries = parse_config(&text)?;

    let cmd = Cli::command();
    let sub_name = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .find(|a| cmd.get_subcommands().any(|s| s.get_name() == a));
    let sub = sub_name.as_deref().and_then(|n| cmd.find_subcommand(n));
    let given: Vec<String> = argv.iter().map(|a| a.to_string_lossy().split('=').next().unwrap_or("").to_string()).collect();
    for e in entries {
        let flag = format!("--{}", e.key);
        let arg = cmd
            .get_arguments()
            .chain(sub.into_iter().flat_map(|s| s.get_arguments()))
            .find(|a| long_flag(a) == Some(e.key.as_str()));
        let Some(arg) = arg else {
            let elsewhere = cmd.get_subcommands().flat_map(|s| s.get_arguments()).any(|a| long_flag(a) == Some(e.key.as_str()));
            if elsewhere {
                continue;
            }
            return Err(usage(format!("{}:{}: unknown setting {:?}", path.display(), e.line, e.key)));
        };
        if e.key == "config" {
            return Err(usage("config files cannot include other config files"));
        }
        if given.contains(&flag) {
            continue;
        }
        if arg.get_action().takes_values() {
            argv.push(flag.into());
            argv.push(e.value.into());
        } else {
            match e.value.as_str() {
                "true" | "1" | "yes" => argv.push(flag.into()),
                "false" | "0" | "no" => {}
                other => return Err(usage(format!("{}:{}: {} expects a boolean, got {other:?}", path.display(), e.line, e.key))),
            }
        }
    }
    Ok(argv)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match apply_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(f) => return report(f),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return report(usage("--threads must be >= 1"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report(usage(e.to_string()));
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(&cli, a),
        Command::Build(a) => cmd_build(&cli, a),
        Command::Query(a) => cmd_query(&cli, a),
        Command::Bench(a) => cmd_bench(&cli, a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Verify(a) => cmd_verify(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    match f {
        Failure::Checks => ExitCode::from(1),
        Failure::Usage(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        geometry: ModelGeometry::new(a.layers, a.hq, a.hkv, a.dh)?,
        prefix_len: a.prefix,
        n_clusters: a.clusters,
        queries_per_cluster: a.per_cluster,
        spread: a.spread,
        seed: cli.seed,
        n_chunks: a.chunks,
        local_len: a.local,
    };
    spec.validate()?;
    let dir = cli.output.clone().unwrap_or_else(|| PathBuf::from("."));
    let out = generate(&spec)?;
    let paths = write_synth(&out, &dir)?;
    println!("traces={}", paths.traces.display());
    println!("oracle={}", paths.oracle.display());
    for p in &paths.chunks {
        println!("chunk={}", p.display());
    }
    println!("tokens={}", out.traces.n_tokens());
    println!("prefix_len={}", spec.prefix_len);
    println!("clusters={}", spec.n_clusters);
    Ok(())
}

fn default_d_prime(g: &ModelGeometry) -> usize {
    let width = g.group_size() * g.d_h;
    if width.is_multiple_of(2 * g.d_h) {
        2 * g.d_h
    } else {
        width
    }
}

fn load_traces(paths: &[PathBuf], chunked: bool) -> Result<TraceSet, Failure> {
    match (paths, chunked) {
        ([one], false) => Ok(load_trace_set(one)?),
        (_, false) => Err(usage("several trace files need --chunked")),
        (many, true) => {
            let chunks = many.iter().map(load_trace_set).collect::<Result<Vec<_>, _>>()?;
            Ok(merge_chunk_traces(&chunks)?)
        }
    }
}

fn cmd_build(cli: &Cli, a: &BuildArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let traces = load_traces(&a.traces, a.chunked)?;
    let g = *traces.geometry();
    let d_prime = a.dprime.unwrap_or_else(|| default_d_prime(&g));
    if d_prime == 0 || (g.group_size() * g.d_h) % d_prime != 0 {
        return Err(usage(format!("--dprime {d_prime} must divide G * d_h = {}", g.group_size() * g.d_h)));
    }
    let mode = KeyMode {
        rope: a.mode,
        whitening: a.whiten,
        virtual_position: a.virtual_position.unwrap_or(traces.prefix_len() as u64),
    };
    let spec = ClusterSpec { k: a.k, iterations: a.iters, batch_size: a.batch, seed: cli.seed, centroid_org: a.org };
    spec.validate()?;
    let opts = BuildOptions { max_empty_fraction: if a.strict { 0.0 } else { 1.0 }, ..BuildOptions::default() };
    let (mut bank, report) = build_bank_with(&traces, mode, &spec, d_prime, &opts)?;
    if let Some(n_l1) = a.hier_nl1 {
        if n_l1 == 0 || a.top_m == 0 {
            return Err(usage("--hier-nl1 and --top-m must be >= 1"));
        }
        bank.build_hier_indices(n_l1, a.top_m, derive_seed(cli.seed, HIER_STREAM, 0))?;
    }
    let dropped = report.total_dropped();
    if dropped > 0 {
        warn!("{dropped} clusters ended empty and were dropped; the bank has fewer than k entries in some slots");
    }
    let out = cli.output.clone().unwrap_or_else(|| PathBuf::from("bank.asmt"));
    serialize_bank(&bank, &out)?;
    println!("bank={}", out.display());
    for (l, (entries, drops)) in report.entries.iter().zip(&report.dropped).enumerate() {
        let e: Vec<String> = entries.iter().map(usize::to_string).collect();
        let d: Vec<String> = drops.iter().map(usize::to_string).collect();
        println!("layer{l}.entries={}", e.join(","));
        println!("layer{l}.dropped={}", d.join(","));
    }
    println!("dropped_total={dropped}");
    eprintln!("build_seconds={:.3}", start.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_query(cli: &Cli, a: &QueryArgs) -> Result<(), Failure> {
    let mut bank = deserialize_bank(&a.bank)?;
    if let Some(m) = a.top_m {
        if m == 0 {
            return Err(usage("--top-m must be >= 1"));
        }
        bank.set_top_m(m)?;
    }
    let oracle = a.oracle.as_ref().map(Oracle::load).transpose()?;
    let request = match (&a.request, &oracle) {
        (Some(p), _) => InferenceRequest::load(p)?,
        (None, Some(o)) => o.request.clone(),
        (None, None) => return Err(usage("query needs --request or --oracle")),
    };
    let report = infer_merge(&request, &bank, a.hier)?;
    let errors = oracle.as_ref().map(|o| reconstruction_errors(&report, &request, &o.prefix)).transpose()?;
    if let Some(p) = &cli.output {
        std::fs::write(p, report.to_tensor_file()?.to_bytes()?)?;
        eprintln!("report={}", p.display());
    }
    write_out(None, &report.to_csv(errors.as_ref()))?;
    eprintln!("mean_ops={:.2}", report.mean_ops());
    if let Some(e) = &errors {
        let mut v = e.per_token.clone();
        v.sort_by(f64::total_cmp);
        eprintln!("median_error={:.6e} max_error={:.6e}", v[v.len() / 2], v[v.len() - 1]);
    }
    Ok(())
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<(), Failure> {
    let cfg = BenchConfig {
        ks: a.k.clone(),
        modes: a.modes.clone(),
        trials: a.trials,
        queries_per_trial: a.queries,
        dim: a.dim,
        top_m: a.top_m,
        seed: cli.seed,
    };
    let rows = run_scaling_bench(&cfg)?;
    write_out(cli.output.as_deref(), &bench_csv(&rows))
}

fn cmd_inspect(a: &InspectArgs) -> Result<(), Failure> {
    let bank = deserialize_bank(&a.bank)?;
    print!("{}", describe_bank(&bank)?);
    Ok(())
}

fn describe_bank(bank: &MemoryBank) -> Result<String, Failure> {
    use std::fmt::Write as _;
    let g = &bank.geometry;
    let layout = bank.layout()?;
    let mut s = String::new();
    let n_l1: Vec<String> = bank
        .layers
        .iter()
        .flatten()
        .map(|slot| slot.hier.as_ref().map_or(0, |h| h.n_l1()).to_string())
        .collect();
    let _ = writeln!(s, "layers={}\nh_q={}\nh_kv={}\nd_h={}", g.n_layers, g.h_q, g.h_kv, g.d_h);
    let _ = writeln!(s, "prefix_len={}", bank.prefix_len);
    let _ = writeln!(s, "k={}", bank.spec.k);
    let _ = writeln!(s, "key_mode={}", bank.mode.rope);
    let _ = writeln!(s, "whitening={}", bank.mode.whitening);
    let _ = writeln!(s, "virtual_position={}", bank.mode.virtual_position);
    let _ = writeln!(s, "d_prime={}", bank.d_prime);
    let _ = writeln!(s, "centroid_org={}", bank.spec.centroid_org);
    let _ = writeln!(s, "slots_per_layer={}\nkey_dim={}", layout.n_slots, layout.key_dim);
    let _ = writeln!(s, "n_l1={}", if bank.has_hier() { n_l1.join(",") } else { "0".into() });
    let _ = writeln!(s, "seed={}\nentries_total={}", bank.spec.seed, bank.entry_count());
    for (l, layer) in bank.layers.iter().enumerate() {
        let counts: Vec<String> = layer.iter().map(|slot| slot.entries.len().to_string()).collect();
        let lz: Vec<f64> = layer.iter().flat_map(|slot| slot.entries.iter().flat_map(|e| e.log_z().iter().copied())).collect();
        let mean_lz = lz.iter().sum::<f64>() / lz.len().max(1) as f64;
        let _ = writeln!(s, "layer{l}.entries={}", counts.join(","));
        let _ = writeln!(s, "layer{l}.mean_log_z={mean_lz:.6}");
    }
    Ok(s)
}

fn cmd_verify(cli: &Cli, a: &VerifyArgs) -> Result<(), Failure> {
    let mut results: Vec<CheckResult> = run_builtin_suite(cli.precision, cli.seed)?;
    let bank = a.bank.as_ref().map(deserialize_bank).transpose()?;
    let traces = if a.traces.is_empty() {
        None
    } else {
        let chunks = a.traces.iter().map(load_trace_set).collect::<Result<Vec<_>, _>>()?;
        if let Some(mono) = &a.monolithic {
            let mono = load_trace_set(mono)?;
            let merged = merge_chunk_traces(&chunks)?;
            let err = asmem::verify::trace_state_error(&merged, &mono)?;
            results.push(CheckResult {
                name: "input_chunked_states".into(),
                passed: err <= asmem::verify::CHUNK_STATE_TOL,
                measured: err,
                tolerance: asmem::verify::CHUNK_STATE_TOL,
                detail: format!("{} chunk files", chunks.len()),
            });
        }
        Some(if chunks.len() == 1 { chunks.into_iter().next().unwrap() } else { merge_chunk_traces(&chunks)? })
    };
    match (&bank, &traces) {
        (Some(b), Some(t)) => results.extend(check_bank(b, t)?),
        (Some(_), None) => warn!("--bank without --traces: bank-specific checks skipped"),
        _ => {}
    }
    if let Some(r) = &a.reference_bank {
        let b = bank.as_ref().ok_or_else(|| usage("--reference-bank needs --bank"))?;
        let err = compare_banks(b, &deserialize_bank(r)?)?;
        results.push(CheckResult {
            name: "reference_bank_match".into(),
            passed: err <= BANK_MATCH_TOL,
            measured: err,
            tolerance: BANK_MATCH_TOL,
            detail: r.display().to_string(),
        });
    }
    let text: String = results.iter().map(|r| format!("{r}\n")).collect();
    write_out(cli.output.as_deref(), &text)?;
    if cli.output.is_some() {
        print!("{text}");
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Checks)
    }
}
