//! `tspsim`: generate weights, schedule, predict and simulate encoder stacks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value as Json;

use tsp_core::machine::{validate_config, ArchConfig, RegionKind};
use tsp_core::reference::{encoder_stack_ref, generate_model, Model, ModelDims};
use tsp_core::scheduler::{
    build_encoder_graph, graph_for_model, predict_cycles, schedule_encoder, write_dump, FusionOptions,
};
use tsp_core::simulator::{model_image, run, trace_mismatches, Mode};
use tsp_core::{Error, Exec};

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CONFLICT: u8 = 3;
const EXIT_HAZARD: u8 = 4;
const EXIT_MISMATCH: u8 = 5;

#[derive(Parser)]
#[command(name = "tspsim", version, about = "Streaming tensor processor encoder simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write seeded int8 weights, int32 biases and layer-norm parameters.
    GenWeights(Common),
    /// Build the instruction schedule and print the predicted cycle count.
    Schedule(Common),
    /// Print the closed-form cycle prediction without scheduling.
    Predict(Common),
    /// Run simulator and reference side by side; print the bit-exactness verdict.
    Simulate(Common),
    /// Summarize a report written by `simulate --out`.
    Report {
        /// Path to `report.json`.
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// `default`, `tiny`, or a `key = value` machine description file.
    #[arg(long, default_value = "default")]
    arch: String,
    /// `bert-base`, `tiny`, a hyper-parameter file, or a weights directory.
    #[arg(long, default_value = "bert-base")]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the schedule as TSV (to `--out`/schedule.tsv, else stdout).
    #[arg(long)]
    dump_schedule: bool,
    /// Disable GELU, layer-norm and softmax fusion.
    #[arg(long)]
    serialized: bool,
    #[arg(long)]
    json: bool,
}

enum Source {
    Dims(ModelDims, usize),
    Weights(Model),
}

fn load_arch(s: &str) -> Result<ArchConfig> {
    let cfg = match s {
        "default" => ArchConfig::default(),
        "tiny" => ArchConfig::tiny(),
        path => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{path}: {e}")))?;
            ArchConfig::parse(&text)?
        }
    };
    let problems = validate_config(&cfg);
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")).into());
    }
    Ok(cfg)
}

fn parse_dims(text: &str) -> Result<(ModelDims, usize)> {
    let mut kv = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Params(format!("line {}: expected `key = value`", i + 1)))?;
        let v: usize = v.trim().parse().map_err(|_| Error::Params(format!("line {}: `{}` is not an integer", i + 1, v.trim())))?;
        kv.insert(k.trim().to_string(), v);
    }
    let base = ModelDims::bert_base();
    let get = |k: &str, d: usize| kv.get(k).copied().unwrap_or(d);
    let dims = ModelDims {
        heads: get("heads", base.heads),
        head_size: get("head_size", base.head_size),
        d_model: get("d_model", base.d_model),
        d_ff: get("d_ff", base.d_ff),
        seq_len: get("seq_len", base.seq_len),
    };
    Ok((dims, get("layers", 12)))
}

fn load_model(c: &Common) -> Result<Source> {
    let (mut dims, mut layers) = match c.model.as_str() {
        "bert-base" => (ModelDims::bert_base(), 12),
        "tiny" => (ModelDims::tiny(), 1),
        p if Path::new(p).is_dir() => {
            let m = Model::load(Path::new(p))?;
            if c.seq_len.is_some_and(|s| s != m.dims.seq_len) {
                bail!(Error::Params(format!("--seq-len differs from the stored input ({})", m.dims.seq_len)));
            }
            if c.layers.is_some_and(|n| n != m.layers.len()) {
                bail!(Error::Params(format!("--layers differs from the stored model ({})", m.layers.len())));
            }
            return Ok(Source::Weights(m));
        }
        p => parse_dims(&fs::read_to_string(p).map_err(|e| Error::Params(format!("{p}: {e}")))?)?,
    };
    if let Some(s) = c.seq_len {
        dims.seq_len = s;
    }
    if let Some(n) = c.layers {
        layers = n;
    }
    dims.validate()?;
    if layers == 0 {
        bail!(Error::Params("--layers must be at least 1".into()));
    }
    Ok(Source::Dims(dims, layers))
}

fn materialize(c: &Common) -> Result<Model> {
    Ok(match load_model(c)? {
        Source::Weights(m) => m,
        Source::Dims(d, n) => generate_model(d, n, c.seed)?,
    })
}

fn opts(c: &Common) -> FusionOptions {
    if c.serialized {
        FusionOptions::serialized()
    } else {
        FusionOptions::default()
    }
}

fn out_dir(c: &Common) -> Result<Option<&Path>> {
    if let Some(d) = &c.out {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(c.out.as_deref())
}

fn cmd_gen_weights(c: &Common) -> Result<()> {
    let dir = c.out.as_ref().ok_or_else(|| anyhow!("gen-weights needs --out <dir>"))?;
    let m = materialize(c)?;
    m.save(dir)?;
    let params = m.dims.layer_param_bytes() * m.layers.len() as u64;
    println!("wrote {} layer(s) to {}", m.layers.len(), dir.display());
    println!("parameter bytes: {params}");
    Ok(())
}

fn cmd_schedule(c: &Common) -> Result<()> {
    let cfg = load_arch(&c.arch)?;
    let g = match load_model(c)? {
        Source::Dims(d, n) => build_encoder_graph(d, n)?,
        Source::Weights(m) => graph_for_model(&m)?,
    };
    let compiled = schedule_encoder(&g, &cfg, opts(c))?;
    let s = &compiled.schedule;
    let cycles = s.predicted_total_cycles;
    if c.dump_schedule {
        let text = write_dump(s);
        match out_dir(c)? {
            Some(d) => fs::write(d.join("schedule.tsv"), text)?,
            None => print!("{text}"),
        }
    }
    let constant = compiled.memory.bytes_of(RegionKind::Constant);
    if c.json {
        let j = serde_json::json!({
            "predicted_cycles": cycles,
            "predicted_us": cfg.cycles_to_us(cycles),
            "instructions": s.instructions.len(),
            "constant_bytes": constant,
        });
        println!("{}", serde_json::to_string_pretty(&j)?);
    } else if !(c.dump_schedule && c.out.is_none()) {
        println!("instructions: {}", s.instructions.len());
        println!("constant bytes: {constant}");
        println!("predicted cycles: {cycles}");
        println!("predicted us: {:.3}", cfg.cycles_to_us(cycles));
    }
    Ok(())
}

fn cmd_predict(c: &Common) -> Result<()> {
    let cfg = load_arch(&c.arch)?;
    let g = match load_model(c)? {
        Source::Dims(d, n) => build_encoder_graph(d, n)?,
        Source::Weights(m) => graph_for_model(&m)?,
    };
    let p = predict_cycles(&g, &cfg, opts(c));
    if c.json {
        let j = serde_json::json!({
            "predicted_cycles": p.total_cycles,
            "per_layer_cycles": p.per_layer,
            "predicted_us": p.microseconds,
        });
        println!("{}", serde_json::to_string_pretty(&j)?);
    } else {
        let spans: Vec<String> = p.per_layer.iter().map(u64::to_string).collect();
        println!("per-layer cycles: {}", spans.join(" "));
        println!("predicted cycles: {}", p.total_cycles);
        println!("predicted us: {:.3}", p.microseconds);
    }
    Ok(())
}

/// Returns `Ok(false)` on an oracle mismatch, after printing the report.
fn cmd_simulate(c: &Common) -> Result<bool> {
    let cfg = load_arch(&c.arch)?;
    let model = materialize(c)?;
    let g = graph_for_model(&model)?;
    let compiled = schedule_encoder(&g, &cfg, opts(c))?;
    let sim = run(&compiled.schedule, &g, &compiled.memory, model_image(&model)?, &cfg, Mode::Functional)?;
    let (_, trace) = encoder_stack_ref(&model, Exec::default())?;
    let bad = trace_mismatches(&sim.values, &trace);
    let r = &sim.report;

    let dir = out_dir(c)?;
    if let Some(d) = dir {
        fs::write(d.join("report.json"), serde_json::to_string_pretty(r)? + "\n")?;
        fs::write(d.join("report.txt"), r.to_text())?;
        fs::write(d.join("report.tsv"), r.to_rows())?;
    }
    if c.dump_schedule {
        let text = write_dump(&compiled.schedule);
        match dir {
            Some(d) => fs::write(d.join("schedule.tsv"), text)?,
            None => print!("{text}"),
        }
    }
    if c.json {
        println!("{}", serde_json::to_string_pretty(r)?);
    } else {
        if dir.is_none() {
            print!("{}", r.to_text());
            println!();
        }
        print!("{}", summarize(&serde_json::to_value(r)?)?);
    }
    if bad.is_empty() {
        println!("oracle: PASS ({} boundary tensors bit-identical)", trace.len());
        Ok(true)
    } else {
        println!("oracle: FAIL ({} of {} boundary tensors differ)", bad.len(), trace.len());
        for b in bad.iter().take(10) {
            println!("  {b}");
        }
        Ok(false)
    }
}

fn pct(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        100.0 * a / b
    } else {
        0.0
    }
}

fn field<'a>(j: &'a Json, k: &str) -> Result<&'a Json> {
    j.get(k).ok_or_else(|| Error::Format(format!("report is missing `{k}`")).into())
}

fn num(j: &Json, k: &str) -> Result<f64> {
    field(j, k)?.as_f64().ok_or_else(|| Error::Format(format!("`{k}` is not a number")).into())
}

fn text(j: &Json, k: &str) -> Result<String> {
    Ok(field(j, k)?.as_str().ok_or_else(|| Error::Format(format!("`{k}` is not a string")))?.to_string())
}

fn array<'a>(j: &'a Json, k: &str) -> Result<&'a Vec<Json>> {
    field(j, k)?.as_array().ok_or_else(|| Error::Format(format!("`{k}` is not a list")).into())
}

/// Block percentages, unit-class utilization and memory fractions.
fn summarize(j: &Json) -> Result<String> {
    let total = num(j, "total_cycles")?;
    let mut o = String::new();
    let _ = writeln!(o, "total: {} cycles, {:.3} us", total, num(j, "total_us")?);

    let mut blocks: BTreeMap<String, f64> = BTreeMap::new();
    for b in array(j, "blocks")? {
        *blocks.entry(text(b, "block")?).or_default() += num(b, "cycles")?;
    }
    let _ = writeln!(o, "block breakdown:");
    for (name, cyc) in &blocks {
        let _ = writeln!(o, "  {name:<16} {:>6.2}%", pct(*cyc, total));
    }
    let core: f64 = blocks.iter().filter(|(k, _)| k.as_str() == "SA" || k.as_str() == "FF").map(|(_, v)| v).sum();
    let _ = writeln!(o, "  {:<16} {:>6.2}%", "SA+FF", pct(core, total));

    let mut classes: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for u in array(j, "units")? {
        let e = classes.entry(text(u, "class")?).or_default();
        e.0 += num(u, "busy")?;
        e.1 += num(u, "busy")? + num(u, "idle")?;
    }
    let _ = writeln!(o, "unit utilization:");
    for (class, (busy, avail)) in &classes {
        let _ = writeln!(o, "  {class:<16} {:>6.2}%", pct(*busy, *avail));
    }

    let m = field(j, "memory")?;
    let _ = writeln!(o, "memory:");
    let mut sum = 0.0;
    for k in ["constant", "scratchpad", "instruction", "unused"] {
        let v = num(m, k)?;
        sum += v;
        let _ = writeln!(o, "  {k:<16} {:>6.2}%", 100.0 * v);
    }
    let _ = writeln!(o, "  {:<16} {:>6.2}%", "total", 100.0 * sum);
    Ok(o)
}

fn cmd_report(path: &Path, json: bool) -> Result<()> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let j: Json = serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let s = summarize(&j)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&j)?);
    } else {
        print!("{s}");
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Params(_)) => EXIT_CONFIG,
        Some(Error::Schedule(_) | Error::Conflicts(_) | Error::OutOfMemory { .. }) => EXIT_CONFLICT,
        Some(Error::Hazard { .. } | Error::UninitializedRead { .. }) => EXIT_HAZARD,
        _ => EXIT_IO,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::GenWeights(c) => cmd_gen_weights(c),
        Cmd::Schedule(c) => cmd_schedule(c),
        Cmd::Predict(c) => cmd_predict(c),
        Cmd::Simulate(c) => match cmd_simulate(c) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_MISMATCH),
            Err(e) => Err(e),
        },
        Cmd::Report { path, json } => cmd_report(path, *json),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
