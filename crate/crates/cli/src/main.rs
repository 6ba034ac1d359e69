use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dna_core::analytics::export_bundle;
use dna_core::checkpoint;
use dna_core::config::{LoadedConfig, Precision, RunConfig};
use dna_core::dreaming::{dream, write_ppm, objective_tsv, DreamObjective};
use dna_core::model::{DnaModel, RoutingTrace, Task};
use dna_core::tensor::Scalar;
use dna_core::train::{evaluate, train, ShapesDataset, METRICS_HEADER};
use dna_core::{verify, DnaError};

/// Default output root when `--out` is not given.
const OUTPUT_ROOT_VAR: &str = "DNA_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "dna", version, about = "Routed module-pool networks: train, trace, analyze, dream, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config.
    #[arg(short, long)]
    config: PathBuf,
    /// Replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $DNA_OUTPUT_ROOT/<command>, root defaults to `runs`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// `key=value`; dotted paths or bare field names. Repeatable.
    #[arg(short = 'O', long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint and a metrics log.
    Train(RunArgs),
    /// Run a checkpoint over data and write its routing trace.
    Trace {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Path statistics, fits, reuse and flow exports from a trace file.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        /// Supplies the analytics section and module sizes.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(short = 'O', long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Optimize an input image toward a reference image's routing.
    Dream {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the acceptance suite.
    Verify {
        /// Comma-separated criterion ids or name fragments.
        #[arg(long)]
        filter: Option<String>,
        /// Also check this checkpoint's integrity first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

enum CliError {
    /// Bad invocation or config: exit code 2.
    Usage(String),
    /// Failure while running: exit code 1.
    Runtime(String),
}

fn usage(e: DnaError) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: DnaError) -> CliError {
    match e {
        DnaError::Config { .. } | DnaError::TaskMismatch(_) => CliError::Usage(e.to_string()),
        e => CliError::Runtime(e.to_string()),
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(run) => cmd_train(&run),
        Command::Trace { run, checkpoint } => cmd_trace(&run, &checkpoint),
        Command::Analyze {
            trace,
            config,
            out,
            overrides,
        } => cmd_analyze(&trace, config.as_deref(), out, &overrides),
        Command::Dream { run, checkpoint } => cmd_dream(&run, &checkpoint),
        Command::Verify { filter, checkpoint } => cmd_verify(filter.as_deref(), checkpoint.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn out_dir(explicit: Option<PathBuf>, command: &str) -> CliResult<PathBuf> {
    let dir = explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command)
    });
    std::fs::create_dir_all(&dir).map_err(|e| runtime(DnaError::io(&dir, e)))?;
    Ok(dir)
}

fn load(run: &RunArgs) -> CliResult<LoadedConfig> {
    let mut overrides = run.overrides.clone();
    if let Some(seed) = run.seed {
        overrides.push(format!("seed={seed}"));
    }
    RunConfig::load(&run.config, &overrides).map_err(usage)
}

/// Loads the config, creates the output directory and echoes the config.
fn setup(run: &RunArgs, command: &str) -> CliResult<(LoadedConfig, PathBuf)> {
    let loaded = load(run)?;
    let out = out_dir(run.out.clone(), command)?;
    loaded.echo(&out).map_err(runtime)?;
    Ok((loaded, out))
}

fn write(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| runtime(DnaError::io(path, e)))
}

fn cmd_train(run: &RunArgs) -> CliResult {
    let (loaded, out) = setup(run, "train")?;
    match loaded.config.train.precision {
        Precision::F32 => train_run::<f32>(&loaded.config, &out),
        Precision::F64 => train_run::<f64>(&loaded.config, &out),
    }
}

fn train_run<T: Scalar>(cfg: &RunConfig, out: &Path) -> CliResult {
    let mut model = DnaModel::<T>::new(cfg.model.clone(), cfg.model_seed()).map_err(usage)?;
    let data = cfg.dataset().map_err(runtime)?;
    let metrics_path = out.join("metrics.tsv");
    let file = File::create(&metrics_path).map_err(|e| runtime(DnaError::io(&metrics_path, e)))?;
    let mut log = BufWriter::new(file);
    let mut io_err = writeln!(log, "{METRICS_HEADER}").err();
    train(&mut model, data.as_ref(), &cfg.train_config(), |m| {
        if io_err.is_none() {
            io_err = writeln!(log, "{}", m.tsv_row()).and_then(|_| log.flush()).err();
        }
        if m.step % 100 == 0 {
            eprintln!("step {} loss {:.4}", m.step, m.loss);
        }
    })
    .map_err(runtime)?;
    if let Some(e) = io_err {
        return Err(runtime(DnaError::io(&metrics_path, e)));
    }
    checkpoint::save(&model, &out.join("checkpoint")).map_err(runtime)?;
    let n = data.len().min(256);
    let (loss, acc) = evaluate(&model, data.as_ref(), n, cfg.train.batch_size.max(1)).map_err(runtime)?;
    println!("trained {} steps; loss {loss:.4}, accuracy {:.3} over {n} examples", cfg.train.steps, acc);
    println!("checkpoint: {}", out.join("checkpoint").display());
    Ok(())
}

fn load_model<T: Scalar>(cfg: &RunConfig, dir: &Path) -> CliResult<DnaModel<T>> {
    let manifest = checkpoint::read_manifest(dir).map_err(runtime)?;
    if manifest.config != cfg.model {
        return Err(CliError::Usage(format!(
            "checkpoint {} was built with a different model config than the [model] section",
            dir.display()
        )));
    }
    checkpoint::load(dir).map_err(runtime)
}

fn cmd_trace(run: &RunArgs, ckpt: &Path) -> CliResult {
    let (loaded, out) = setup(run, "trace")?;
    let trace = match loaded.config.train.precision {
        Precision::F32 => trace_run::<f32>(&loaded.config, ckpt)?,
        Precision::F64 => trace_run::<f64>(&loaded.config, ckpt)?,
    };
    let path = out.join("trace.jsonl");
    trace.write_jsonl(&path).map_err(runtime)?;
    println!(
        "{} sequences, {} tokens, {} routed steps -> {}",
        trace.sequences.len(),
        trace.token_count(),
        trace.n_routed,
        path.display()
    );
    Ok(())
}

fn trace_run<T: Scalar>(cfg: &RunConfig, ckpt: &Path) -> CliResult<RoutingTrace> {
    let model = load_model::<T>(cfg, ckpt)?;
    let data = cfg.trace_dataset().map_err(usage)?;
    model
        .trace_dataset(data.as_ref(), cfg.trace.sequences, cfg.trace.batch_size)
        .map_err(runtime)
}

fn cmd_analyze(trace_path: &Path, config: Option<&Path>, out: Option<PathBuf>, overrides: &[String]) -> CliResult {
    let loaded = match config {
        Some(p) => Some(RunConfig::load(p, overrides).map_err(usage)?),
        None if !overrides.is_empty() => {
            return Err(CliError::Usage("--override needs --config".into()));
        }
        None => None,
    };
    let trace = RoutingTrace::read_jsonl(trace_path).map_err(runtime)?;
    let out = out_dir(out, "analyze")?;
    if let Some(l) = &loaded {
        l.echo(&out).map_err(runtime)?;
    }
    let analytics = loaded.as_ref().map(|l| l.config.analytics).unwrap_or_default();
    let module_params: Option<Vec<usize>> = loaded.as_ref().map(|l| {
        let m = &l.config.model;
        m.pool_kinds().into_iter().map(|k| m.module_spec(k).param_count()).collect()
    });
    if let Some(p) = &module_params {
        if p.len() != trace.n_modules {
            return Err(CliError::Usage(format!(
                "config pool has {} modules but the trace has {}",
                p.len(),
                trace.n_modules
            )));
        }
    }
    let (summary, files) = export_bundle(&trace, &analytics, module_params.as_deref()).map_err(runtime)?;
    for (name, text) in &files {
        write(&out.join(name), text)?;
    }
    match summary.fit {
        Some(f) => println!("power-law slope {:.4} (r² {:.3}, ranks {}..{})", f.slope, f.r2, f.rank_lo, f.rank_hi),
        None => println!("no power-law fit: {}", summary.fit_error.unwrap_or_default()),
    }
    println!(
        "{} tokens, {} distinct paths, mean compute {:.4}; exports in {}",
        summary.tokens,
        summary.distinct_paths,
        summary.mean_compute,
        out.display()
    );
    Ok(())
}

fn cmd_dream(run: &RunArgs, ckpt: &Path) -> CliResult {
    let (loaded, out) = setup(run, "dream")?;
    match loaded.config.train.precision {
        Precision::F32 => dream_run::<f32>(&loaded.config, ckpt, &out),
        Precision::F64 => dream_run::<f64>(&loaded.config, ckpt, &out),
    }
}

fn dream_run<T: Scalar>(cfg: &RunConfig, ckpt: &Path, out: &Path) -> CliResult {
    let Task::VisionClassify {
        image_size, patch, ..
    } = cfg.model.task
    else {
        return Err(CliError::Usage("dreaming needs a vision model".into()));
    };
    let model = load_model::<T>(cfg, ckpt)?;
    let d = &cfg.dream;
    let images = ShapesDataset::for_task(&cfg.model.task, d.reference + 1, cfg.data_seed()).map_err(usage)?;
    let reference = images.pixels[d.reference].clone();
    let per_side = image_size / patch;
    let n_patches = per_side * per_side;
    let mut context = vec![false; n_patches];
    for &p in &d.context {
        *context
            .get_mut(p)
            .ok_or_else(|| CliError::Usage(format!("dream.context patch {p} is outside 0..{n_patches}")))? = true;
    }
    let mut obj = DreamObjective::from_reference(&model, &reference, d.horizon, d.tokens.clone(), context).map_err(usage)?;
    obj.use_logits = d.use_logits;
    let result = dream(&model, &obj, &reference, &d.settings, cfg.seed).map_err(runtime)?;
    write_ppm(&out.join("reference.ppm"), &reference, image_size).map_err(runtime)?;
    write_ppm(&out.join("dream.ppm"), &result.image, image_size).map_err(runtime)?;
    write(&out.join("objective.tsv"), &objective_tsv(&result))?;
    println!(
        "clean objective {:.4} -> {:.4} over {} steps; image in {}",
        result.clean_initial,
        result.clean_final,
        d.settings.steps,
        out.join("dream.ppm").display()
    );
    Ok(())
}

fn cmd_verify(filter: Option<&str>, ckpt: Option<&Path>) -> CliResult {
    if let Some(dir) = ckpt {
        match checkpoint::load::<f64>(dir) {
            Ok(_) => println!("[PASS] checkpoint {} loads and matches its checksum", dir.display()),
            Err(e) => {
                println!("[FAIL] checkpoint {}: {e}", dir.display());
                return Err(CliError::Runtime(format!("checkpoint check failed: {e}")));
            }
        }
    }
    let reports = verify::run(filter, |r| println!("{}", r.line())).map_err(usage)?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} passed, {failed} failed", reports.len() - failed);
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} acceptance criteria failed")));
    }
    Ok(())
}
