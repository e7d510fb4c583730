//! `tada` command-line harness: generation, precision search, memory
//! accounting, Frobenius ablation and the invariant self-test.
//!
//! [`cli_main`] is the whole program; the binary only forwards `argv` and the
//! standard streams. Failures print one JSON line on stderr,
//! `{"error":{"kind":..,"message":..}}`, and exit 2 for usage or
//! configuration errors, 1 for anything else.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tada_core::ablation::{ablate_frobenius, ablation_csv, AblationMethod, MethodTag};
use tada_core::memory::memory_breakdown;
use tada_core::search::{sensitivity_csv, sensitivity_report};
use tada_core::selftest::run_selftest;
use tada_core::{
    load_weights, memory_ratio, random_search, save_weights, BitWidth, BlockSpec, CalibrationSet, Error,
    PrecisionPlan, SearchConfig, ToyConfig, ToyModel, WeightSpec,
};

#[derive(Debug, Parser)]
#[command(name = "tada", version, about = "Mean-centered quantized KV cache toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON model/cache configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// TADAW1 weight file; synthetic weights are used when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Seed for synthetic weights.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Greedy generation through the compressed cache.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Plan file (JSON array), `uniform:N`, or a comma list of widths.
        #[arg(long)]
        plan: Option<String>,
        /// Residual length R.
        #[arg(long)]
        residual: Option<usize>,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        /// Streaming attention tile length.
        #[arg(long, default_value_t = 64)]
        block: usize,
        /// Comma-separated prompt token ids.
        #[arg(long, value_delimiter = ',', required = true)]
        prompt_ids: Vec<u32>,
        /// Write the JSON result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random search over per-layer bit widths.
    Search {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 64)]
        candidates: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        bits: Vec<u8>,
        /// Maximum memory ratio a candidate may have.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the uniform anchor plans.
        #[arg(long)]
        no_anchors: bool,
        /// Calibration file: JSON list of token-id sequences.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Synthetic calibration size when no file is given.
        #[arg(long, default_value_t = 4)]
        calib_seqs: usize,
        #[arg(long, default_value_t = 32)]
        calib_len: usize,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV report path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Best plan as a JSON array.
        #[arg(long)]
        plan_out: Option<PathBuf>,
        /// Print the per-candidate bit histogram table.
        #[arg(long)]
        sensitivity: bool,
    },
    /// Memory ratio of the compressed cache against a 16-bit cache.
    Memory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        kv_heads: Option<usize>,
        #[arg(long)]
        head_dim: Option<usize>,
        #[arg(long)]
        plan: Option<String>,
        /// Tokens per layer; with a residual length, buffered tokens count
        /// at full size.
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Per-layer Frobenius reconstruction error, as CSV.
    #[command(alias = "analyze")]
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Plan for the `tada` rows (defaults to the config plan).
        #[arg(long)]
        plan: Option<String>,
        /// Width for the `tada-uniform` and `direct` rows.
        #[arg(long, default_value_t = 4)]
        uniform_bits: u8,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        calib_seqs: usize,
        #[arg(long, default_value_t = 32)]
        calib_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
    /// Write synthetic weights to a TADAW1 file.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
        /// Give every KV head the same projection.
        #[arg(long)]
        identical_heads: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn kind(&self) -> &str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
            CliError::Failed(_) => "failed",
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            _ => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Core(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Core(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))
}

fn load_config(common: &Common) -> CliResult<ToyConfig> {
    match &common.config {
        None => Ok(ToyConfig::toy()),
        Some(p) => {
            let bytes = read(p)?;
            let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", p.display())))?;
            Ok(ToyConfig::from_json(&text)?)
        }
    }
}

fn load_model(common: &Common, args: &ModelArgs) -> CliResult<ToyModel> {
    match &args.model {
        Some(path) => {
            let model = load_weights(&read(path)?)?;
            if common.config.is_some() && load_config(common)? != *model.config() {
                return Err(Error::Config("--config disagrees with the configuration stored in --model".into()).into());
            }
            Ok(model)
        }
        None => Ok(ToyModel::synthetic(load_config(common)?, &WeightSpec::new(args.model_seed))?),
    }
}

/// A plan argument: an existing file holding a JSON array, `uniform:N`, or a
/// comma list.
fn parse_plan(arg: &str, num_layers: usize) -> CliResult<PrecisionPlan> {
    let path = Path::new(arg);
    let plan = if path.is_file() {
        serde_json::from_slice(&read(path)?).map_err(|e| Error::Config(format!("plan file {arg}: {e}")))?
    } else {
        PrecisionPlan::parse(arg, num_layers)?
    };
    if plan.len() != num_layers {
        return Err(Error::Config(format!("plan has {} entries for {num_layers} layers", plan.len())).into());
    }
    Ok(plan)
}

fn load_calib(path: Option<&Path>, seed: u64, seqs: usize, len: usize, model: &ToyModel) -> CliResult<CalibrationSet> {
    Ok(match path {
        Some(p) => {
            let text = String::from_utf8(read(p)?).map_err(|_| Error::Data(format!("{} is not UTF-8", p.display())))?;
            CalibrationSet::from_json(&text)?
        }
        None => CalibrationSet::sampled(model, seed, seqs, len)?,
    })
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => out.write_all(text.as_bytes()).map_err(|e| CliError::Core(e.into())),
    }
}

fn bit_width(b: u8) -> CliResult<BitWidth> {
    BitWidth::try_from(b).map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::Core(e.into());
    match cli.command {
        Command::Generate {
            common,
            model,
            plan,
            residual,
            max_new,
            block,
            prompt_ids,
            out: out_path,
        } => {
            let model = load_model(&common, &model)?;
            let cfg = model.cache_config();
            let plan = match plan {
                Some(p) => parse_plan(&p, cfg.num_layers)?,
                None => cfg.plan.clone(),
            };
            let residual = residual.unwrap_or(cfg.residual_length);
            let block = BlockSpec::new(block)?;
            let tokens = model.generate(&prompt_ids, max_new, &plan, residual, block)?;
            let result = json!({
                "prompt": &tokens[..prompt_ids.len()],
                "generated": &tokens[prompt_ids.len()..],
                "plan": plan,
                "residual_length": residual,
            });
            emit(out, out_path.as_deref(), &format!("{}\n", serde_json::to_string(&result).unwrap()))
        }
        Command::Search {
            common,
            model,
            candidates,
            bits,
            budget,
            seed,
            no_anchors,
            calib,
            calib_seqs,
            calib_len,
            out: out_path,
            csv,
            plan_out,
            sensitivity,
        } => {
            let model = load_model(&common, &model)?;
            let calib = load_calib(calib.as_deref(), seed, calib_seqs, calib_len, &model)?;
            let search = SearchConfig {
                num_candidates: candidates,
                bit_choices: bits.into_iter().map(bit_width).collect::<CliResult<_>>()?,
                memory_budget: budget,
                seed,
                include_uniform_anchors: !no_anchors,
            };
            let (best, report) = random_search(&search, &calib, &model)?;
            if let Some(p) = &out_path {
                write_file(p, report.to_json().as_bytes())?;
            }
            if let Some(p) = &csv {
                write_file(p, report.to_csv().as_bytes())?;
            }
            if let Some(p) = &plan_out {
                write_file(p, format!("{}\n", serde_json::to_string(&best).unwrap()).as_bytes())?;
            }
            let b = report.best();
            writeln!(out, "best_candidate {}", b.candidate_index).map_err(io)?;
            writeln!(out, "best_plan {}", serde_json::to_string(&best).unwrap()).map_err(io)?;
            writeln!(out, "score {}", b.score).map_err(io)?;
            writeln!(out, "memory_ratio {}", b.memory_ratio).map_err(io)?;
            if sensitivity {
                out.write_all(sensitivity_csv(&sensitivity_report(&report)).as_bytes()).map_err(io)?;
            }
            Ok(())
        }
        Command::Memory {
            common,
            layers,
            kv_heads,
            head_dim,
            plan,
            tokens,
        } => {
            let mut cfg = load_config(&common)?.model;
            let group = cfg.num_q_heads / cfg.num_kv_heads;
            if let Some(l) = layers {
                cfg.num_layers = l;
                if plan.is_none() {
                    cfg.plan = PrecisionPlan::uniform(l, cfg.plan.layer(0));
                }
            }
            if let Some(h) = kv_heads {
                cfg.num_kv_heads = h;
                cfg.num_q_heads = h * group;
            }
            if let Some(d) = head_dim {
                cfg.head_dim = d;
                cfg.rope.head_dim = d;
            }
            if let Some(p) = plan {
                cfg.plan = parse_plan(&p, cfg.num_layers)?;
            }
            cfg.validate()?;
            writeln!(out, "layer,bits,mean_term,deviation_term,metadata_term,ratio").map_err(io)?;
            for (i, l) in memory_breakdown(&cfg).iter().enumerate() {
                writeln!(
                    out,
                    "{i},{},{},{},{},{}",
                    l.bits.bits(),
                    l.mean_term,
                    l.deviation_term,
                    l.metadata_term,
                    l.ratio()
                )
                .map_err(io)?;
            }
            let ratio = match tokens {
                Some(t) => memory_ratio(&cfg, t, true),
                None => memory_ratio(&cfg, 1, false),
            };
            writeln!(out, "memory_ratio {ratio}").map_err(io)?;
            Ok(())
        }
        Command::Ablate {
            common,
            model,
            plan,
            uniform_bits,
            calib,
            calib_seqs,
            calib_len,
            seed,
            out: out_path,
        } => {
            let model = load_model(&common, &model)?;
            let cfg = model.cache_config();
            let plan = match plan {
                Some(p) => parse_plan(&p, cfg.num_layers)?,
                None => cfg.plan.clone(),
            };
            let uniform = PrecisionPlan::uniform(cfg.num_layers, bit_width(uniform_bits)?);
            let calib = load_calib(calib.as_deref(), seed, calib_seqs, calib_len, &model)?;
            let methods = [
                AblationMethod {
                    tag: MethodTag::Tada,
                    plan,
                },
                AblationMethod {
                    tag: MethodTag::TadaUniform,
                    plan: uniform.clone(),
                },
                AblationMethod {
                    tag: MethodTag::Direct,
                    plan: uniform,
                },
            ];
            let records = ablate_frobenius(&model, &calib, &methods)?;
            emit(out, out_path.as_deref(), &ablation_csv(&records))
        }
        Command::Selftest { common } => {
            load_config(&common)?;
            let results = run_selftest();
            let mut failed = 0;
            for r in &results {
                match &r.outcome {
                    Ok(()) => writeln!(out, "PASS {} ({} ms)", r.name, r.millis),
                    Err(e) => {
                        failed += 1;
                        writeln!(out, "FAIL {} ({} ms): {e}", r.name, r.millis)
                    }
                }
                .map_err(io)?;
            }
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} of {} checks failed", results.len())));
            }
            Ok(())
        }
        Command::Synth {
            common,
            model_seed,
            identical_heads,
            out: path,
        } => {
            let spec = if identical_heads {
                WeightSpec::identical_heads(model_seed)
            } else {
                WeightSpec::new(model_seed)
            };
            let model = ToyModel::synthetic(load_config(&common)?, &spec)?;
            write_file(&path, &save_weights(&model))
        }
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit
/// status.
pub fn cli_main<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let result = match Cli::try_parse_from(argv) {
        Ok(cli) => run(cli, out),
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let summary: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            Err(CliError::Usage(summary.join(" ").trim_start_matches("error: ").to_string()))
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let line = json!({"error": {"kind": e.kind(), "message": e.message()}});
            let _ = writeln!(err, "{line}");
            e.exit_code()
        }
    }
}
