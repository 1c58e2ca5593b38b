//! `scaleprop`: create, quantize, run and analyse integer-only toy transformers.
//!
//! Reports go to stdout as tab-separated `tag, layer, metric, value` lines; lines
//! starting with `#` are comments. Exit codes: 0 success, 2 validation error, 3 I/O
//! error.

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use scaleprop::analysis::{
    bit_sweep, decode_trace, module_ablation, precision_loss, speedup_estimate,
    storage_report, storage_report_files,
};
use scaleprop::format::ModelFile;
use scaleprop::transformer::{random_input, FloatModel, IntegerModel, ModelConfig, ReferenceModel};
use scaleprop::{dequantize, ModuleSet, Precision, RationalTensor, ScaleGranularity, Session};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] scaleprop::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Core(scaleprop::Error::Io(_)) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "scaleprop", version, about = "Integer-only transformer inference by scale propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random FP32 toy model (and optionally a random input).
    Init(InitArgs),
    /// Quantize an FP32 model file; prints the storage report.
    Quantize(QuantizeArgs),
    /// De-quantize an integer model file back to FP32.
    Dequantize(DequantizeArgs),
    /// Run the integer forward pass on an input tensor file.
    Infer(InferArgs),
    /// Per-module precision loss, bit-width sweep or module ablation.
    ///
    /// Output lines: `<module>\t<layer|->\tmse\t<value>` for the precision report,
    /// `sweep\t<bits>\tmse|relative\t<value>` for `--sweep-bits`, and
    /// `ablate\t-\tmodules|mse|relative\t<value>` for `--ablate`. MSE is a proxy for
    /// task-metric deltas.
    Compare(CompareArgs),
    /// Storage accounting and the estimated end-to-end speed-up.
    Report(ReportArgs),
}

#[derive(Args)]
struct ModelOpts {
    /// Polynomial attention degree (not stored in model files).
    #[arg(long, default_value_t = 3)]
    degree: u32,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    ffn_width: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    degree: u32,
    /// Overrides the random polynomial bias of every layer.
    #[arg(long, allow_hyphen_values = true)]
    poly_bias: Option<f32>,
    /// Overrides the random polynomial delta of every layer.
    #[arg(long, allow_hyphen_values = true)]
    poly_delta: Option<f32>,
    /// Granularity recorded in the file header.
    #[arg(long, default_value = "row")]
    granularity: ScaleGranularity,
    /// Also write a random `seq-len x d-model` input tensor here.
    #[arg(long)]
    input_out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
}

#[derive(Args)]
struct QuantizeArgs {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    precision: u32,
    /// Activation scale granularity: row, bt (batch-time) or b (batch).
    #[arg(long, default_value = "row")]
    granularity: ScaleGranularity,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Args)]
struct DequantizeArgs {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Args)]
struct InferArgs {
    model_path: PathBuf,
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write the audit log as TSV to this path (`-` for stdout).
    #[arg(long)]
    audit: Option<String>,
    /// Store the output as FP32 instead of payload + scale.
    #[arg(long)]
    dequantize_output: bool,
    /// Continue through the output projection to vocabulary logits.
    #[arg(long)]
    logits: bool,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum Flavor {
    Poly,
    Softmax,
}

#[derive(Args)]
struct CompareArgs {
    model_path: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Original FP32 model; defaults to the de-quantized twin of the integer model.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Reference attention and norm flavor for the precision report.
    #[arg(long, value_enum, default_value = "poly")]
    flavor: Flavor,
    /// Re-quantize the reference at each precision in `a..b` (inclusive).
    #[arg(long)]
    sweep_bits: Option<String>,
    /// Modules to run on the integer path: `none`, `all` or a list like `ln,res`.
    #[arg(long)]
    ablate: Option<String>,
    /// Granularity used by `--sweep-bits`.
    #[arg(long, default_value = "row")]
    granularity: ScaleGranularity,
    /// Also write the results as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    model: ModelOpts,
}

#[derive(Args)]
struct ReportArgs {
    model_path: PathBuf,
    input: PathBuf,
    /// FP32 model file to measure against; defaults to the serialized twin.
    #[arg(long)]
    fp32: Option<PathBuf>,
    /// Assumed integer matmul speed-up over FP32.
    #[arg(long, default_value_t = 6.0)]
    factor: f64,
    /// Greedy decoding steps; 0 runs a single forward pass over the input.
    #[arg(long, default_value_t = 0)]
    steps: usize,
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    model: ModelOpts,
}

fn read_file(path: &Path) -> Result<ModelFile> {
    ModelFile::read(path).map_err(|e| match e {
        scaleprop::Error::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        e => e.into(),
    })
}

fn write_file(file: &ModelFile, path: &Path) -> Result<()> {
    file.write(path).map_err(|e| match e {
        scaleprop::Error::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        e => e.into(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_float_model(path: &Path, degree: u32) -> Result<FloatModel> {
    let file = read_file(path)?;
    if file.is_integer() {
        return Err(CliError::Invalid(format!("{} is not an FP32 model", path.display())));
    }
    Ok(file.to_float_model(degree)?)
}

fn read_integer_model(path: &Path, degree: u32) -> Result<IntegerModel> {
    let file = read_file(path)?;
    if !file.is_integer() {
        return Err(CliError::Invalid(format!(
            "{} is an FP32 model; quantize it first",
            path.display()
        )));
    }
    Ok(file.to_integer_model(degree)?)
}

fn read_input(path: &Path, d_model: usize) -> Result<RationalTensor> {
    let x = read_file(path)?.first_tensor()?;
    match x.shape() {
        [_, d] if *d == d_model => Ok(x),
        shape => Err(CliError::Invalid(format!(
            "input {} has shape {shape:?}, expected [T, {d_model}]",
            path.display()
        ))),
    }
}

fn parse_bits(spec: &str) -> Result<RangeInclusive<u32>> {
    let bad = || CliError::Invalid(format!("--sweep-bits expects a..b, got {spec:?}"));
    let (a, b) = spec.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let (a, b): (u32, u32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    Precision::new(a)?;
    Precision::new(b)?;
    if a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

fn init(args: InitArgs) -> Result<()> {
    let config = ModelConfig {
        d_model: args.d_model,
        heads: args.heads,
        ffn_width: args.ffn_width,
        layers: args.layers,
        vocab: args.vocab,
        degree: args.degree,
    };
    let mut model = FloatModel::random(config, args.seed)?;
    for layer in &mut model.layers {
        if let Some(b) = args.poly_bias {
            layer.poly.bias = b;
        }
        if let Some(d) = args.poly_delta {
            layer.poly.delta = d;
        }
    }
    model.validate()?;
    write_file(&ModelFile::from_float(&model, args.granularity), &args.out)?;
    if let Some(path) = &args.input_out {
        let x = random_input(args.seq_len, args.d_model, args.seed)?;
        write_file(&ModelFile::real_tensor("input", &x), path)?;
    }
    Ok(())
}

fn quantize(args: QuantizeArgs) -> Result<()> {
    let prec = Precision::new(args.precision)?;
    let input = read_file(&args.input)?;
    if input.is_integer() {
        return Err(CliError::Invalid(format!("{} is already quantized", args.input.display())));
    }
    let model = input.to_float_model(args.model.degree)?;
    let out = ModelFile::from_integer(&model.quantize(prec, args.granularity)?);
    write_file(&out, &args.out)?;
    print!("{}", storage_report_files(&input, &out)?.to_tsv());
    Ok(())
}

fn dequantize_cmd(args: DequantizeArgs) -> Result<()> {
    let model = read_integer_model(&args.input, args.model.degree)?;
    write_file(&ModelFile::from_float(&model.dequantize(), model.granularity), &args.out)
}

fn infer(args: InferArgs) -> Result<()> {
    let model = read_integer_model(&args.model_path, args.model.degree)?;
    let x = read_input(&args.input, model.config.d_model)?;
    let xq = model.quantize_input(&x)?;
    let mut s = Session::new(model.precision);
    let mut out = model.forward(&mut s, &xq)?;
    if args.logits {
        out = model.logits(&mut s, &out)?;
    }
    let file = if args.dequantize_output {
        ModelFile::real_tensor("output", &dequantize(&out))
    } else {
        ModelFile::scaled_tensor("output", &out)
    };
    write_file(&file, &args.out)?;
    match args.audit.as_deref() {
        Some("-") => print!("{}", s.log().to_tsv()),
        Some(path) => write_text(Path::new(path), &s.log().to_tsv())?,
        None => {}
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let degree = args.model.degree;
    let model = read_integer_model(&args.model_path, degree)?;
    let inputs = args
        .inputs
        .iter()
        .map(|p| read_input(p, model.config.d_model))
        .collect::<Result<Vec<_>>>()?;
    let float = match &args.reference {
        Some(path) => read_float_model(path, degree)?,
        None => model.dequantize(),
    };
    let mut doc = json!({ "metric": "mse (proxy for task-metric deltas)" });
    let mut text = String::from("# tag\tlayer\tmetric\tvalue; MSE is a proxy for task-metric deltas\n");
    if args.sweep_bits.is_none() && args.ablate.is_none() {
        let reference = match args.flavor {
            Flavor::Poly => ReferenceModel::poly(float.clone()),
            Flavor::Softmax => ReferenceModel::softmax(float.clone()),
        };
        let report = precision_loss(&model, &reference, &inputs)?;
        text.push_str(&report.to_tsv());
        doc["precision_loss"] = json!(report.entries);
    }
    if let Some(spec) = &args.sweep_bits {
        let points = bit_sweep(&float, &inputs, parse_bits(spec)?, args.granularity)?;
        for p in &points {
            text.push_str(&format!("sweep\t{}\tmse\t{:e}\n", p.bits, p.mse));
            text.push_str(&format!("sweep\t{}\trelative\t{:e}\n", p.bits, p.relative));
        }
        doc["sweep"] = json!(points);
    }
    if let Some(csv) = &args.ablate {
        let set = ModuleSet::parse(csv)?;
        let result = module_ablation(&model, &inputs, set)?;
        let names: Vec<&str> = result.modules.iter().map(|m| m.name()).collect();
        let names = if names.is_empty() { "none".to_string() } else { names.join(",") };
        text.push_str(&format!("ablate\t-\tmodules\t{names}\n"));
        text.push_str(&format!("ablate\t-\tmse\t{:e}\n", result.mse));
        text.push_str(&format!("ablate\t-\trelative\t{:e}\n", result.relative));
        doc["ablation"] = json!(result);
    }
    print!("{text}");
    if let Some(path) = &args.json {
        write_text(path, &serde_json::to_string_pretty(&doc).expect("serializable report"))?;
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let model = read_integer_model(&args.model_path, args.model.degree)?;
    let x = read_input(&args.input, model.config.d_model)?;
    let storage = match &args.fp32 {
        Some(path) => storage_report_files(&read_file(path)?, &read_file(&args.model_path)?)?,
        None => storage_report(&model)?,
    };
    let log = if args.steps == 0 {
        let mut s = Session::new(model.precision);
        let xq = s.quantize(&x, model.granularity)?;
        let h = model.forward(&mut s, &xq)?;
        model.logits(&mut s, &h)?;
        s.into_log()
    } else {
        decode_trace(&model, &x, args.steps)?.log
    };
    let speedup = speedup_estimate(&log, args.factor)?;
    print!("{}{}", storage.to_tsv(), speedup.to_tsv());
    if let Some(path) = &args.json {
        let doc = json!({ "storage": storage, "speedup": speedup });
        write_text(path, &serde_json::to_string_pretty(&doc).expect("serializable report"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init(a) => init(a),
        Command::Quantize(a) => quantize(a),
        Command::Dequantize(a) => dequantize_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Compare(a) => compare(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
