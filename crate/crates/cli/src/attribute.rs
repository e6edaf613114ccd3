use anyhow::{bail, Context, Result};
use attrib_core::attribution::{attribute, AttributionConfig, DeepLiftRule, LrpRule, Method};
use attrib_core::forward::OutputSelection;
use attrib_core::model::{
    load_dataset_path, parse_model_with_precision, DataFormat, Dataset, LayerKind, ModelGraph,
};
use attrib_core::results::{
    to_array, to_records, write_arrays_json, write_records_csv, write_records_jsonl,
};
use attrib_core::tensor::Precision;
use clap::ArgAction;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum RecordFormat {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum DataFormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

#[derive(clap::Args)]
pub struct Args {
    /// Model file (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Input data (.csv or .json). Optional only for global connection weights.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Data format. Default: from the file extension.
    #[arg(long = "data-format", value_enum)]
    pub data_format: Option<DataFormatArg>,
    /// gradient, smoothgrad, lrp, deeplift or connection_weights.
    #[arg(long)]
    pub method: String,
    /// LRP rule per layer kind, e.g. `Dense=alpha_beta`. Repeatable.
    #[arg(long = "rule-name", value_name = "KIND=RULE")]
    pub rule_name: Vec<String>,
    /// Parameter of the LRP rule per layer kind, e.g. `Dense=2`. Repeatable.
    #[arg(long = "rule-param", value_name = "KIND=VALUE")]
    pub rule_param: Vec<String>,
    /// Outputs to explain: 1-based node indices of the first output layer
    /// (`1,3`) or `layer:index` entries. Default: every node of the first
    /// output layer.
    #[arg(long = "output-idx")]
    pub output_idx: Option<String>,
    /// Multiply by the input (gradient, smoothgrad, connection_weights).
    #[arg(long = "times-input")]
    pub times_input: bool,
    /// SmoothGrad sample count.
    #[arg(long)]
    pub n: Option<usize>,
    /// SmoothGrad noise level as a fraction of the input range.
    #[arg(long = "noise-level")]
    pub noise_level: Option<f64>,
    /// SmoothGrad random seed.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// DeepLift rule: rescale or reveal_cancel.
    #[arg(long = "deeplift-rule")]
    pub deeplift_rule: Option<String>,
    /// DeepLift reference input (one instance, or one per data instance).
    #[arg(long = "x-ref")]
    pub x_ref: Option<PathBuf>,
    /// Route relevance through max pooling to the maximum only; `false`
    /// treats max pooling as average pooling.
    #[arg(long = "winner-takes-all", default_value_t = true, action = ArgAction::Set)]
    pub winner_takes_all: bool,
    /// Explain outputs before their activation function.
    #[arg(long = "ignore-last-act", default_value_t = true, action = ArgAction::Set)]
    pub ignore_last_act: bool,
    /// Whether image data has the channel axis first.
    #[arg(long = "channels-first", default_value_t = true, action = ArgAction::Set)]
    pub channels_first: bool,
    #[arg(long, value_enum, default_value = "single")]
    pub precision: PrecisionArg,
    /// Record file; `-` writes to standard output.
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
    /// Record format. Default: from the extension of `--out`, else CSV.
    #[arg(long, value_enum)]
    pub format: Option<RecordFormat>,
    /// Also write the named arrays as JSON.
    #[arg(long = "array-json")]
    pub array_json: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<LayerKind> {
    LayerKind::ALL
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(s))
        .with_context(|| format!("unknown layer kind `{s}`"))
}

fn split_pair(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .with_context(|| format!("expected KIND=VALUE, got `{s}`"))
}

/// Builds the per-kind rule map from repeated `--rule-name` and
/// `--rule-param` flags.
pub fn rule_map(names: &[String], params: &[String]) -> Result<BTreeMap<LayerKind, LrpRule>> {
    let mut param_map = BTreeMap::new();
    for p in params {
        let (k, v) = split_pair(p)?;
        let v: f64 = v
            .parse()
            .with_context(|| format!("invalid rule parameter `{v}`"))?;
        if param_map.insert(parse_kind(k)?, v).is_some() {
            bail!("rule parameter for {k} given twice");
        }
    }
    let mut rules = BTreeMap::new();
    for n in names {
        let (k, v) = split_pair(n)?;
        let kind = parse_kind(k)?;
        let rule = LrpRule::from_name(v, param_map.remove(&kind))?;
        if rules.insert(kind, rule).is_some() {
            bail!("rule for {k} given twice");
        }
    }
    if let Some(kind) = param_map.keys().next() {
        bail!("--rule-param for {kind} needs a matching --rule-name");
    }
    Ok(rules)
}

fn load_data(path: &Path, args: &Args, graph: &ModelGraph) -> Result<Dataset> {
    let format = args.data_format.map(|f| match f {
        DataFormatArg::Csv => DataFormat::Csv,
        DataFormatArg::Json => DataFormat::Json,
    });
    load_dataset_path(path, format, args.channels_first, graph)
        .with_context(|| format!("reading `{}`", path.display()))
}

/// Rejects flags that the chosen method does not read.
fn check_flags(args: &Args, method: Method) -> Result<()> {
    let only = |set: bool, flag: &str, allowed: &[Method]| -> Result<()> {
        if set && !allowed.contains(&method) {
            let names: Vec<&str> = allowed.iter().map(|m| m.name()).collect();
            bail!("{flag} applies to {} only", names.join(", "));
        }
        Ok(())
    };
    only(
        !args.rule_name.is_empty() || !args.rule_param.is_empty(),
        "--rule-name/--rule-param",
        &[Method::Lrp],
    )?;
    only(
        args.n.is_some() || args.noise_level.is_some(),
        "--n/--noise-level",
        &[Method::SmoothGrad],
    )?;
    only(
        args.deeplift_rule.is_some() || args.x_ref.is_some(),
        "--deeplift-rule/--x-ref",
        &[Method::DeepLift],
    )?;
    only(
        args.times_input,
        "--times-input",
        &[
            Method::Gradient,
            Method::SmoothGrad,
            Method::ConnectionWeights,
        ],
    )?;
    if args.data.is_none() && !(method == Method::ConnectionWeights && !args.times_input) {
        bail!(
            "--data is required for {}{}",
            method.name(),
            if args.times_input {
                " with --times-input"
            } else {
                ""
            }
        );
    }
    Ok(())
}

fn open_out(path: &Path) -> Result<Box<dyn Write>> {
    if path == Path::new("-") {
        Ok(Box::new(BufWriter::new(std::io::stdout().lock())))
    } else {
        let f = File::create(path).with_context(|| format!("creating `{}`", path.display()))?;
        Ok(Box::new(BufWriter::new(f)))
    }
}

pub fn run(args: &Args) -> Result<()> {
    let method: Method = args.method.parse()?;
    check_flags(args, method)?;
    let precision = match args.precision {
        PrecisionArg::Single => Precision::Single,
        PrecisionArg::Double => Precision::Double,
    };
    let text = std::fs::read_to_string(&args.model)
        .with_context(|| format!("reading `{}`", args.model.display()))?;
    let graph = parse_model_with_precision(&text, precision)?;
    let data = args
        .data
        .as_deref()
        .map(|p| load_data(p, args, &graph))
        .transpose()?;
    let selection = match &args.output_idx {
        Some(s) => OutputSelection::parse(&graph, s, args.ignore_last_act)?,
        None => OutputSelection::first_output(&graph, args.ignore_last_act)?,
    };

    let mut config = AttributionConfig::new(method, selection);
    config.times_input = args.times_input;
    config.seed = args.seed;
    config.winner_takes_all = args.winner_takes_all;
    config.rules = rule_map(&args.rule_name, &args.rule_param)?;
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(l) = args.noise_level {
        config.noise_level = l;
    }
    if let Some(r) = &args.deeplift_rule {
        config.deeplift_rule = r.parse::<DeepLiftRule>()?;
    }
    if let Some(p) = &args.x_ref {
        config.x_ref = Some(load_data(p, args, &graph)?);
    }

    let result = attribute(&graph, data.as_ref(), &config)?;
    let records = to_records(&result);
    let format =
        args.format
            .unwrap_or_else(|| match args.out.extension().and_then(|e| e.to_str()) {
                Some("jsonl") | Some("ndjson") => RecordFormat::Jsonl,
                _ => RecordFormat::Csv,
            });
    let mut out = open_out(&args.out)?;
    match format {
        RecordFormat::Csv => write_records_csv(&records, &mut out)?,
        RecordFormat::Jsonl => write_records_jsonl(&records, &mut out)?,
    }
    out.flush()?;
    if let Some(p) = &args.array_json {
        let f = File::create(p).with_context(|| format!("creating `{}`", p.display()))?;
        write_arrays_json(&to_array(&result), BufWriter::new(f))?;
    }
    eprintln!(
        "{}: {} instance(s), {} output(s), {} record(s)",
        result.method,
        result.batch_size(),
        result.outputs.len(),
        records.len()
    );
    Ok(())
}
