//! Command-line arguments.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Serialize, Serializer};

use saliency_audit::explain::Method;

#[derive(Debug, Parser)]
#[command(
    name = "saliency-audit",
    version,
    about = "Train toy classifiers, explain them and run saliency sanity checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Attribute one test example.
    Explain(ExplainCmd),
    /// Cascading parameter randomization.
    SanityCascade(CascadeArgs),
    /// Train on true and on randomized labels and compare explanations.
    SanityData(DataRandArgs),
    /// Compare relu/softplus x max/lse variants of a trained image model.
    Sweep(SweepArgs),
    /// Infidelity and max-sensitivity of one attribution.
    Metrics(MetricsArgs),
}

/// Options shared by every subcommand; not part of the config echo.
#[derive(Debug, Clone, Args)]
pub struct Output {
    /// Master seed. The SALIENCY_AUDIT_SEED environment variable overrides it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run record path (JSON); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the run record flattened to `path,value` CSV rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Include wall-clock timings in the record (breaks byte-identical reruns).
    #[arg(long)]
    pub timing: bool,
}

/// Where examples come from: `digits`, `text`, `mnist:DIR` or `tsv:PATH`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Digits,
    Text,
    Mnist(PathBuf),
    Tsv(PathBuf),
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "digits" => Ok(DataSource::Digits),
            None if s == "text" => Ok(DataSource::Text),
            Some(("mnist", dir)) if !dir.is_empty() => Ok(DataSource::Mnist(dir.into())),
            Some(("tsv", path)) if !path.is_empty() => Ok(DataSource::Tsv(path.into())),
            _ => Err(format!("unknown data source `{s}` (digits, text, mnist:DIR, tsv:PATH)")),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Digits => write!(f, "digits"),
            DataSource::Text => write!(f, "text"),
            DataSource::Mnist(p) => write!(f, "mnist:{}", p.display()),
            DataSource::Tsv(p) => write!(f, "tsv:{}", p.display()),
        }
    }
}

impl Serialize for DataSource {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// digits | text | mnist:DIR | tsv:PATH
    #[arg(long, default_value = "digits")]
    pub data: DataSource,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Training examples (default 2000 for images, 800 for text).
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub n_test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationArg {
    Relu,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingArg {
    Max,
    Lse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    /// Softplus sharpness.
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    /// Image models only.
    #[arg(long, value_enum, default_value_t = PoolingArg::Max)]
    pub pooling: PoolingArg,
    /// LSE pooling temperature.
    #[arg(long, default_value_t = 10.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantArg {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantsArg {
    Local,
    Global,
    Both,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(_) => Err(format!("`{s}` is not a positive integer")),
    }
}

/// Parses `saliency`, `input_x_gradient`, `ig`, `gradient_shap`,
/// `guided_backprop`, `smoothgrad` or `<base>_sg`.
pub fn parse_method(s: &str) -> Result<Method, String> {
    if let Some(base) = s.strip_suffix("_sg") {
        return Ok(Method::SmoothGrad {
            base: Box::new(parse_method(base)?),
        });
    }
    match s {
        "saliency" => Ok(Method::Saliency),
        "input_x_gradient" => Ok(Method::InputXGradient),
        "ig" | "integrated_gradients" => Ok(Method::IntegratedGradients),
        "gradient_shap" => Ok(Method::GradientShap),
        "guided_backprop" => Ok(Method::GuidedBackprop),
        "smoothgrad" => Ok(Method::SmoothGrad {
            base: Box::new(Method::Saliency),
        }),
        _ => Err(format!(
            "unknown method `{s}` (saliency, input_x_gradient, ig, gradient_shap, guided_backprop, smoothgrad, <base>_sg)"
        )),
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MethodArgs {
    #[arg(long, default_value = "ig", value_parser = parse_method)]
    pub method: Method,
    /// Integration steps for IG.
    #[arg(long, default_value_t = 50, value_parser = positive)]
    pub steps: usize,
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub sg_samples: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sg_sigma: f64,
    #[arg(long, default_value_t = 50, value_parser = positive)]
    pub shap_samples: usize,
    #[arg(long, default_value_t = 0.0)]
    pub shap_sigma: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Checkpoint to write.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub arch: ModelArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExplainCmd {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long, value_enum, default_value_t = VariantArg::Global)]
    pub variant: VariantArg,
    /// Test-split example to explain.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Class to explain; the predicted class when omitted.
    #[arg(long)]
    pub target: Option<usize>,
    /// Write the grayscale map of an image attribution as PGM.
    #[arg(long)]
    #[serde(skip)]
    pub pgm: Option<PathBuf>,
    /// Write token heat of a text attribution as HTML (and CSV next to it).
    #[arg(long)]
    #[serde(skip)]
    pub html: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HarnessMetricArgs {
    /// Gaussian infidelity sigma.
    #[arg(long, default_value_t = 0.03)]
    pub sigma: f64,
    #[arg(long, default_value_t = 20, value_parser = positive)]
    pub infidelity_samples: usize,
    /// Skip max-sensitivity (it re-runs the explainer per sample).
    #[arg(long)]
    pub no_sensitivity: bool,
    #[arg(long, default_value_t = 0.02)]
    pub sens_radius: f64,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub sens_samples: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CascadeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long, value_enum, default_value_t = VariantsArg::Both)]
    pub variant: VariantsArg,
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub trials: usize,
    /// Number of class-balanced test inputs.
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub inputs: usize,
    /// Randomize one layer at a time instead of cascading.
    #[arg(long)]
    pub independent: bool,
    #[command(flatten)]
    pub metrics: HarnessMetricArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelArg {
    Uniform,
    Identity,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataRandArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub arch: ModelArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long, value_enum, default_value_t = VariantsArg::Both)]
    pub variant: VariantsArg,
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub inputs: usize,
    #[arg(long, value_enum, default_value_t = RelabelArg::Uniform)]
    pub relabel: RelabelArg,
    #[command(flatten)]
    pub metrics: HarnessMetricArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 50, value_parser = positive)]
    pub steps: usize,
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub inputs: usize,
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 10.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub slice_dims: usize,
    #[arg(long, default_value_t = 101, value_parser = clap::value_parser!(u64).range(3..))]
    pub slice_samples: u64,
    #[command(flatten)]
    pub metrics: HarnessMetricArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PerturbationArg {
    Gaussian,
    LinfUniform,
    BaselineDiff,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MetricsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long, value_enum, default_value_t = VariantArg::Global)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long, value_enum, default_value_t = PerturbationArg::Gaussian)]
    pub perturbation: PerturbationArg,
    /// Gaussian sigma, or half-width for linf_uniform.
    #[arg(long, default_value_t = 0.03)]
    pub scale: f64,
    #[arg(long, default_value_t = 20, value_parser = positive)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.02)]
    pub sens_radius: f64,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub sens_samples: usize,
    /// Divide max-sensitivity by the attribution norm.
    #[arg(long)]
    pub normalize: bool,
    /// Include every sampled perturbation in the record.
    #[arg(long)]
    pub log_samples: bool,
    #[command(flatten)]
    #[serde(skip)]
    pub output: Output,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names() {
        assert_eq!(parse_method("ig").unwrap(), Method::IntegratedGradients);
        assert_eq!(
            parse_method("ig_sg").unwrap(),
            Method::SmoothGrad {
                base: Box::new(Method::IntegratedGradients)
            }
        );
        assert!(parse_method("deeplift").is_err());
        for m in [
            "saliency",
            "input_x_gradient",
            "gradient_shap",
            "guided_backprop",
            "saliency_sg",
        ] {
            assert_eq!(parse_method(m).unwrap().label(), m);
        }
    }

    #[test]
    fn data_sources() {
        assert_eq!("digits".parse::<DataSource>().unwrap(), DataSource::Digits);
        assert_eq!(
            "mnist:/tmp/m".parse::<DataSource>().unwrap(),
            DataSource::Mnist("/tmp/m".into())
        );
        assert!("mnist:".parse::<DataSource>().is_err());
        assert!("images".parse::<DataSource>().is_err());
    }
}
