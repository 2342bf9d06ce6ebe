use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dycklab::precision::DEFAULT_ROUNDING;
use dycklab::NumericConfig;

#[derive(Debug, Parser)]
#[command(
    name = "dycklab",
    version,
    about = "Hand-weighted transformers for bounded-depth Dyck languages"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a corpus of Dyck_{k,D} strings.
    GenCorpus(GenCorpusArgs),
    /// Check a constructed network against the oracle.
    Verify(VerifyArgs),
    /// Accuracy over a grid of fixed-point widths and lengths.
    Sweep(SweepArgs),
    /// Write a constructed network's weights as JSON.
    ExportWeights(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    /// Interior length range and token budget.
    pub fn defaults(self) -> (usize, usize, usize) {
        match self {
            Split::Train => (1, 700, 2_000_000),
            Split::Validation => (1, 700, 200_000),
            Split::Test => (701, 1400, 1_000_000),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub k: u32,
    #[arg(long = "D")]
    pub depth: u32,
    /// Picks default lengths and token count.
    #[arg(long, value_enum, default_value = "train")]
    pub split: Split,
    /// Shortest interior length.
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Longest interior length.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Stop once this many tokens, markers included, are drawn.
    #[arg(long)]
    pub num_tokens: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Recognize,
    Generate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Precision {
    Float64,
    Fixed(u32),
}

impl Precision {
    pub fn config(self) -> NumericConfig {
        match self {
            Precision::Float64 => NumericConfig::float64(),
            Precision::Fixed(f) => NumericConfig::fixed(f).with_rounding(DEFAULT_ROUNDING),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::Float64 => write!(f, "f64"),
            Precision::Fixed(bits) => write!(f, "fp:{bits}"),
        }
    }
}

pub fn parse_precision(s: &str) -> Result<Precision, String> {
    if s == "f64" {
        return Ok(Precision::Float64);
    }
    let bits = s
        .strip_prefix("fp:")
        .ok_or_else(|| format!("expected `f64` or `fp:<bits>`, got `{s}`"))?;
    match bits.parse::<u32>() {
        Ok(b) if (1..=52).contains(&b) => Ok(Precision::Fixed(b)),
        _ => Err(format!(
            "fractional bits must be an integer in 1..=52, got `{bits}`"
        )),
    }
}

/// Comma-separated integers and inclusive ranges `a..=b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct List(pub Vec<u64>);

pub fn parse_list(s: &str) -> Result<List, String> {
    let num = |x: &str| {
        x.trim()
            .parse::<u64>()
            .map_err(|_| format!("`{x}` is not a number"))
    };
    let mut out = Vec::new();
    for item in s.split(',') {
        match item.split_once("..=") {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty range `{item}`"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(item)?),
        }
    }
    Ok(List(out))
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub mode: Mode,
    /// Taken from the corpus header when omitted.
    #[arg(long)]
    pub k: Option<u32>,
    #[arg(long = "D")]
    pub depth: Option<u32>,
    /// Defaults to the longest string under test.
    #[arg(long)]
    pub n_max: Option<usize>,
    #[arg(long, group = "source")]
    pub corpus: Option<PathBuf>,
    /// Every interior string up to this length.
    #[arg(long, group = "source")]
    pub exhaustive: Option<usize>,
    /// Sampled members and mutated non-members of exactly this length.
    #[arg(long, group = "source")]
    pub n: Option<usize>,
    /// Strings drawn with `--n`.
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "f64", value_parser = parse_precision)]
    pub precision: Precision,
    /// Also write the run report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum, default_value = "recognize")]
    pub mode: Mode,
    #[arg(long)]
    pub k: u32,
    #[arg(long = "D")]
    pub depth: u32,
    /// Fractional bit widths, e.g. `4..=12` or `4,8,16`.
    #[arg(long = "p", value_parser = parse_list)]
    pub p_values: List,
    /// Total lengths, e.g. `64,128,256`.
    #[arg(long = "n", value_parser = parse_list)]
    pub n_values: List,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Soft attention weights round to multiples of `1/(C n)`.
    #[arg(long, default_value_t = DEFAULT_ROUNDING)]
    pub rounding: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// JSONL file for failure examples; defaults to the CSV path with a
    /// `.failures.jsonl` extension.
    #[arg(long)]
    pub failures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub k: u32,
    #[arg(long = "D")]
    pub depth: u32,
    #[arg(long)]
    pub n_max: usize,
    #[arg(long)]
    pub out: PathBuf,
}
