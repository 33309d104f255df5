//! Run settings merged from command-line flags, a JSON config file and the
//! environment, in that order of precedence.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};

use survey_audit::bias::DEFAULT_BIAS_SAMPLES;
use survey_audit::discriminator::{DEFAULT_SEEDS, DEFAULT_TEST_FRACTION};
use survey_audit::generator::DEFAULT_RESPONDENTS;

/// Default permutation cap for locally scored models.
pub const DEFAULT_CAP: usize = 5000;
/// Default permutation cap for paid API models.
pub const OPENAI_CAP: usize = 50;
pub const ENV_PREFIX: &str = "SURVEY_AUDIT_";

/// Every option any subcommand understands. Unset fields fall through to
/// the next source.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Backend kind: synthetic, openai-completions or openai-chat.
    #[arg(long)]
    pub backend: Option<String>,
    /// Base URL of an OpenAI-compatible API, e.g. https://api.openai.com/v1.
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub top_logprobs: Option<usize>,
    #[arg(long)]
    pub requests_per_second: Option<f64>,
    /// JSONL fixture of recorded API exchanges.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    /// replay (fixture only), record (fixture, then live) or live.
    #[arg(long)]
    pub fixture_mode: Option<String>,
    /// Synthetic model specification (JSON).
    #[arg(long)]
    pub synthetic_spec: Option<PathBuf>,

    #[arg(long)]
    pub questionnaire: Option<PathBuf>,
    /// Comma-separated subset of question ids.
    #[arg(long)]
    pub questions: Option<String>,
    /// standard, chat, p1 .. p8 or interview.
    #[arg(long)]
    pub style: Option<String>,
    /// alphabetical, similar-frequency or a-i-swap.
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(long)]
    pub cap: Option<usize>,
    /// order or order-and-label.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub token_budget: Option<usize>,
    /// Also write tidy long-format tables for plotting.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub plot_data: Option<bool>,
    /// Also write every prompt sent to the backend.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub dump_prompts: Option<bool>,

    /// Randomized responses per question for the chi-square tests; 0 skips them.
    #[arg(long)]
    pub bias_samples: Option<usize>,
    /// Model answer distributions (JSON map of question id to probabilities).
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// Reference population table (CSV).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Weight reference rows by the WEIGHT column.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub weighted: Option<bool>,
    /// Compare against raw rather than order-adjusted model answers.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub raw: Option<bool>,
    /// Respondents to generate, or rows per side to discriminate.
    #[arg(long)]
    pub n: Option<usize>,
    /// raw or adjusted-per-step.
    #[arg(long)]
    pub adjustment: Option<String>,
    /// bullet-summary, qa-history or interview-history.
    #[arg(long)]
    pub sequential: Option<String>,
    /// Honor ask_if conditions while generating.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub skip_logic: Option<bool>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Synthetic (model-generated) table (CSV).
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    #[arg(long)]
    pub seeds: Option<usize>,
    /// gbdt or cell-majority.
    #[arg(long)]
    pub classifier: Option<String>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// dump-prompts: render every presentation in the plan, not just the first.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub all_presentations: Option<bool>,
}

macro_rules! merge {
    ($hi:expr, $lo:expr; $($f:ident),* $(,)?) => {
        Settings { $($f: $hi.$f.or($lo.$f)),* }
    };
}

impl Settings {
    /// Fields of `self` win over those of `lower`.
    pub fn over(self, lower: Settings) -> Settings {
        merge!(self, lower;
            backend, base_url, model, api_key_env, top_logprobs, requests_per_second,
            fixture, fixture_mode, synthetic_spec, questionnaire, questions, style, labels,
            cap, mode, seed, output_dir, cache_dir, workers, token_budget, plot_data,
            dump_prompts, bias_samples, responses, reference, weighted, raw, n, adjustment,
            sequential, skip_logic, batch_size, synthetic, seeds, classifier, trees,
            max_depth, learning_rate, test_fraction, all_presentations,
        )
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// `SURVEY_AUDIT_<FIELD>` variables, e.g. `SURVEY_AUDIT_CACHE_DIR`.
    pub fn from_env() -> anyhow::Result<Settings> {
        Self::from_vars(std::env::vars())
    }

    pub fn from_vars(vars: impl IntoIterator<Item = (String, String)>) -> anyhow::Result<Settings> {
        let mut map = serde_json::Map::new();
        let fields = serde_json::to_value(Settings::default())?;
        let known: Vec<String> = fields.as_object().expect("struct").keys().cloned().collect();
        for (k, v) in vars {
            let Some(name) = k.strip_prefix(ENV_PREFIX) else { continue };
            let field = name.to_ascii_lowercase();
            if !known.contains(&field) {
                continue;
            }
            // Numbers and booleans parse as JSON; anything else is a string.
            let value = serde_json::from_str::<serde_json::Value>(&v)
                .ok()
                .filter(|j| j.is_number() || j.is_boolean())
                .unwrap_or(serde_json::Value::String(v));
            map.insert(field, value);
        }
        serde_json::from_value(serde_json::Value::Object(map)).context("reading SURVEY_AUDIT_* variables")
    }

    pub fn require_questionnaire(&self) -> anyhow::Result<&Path> {
        match &self.questionnaire {
            Some(p) => Ok(p),
            None => bail!("--questionnaire is required"),
        }
    }

    pub fn backend_kind(&self) -> &str {
        self.backend.as_deref().unwrap_or("synthetic")
    }

    pub fn is_openai(&self) -> bool {
        self.backend_kind().starts_with("openai")
    }

    pub fn cap(&self) -> usize {
        self.cap.unwrap_or(if self.is_openai() { OPENAI_CAP } else { DEFAULT_CAP })
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn bias_samples(&self) -> usize {
        self.bias_samples.unwrap_or(DEFAULT_BIAS_SAMPLES)
    }

    pub fn n_respondents(&self) -> usize {
        self.n.unwrap_or(DEFAULT_RESPONDENTS)
    }

    pub fn seeds(&self) -> usize {
        self.seeds.unwrap_or(DEFAULT_SEEDS)
    }

    pub fn test_fraction(&self) -> f64 {
        self.test_fraction.unwrap_or(DEFAULT_TEST_FRACTION)
    }

    pub fn flag(v: Option<bool>) -> bool {
        v.unwrap_or(false)
    }
}
