//! Sequential synthetic respondents.
//!
//! Each respondent answers the questionnaire in order. Every step renders the
//! next question with the respondent's earlier answers in context, gets the
//! model's answer distribution and samples one answer from it.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::ReferenceTable;
use crate::backend::{query_slot_distribution, Backend, BackendDescriptor};
use crate::bias::sample_index;
use crate::error::{Error, Result};
use crate::prompt::{
    check_token_budget, plan_presentations, render_sequential_prompt, LabelSet, Presentation,
    PresentationPlan, PriorAnswer, PromptStyle, RandomizationMode, TokenCounter,
    WhitespaceTokenCounter, DEFAULT_TOKEN_BUDGET,
};
use crate::questionnaire::{Question, Questionnaire, MISSING};

/// Respondents per generation run for openly available models.
pub const DEFAULT_RESPONDENTS: usize = 100_000;
/// Respondents per generation run for the most expensive API models.
pub const EXPENSIVE_MODEL_RESPONDENTS: usize = 500;
/// Per-step permutation cap when answers are adjusted during generation.
pub const DEFAULT_STEP_CAP: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjustmentMode {
    /// One rendering per step in the questionnaire's own choice order.
    #[default]
    Raw,
    /// Each step averages over a capped permutation plan before sampling.
    AdjustedPerStep,
}

impl std::str::FromStr for AdjustmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "adjusted-per-step" | "adjusted" => Ok(Self::AdjustedPerStep),
            other => Err(Error::InvalidArgument(format!("unknown adjustment mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n: usize,
    pub style: PromptStyle,
    pub labels: LabelSet,
    pub adjustment: AdjustmentMode,
    pub cap: usize,
    pub seed: u64,
    pub workers: usize,
    /// Rows computed between checkpoint writes.
    pub batch_size: usize,
    /// Honor `ask_if` conditions; otherwise every question is asked.
    pub apply_skip_logic: bool,
    pub token_budget: usize,
    /// Attempts per row before a backend failure is fatal.
    pub row_attempts: usize,
    /// Keep the distribution each answer was sampled from.
    pub audit: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_RESPONDENTS,
            style: PromptStyle::default(),
            labels: LabelSet::alphabetical(),
            adjustment: AdjustmentMode::Raw,
            cap: DEFAULT_STEP_CAP,
            seed: 0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            batch_size: 256,
            apply_skip_logic: false,
            token_budget: DEFAULT_TOKEN_BUDGET,
            row_attempts: 3,
            audit: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        if self.cap == 0 {
            return Err(Error::InvalidArgument("cap must be at least 1".into()));
        }
        if self.workers == 0 || self.batch_size == 0 || self.row_attempts == 0 {
            return Err(Error::InvalidArgument("workers, batch size and attempts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondentRow {
    pub index: u64,
    /// One code per question, questionnaire order; `NA` when skipped.
    pub codes: Vec<String>,
    /// Answer-indexed distribution behind each sampled code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributions: Option<Vec<Option<Vec<f64>>>>,
    /// Largest prompt seen while filling the row, in counted tokens.
    pub max_prompt_tokens: usize,
}

/// Everything a row needs that does not depend on the respondent.
pub struct GenerationContext<'a> {
    backend: &'a dyn Backend,
    questionnaire: &'a Questionnaire,
    config: &'a GenerationConfig,
    plans: Vec<PresentationPlan>,
    counter: Box<dyn TokenCounter>,
}

impl<'a> GenerationContext<'a> {
    pub fn new(backend: &'a dyn Backend, questionnaire: &'a Questionnaire, config: &'a GenerationConfig) -> Result<Self> {
        config.validate()?;
        let plans = questionnaire
            .questions()
            .iter()
            .enumerate()
            .map(|(i, q)| match config.adjustment {
                AdjustmentMode::Raw => Ok(PresentationPlan {
                    presentations: vec![Presentation::identity(q.k())],
                    full_enumeration: q.k() == 1,
                    mode: RandomizationMode::Order,
                }),
                AdjustmentMode::AdjustedPerStep => {
                    plan_presentations(q.k(), config.cap, derive_seed(config.seed, 1 << 32 | i as u64), RandomizationMode::Order)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            backend,
            questionnaire,
            config,
            plans,
            counter: Box::new(WhitespaceTokenCounter::default()),
        })
    }

    pub fn with_token_counter(mut self, counter: Box<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    fn skipped(&self, q: &Question, prefix: &[PriorAnswer]) -> bool {
        let Some(cond) = q.ask_if.as_ref().filter(|_| self.config.apply_skip_logic) else {
            return false;
        };
        prefix
            .iter()
            .find(|p| p.question == cond.question)
            .is_none_or(|p| !cond.codes.contains(&p.code))
    }

    /// Answer-indexed distribution for question `pos` given the prefix.
    fn step(&self, pos: usize, prefix: &[PriorAnswer], max_tokens: &mut usize) -> Result<Vec<f64>> {
        let q = &self.questionnaire.questions()[pos];
        let plan = &self.plans[pos];
        let mut mean = vec![0.0; q.k()];
        for pres in &plan.presentations {
            let prompt = render_sequential_prompt(self.questionnaire, prefix, q, &self.config.labels, pres, &self.config.style)?;
            *max_tokens = (*max_tokens).max(check_token_budget(&prompt, self.counter.as_ref(), self.config.token_budget)?);
            let slots = query_slot_distribution(self.backend, &q.id, &prompt)?;
            for (slot, p) in slots.iter().enumerate() {
                mean[pres.order.at(slot)] += p;
            }
        }
        let n = plan.presentations.len() as f64;
        Ok(mean.into_iter().map(|p| p / n).collect())
    }

    fn attempt(&self, index: u64) -> Result<RespondentRow> {
        let mut rng = respondent_rng(self.config.seed, index);
        let questions = self.questionnaire.questions();
        let mut prefix: Vec<PriorAnswer> = Vec::with_capacity(questions.len());
        let mut dists = self.config.audit.then(|| Vec::with_capacity(questions.len()));
        let mut max_tokens = 0;
        for (pos, q) in questions.iter().enumerate() {
            // One variate per question, drawn even when skipped, so a row's
            // later answers do not shift with skip decisions.
            let u: f64 = rng.gen();
            if self.skipped(q, &prefix) {
                prefix.push(PriorAnswer::new(&q.id, MISSING));
                if let Some(d) = dists.as_mut() {
                    d.push(None);
                }
                continue;
            }
            let probs = self.step(pos, &prefix, &mut max_tokens)?;
            let a = sample_index(&probs, u);
            prefix.push(PriorAnswer::new(&q.id, &q.answers[a].code));
            if let Some(d) = dists.as_mut() {
                d.push(Some(probs));
            }
        }
        Ok(RespondentRow {
            index,
            codes: prefix.into_iter().map(|p| p.code).collect(),
            distributions: dists,
            max_prompt_tokens: max_tokens,
        })
    }

    /// Fills one questionnaire. A backend failure discards the partial row
    /// and starts it again from the same random stream.
    pub fn sample_respondent(&self, index: u64) -> Result<RespondentRow> {
        let mut last = None;
        for attempt in 0..self.config.row_attempts {
            match self.attempt(index) {
                Ok(row) => return Ok(row),
                Err(e @ (Error::Backend { .. } | Error::Http { .. } | Error::UnusableQuery)) => {
                    log::warn!("respondent {index} attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// SplitMix64 finalizer over `seed` and `tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for respondent `index` under the master seed.
pub fn respondent_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Single respondent without building a context by hand.
pub fn sample_respondent(
    backend: &dyn Backend,
    questionnaire: &Questionnaire,
    config: &GenerationConfig,
    index: u64,
) -> Result<RespondentRow> {
    GenerationContext::new(backend, questionnaire, config)?.sample_respondent(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetadata {
    pub model: BackendDescriptor,
    pub questionnaire: String,
    pub config: GenerationConfig,
    pub prompt_style: String,
    pub adjustment_mode: AdjustmentMode,
    pub seed: u64,
    pub rows: usize,
    pub max_prompt_tokens: usize,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` when set.
    pub timestamp: u64,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub table: ReferenceTable,
    pub rows: Vec<RespondentRow>,
    pub metadata: GenerationMetadata,
}

pub fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}

/// Generates `config.n` respondents. With a checkpoint path, completed rows
/// are appended there batch by batch and a later call with the same
/// arguments resumes after the last complete row.
pub fn generate_dataset(
    backend: &dyn Backend,
    questionnaire: &Questionnaire,
    config: &GenerationConfig,
    checkpoint: Option<&Path>,
) -> Result<GeneratedDataset> {
    let ctx = GenerationContext::new(backend, questionnaire, config)?;
    let columns: Vec<String> = questionnaire.ids().map(str::to_string).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut codes: Vec<Vec<String>> = match checkpoint {
        Some(path) => load_checkpoint(path, &columns, questionnaire)?,
        None => Vec::new(),
    };
    if codes.len() > config.n {
        return Err(Error::Table(format!(
            "checkpoint holds {} rows but only {} were requested",
            codes.len(),
            config.n
        )));
    }
    let resumed = codes.len();
    if resumed > 0 {
        log::info!("resuming after {resumed} checkpointed rows");
    }
    // Resumed rows are recomputed only for audit payloads; codes come from disk.
    let mut rows: Vec<RespondentRow> = Vec::with_capacity(config.n);
    let mut start = resumed;
    while start < config.n {
        let end = (start + config.batch_size).min(config.n);
        let batch: Vec<RespondentRow> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|i| ctx.sample_respondent(i as u64))
                .collect::<Result<_>>()
        })?;
        if let Some(path) = checkpoint {
            append_checkpoint(path, &columns, &batch)?;
        }
        codes.extend(batch.iter().map(|r| r.codes.clone()));
        rows.extend(batch);
        start = end;
    }
    let table = ReferenceTable::new(columns, codes, None, None)?;
    let metadata = GenerationMetadata {
        model: backend.descriptor(),
        questionnaire: questionnaire.name.clone(),
        config: config.clone(),
        prompt_style: config.style.name(),
        adjustment_mode: config.adjustment,
        seed: config.seed,
        rows: table.len(),
        max_prompt_tokens: rows.iter().map(|r| r.max_prompt_tokens).max().unwrap_or(0),
        timestamp: timestamp(),
    };
    Ok(GeneratedDataset { table, rows, metadata })
}

fn load_checkpoint(path: &Path, columns: &[String], questionnaire: &Questionnaire) -> Result<Vec<Vec<String>>> {
    let mut text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    // A torn final line from an interrupted write is dropped.
    if !text.ends_with('\n') {
        text.truncate(text.rfind('\n').map_or(0, |i| i + 1));
        let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
        f.set_len(text.len() as u64).map_err(|e| Error::io(path, e))?;
    }
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let table = ReferenceTable::from_reader(text.as_bytes())?;
    if table.columns() != columns {
        return Err(Error::Table(format!("checkpoint {} has a different header", path.display())));
    }
    table.validate(questionnaire)?;
    Ok(table.rows().to_vec())
}

fn append_checkpoint(path: &Path, columns: &[String], batch: &[RespondentRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    if fresh {
        w.write_record(columns)?;
    }
    for row in batch {
        w.write_record(&row.codes)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Table(e.to_string()))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    file.sync_data().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{marginal_distribution, Weighting};
    use crate::backend::{SyntheticBackend, SyntheticModelSpec};
    use crate::questionnaire::parse_questionnaire;

    fn two_questions() -> Questionnaire {
        parse_questionnaire(
            r#"{"name":"t","questions":[
            {"id":"SEX","text":"What is this person's sex?","kind":"nominal",
             "answers":[{"code":"1","text":"Male"},{"code":"2","text":"Female"}]},
            {"id":"MAR","text":"What is this person's marital status?","kind":"nominal",
             "answers":[{"code":"1","text":"Married"},{"code":"2","text":"Widowed"},{"code":"3","text":"Never married"}],
             "ask_if":{"question":"SEX","codes":["2"]}}]}"#,
        )
        .unwrap()
    }

    fn config(n: usize) -> GenerationConfig {
        GenerationConfig {
            n,
            workers: 2,
            batch_size: 2,
            ..GenerationConfig::default()
        }
    }

    #[test]
    fn point_masses_force_the_row() {
        let spec = SyntheticModelSpec::default()
            .with_content("SEX", vec![0.0, 60.0])
            .with_content("MAR", vec![0.0, 0.0, 60.0]);
        let b = SyntheticBackend::new(spec).unwrap();
        let row = sample_respondent(&b, &two_questions(), &config(1), 7).unwrap();
        assert_eq!(row.codes, vec!["2", "3"]);
    }

    #[test]
    fn shape_and_determinism() {
        let spec = SyntheticModelSpec::default().with_content("SEX", vec![0.2, 0.0]);
        let b = SyntheticBackend::new(spec).unwrap();
        let qn = two_questions();
        let a = generate_dataset(&b, &qn, &config(3), None).unwrap();
        assert_eq!((a.table.len(), a.table.columns().len()), (3, 2));
        let mut serial = config(3);
        serial.workers = 1;
        serial.batch_size = 100;
        let b2 = generate_dataset(&b, &qn, &serial, None).unwrap();
        assert_eq!(a.table, b2.table);
    }

    #[test]
    fn skip_logic_fills_missing_marker() {
        let spec = SyntheticModelSpec::default().with_content("SEX", vec![60.0, 0.0]);
        let b = SyntheticBackend::new(spec).unwrap();
        let mut c = config(4);
        c.apply_skip_logic = true;
        let out = generate_dataset(&b, &two_questions(), &c, None).unwrap();
        assert!(out.table.rows().iter().all(|r| r[0] == "1" && r[1] == MISSING));
        // Ask-all default answers every question.
        let out = generate_dataset(&b, &two_questions(), &config(4), None).unwrap();
        assert!(out.table.rows().iter().all(|r| r[1] != MISSING));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticModelSpec::default()
            .with_content("SEX", vec![0.1, -0.3])
            .with_content("MAR", vec![0.5, 0.0, -0.5]);
        let b = SyntheticBackend::new(spec).unwrap();
        let qn = two_questions();
        let mut c = config(3);
        c.batch_size = 1;
        let full = generate_dataset(&b, &qn, &c, None).unwrap();

        // Interrupted after two rows, with a torn third line.
        let ck = dir.path().join("partial.csv");
        let mut two = c.clone();
        two.n = 2;
        generate_dataset(&b, &qn, &two, Some(&ck)).unwrap();
        let mut f = OpenOptions::new().append(true).open(&ck).unwrap();
        f.write_all(b"1,").unwrap();
        drop(f);

        let resumed = generate_dataset(&b, &qn, &c, Some(&ck)).unwrap();
        assert_eq!(resumed.table, full.table);
        assert_eq!(std::fs::read_to_string(&ck).unwrap(), full.table.to_csv_string().unwrap());
    }

    #[test]
    fn output_round_trips_through_marginals() {
        let b = SyntheticBackend::new(SyntheticModelSpec::default()).unwrap();
        let qn = two_questions();
        let out = generate_dataset(&b, &qn, &config(20), None).unwrap();
        let back = ReferenceTable::from_reader(out.table.to_csv_string().unwrap().as_bytes()).unwrap();
        assert_eq!(back, out.table);
        for q in qn.questions() {
            assert_eq!(
                marginal_distribution(&back, q, None, Weighting::Unweighted).unwrap(),
                marginal_distribution(&out.table, q, None, Weighting::Unweighted).unwrap()
            );
        }
    }

    #[test]
    fn adjusted_per_step_removes_position_preference() {
        // A model that always picks the first slot: raw generation is a point
        // mass, adjusted generation samples every answer.
        let spec = SyntheticModelSpec::default().with_position_bonus(vec![60.0, 0.0, 0.0]);
        let b = SyntheticBackend::new(spec).unwrap();
        let qn = two_questions();
        let raw = generate_dataset(&b, &qn, &config(60), None).unwrap();
        assert!(raw.table.rows().iter().all(|r| r[0] == "1" && r[1] == "1"));
        let mut c = config(60);
        c.adjustment = AdjustmentMode::AdjustedPerStep;
        let adj = generate_dataset(&b, &qn, &c, None).unwrap();
        let seen: std::collections::BTreeSet<&str> = adj.table.rows().iter().map(|r| r[1].as_str()).collect();
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
    }
}
