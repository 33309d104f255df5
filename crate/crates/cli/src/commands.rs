use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use survey_audit::alignment::{
    alignment_report, entropy_alignment_correlation, AlignmentOptions, ReferenceTable, Weighting,
};
use survey_audit::backend::{
    query_slot_distribution, Backend, BackendDescriptor, CacheStore, CachedBackend, Endpoint, LabelLogProbs,
    OpenAiBackend, OpenAiConfig, QueryRequest, SyntheticBackend, SyntheticModelSpec, Transport,
};
use survey_audit::bias::{adjusted_response, sample_selections, AdjustedResponse, BiasRow};
use survey_audit::discriminator::{
    classifier_by_name, discriminator_test, subgroup_vs_rest_baseline, DiscriminatorOptions, GbdtParams,
};
use survey_audit::generator::{derive_seed, generate_dataset, timestamp, AdjustmentMode, GenerationConfig};
use survey_audit::prompt::{
    plan_presentations, render_prompt, LabelSet, Presentation, PromptStyle, RandomizationMode, SequentialMode,
    DEFAULT_TOKEN_BUDGET,
};
use survey_audit::questionnaire::{Question, Questionnaire};
use survey_audit::stats::{normalized_entropy_of, Provenance, ResponseDistribution};

use crate::settings::Settings;

/// What a command produced. `failed` lists questions that could not be
/// completed; a non-empty list means partial success.
#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub failed: Vec<String>,
}

/// Records every prompt that reaches the wrapped backend.
struct PromptLog<B> {
    inner: B,
    prompts: Mutex<Vec<Value>>,
}

impl<B: Backend> Backend for PromptLog<B> {
    fn descriptor(&self) -> BackendDescriptor {
        self.inner.descriptor()
    }

    fn query(&self, request: &QueryRequest<'_>) -> survey_audit::Result<LabelLogProbs> {
        self.prompts.lock().unwrap_or_else(|e| e.into_inner()).push(json!({
            "question": request.question,
            "system": request.prompt.system,
            "prompt": request.prompt.text,
            "labels": request.labels(),
        }));
        self.inner.query(request)
    }

    fn network_calls(&self) -> u64 {
        self.inner.network_calls()
    }
}

pub struct Run {
    pub settings: Settings,
    backend: Option<Box<dyn Backend>>,
    prompt_log: Option<std::sync::Arc<PromptLog<Box<dyn Backend>>>>,
    outputs: Vec<PathBuf>,
}

fn parse<T: std::str::FromStr<Err = survey_audit::Error>>(value: Option<&str>, default: &str) -> anyhow::Result<T> {
    Ok(value.unwrap_or(default).parse()?)
}

pub fn build_backend(s: &Settings) -> anyhow::Result<Box<dyn Backend>> {
    let kind = s.backend_kind();
    let backend: Box<dyn Backend> = match kind {
        "synthetic" => {
            let spec = match &s.synthetic_spec {
                Some(p) => SyntheticModelSpec::from_path(p)?,
                None => SyntheticModelSpec::default(),
            };
            Box::new(SyntheticBackend::new(spec)?)
        }
        "openai-completions" | "openai-chat" => {
            let endpoint = if kind == "openai-chat" { Endpoint::Chat } else { Endpoint::Completions };
            let model = s.model.clone().ok_or_else(|| anyhow!("--model is required for {kind}"))?;
            let base = s.base_url.clone().unwrap_or_else(|| "https://api.openai.com/v1".into());
            let mut cfg = OpenAiConfig::new(base, model, endpoint);
            cfg.api_key_env = Some(s.api_key_env.clone().unwrap_or_else(|| "OPENAI_API_KEY".into()));
            if let Some(k) = s.top_logprobs {
                cfg.top_logprobs = k;
            }
            if let Some(r) = s.requests_per_second {
                cfg.requests_per_second = r;
            }
            let transport = match (&s.fixture, s.fixture_mode.as_deref()) {
                (None, None | Some("live")) => Transport::Live,
                (None, Some(m)) => bail!("--fixture-mode {m} needs --fixture"),
                (Some(_), Some("live")) => Transport::Live,
                (Some(p), None | Some("replay")) => Transport::Replay(p.clone()),
                (Some(p), Some("record")) => Transport::Record(p.clone()),
                (Some(_), Some(m)) => bail!("unknown fixture mode {m:?}"),
            };
            Box::new(OpenAiBackend::new(cfg, transport)?)
        }
        other => bail!("unknown backend {other:?}"),
    };
    Ok(match &s.cache_dir {
        Some(dir) => Box::new(CachedBackend::new(backend, CacheStore::open(dir)?)),
        None => backend,
    })
}

impl Run {
    pub fn new(settings: Settings) -> Self {
        Self {
            settings,
            backend: None,
            prompt_log: None,
            outputs: Vec::new(),
        }
    }

    fn backend(&mut self) -> anyhow::Result<&dyn Backend> {
        if self.backend.is_none() && self.prompt_log.is_none() {
            let b = build_backend(&self.settings)?;
            if Settings::flag(self.settings.dump_prompts) {
                self.prompt_log = Some(std::sync::Arc::new(PromptLog {
                    inner: b,
                    prompts: Mutex::new(Vec::new()),
                }));
            } else {
                self.backend = Some(b);
            }
        }
        Ok(match (&self.backend, &self.prompt_log) {
            (Some(b), _) => b.as_ref(),
            (None, Some(l)) => l.as_ref(),
            (None, None) => unreachable!("backend built above"),
        })
    }

    fn descriptor(&mut self) -> anyhow::Result<BackendDescriptor> {
        Ok(self.backend()?.descriptor())
    }

    fn questionnaire(&self) -> anyhow::Result<Questionnaire> {
        let qn = Questionnaire::from_path(self.settings.require_questionnaire()?)?;
        match &self.settings.questions {
            Some(list) => {
                let ids: Vec<String> = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                Ok(qn.subset(&ids)?)
            }
            None => Ok(qn),
        }
    }

    fn style(&self) -> anyhow::Result<PromptStyle> {
        let style: PromptStyle = parse(self.settings.style.as_deref(), "standard")?;
        let sequential: SequentialMode = parse(self.settings.sequential.as_deref(), "bullet-summary")?;
        Ok(style.with_sequential(sequential))
    }

    fn labels(&self) -> anyhow::Result<LabelSet> {
        Ok(LabelSet::by_name(self.settings.labels.as_deref().unwrap_or("alphabetical"))?)
    }

    fn out_dir(&self) -> anyhow::Result<PathBuf> {
        let dir = self.settings.output_dir();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let path = self.out_dir()?.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    /// Writes the prompt log (if any) and the command's metadata sidecar.
    fn finish(mut self, command: &str, extra: Value, failed: Vec<String>) -> anyhow::Result<Outcome> {
        if let Some(log) = self.prompt_log.take() {
            let mut prompts = std::mem::take(&mut *log.prompts.lock().unwrap_or_else(|e| e.into_inner()));
            let mut lines: Vec<String> = prompts.drain(..).map(|p| p.to_string()).collect();
            lines.sort();
            lines.dedup();
            let mut text = lines.join("\n");
            text.push('\n');
            self.write(&format!("{command}_prompts.jsonl"), &text)?;
            self.backend = Some(Box::new(std::sync::Arc::try_unwrap(log).ok().map(|l| l.inner).expect("sole owner")));
        }
        let model = match &self.backend {
            Some(b) => Some(b.descriptor()),
            None => None,
        };
        if let Some(b) = &self.backend {
            info!("{command}: {} network requests", b.network_calls());
        }
        let outputs: Vec<String> = self
            .outputs
            .iter()
            .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned()))
            .collect();
        let sidecar = json!({
            "command": command,
            "model": model,
            "settings": self.settings,
            "seed": self.settings.seed(),
            "timestamp": timestamp(),
            "outputs": outputs,
            "failed_questions": failed,
            "details": extra,
        });
        self.write_json(&format!("{command}.json"), &sidecar)?;
        Ok(Outcome {
            outputs: self.outputs,
            failed,
        })
    }
}

fn probs_header(max_k: usize, lead: &[&str]) -> Vec<String> {
    lead.iter()
        .map(|s| s.to_string())
        .chain((1..=max_k).map(|i| format!("p{i}")))
        .collect()
}

fn padded(probs: &[f64], max_k: usize) -> Vec<String> {
    (0..max_k).map(|i| probs.get(i).map(|p| p.to_string()).unwrap_or_default()).collect()
}

fn csv_string(header: &[String], rows: &[Vec<String>]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn long_answers(question: &Question, probs: &[f64], series: &str, out: &mut Vec<Vec<String>>) {
    for (a, p) in question.answers.iter().zip(probs) {
        out.push(vec![
            question.id.clone(),
            series.to_string(),
            a.code.clone(),
            a.text.clone(),
            p.to_string(),
        ]);
    }
}

/// Raw answer distributions in the questionnaire's own choice order.
pub fn survey(settings: Settings) -> anyhow::Result<Outcome> {
    let mut run = Run::new(settings);
    let qn = run.questionnaire()?;
    let style = run.style()?;
    let labels = run.labels()?;
    let backend = run.backend()?;
    let results: Vec<anyhow::Result<Vec<f64>>> = qn
        .questions()
        .par_iter()
        .map(|q| {
            let prompt = render_prompt(q, &labels, &Presentation::identity(q.k()), &style)?;
            Ok(query_slot_distribution(backend, &q.id, &prompt)?)
        })
        .collect();
    let max_k = qn.questions().iter().map(Question::k).max().unwrap_or(0);
    let mut rows = Vec::new();
    let mut plot = Vec::new();
    let mut failed = Vec::new();
    for (q, r) in qn.questions().iter().zip(results) {
        match r {
            Ok(p) => {
                let h = normalized_entropy_of(&p)?;
                let mut row = vec![q.id.clone(), q.k().to_string(), h.to_string(), "ok".into()];
                row.extend(padded(&p, max_k));
                rows.push(row);
                long_answers(q, &p, "raw", &mut plot);
            }
            Err(e) => {
                warn!("{}: {e:#}", q.id);
                let mut row = vec![q.id.clone(), q.k().to_string(), String::new(), format!("error: {e}")];
                row.extend(padded(&[], max_k));
                rows.push(row);
                failed.push(q.id.clone());
            }
        }
    }
    run.write("survey.csv", &csv_string(&probs_header(max_k, &["question", "k", "entropy_norm", "status"]), &rows)?)?;
    if Settings::flag(run.settings.plot_data) {
        let header: Vec<String> = ["question", "series", "code", "answer", "prob"].map(String::from).to_vec();
        run.write("survey_plot.csv", &csv_string(&header, &plot)?)?;
    }
    run.finish("survey", json!({"prompt_style": style.name(), "choice_order": "questionnaire"}), failed)
}

fn adjusted_all(
    run: &mut Run,
    qn: &Questionnaire,
    mode: RandomizationMode,
) -> anyhow::Result<Vec<(usize, anyhow::Result<AdjustedResponse>)>> {
    let style = run.style()?;
    let labels = run.labels()?;
    let cap = run.settings.cap();
    let seed = run.settings.seed();
    let backend = run.backend()?;
    Ok(qn
        .questions()
        .iter()
        .enumerate()
        .map(|(pos, q)| {
            let r = (|| {
                let plan = plan_presentations(q.k(), cap, derive_seed(seed, pos as u64), mode)?;
                Ok(adjusted_response(backend, q, &plan, &labels, &style)?)
            })();
            (pos, r)
        })
        .collect())
}

/// Order-adjusted answers, labeling and position bias measures.
pub fn adjust(settings: Settings) -> anyhow::Result<Outcome> {
    let mut run = Run::new(settings);
    let qn = run.questionnaire()?;
    let mode: RandomizationMode = parse(run.settings.mode.as_deref(), "order")?;
    let samples = run.settings.bias_samples();
    let seed = run.settings.seed();
    let style = run.style()?;
    let labels = run.labels()?;
    let adjusted = adjusted_all(&mut run, &qn, mode)?;
    let backend = run.backend()?;
    let max_k = qn.questions().iter().map(Question::k).max().unwrap_or(0);
    let mut adj_rows = Vec::new();
    let mut bias_rows = Vec::new();
    let mut plot = Vec::new();
    let mut responses = BTreeMap::new();
    let mut failed = Vec::new();
    for (pos, r) in adjusted {
        let q = &qn.questions()[pos];
        let result = r.and_then(|adj| {
            let bias = if samples > 0 {
                let sel = sample_selections(backend, q, &labels, &style, mode, samples, derive_seed(seed, 1 << 40 | pos as u64))?;
                Some(BiasRow::new(&adj, &sel)?)
            } else {
                None
            };
            Ok((adj, bias))
        });
        let (adj, bias) = match result {
            Ok(x) => x,
            Err(e) => {
                warn!("{}: {e:#}", q.id);
                failed.push(q.id.clone());
                continue;
            }
        };
        let mut row = vec![
            q.id.clone(),
            q.k().to_string(),
            adj.n_presentations.to_string(),
            adj.full_enumeration.to_string(),
            normalized_entropy_of(&adj.answer_mean)?.to_string(),
        ];
        row.extend(padded(&adj.answer_mean, max_k));
        adj_rows.push(row);
        if let Some(b) = bias {
            bias_rows.push(vec![
                b.question,
                b.k.to_string(),
                b.n_perms.to_string(),
                b.full_enum.to_string(),
                b.a_bias.to_string(),
                b.first_choice_bias.to_string(),
                b.chi2_label_p.to_string(),
                b.chi2_pos_p.to_string(),
            ]);
        }
        long_answers(q, &adj.answer_mean, "adjusted", &mut plot);
        for (i, (l, p)) in adj.labels.iter().zip(&adj.label_mean).enumerate() {
            plot.push(vec![q.id.clone(), "label".into(), l.clone(), format!("label {l}"), p.to_string()]);
            plot.push(vec![
                q.id.clone(),
                "position".into(),
                (i + 1).to_string(),
                format!("slot {}", i + 1),
                adj.slot_mean[i].to_string(),
            ]);
        }
        responses.insert(q.id.clone(), adj.answer_mean.clone());
    }
    run.write(
        "adjusted.csv",
        &csv_string(&probs_header(max_k, &["question", "k", "n_perms", "full_enum", "entropy_norm"]), &adj_rows)?,
    )?;
    if samples > 0 {
        let header: Vec<String> = ["question", "k", "n_perms", "full_enum", "a_bias", "first_choice_bias", "chi2_label_p", "chi2_pos_p"]
            .map(String::from)
            .to_vec();
        run.write("bias.csv", &csv_string(&header, &bias_rows)?)?;
    }
    run.write_json("responses.json", &responses)?;
    if Settings::flag(run.settings.plot_data) {
        let header: Vec<String> = ["question", "series", "code", "answer", "prob"].map(String::from).to_vec();
        run.write("adjust_plot.csv", &csv_string(&header, &plot)?)?;
    }
    let cap = run.settings.cap();
    run.finish(
        "adjust",
        json!({"randomization": mode, "cap": cap, "bias_samples": samples, "prompt_style": style.name()}),
        failed,
    )
}

fn read_responses(path: &Path, qn: &Questionnaire) -> anyhow::Result<BTreeMap<String, ResponseDistribution>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let raw: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)?;
    raw.into_iter()
        .filter(|(q, _)| qn.get(q).is_some())
        .map(|(q, p)| Ok((q.clone(), ResponseDistribution::new(q, p, Provenance::ModelAdjusted)?)))
        .collect()
}

/// Alignment of model answers with a reference population.
pub fn align(settings: Settings) -> anyhow::Result<Outcome> {
    let mut run = Run::new(settings);
    let qn = run.questionnaire()?;
    let reference_path = run.settings.reference.clone().ok_or_else(|| anyhow!("--reference is required"))?;
    let table = ReferenceTable::from_path(&reference_path)?;
    let in_table: Vec<String> = qn.ids().filter(|q| table.column_index(q).is_some()).map(String::from).collect();
    if in_table.is_empty() {
        bail!("no questionnaire column in {}", reference_path.display());
    }
    let qn = qn.subset(&in_table)?;
    table.validate_columns(&qn)?;
    let mut failed = Vec::new();
    let (model_name, model) = match run.settings.responses.clone() {
        Some(p) => (p.display().to_string(), read_responses(&p, &qn)?),
        None if Settings::flag(run.settings.raw) => {
            let style = run.style()?;
            let labels = run.labels()?;
            let backend = run.backend()?;
            let mut m = BTreeMap::new();
            for q in qn.questions() {
                let prompt = render_prompt(q, &labels, &Presentation::identity(q.k()), &style)?;
                match query_slot_distribution(backend, &q.id, &prompt) {
                    Ok(p) => {
                        m.insert(q.id.clone(), ResponseDistribution::new(&q.id, p, Provenance::ModelRaw)?);
                    }
                    Err(e) => {
                        warn!("{}: {e}", q.id);
                        failed.push(q.id.clone());
                    }
                }
            }
            (run.descriptor()?.model, m)
        }
        None => {
            let mode: RandomizationMode = parse(run.settings.mode.as_deref(), "order")?;
            let mut m = BTreeMap::new();
            for (pos, r) in adjusted_all(&mut run, &qn, mode)? {
                let id = qn.questions()[pos].id.clone();
                match r.and_then(|a| Ok(a.adjusted()?)) {
                    Ok(d) => {
                        m.insert(id, d);
                    }
                    Err(e) => {
                        warn!("{id}: {e:#}");
                        failed.push(id);
                    }
                }
            }
            (run.descriptor()?.model, m)
        }
    };
    if model.is_empty() {
        bail!("no model responses to compare");
    }
    let options = AlignmentOptions {
        weighting: if Settings::flag(run.settings.weighted) { Weighting::Weighted } else { Weighting::Unweighted },
        ..AlignmentOptions::default()
    };
    let report = alignment_report(&model_name, &model, &table, &qn, &options)?;
    run.write("alignment_summary.csv", &report.summary_csv()?)?;
    run.write("alignment_per_question.csv", &report.per_question_csv()?)?;
    run.write_json("alignment.json", &report)?;
    let correlation = if table.subgroup_values().len() >= 3 {
        match entropy_alignment_correlation(&report) {
            Ok(c) => {
                let rows: Vec<Vec<String>> = c
                    .points
                    .iter()
                    .map(|p| vec![p.subgroup.clone(), p.entropy.to_string(), p.mean_kl.to_string()])
                    .collect();
                let header: Vec<String> = ["subgroup", "mean_normalized_entropy", "mean_kl"].map(String::from).to_vec();
                run.write("entropy_alignment.csv", &csv_string(&header, &rows)?)?;
                json!({"pearson_r": c.pearson_r, "spearman_rho": c.spearman_rho})
            }
            Err(e) => json!({"undefined": e.to_string()}),
        }
    } else {
        Value::Null
    };
    run.finish("align", json!({"reference": reference_path, "correlation": correlation}), failed)
}

/// Sequentially generated synthetic respondents.
pub fn generate(settings: Settings) -> anyhow::Result<Outcome> {
    let mut run = Run::new(settings);
    let qn = run.questionnaire()?;
    let s = &run.settings;
    let config = GenerationConfig {
        n: s.n_respondents(),
        style: run.style()?,
        labels: run.labels()?,
        adjustment: parse::<AdjustmentMode>(s.adjustment.as_deref(), "raw")?,
        cap: s.cap.unwrap_or(survey_audit::generator::DEFAULT_STEP_CAP),
        seed: s.seed(),
        workers: s.workers.unwrap_or_else(|| GenerationConfig::default().workers),
        batch_size: s.batch_size.unwrap_or(256),
        apply_skip_logic: Settings::flag(s.skip_logic),
        token_budget: s.token_budget.unwrap_or(DEFAULT_TOKEN_BUDGET),
        row_attempts: 3,
        audit: false,
    };
    let dir = run.out_dir()?;
    let partial = dir.join("generated.partial.csv");
    let data = generate_dataset(run.backend()?, &qn, &config, Some(&partial))?;
    let final_path = dir.join("generated.csv");
    std::fs::rename(&partial, &final_path).with_context(|| format!("moving {} into place", partial.display()))?;
    run.outputs.push(final_path);
    let meta = serde_json::to_value(&data.metadata)?;
    run.finish("generate", meta, Vec::new())
}

fn discriminator_options(s: &Settings, n: usize) -> DiscriminatorOptions {
    DiscriminatorOptions {
        n,
        seeds: s.seeds(),
        seed: s.seed(),
        test_fraction: s.test_fraction(),
    }
}

fn gbdt_params(s: &Settings) -> GbdtParams {
    let d = GbdtParams::default();
    GbdtParams {
        trees: s.trees.unwrap_or(d.trees),
        max_depth: s.max_depth.unwrap_or(d.max_depth),
        learning_rate: s.learning_rate.unwrap_or(d.learning_rate),
        ..d
    }
}

/// Classifier two-sample test between a synthetic and a reference table.
pub fn discriminate(settings: Settings) -> anyhow::Result<Outcome> {
    let mut run = Run::new(settings);
    let s = &run.settings;
    let a_path = s.synthetic.clone().ok_or_else(|| anyhow!("--synthetic is required"))?;
    let b_path = s.reference.clone().ok_or_else(|| anyhow!("--reference is required"))?;
    let a = ReferenceTable::from_path(&a_path)?;
    let b = ReferenceTable::from_path(&b_path)?;
    let n = s.n.unwrap_or_else(|| a.len().min(b.len()));
    let classifier = classifier_by_name(s.classifier.as_deref().unwrap_or("gbdt"), gbdt_params(s))?;
    let report = discriminator_test(&a, &b, classifier.as_ref(), &discriminator_options(s, n))?;
    run.write_json("discriminator.json", &report)?;
    run.write("discriminator_seeds.csv", &report.seeds_csv()?)?;
    run.finish("discriminate", json!({"synthetic": a_path, "reference": b_path}), Vec::new())
}

/// Each reference subgroup against the rest of the reference population.
pub fn baseline(settings: Settings) -> anyhow::Result<Outcome> {
    let mut run = Run::new(settings);
    let s = &run.settings;
    let path = s.reference.clone().ok_or_else(|| anyhow!("--reference is required"))?;
    let table = ReferenceTable::from_path(&path)?;
    let classifier = classifier_by_name(s.classifier.as_deref().unwrap_or("gbdt"), gbdt_params(s))?;
    let rows = subgroup_vs_rest_baseline(&table, classifier.as_ref(), s.n, &discriminator_options(s, 0))?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.subgroup.clone(),
                r.n_per_side.to_string(),
                r.mean_accuracy.to_string(),
                r.std_accuracy.to_string(),
                r.tv_lower_bound.to_string(),
            ]
        })
        .collect();
    let header: Vec<String> = ["subgroup", "n_per_side", "mean_accuracy", "std_accuracy", "tv_lower_bound"]
        .map(String::from)
        .to_vec();
    run.write("baseline.csv", &csv_string(&header, &csv_rows)?)?;
    run.write_json("baseline_rows.json", &rows)?;
    let extra = json!({"reference": path, "classifier": classifier.name(), "hyperparameters": classifier.params()});
    run.finish("baseline", extra, Vec::new())
}

/// Writes the prompts a run would send, without querying anything.
pub fn dump_prompts(settings: Settings) -> anyhow::Result<Outcome> {
    let mut run = Run::new(settings);
    let qn = run.questionnaire()?;
    let style = run.style()?;
    let labels = run.labels()?;
    let mode: RandomizationMode = parse(run.settings.mode.as_deref(), "order")?;
    let all = Settings::flag(run.settings.all_presentations);
    let mut lines = Vec::new();
    for (pos, q) in qn.questions().iter().enumerate() {
        let presentations = if all {
            plan_presentations(q.k(), run.settings.cap(), derive_seed(run.settings.seed(), pos as u64), mode)?.presentations
        } else {
            vec![Presentation::identity(q.k())]
        };
        for p in presentations {
            let prompt = render_prompt(q, &labels, &p, &style)?;
            lines.push(
                json!({
                    "question": q.id,
                    "order": p.order,
                    "labels": p.labels,
                    "system": prompt.system,
                    "prompt": prompt.text,
                })
                .to_string(),
            );
        }
    }
    let mut text = lines.join("\n");
    text.push('\n');
    run.write("prompts.jsonl", &text)?;
    run.finish("dump-prompts", json!({"prompt_style": style.name()}), Vec::new())
}

trait ValidateColumns {
    fn validate_columns(&self, qn: &Questionnaire) -> anyhow::Result<()>;
}

impl ValidateColumns for ReferenceTable {
    /// Checks cells of questionnaire columns; other columns are ignored.
    fn validate_columns(&self, qn: &Questionnaire) -> anyhow::Result<()> {
        let cols: Vec<usize> = qn.ids().filter_map(|q| self.column_index(q)).collect();
        let sub = ReferenceTable::new(
            cols.iter().map(|&c| self.columns()[c].clone()).collect(),
            self.rows().iter().map(|r| cols.iter().map(|&c| r[c].clone()).collect()).collect(),
            None,
            None,
        )?;
        Ok(sub.validate(qn)?)
    }
}
