use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use survey_audit::backend::{Backend, BackendDescriptor, LabelLogProbs, QueryRequest, SyntheticBackend, SyntheticModelSpec};
use survey_audit::generator::{generate_dataset, sample_respondent, GenerationConfig};
use survey_audit::prompt::{PromptStyle, SequentialMode};
use survey_audit::questionnaire::{parse_questionnaire, Questionnaire};
use survey_audit::stats::softmax;

fn shipped() -> Questionnaire {
    Questionnaire::from_path(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../questionnaires/acs25.json")).unwrap()
}

#[test]
fn shipped_questionnaire_is_complete() {
    let qn = shipped();
    let ids: Vec<&str> = qn.ids().collect();
    assert_eq!(
        ids,
        [
            "SEX", "AGEP", "HISP", "RAC1P", "NATIVITY", "CIT", "SCH", "SCHL", "LANX", "ENG", "HICOV", "DEAR", "DEYE",
            "MAR", "FER", "GCL", "MIL", "WRK", "ESR", "JWTRNS", "WKL", "WKWN", "WKHP", "COW", "PINCP"
        ]
    );
    for q in qn.questions() {
        assert!(q.text_second_person.is_some(), "{}", q.id);
        assert!(q.summary_label.is_some(), "{}", q.id);
    }
    for id in ["AGEP", "WKWN", "WKHP", "PINCP"] {
        let b = qn.get(id).unwrap().binning.as_ref().unwrap();
        assert!(b.non_canonical);
    }
    assert_eq!(qn.get("RAC1P").unwrap().k(), 9);
    assert_eq!(qn.get("HISP").unwrap().k(), 2);
}

#[test]
fn full_questionnaire_stays_under_token_budget() {
    let qn = shipped();
    let mut spec = SyntheticModelSpec::default();
    for (i, q) in qn.questions().iter().enumerate() {
        spec = spec.with_content(&q.id, (0..q.k()).map(|j| ((i * 7 + j * 3) % 5) as f64 * 0.4).collect());
    }
    let backend = SyntheticBackend::new(spec).unwrap();
    let config = GenerationConfig { n: 1000, seed: 3, ..GenerationConfig::default() };
    let out = generate_dataset(&backend, &qn, &config, None).unwrap();
    assert_eq!(out.table.len(), 1000);
    assert!(out.metadata.max_prompt_tokens <= 1024, "{}", out.metadata.max_prompt_tokens);
    assert!(out.rows.iter().all(|r| r.codes.iter().all(|c| c != "NA")));
}

#[test]
fn first_question_marginal_converges() {
    let qn = parse_questionnaire(
        r#"{"name":"t","questions":[
        {"id":"SEX","text":"What is this person's sex?","kind":"nominal",
         "answers":[{"code":"1","text":"Male"},{"code":"2","text":"Female"}]},
        {"id":"MIL","text":"Has this person served?","kind":"nominal",
         "answers":[{"code":"1","text":"Yes"},{"code":"2","text":"No"},{"code":"3","text":"Training only"}]}]}"#,
    )
    .unwrap();
    let content = vec![0.9, 0.0];
    let backend = SyntheticBackend::new(
        SyntheticModelSpec::default().with_content("SEX", content.clone()).with_content("MIL", vec![0.3, -0.2, 0.0]),
    )
    .unwrap();
    let config = GenerationConfig { n: 50_000, seed: 11, batch_size: 5000, ..GenerationConfig::default() };
    let out = generate_dataset(&backend, &qn, &config, None).unwrap();
    let males = out.table.rows().iter().filter(|r| r[0] == "1").count() as f64 / 50_000.0;
    let truth = softmax(&content)[0];
    assert!((males - truth).abs() <= 0.01, "{males} vs {truth}");
}

/// Answers deterministically but records every prompt it sees.
struct Recorder {
    inner: SyntheticBackend,
    prompts: Mutex<Vec<String>>,
    calls: AtomicUsize,
}

impl Backend for Recorder {
    fn descriptor(&self) -> BackendDescriptor {
        self.inner.descriptor()
    }

    fn query(&self, request: &QueryRequest<'_>) -> survey_audit::Result<LabelLogProbs> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().unwrap().push(request.prompt.text.clone());
        self.inner.query(request)
    }
}

#[test]
fn prompts_only_carry_the_respondents_own_answers() {
    let qn = shipped().subset(&["SEX".into(), "MAR".into(), "WRK".into()]).unwrap();
    let backend = Recorder {
        inner: SyntheticBackend::new(SyntheticModelSpec::default()).unwrap(),
        prompts: Mutex::new(Vec::new()),
        calls: AtomicUsize::new(0),
    };
    let config = GenerationConfig {
        n: 1,
        style: PromptStyle::default().with_sequential(SequentialMode::QaHistory),
        seed: 5,
        ..GenerationConfig::default()
    };
    let row = sample_respondent(&backend, &qn, &config, 0).unwrap();
    let prompts = backend.prompts.lock().unwrap().clone();
    assert_eq!(prompts.len(), 3);
    // The last prompt holds exactly this row's earlier answers.
    let sex = qn.get("SEX").unwrap();
    let idx = sex.code_index(&row.codes[0]).unwrap();
    let label = ["A", "B"][idx];
    assert!(prompts[2].contains(&format!("Answer: {label}\nQuestion: What is this person's marital status?")));
    // Same seed and index, same row.
    let again = sample_respondent(&backend, &qn, &config, 0).unwrap();
    assert_eq!(row.codes, again.codes);
}
