//! Reference populations and model-vs-population alignment.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::questionnaire::{Question, QuestionKind, Questionnaire, MISSING};
use crate::stats::{
    kl_divergence_of, normalized_entropy_of, reference_epsilon, wasserstein_ordinal, Provenance,
    ResponseDistribution, DEFAULT_REFERENCE_EPSILON,
};

pub const WEIGHT_COLUMN: &str = "WEIGHT";
pub const SUBGROUP_COLUMN: &str = "SUBGROUP";

/// Answer codes per respondent, one column per question.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
    weights: Option<Vec<f64>>,
    subgroups: Option<Vec<String>>,
}

impl ReferenceTable {
    pub fn new(
        columns: Vec<String>,
        rows: Vec<Vec<String>>,
        weights: Option<Vec<f64>>,
        subgroups: Option<Vec<String>>,
    ) -> Result<Self> {
        let distinct: BTreeSet<&String> = columns.iter().collect();
        if distinct.len() != columns.len() {
            return Err(Error::Table("duplicate column".into()));
        }
        if let Some(r) = rows.iter().position(|r| r.len() != columns.len()) {
            return Err(Error::Table(format!(
                "row {} has {} cells, expected {}",
                r + 1,
                rows[r].len(),
                columns.len()
            )));
        }
        if let Some(w) = &weights {
            if w.len() != rows.len() {
                return Err(Error::Table("weight column length mismatch".into()));
            }
            if let Some(bad) = w.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
                return Err(Error::Table(format!("weight {bad} is not positive")));
            }
        }
        if subgroups.as_ref().is_some_and(|s| s.len() != rows.len()) {
            return Err(Error::Table("subgroup column length mismatch".into()));
        }
        Ok(Self {
            columns,
            rows,
            weights,
            subgroups,
        })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn subgroups(&self) -> Option<&[String]> {
        self.subgroups.as_deref()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Distinct subgroup values, sorted.
    pub fn subgroup_values(&self) -> Vec<String> {
        self.subgroups
            .as_ref()
            .map(|s| s.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect())
            .unwrap_or_default()
    }

    /// Rows whose subgroup equals `value`, or not when `invert`.
    pub fn filter_subgroup(&self, value: &str, invert: bool) -> Result<Self> {
        let groups = self
            .subgroups
            .as_ref()
            .ok_or_else(|| Error::Table("no subgroup column".into()))?;
        let keep: Vec<usize> = (0..self.rows.len()).filter(|&i| (groups[i] == value) != invert).collect();
        Ok(self.select_rows(&keep))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            columns: self.columns.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            weights: self.weights.as_ref().map(|w| indices.iter().map(|&i| w[i]).collect()),
            subgroups: self.subgroups.as_ref().map(|s| indices.iter().map(|&i| s[i].clone()).collect()),
        }
    }

    /// Checks that every column is a question and every cell a valid code
    /// or the missing marker.
    pub fn validate(&self, questionnaire: &Questionnaire) -> Result<()> {
        for (c, name) in self.columns.iter().enumerate() {
            let q = questionnaire
                .get(name)
                .ok_or_else(|| Error::Table(format!("column {name} is not a question")))?;
            for (r, row) in self.rows.iter().enumerate() {
                let cell = &row[c];
                if cell != MISSING && q.code_index(cell).is_none() {
                    return Err(Error::Table(format!(
                        "row {}: {cell:?} is not an answer code of {name}",
                        r + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let weight_at = header.iter().position(|h| h == WEIGHT_COLUMN);
        let group_at = header.iter().position(|h| h == SUBGROUP_COLUMN);
        let columns: Vec<String> = header
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != weight_at && Some(*i) != group_at)
            .map(|(_, h)| h.clone())
            .collect();
        let mut rows = Vec::new();
        let mut weights = weight_at.map(|_| Vec::new());
        let mut groups = group_at.map(|_| Vec::new());
        for (n, record) in rdr.records().enumerate() {
            let record = record?;
            let mut row = Vec::with_capacity(columns.len());
            for (i, cell) in record.iter().enumerate() {
                if Some(i) == weight_at {
                    let w: f64 = cell
                        .trim()
                        .parse()
                        .map_err(|_| Error::Table(format!("row {}: bad weight {cell:?}", n + 1)))?;
                    weights.as_mut().expect("weight column").push(w);
                } else if Some(i) == group_at {
                    groups.as_mut().expect("subgroup column").push(cell.to_string());
                } else {
                    let cell = cell.trim();
                    row.push(if cell.is_empty() { MISSING.to_string() } else { cell.to_string() });
                }
            }
            rows.push(row);
        }
        Self::new(columns, rows, weights, groups)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = self.columns.clone();
        if self.subgroups.is_some() {
            header.push(SUBGROUP_COLUMN.into());
        }
        if self.weights.is_some() {
            header.push(WEIGHT_COLUMN.into());
        }
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = row.clone();
            if let Some(g) = &self.subgroups {
                rec.push(g[i].clone());
            }
            if let Some(wt) = &self.weights {
                rec.push(wt[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("csv", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Unweighted,
    Weighted,
}

/// Relative answer frequencies for `question`, optionally within one
/// subgroup. Missing cells are left out of the denominator.
pub fn marginal_distribution(
    table: &ReferenceTable,
    question: &Question,
    subgroup: Option<&str>,
    weighting: Weighting,
) -> Result<ResponseDistribution> {
    let col = table
        .column_index(&question.id)
        .ok_or_else(|| Error::Table(format!("no column {}", question.id)))?;
    let groups = match subgroup {
        Some(_) => Some(table.subgroups().ok_or_else(|| Error::Table("no subgroup column".into()))?),
        None => None,
    };
    if weighting == Weighting::Weighted && table.weights().is_none() {
        return Err(Error::Table("weighted marginals need a WEIGHT column".into()));
    }
    let mut counts = vec![0.0; question.k()];
    for (i, row) in table.rows().iter().enumerate() {
        if let (Some(g), Some(want)) = (groups, subgroup) {
            if g[i] != want {
                continue;
            }
        }
        let cell = &row[col];
        if cell == MISSING {
            continue;
        }
        let a = question.code_index(cell).ok_or_else(|| {
            Error::Table(format!("{cell:?} is not an answer code of {}", question.id))
        })?;
        counts[a] += match weighting {
            Weighting::Weighted => table.weights().expect("checked")[i],
            Weighting::Unweighted => 1.0,
        };
    }
    if counts.iter().sum::<f64>() <= 0.0 {
        return Err(Error::EmptySubgroup(
            subgroup.map_or_else(|| format!("(all) for {}", question.id), |s| format!("{s} for {}", question.id)),
        ));
    }
    ResponseDistribution::from_weights(&question.id, &counts, Provenance::Reference)
}

/// Per-question marginals for every questionnaire column present in the table.
pub fn reference_marginals(
    table: &ReferenceTable,
    questionnaire: &Questionnaire,
    subgroup: Option<&str>,
    weighting: Weighting,
) -> Result<BTreeMap<String, ResponseDistribution>> {
    questionnaire
        .questions()
        .iter()
        .filter(|q| table.column_index(&q.id).is_some())
        .map(|q| Ok((q.id.clone(), marginal_distribution(table, q, subgroup, weighting)?)))
        .collect()
}

pub type DistributionMap = BTreeMap<String, ResponseDistribution>;

fn shared_questions(model: &DistributionMap, reference: &DistributionMap) -> Result<Vec<String>> {
    if model.is_empty() {
        return Err(Error::InvalidArgument("no questions to compare".into()));
    }
    if let Some(q) = model.keys().find(|q| !reference.contains_key(*q)) {
        return Err(Error::UnknownQuestion(format!("{q} missing from reference")));
    }
    if let Some(q) = reference.keys().find(|q| !model.contains_key(*q)) {
        return Err(Error::UnknownQuestion(format!("{q} missing from model responses")));
    }
    Ok(model.keys().cloned().collect())
}

/// `KL(model_q || reference_q)` per question, with the reference smoothed by
/// `epsilon` only where it has empty categories.
pub fn per_question_kl(model: &DistributionMap, reference: &DistributionMap, epsilon: f64) -> Result<BTreeMap<String, f64>> {
    shared_questions(model, reference)?
        .into_iter()
        .map(|q| {
            let p = model[&q].probs();
            let r = reference[&q].probs();
            let kl = kl_divergence_of(p, r, reference_epsilon(r, epsilon))?.value();
            Ok((q, kl))
        })
        .collect()
}

/// Mean over the shared questions of `KL(model_q || reference_q)`.
pub fn average_kl_alignment(model: &DistributionMap, reference: &DistributionMap, epsilon: f64) -> Result<f64> {
    let per = per_question_kl(model, reference, epsilon)?;
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

/// Uniform distribution for each question of `model`.
pub fn uniform_like(model: &DistributionMap) -> Result<DistributionMap> {
    model
        .iter()
        .map(|(q, d)| Ok((q.clone(), ResponseDistribution::uniform(q, d.k())?)))
        .collect()
}

/// Questions where the model is strictly closer (in KL) to the reference
/// than to the uniform distribution. Ties count as not closer.
pub fn closer_than_uniform_count(model: &DistributionMap, reference: &DistributionMap, epsilon: f64) -> Result<usize> {
    let to_ref = per_question_kl(model, reference, epsilon)?;
    let to_uniform = per_question_kl(model, &uniform_like(model)?, epsilon)?;
    Ok(to_ref.iter().filter(|(q, kl)| **kl < to_uniform[*q]).count())
}

/// Mean normalized entropy over a set of distributions.
pub fn mean_normalized_entropy(dists: &DistributionMap) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::InvalidArgument("no distributions".into()));
    }
    let mut total = 0.0;
    for d in dists.values() {
        total += normalized_entropy_of(d.probs())?;
    }
    Ok(total / dists.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Population,
    Subgroup,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub reference: String,
    pub kind: ReferenceKind,
    pub mean_kl: f64,
    /// Per question, questionnaire order.
    pub kl: Vec<f64>,
    /// Earth mover distance for ordinal questions, `None` for nominal ones.
    pub wasserstein: Vec<Option<f64>>,
    /// Mean normalized entropy of the reference's own answers.
    pub reference_entropy: f64,
    pub closer_than_uniform: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub model: String,
    pub questions: Vec<String>,
    pub epsilon: f64,
    pub weighting: Weighting,
    pub kl_units: String,
    /// Mean normalized entropy of the model's own answers.
    pub model_entropy: f64,
    pub rows: Vec<AlignmentRow>,
}

#[derive(Debug, Clone)]
pub struct AlignmentOptions {
    pub epsilon: f64,
    pub weighting: Weighting,
    pub include_subgroups: bool,
}

impl Default for AlignmentOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_REFERENCE_EPSILON,
            weighting: Weighting::Unweighted,
            include_subgroups: true,
        }
    }
}

fn alignment_row(
    name: &str,
    kind: ReferenceKind,
    model: &DistributionMap,
    reference: &DistributionMap,
    questionnaire: &Questionnaire,
    epsilon: f64,
) -> Result<AlignmentRow> {
    let per = per_question_kl(model, reference, epsilon)?;
    let order: Vec<&str> = questionnaire.ids().filter(|q| per.contains_key(*q)).collect();
    let kl: Vec<f64> = order.iter().map(|q| per[*q]).collect();
    let wasserstein = order
        .iter()
        .map(|q| {
            let question = questionnaire.get(q).expect("question exists");
            if question.kind == QuestionKind::Ordinal {
                wasserstein_ordinal(model[*q].probs(), reference[*q].probs()).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    Ok(AlignmentRow {
        reference: name.to_string(),
        kind,
        mean_kl: kl.iter().sum::<f64>() / kl.len() as f64,
        kl,
        wasserstein,
        reference_entropy: mean_normalized_entropy(reference)?,
        closer_than_uniform: closer_than_uniform_count(model, reference, epsilon)?,
    })
}

/// Compares `model` against the whole table, against each subgroup, and
/// against the uniform baseline.
pub fn alignment_report(
    model_name: &str,
    model: &DistributionMap,
    table: &ReferenceTable,
    questionnaire: &Questionnaire,
    options: &AlignmentOptions,
) -> Result<AlignmentReport> {
    let questions: Vec<String> = questionnaire
        .ids()
        .filter(|q| model.contains_key(*q))
        .map(str::to_string)
        .collect();
    let restricted = questionnaire.subset(&questions)?;
    let population = reference_marginals(table, &restricted, None, options.weighting)?;
    let mut rows = vec![alignment_row(
        "population",
        ReferenceKind::Population,
        model,
        &population,
        &restricted,
        options.epsilon,
    )?];
    if options.include_subgroups && table.subgroups().is_some() {
        let groups = table.subgroup_values();
        let sub_rows: Vec<AlignmentRow> = groups
            .par_iter()
            .map(|g| {
                let reference = reference_marginals(table, &restricted, Some(g), options.weighting)?;
                alignment_row(g, ReferenceKind::Subgroup, model, &reference, &restricted, options.epsilon)
            })
            .collect::<Result<_>>()?;
        rows.extend(sub_rows);
    }
    rows.push(alignment_row(
        "uniform",
        ReferenceKind::Uniform,
        model,
        &uniform_like(model)?,
        &restricted,
        options.epsilon,
    )?);
    Ok(AlignmentReport {
        model: model_name.to_string(),
        questions,
        epsilon: options.epsilon,
        weighting: options.weighting,
        kl_units: "nats".into(),
        model_entropy: mean_normalized_entropy(model)?,
        rows,
    })
}

impl AlignmentReport {
    pub fn uniform_row(&self) -> Option<&AlignmentRow> {
        self.rows.iter().find(|r| r.kind == ReferenceKind::Uniform)
    }

    /// One line per reference.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "reference", "kind", "mean_kl", "reference_entropy", "closer_than_uniform", "epsilon", "weighting"])?;
        for r in &self.rows {
            w.write_record([
                self.model.clone(),
                r.reference.clone(),
                format!("{:?}", r.kind).to_lowercase(),
                r.mean_kl.to_string(),
                r.reference_entropy.to_string(),
                r.closer_than_uniform.to_string(),
                self.epsilon.to_string(),
                format!("{:?}", self.weighting).to_lowercase(),
            ])?;
        }
        into_string(w)
    }

    /// Long format: one line per (reference, question).
    pub fn per_question_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "reference", "kind", "question", "kl", "wasserstein"])?;
        for r in &self.rows {
            for (i, q) in self.questions.iter().enumerate() {
                w.write_record([
                    self.model.clone(),
                    r.reference.clone(),
                    format!("{:?}", r.kind).to_lowercase(),
                    q.clone(),
                    r.kl[i].to_string(),
                    r.wasserstein[i].map(|x| x.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        into_string(w)
    }
}

pub(crate) fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Table(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub subgroup: String,
    pub entropy: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyAlignmentCorrelation {
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub points: Vec<CorrelationPoint>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks with ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// Correlation between subgroup entropy and the model's mean KL to each
/// subgroup.
pub fn entropy_alignment_correlation(report: &AlignmentReport) -> Result<EntropyAlignmentCorrelation> {
    let points: Vec<CorrelationPoint> = report
        .rows
        .iter()
        .filter(|r| r.kind == ReferenceKind::Subgroup)
        .map(|r| CorrelationPoint {
            subgroup: r.reference.clone(),
            entropy: r.reference_entropy,
            mean_kl: r.mean_kl,
        })
        .collect();
    if points.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 3 subgroups, have {}",
            points.len()
        )));
    }
    let e: Vec<f64> = points.iter().map(|p| p.entropy).collect();
    let k: Vec<f64> = points.iter().map(|p| p.mean_kl).collect();
    let undefined = || Error::UndefinedCorrelation("subgroup entropy or KL is constant".into());
    Ok(EntropyAlignmentCorrelation {
        pearson_r: pearson(&e, &k).ok_or_else(undefined)?,
        spearman_rho: spearman(&e, &k).ok_or_else(undefined)?,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::questionnaire::{parse_questionnaire, AnswerOption};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sex_q() -> Questionnaire {
        parse_questionnaire(
            r#"{"name":"t","questions":[{"id":"SEX","text":"sex?","kind":"nominal",
            "answers":[{"code":"M","text":"Male"},{"code":"F","text":"Female"}]}]}"#,
        )
        .unwrap()
    }

    fn table(cells: &[&str], weights: Option<Vec<f64>>, groups: Option<Vec<&str>>) -> ReferenceTable {
        ReferenceTable::new(
            vec!["SEX".into()],
            cells.iter().map(|c| vec![c.to_string()]).collect(),
            weights,
            groups.map(|g| g.into_iter().map(String::from).collect()),
        )
        .unwrap()
    }

    fn dmap(entries: &[(&str, &[f64])]) -> DistributionMap {
        entries
            .iter()
            .map(|(q, p)| (q.to_string(), ResponseDistribution::new(*q, p.to_vec(), Provenance::Reference).unwrap()))
            .collect()
    }

    #[test]
    fn marginal_examples() {
        let qn = sex_q();
        let q = qn.get("SEX").unwrap();
        let t = table(&["M", "M", "F", "M"], None, None);
        assert_eq!(marginal_distribution(&t, q, None, Weighting::Unweighted).unwrap().probs(), &[0.75, 0.25]);
        let t = table(&["M", "F"], Some(vec![1.0, 3.0]), None);
        assert_eq!(marginal_distribution(&t, q, None, Weighting::Weighted).unwrap().probs(), &[0.25, 0.75]);
        let t = table(&["M", "F", "NA"], None, Some(vec!["x", "x", "y"]));
        assert!(matches!(
            marginal_distribution(&t, q, Some("zz"), Weighting::Unweighted),
            Err(Error::EmptySubgroup(_))
        ));
        // Missing cells are not in the denominator.
        assert_eq!(marginal_distribution(&t, q, None, Weighting::Unweighted).unwrap().probs(), &[0.5, 0.5]);
    }

    #[test]
    fn csv_round_trip_with_extras() {
        let csv = "SEX,SUBGROUP,WEIGHT\nM,CA,1.5\nF,NY,2\n,CA,1\n";
        let t = ReferenceTable::from_reader(csv.as_bytes()).unwrap();
        assert_eq!(t.columns(), &["SEX"]);
        assert_eq!(t.rows()[2][0], MISSING);
        assert_eq!(t.subgroup_values(), vec!["CA", "NY"]);
        t.validate(&sex_q()).unwrap();
        let back = ReferenceTable::from_reader(t.to_csv_string().unwrap().as_bytes()).unwrap();
        assert_eq!(t, back);
        let bad = ReferenceTable::from_reader("SEX\nX\n".as_bytes()).unwrap();
        assert!(bad.validate(&sex_q()).is_err());
        assert!(ReferenceTable::from_reader("SEX,WEIGHT\nM,-1\n".as_bytes()).is_err());
    }

    #[test]
    fn average_kl_examples() {
        let a = dmap(&[("Q1", &[0.2, 0.8]), ("Q2", &[0.5, 0.5])]);
        assert_eq!(average_kl_alignment(&a, &a, 0.0).unwrap(), 0.0);
        let u = dmap(&[("Q1", &[0.5, 0.5])]);
        assert_eq!(average_kl_alignment(&u, &u, 0.0).unwrap(), 0.0);
        // Constructed so the two KLs are 0.2 and 0.4 exactly: KL(p||q) for a
        // point mass p on category 0 is -ln q0.
        let model = dmap(&[("Q1", &[1.0, 0.0]), ("Q2", &[1.0, 0.0])]);
        let reference = dmap(&[("Q1", &[(-0.2f64).exp(), 1.0 - (-0.2f64).exp()]), ("Q2", &[(-0.4f64).exp(), 1.0 - (-0.4f64).exp()])]);
        assert_abs_diff_eq!(average_kl_alignment(&model, &reference, 0.0).unwrap(), 0.3, epsilon = 1e-12);
        let missing = dmap(&[("Q1", &[0.5, 0.5])]);
        assert!(average_kl_alignment(&a, &missing, 0.0).is_err());
    }

    #[test]
    fn closer_than_uniform_examples() {
        let r = dmap(&[("Q1", &[0.9, 0.1]), ("Q2", &[0.7, 0.3]), ("Q3", &[0.5, 0.5])]);
        // Model = reference: strictly closer wherever the reference is not
        // itself uniform; Q3 is a tie at 0 and counts as not closer.
        assert_eq!(closer_than_uniform_count(&r, &r, 0.0).unwrap(), 2);
        let u = dmap(&[("Q1", &[0.5, 0.5]), ("Q2", &[0.5, 0.5]), ("Q3", &[0.5, 0.5])]);
        assert_eq!(closer_than_uniform_count(&u, &r, 0.0).unwrap(), 0);
        let skew = dmap(&[("Q1", &[0.9, 0.1]), ("Q2", &[0.7, 0.3]), ("Q3", &[0.6, 0.4])]);
        assert_eq!(closer_than_uniform_count(&skew, &skew, 0.0).unwrap(), 3);
    }

    #[test]
    fn report_has_uniform_row_and_subgroups() {
        let qn = sex_q();
        let t = table(&["M", "M", "F", "F", "M", "F"], None, Some(vec!["a", "a", "b", "b", "c", "c"]));
        let model = dmap(&[("SEX", &[0.5, 0.5])]);
        let report = alignment_report("m", &model, &t, &qn, &AlignmentOptions::default()).unwrap();
        assert_eq!(report.rows.len(), 5);
        assert_eq!(report.uniform_row().unwrap().mean_kl, 0.0);
        for r in &report.rows {
            assert_abs_diff_eq!(r.mean_kl, r.kl.iter().sum::<f64>() / r.kl.len() as f64);
        }
        let again = alignment_report("m", &model, &t, &qn, &AlignmentOptions::default()).unwrap();
        assert_eq!(report, again);
        assert!(report.summary_csv().unwrap().starts_with("model,reference,kind,mean_kl"));
    }

    #[test]
    fn correlation_sign_for_uniform_model() {
        // Five single-question subgroups with increasing entropy; a uniform
        // model is closest to the most balanced one.
        let mut cells = Vec::new();
        let mut groups = Vec::new();
        for (g, males) in [("g1", 95), ("g2", 85), ("g3", 75), ("g4", 65), ("g5", 55)] {
            for i in 0..100 {
                cells.push(if i < males { "M" } else { "F" });
                groups.push(g);
            }
        }
        let t = table(&cells, None, Some(groups));
        let model = dmap(&[("SEX", &[0.5, 0.5])]);
        let report = alignment_report("u", &model, &t, &sex_q(), &AlignmentOptions::default()).unwrap();
        let c = entropy_alignment_correlation(&report).unwrap();
        assert!(c.pearson_r < -0.9, "{}", c.pearson_r);
        assert_abs_diff_eq!(c.spearman_rho, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn correlation_undefined_for_identical_subgroups() {
        let t = table(&["M", "F", "M", "F", "M", "F"], None, Some(vec!["a", "a", "b", "b", "c", "c"]));
        let model = dmap(&[("SEX", &[0.7, 0.3])]);
        let report = alignment_report("m", &model, &t, &sex_q(), &AlignmentOptions::default()).unwrap();
        assert!(matches!(entropy_alignment_correlation(&report), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn spearman_handles_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 15.0]).unwrap(), 0.5, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn subgroup_marginals_partition_the_population(
            rows in prop::collection::vec((0usize..3, 0usize..4), 1..200)
        ) {
            let q = Question::new(
                "Q", "q?", QuestionKind::Nominal,
                (0..3).map(|i| AnswerOption::new(i.to_string(), format!("a{i}"))).collect(),
            ).unwrap();
            let t = ReferenceTable::new(
                vec!["Q".into()],
                rows.iter().map(|(a, _)| vec![a.to_string()]).collect(),
                None,
                Some(rows.iter().map(|(_, g)| format!("g{g}")).collect()),
            ).unwrap();
            let whole = marginal_distribution(&t, &q, None, Weighting::Unweighted).unwrap();
            let mut mixed = [0.0; 3];
            for g in t.subgroup_values() {
                let share = t.subgroups().unwrap().iter().filter(|s| **s == g).count() as f64 / t.len() as f64;
                let m = marginal_distribution(&t, &q, Some(&g), Weighting::Unweighted).unwrap();
                for (acc, p) in mixed.iter_mut().zip(m.probs()) {
                    *acc += share * p;
                }
            }
            for (a, b) in mixed.iter().zip(whole.probs()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
