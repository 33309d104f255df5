//! Classifier two-sample test between two categorical tables.
//!
//! Rows are drawn from both tables, labeled by origin, split into train and
//! test parts and handed to a classifier. With balanced classes any
//! classifier's held-out accuracy `a` gives `TV >= 2a - 1`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::alignment::{into_string, ReferenceTable};
use crate::error::{Error, Result};

/// Seeds per discriminator run.
pub const DEFAULT_SEEDS: usize = 100;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// One-hot encoded rows: each row activates exactly one feature per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    n_columns: usize,
    active: Vec<u32>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.active.len().checked_div(self.n_columns).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.active[i * self.n_columns..(i + 1) * self.n_columns]
    }

    pub fn n_columns(&self) -> usize {
        self.n_columns
    }
}

/// Category vocabulary per column. Feature ids are assigned column by column
/// in sorted category order.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotEncoder {
    columns: Vec<String>,
    levels: Vec<BTreeMap<String, u32>>,
    feature_column: Vec<usize>,
}

impl OneHotEncoder {
    pub fn fit(tables: &[&ReferenceTable]) -> Result<Self> {
        let columns = tables
            .first()
            .ok_or_else(|| Error::Discriminator("no tables to encode".into()))?
            .columns()
            .to_vec();
        let mut levels: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); columns.len()];
        for t in tables {
            for row in t.rows() {
                for (c, cell) in row.iter().enumerate() {
                    levels[c].insert(cell);
                }
            }
        }
        let mut next = 0u32;
        let mut feature_column = Vec::new();
        let levels = levels
            .into_iter()
            .enumerate()
            .map(|(c, set)| {
                set.into_iter()
                    .map(|l| {
                        feature_column.push(c);
                        next += 1;
                        (l.to_string(), next - 1)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            columns,
            levels,
            feature_column,
        })
    }

    pub fn n_features(&self) -> usize {
        self.feature_column.len()
    }

    pub fn feature_column(&self) -> &[usize] {
        &self.feature_column
    }

    pub fn encode_rows<'a>(&self, rows: impl IntoIterator<Item = &'a Vec<String>>) -> Result<Encoded> {
        let mut active = Vec::new();
        for row in rows {
            for (c, cell) in row.iter().enumerate() {
                let f = self.levels[c].get(cell).ok_or_else(|| {
                    Error::Discriminator(format!("value {cell:?} of {} was not seen when encoding", self.columns[c]))
                })?;
                active.push(*f);
            }
        }
        Ok(Encoded {
            n_columns: self.columns.len(),
            active,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub columns: Vec<String>,
    pub n_features: usize,
    pub feature_column: Vec<usize>,
    pub train: Encoded,
    pub train_y: Vec<bool>,
    pub test: Encoded,
    pub test_y: Vec<bool>,
}

fn aligned_rows(reference: &ReferenceTable, columns: &[String]) -> Result<ReferenceTable> {
    let theirs: BTreeSet<&String> = reference.columns().iter().collect();
    let ours: BTreeSet<&String> = columns.iter().collect();
    if theirs != ours || columns.len() != reference.columns().len() {
        return Err(Error::Table(format!(
            "schema mismatch: {:?} vs {:?}",
            columns,
            reference.columns()
        )));
    }
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| reference.column_index(c).expect("same column set"))
        .collect();
    let rows = reference
        .rows()
        .iter()
        .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
        .collect();
    ReferenceTable::new(columns.to_vec(), rows, None, None)
}

/// Draws `n` rows from each table without replacement, labels synthetic rows
/// `true`, and splits each class into train and test by `test_fraction`.
pub fn build_task(
    synthetic: &ReferenceTable,
    reference: &ReferenceTable,
    n: usize,
    seed: u64,
    test_fraction: f64,
) -> Result<Task> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 rows per side".into()));
    }
    let reference = aligned_rows(reference, synthetic.columns())?;
    for (name, t) in [("synthetic", synthetic), ("reference", &reference)] {
        if t.len() < n {
            return Err(Error::Table(format!("{name} table has {} rows, need {n}", t.len())));
        }
    }
    let encoder = OneHotEncoder::fit(&[synthetic, &reference])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut train = Vec::with_capacity(2 * (n - n_test));
    let mut test = Vec::with_capacity(2 * n_test);
    for (label, table) in [(true, synthetic), (false, &reference)] {
        let mut picked = sample(&mut rng, table.len(), n).into_vec();
        picked.shuffle(&mut rng);
        for (j, i) in picked.into_iter().enumerate() {
            let dest = if j < n_test { &mut test } else { &mut train };
            dest.push((&table.rows()[i], label));
        }
    }
    // Interleave classes so row order carries no label information.
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(Task {
        columns: synthetic.columns().to_vec(),
        n_features: encoder.n_features(),
        feature_column: encoder.feature_column().to_vec(),
        train: encoder.encode_rows(train.iter().map(|(r, _)| *r))?,
        train_y: train.iter().map(|(_, y)| *y).collect(),
        test: encoder.encode_rows(test.iter().map(|(r, _)| *r))?,
        test_y: test.iter().map(|(_, y)| *y).collect(),
    })
}

pub trait Classifier: Send + Sync {
    fn name(&self) -> String;
    fn params(&self) -> Value;
    /// Fits on the training part and predicts the test part.
    fn fit_predict(&self, task: &Task) -> Result<Vec<bool>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub min_child_weight: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            trees: 200,
            max_depth: 6,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf(f64),
    /// Rows without `feature` go to `absent`.
    Split { feature: u32, column: usize, absent: usize, present: usize },
}

#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[u32]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(w) => return w,
                Node::Split { feature, column, absent, present } => {
                    at = if row[column] == feature { present } else { absent };
                }
            }
        }
    }
}

/// Gradient-boosted trees with logistic loss and second-order split gains,
/// specialised to one-hot rows.
#[derive(Debug, Clone, Default)]
pub struct Gbdt {
    pub params: GbdtParams,
}

#[derive(Debug, Clone)]
pub struct GbdtModel {
    trees: Vec<Tree>,
}

impl GbdtModel {
    pub fn margin(&self, row: &[u32]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum()
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Gbdt {
    pub fn new(params: GbdtParams) -> Self {
        Self { params }
    }

    pub fn fit(&self, x: &Encoded, y: &[bool], n_features: usize, feature_column: &[usize]) -> Result<GbdtModel> {
        if y.iter().all(|v| *v) || y.iter().all(|v| !*v) {
            return Err(Error::Discriminator("training data has a single class".into()));
        }
        let n = x.len();
        let mut margin = vec![0.0; n];
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut trees = Vec::with_capacity(self.params.trees);
        for _ in 0..self.params.trees {
            for i in 0..n {
                let p = sigmoid(margin[i]);
                grad[i] = p - if y[i] { 1.0 } else { 0.0 };
                hess[i] = (p * (1.0 - p)).max(1e-16);
            }
            let tree = self.grow(x, &grad, &hess, n_features, feature_column);
            for (i, m) in margin.iter_mut().enumerate() {
                *m += tree.predict(x.row(i));
            }
            trees.push(tree);
        }
        Ok(GbdtModel { trees })
    }

    fn leaf(&self, g: f64, h: f64) -> Node {
        Node::Leaf(-g / (h + self.params.lambda) * self.params.learning_rate)
    }

    fn grow(&self, x: &Encoded, grad: &[f64], hess: &[f64], n_features: usize, feature_column: &[usize]) -> Tree {
        let lambda = self.params.lambda;
        let score = |g: f64, h: f64| g * g / (h + lambda);
        let mut nodes = vec![Node::Leaf(0.0)];
        let mut frontier: Vec<(usize, Vec<u32>)> = vec![(0, (0..x.len() as u32).collect())];
        let mut hist = vec![(0.0f64, 0.0f64); n_features];
        for depth in 0..=self.params.max_depth {
            let mut next = Vec::new();
            for (id, rows) in frontier {
                let (g, h) = rows
                    .iter()
                    .fold((0.0, 0.0), |(g, h), &r| (g + grad[r as usize], h + hess[r as usize]));
                if depth == self.params.max_depth || rows.len() < 2 {
                    nodes[id] = self.leaf(g, h);
                    continue;
                }
                hist.iter_mut().for_each(|c| *c = (0.0, 0.0));
                for &r in &rows {
                    for &f in x.row(r as usize) {
                        let c = &mut hist[f as usize];
                        c.0 += grad[r as usize];
                        c.1 += hess[r as usize];
                    }
                }
                let parent = score(g, h);
                let mut best: Option<(f64, u32)> = None;
                for (f, &(gr, hr)) in hist.iter().enumerate() {
                    let (gl, hl) = (g - gr, h - hr);
                    if hr < self.params.min_child_weight || hl < self.params.min_child_weight {
                        continue;
                    }
                    let gain = score(gl, hl) + score(gr, hr) - parent;
                    if gain > 1e-12 && best.is_none_or(|(b, _)| gain > b) {
                        best = Some((gain, f as u32));
                    }
                }
                let Some((_, feature)) = best else {
                    nodes[id] = self.leaf(g, h);
                    continue;
                };
                let column = feature_column[feature as usize];
                let (present, absent): (Vec<u32>, Vec<u32>) =
                    rows.into_iter().partition(|&r| x.row(r as usize)[column] == feature);
                let a = nodes.len();
                nodes.push(Node::Leaf(0.0));
                nodes.push(Node::Leaf(0.0));
                nodes[id] = Node::Split {
                    feature,
                    column,
                    absent: a,
                    present: a + 1,
                };
                next.push((a, absent));
                next.push((a + 1, present));
            }
            frontier = next;
            if frontier.is_empty() {
                break;
            }
        }
        Tree { nodes }
    }
}

impl Classifier for Gbdt {
    fn name(&self) -> String {
        "gbdt".into()
    }

    fn params(&self) -> Value {
        json!({
            "trees": self.params.trees,
            "max_depth": self.params.max_depth,
            "learning_rate": self.params.learning_rate,
            "lambda": self.params.lambda,
            "min_child_weight": self.params.min_child_weight,
            "objective": "logistic",
        })
    }

    fn fit_predict(&self, task: &Task) -> Result<Vec<bool>> {
        let model = self.fit(&task.train, &task.train_y, task.n_features, &task.feature_column)?;
        Ok((0..task.test.len()).map(|i| model.margin(task.test.row(i)) > 0.0).collect())
    }
}

/// Majority label of each exact row pattern seen in training; unseen
/// patterns get the overall majority. The plug-in Bayes classifier for
/// low-cardinality tables.
#[derive(Debug, Clone, Copy, Default)]
pub struct CellMajority;

impl Classifier for CellMajority {
    fn name(&self) -> String {
        "cell-majority".into()
    }

    fn params(&self) -> Value {
        json!({})
    }

    fn fit_predict(&self, task: &Task) -> Result<Vec<bool>> {
        let positives = task.train_y.iter().filter(|y| **y).count();
        if positives == 0 || positives == task.train_y.len() {
            return Err(Error::Discriminator("training data has a single class".into()));
        }
        let overall = 2 * positives > task.train_y.len();
        let mut votes: HashMap<&[u32], (usize, usize)> = HashMap::new();
        for (i, y) in task.train_y.iter().enumerate() {
            let v = votes.entry(task.train.row(i)).or_default();
            if *y {
                v.0 += 1;
            } else {
                v.1 += 1;
            }
        }
        Ok((0..task.test.len())
            .map(|i| match votes.get(task.test.row(i)) {
                Some((p, q)) if p != q => p > q,
                _ => overall,
            })
            .collect())
    }
}

pub fn classifier_by_name(name: &str, params: GbdtParams) -> Result<Box<dyn Classifier>> {
    match name {
        "gbdt" => Ok(Box::new(Gbdt::new(params))),
        "cell-majority" => Ok(Box::new(CellMajority)),
        other => Err(Error::InvalidArgument(format!("unknown classifier {other:?}"))),
    }
}

/// Held-out accuracy of `classifier` on `task`.
pub fn train_discriminator(task: &Task, classifier: &dyn Classifier) -> Result<f64> {
    let predicted = classifier.fit_predict(task)?;
    if predicted.len() != task.test_y.len() {
        return Err(Error::Discriminator("classifier returned the wrong number of predictions".into()));
    }
    let correct = predicted.iter().zip(&task.test_y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / predicted.len() as f64)
}

pub fn tv_lower_bound(accuracy: f64) -> f64 {
    (2.0 * accuracy - 1.0).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorReport {
    pub seeds: Vec<SeedResult>,
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_accuracy: f64,
    pub n_seeds: usize,
    pub tv_lower_bound: f64,
    pub n_per_side: usize,
    pub synthetic_rows: usize,
    pub reference_rows: usize,
    pub test_fraction: f64,
    pub classifier: String,
    pub hyperparameters: Value,
    pub feature_encoding: String,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOptions {
    pub n: usize,
    pub seeds: usize,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for DiscriminatorOptions {
    fn default() -> Self {
        Self {
            n: 1000,
            seeds: DEFAULT_SEEDS,
            seed: 0,
            test_fraction: DEFAULT_TEST_FRACTION,
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Repeats [`build_task`] and [`train_discriminator`] over `options.seeds`
/// seeds, `options.seed`, `options.seed + 1`, ...
pub fn discriminator_test(
    synthetic: &ReferenceTable,
    reference: &ReferenceTable,
    classifier: &dyn Classifier,
    options: &DiscriminatorOptions,
) -> Result<DiscriminatorReport> {
    if options.seeds == 0 {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let seeds: Vec<SeedResult> = (0..options.seeds as u64)
        .into_par_iter()
        .map(|s| {
            let seed = options.seed.wrapping_add(s);
            let task = build_task(synthetic, reference, options.n, seed, options.test_fraction)?;
            Ok(SeedResult {
                seed,
                accuracy: train_discriminator(&task, classifier)?,
                n_train: task.train_y.len(),
                n_test: task.test_y.len(),
            })
        })
        .collect::<Result<_>>()?;
    let accs: Vec<f64> = seeds.iter().map(|s| s.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(DiscriminatorReport {
        n_seeds: seeds.len(),
        seeds,
        mean_accuracy: mean,
        std_accuracy: std,
        tv_lower_bound: tv_lower_bound(mean),
        n_per_side: options.n,
        synthetic_rows: synthetic.len(),
        reference_rows: reference.len(),
        test_fraction: options.test_fraction,
        classifier: classifier.name(),
        hyperparameters: classifier.params(),
        feature_encoding: "one-hot per column over the answer codes seen in either table, missing marker included".into(),
        note: "TV >= max(0, 2 * mean accuracy - 1) holds for any classifier with balanced classes".into(),
    })
}

impl DiscriminatorReport {
    pub fn seeds_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", "accuracy", "n_train", "n_test"])?;
        for s in &self.seeds {
            w.write_record([s.seed.to_string(), s.accuracy.to_string(), s.n_train.to_string(), s.n_test.to_string()])?;
        }
        into_string(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupBaseline {
    pub subgroup: String,
    pub n_per_side: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub tv_lower_bound: f64,
}

/// For each subgroup, discriminates its rows from an equally sized sample of
/// all other rows. `n` defaults to the subgroup size.
pub fn subgroup_vs_rest_baseline(
    reference: &ReferenceTable,
    classifier: &dyn Classifier,
    n: Option<usize>,
    options: &DiscriminatorOptions,
) -> Result<Vec<SubgroupBaseline>> {
    let groups = reference.subgroup_values();
    if groups.len() < 2 {
        return Err(Error::Table(format!("need at least 2 subgroups, found {}", groups.len())));
    }
    groups
        .iter()
        .map(|g| {
            let inside = reference.filter_subgroup(g, false)?;
            let rest = reference.filter_subgroup(g, true)?;
            let size = n.unwrap_or(inside.len());
            if inside.len() < size || rest.len() < size {
                return Err(Error::Table(format!(
                    "subgroup {g} has {} rows and the rest {}, need {size} each",
                    inside.len(),
                    rest.len()
                )));
            }
            let opts = DiscriminatorOptions { n: size, ..options.clone() };
            let r = discriminator_test(&inside, &rest, classifier, &opts)?;
            Ok(SubgroupBaseline {
                subgroup: g.clone(),
                n_per_side: size,
                mean_accuracy: r.mean_accuracy,
                std_accuracy: r.std_accuracy,
                tv_lower_bound: r.tv_lower_bound,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draw(probs: &[f64], n: usize, seed: u64, extra: Option<&str>) -> ReferenceTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                let i = crate::bias::sample_index(probs, u);
                let mut r = vec![format!("c{i}")];
                if let Some(e) = extra {
                    r.push(e.to_string());
                }
                r
            })
            .collect();
        let mut cols = vec!["X".to_string()];
        if extra.is_some() {
            cols.push("Y".into());
        }
        ReferenceTable::new(cols, rows, None, None).unwrap()
    }

    #[test]
    fn task_shape_and_determinism() {
        let a = draw(&[0.5, 0.5], 150, 1, None);
        let b = draw(&[0.5, 0.5], 150, 2, None);
        let t = build_task(&a, &b, 100, 9, 0.2).unwrap();
        assert_eq!((t.train_y.len(), t.test_y.len()), (160, 40));
        assert_eq!(t.train_y.iter().filter(|y| **y).count(), 80);
        assert_eq!(t.test_y.iter().filter(|y| **y).count(), 20);
        let again = build_task(&a, &b, 100, 9, 0.2).unwrap();
        assert_eq!(t.train, again.train);
        assert_eq!(t.test_y, again.test_y);
        let small = draw(&[0.5, 0.5], 50, 3, None);
        assert!(build_task(&a, &small, 100, 9, 0.2).is_err());
        let other = draw(&[0.5, 0.5], 150, 1, Some("z"));
        assert!(build_task(&a, &other, 100, 9, 0.2).is_err());
    }

    #[test]
    fn separable_and_identical() {
        let a = draw(&[0.3, 0.7], 5000, 1, Some("yes"));
        let b = draw(&[0.3, 0.7], 5000, 2, Some("no"));
        let clf = Gbdt::new(GbdtParams { trees: 20, ..Default::default() });
        let task = build_task(&a, &b, 5000, 0, 0.2).unwrap();
        assert!(train_discriminator(&task, &clf).unwrap() >= 0.99);

        let b = draw(&[0.3, 0.7], 5000, 2, Some("yes"));
        let task = build_task(&a, &b, 5000, 0, 0.2).unwrap();
        let acc = train_discriminator(&task, &clf).unwrap();
        assert!((acc - 0.5).abs() <= 0.03, "{acc}");
    }

    #[test]
    fn gbdt_reaches_bayes_rate_on_one_column() {
        // TV((0.75, 0.25), (0.25, 0.75)) = 0.5, optimum 0.75.
        let a = draw(&[0.75, 0.25], 5000, 3, None);
        let b = draw(&[0.25, 0.75], 5000, 4, None);
        let task = build_task(&a, &b, 5000, 1, 0.2).unwrap();
        let acc = train_discriminator(&task, &Gbdt::default()).unwrap();
        assert!((acc - 0.75).abs() <= 0.03, "{acc}");
        let cell = train_discriminator(&task, &CellMajority).unwrap();
        assert!((cell - 0.75).abs() <= 0.03, "{cell}");
    }

    #[test]
    fn single_class_training_is_an_error() {
        let task = Task {
            columns: vec!["X".into()],
            n_features: 1,
            feature_column: vec![0],
            train: Encoded { n_columns: 1, active: vec![0, 0] },
            train_y: vec![true, true],
            test: Encoded { n_columns: 1, active: vec![0] },
            test_y: vec![true],
        };
        assert!(Gbdt::default().fit_predict(&task).is_err());
        assert!(CellMajority.fit_predict(&task).is_err());
    }

    #[test]
    fn report_single_seed_and_clamp() {
        let a = draw(&[0.5, 0.5], 200, 1, None);
        let b = draw(&[0.5, 0.5], 200, 2, None);
        let clf = Gbdt::new(GbdtParams { trees: 5, ..Default::default() });
        let opts = DiscriminatorOptions { n: 200, seeds: 1, seed: 4, test_fraction: 0.2 };
        let r = discriminator_test(&a, &b, &clf, &opts).unwrap();
        let task = build_task(&a, &b, 200, 4, 0.2).unwrap();
        assert_eq!(r.mean_accuracy, train_discriminator(&task, &clf).unwrap());
        assert_eq!(r.std_accuracy, 0.0);
        assert_eq!(tv_lower_bound(0.49), 0.0);
        assert!((tv_lower_bound(0.75) - 0.5).abs() < 1e-15);
        assert!(r.seeds_csv().unwrap().starts_with("seed,accuracy"));
    }

    #[test]
    fn label_swap_is_symmetric() {
        let a = draw(&[0.6, 0.3, 0.1], 5000, 5, None);
        let b = draw(&[0.4, 0.4, 0.2], 5000, 6, None);
        let clf = Gbdt::new(GbdtParams { trees: 50, ..Default::default() });
        let ab = train_discriminator(&build_task(&a, &b, 5000, 2, 0.2).unwrap(), &clf).unwrap();
        let ba = train_discriminator(&build_task(&b, &a, 5000, 2, 0.2).unwrap(), &clf).unwrap();
        assert!((ab - ba).abs() < 0.02, "{ab} {ba}");
    }

    #[test]
    fn subgroup_baseline_identical_and_distinct() {
        let mut rows = Vec::new();
        let mut groups = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for g in ["a", "b"] {
            for _ in 0..1000 {
                let x = if rng.gen_bool(0.5) { "1" } else { "2" };
                rows.push(vec![x.to_string(), if g == "a" { "p" } else { "q" }.to_string()]);
                groups.push(g.to_string());
            }
        }
        let t = ReferenceTable::new(vec!["X".into(), "Z".into()], rows, None, Some(groups)).unwrap();
        let opts = DiscriminatorOptions { seeds: 3, ..Default::default() };
        let clf = Gbdt::new(GbdtParams { trees: 10, ..Default::default() });
        let r = subgroup_vs_rest_baseline(&t, &clf, None, &opts).unwrap();
        assert!(r.iter().all(|b| b.mean_accuracy > 0.99));
        let same = ReferenceTable::new(
            vec!["X".into()],
            t.rows().iter().map(|r| vec![r[0].clone()]).collect(),
            None,
            Some(t.subgroups().unwrap().to_vec()),
        )
        .unwrap();
        let r = subgroup_vs_rest_baseline(&same, &clf, None, &opts).unwrap();
        assert!(r.iter().all(|b| (b.mean_accuracy - 0.5).abs() < 0.05), "{r:?}");
        assert!(subgroup_vs_rest_baseline(&same, &clf, Some(5000), &opts).is_err());
    }
}
