//! Text-describability of a dataset collection.
//!
//! Every dataset's class names are pooled into one deduplicated vocabulary. Each
//! ground-truth crop embedding is classified against one prompt embedding per
//! vocabulary entry; a dataset's accuracy counts a crop as correct only when the
//! winning class is that crop's own class, so predictions landing on another
//! dataset's classes are errors. Datasets are then ranked by accuracy and cut
//! into contiguous splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::embedding::{ann_key, prompt_key, EmbeddingStore};
use crate::{Error, Result};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "an image of {}";

/// Fills the first `{}` of `template` with the class name.
pub fn render_prompt(template: &str, class_name: &str) -> String {
    template.replacen("{}", class_name, 1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnionClassSet {
    classes: Vec<String>,
    membership: BTreeMap<String, BTreeSet<usize>>,
}

impl UnionClassSet {
    /// Normalized class names, ascending.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, normalized_name: &str) -> Option<usize> {
        self.classes
            .binary_search_by(|c| c.as_str().cmp(normalized_name))
            .ok()
    }

    /// Indices of the dataset's own classes.
    pub fn membership(&self, dataset_id: &str) -> Option<&BTreeSet<usize>> {
        self.membership.get(dataset_id)
    }

    pub fn dataset_ids(&self) -> impl Iterator<Item = &str> {
        self.membership.keys().map(String::as_str)
    }
}

pub fn build_union<'a, I>(datasets: I) -> Result<UnionClassSet>
where
    I: IntoIterator<Item = &'a Dataset>,
{
    let datasets: Vec<&Dataset> = datasets.into_iter().collect();
    if datasets.is_empty() {
        return Err(Error::EmptyCollection);
    }
    let classes: Vec<String> = datasets
        .iter()
        .flat_map(|d| d.categories().iter().map(|c| c.normalized_name.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut union = UnionClassSet {
        classes,
        membership: BTreeMap::new(),
    };
    for d in datasets {
        let own: BTreeSet<usize> = d
            .categories()
            .iter()
            .map(|c| union.index_of(&c.normalized_name).expect("class was pooled"))
            .collect();
        if union.membership.insert(d.dataset_id().to_owned(), own).is_some() {
            return Err(Error::DuplicateId(format!("dataset {}", d.dataset_id())));
        }
    }
    Ok(union)
}

/// One unit-norm prompt vector per vocabulary class, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMatrix {
    dimension: usize,
    data: Vec<f32>,
}

impl PromptMatrix {
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dimension = rows.first().map(Vec::len).ok_or(Error::EmptyCollection)?;
        let mut data = Vec::with_capacity(dimension * rows.len());
        for r in rows {
            if r.len() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { dimension, data })
    }

    /// Looks up `prompt:<class>` for every vocabulary class, in vocabulary order.
    pub fn from_store(store: &EmbeddingStore, union: &UnionClassSet) -> Result<Self> {
        let mut missing = Vec::new();
        let mut rows = Vec::with_capacity(union.len());
        for class in union.classes() {
            let key = prompt_key(class);
            match store.get(&key) {
                Some(v) => rows.push(v.to_vec()),
                None => missing.push(key),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingEmbedding(missing));
        }
        Self::from_rows(&rows)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dimension
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }
}

/// Index of the prompt row with the largest dot product; ties go to the lowest index.
pub fn classify_crop(crop: &[f32], prompts: &PromptMatrix) -> Result<usize> {
    if crop.len() != prompts.dimension() {
        return Err(Error::DimensionMismatch {
            expected: prompts.dimension(),
            actual: crop.len(),
        });
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..prompts.rows() {
        let score: f64 = crop
            .iter()
            .zip(prompts.row(i))
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Averaging {
    /// Fraction of all evaluated crops classified correctly.
    #[default]
    Micro,
    /// Mean over the dataset's classes (with at least one crop) of per-class accuracy.
    Macro,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetAccuracy {
    pub accuracy: f64,
    pub evaluated: usize,
    pub correct: usize,
}

pub fn dataset_accuracy(
    dataset: &Dataset,
    store: &EmbeddingStore,
    union: &UnionClassSet,
    prompts: &PromptMatrix,
    averaging: Averaging,
) -> Result<DatasetAccuracy> {
    if prompts.rows() != union.len() {
        return Err(Error::DimensionMismatch {
            expected: union.len(),
            actual: prompts.rows(),
        });
    }
    if store.dimension() != prompts.dimension() {
        return Err(Error::DimensionMismatch {
            expected: prompts.dimension(),
            actual: store.dimension(),
        });
    }

    let mut crops = Vec::new();
    let mut missing = Vec::new();
    for a in dataset.annotations().iter().filter(|a| !a.ignore) {
        let key = ann_key(a.id);
        let truth = dataset
            .category(a.category_id)
            .and_then(|c| union.index_of(&c.normalized_name))
            .ok_or_else(|| {
                Error::DanglingReference(format!(
                    "category {} of dataset {} is not in the vocabulary",
                    a.category_id,
                    dataset.dataset_id()
                ))
            })?;
        match store.get(&key) {
            Some(v) => crops.push((a.category_id, truth, v)),
            None => missing.push(key),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingEmbedding(missing));
    }
    if crops.is_empty() {
        return Err(Error::EmptyDataset(dataset.dataset_id().to_owned()));
    }

    let hits: Vec<bool> = crops
        .par_iter()
        .map(|&(_, truth, v)| classify_crop(v, prompts).map(|p| p == truth))
        .collect::<Result<_>>()?;
    let correct = hits.iter().filter(|&&h| h).count();
    let evaluated = crops.len();

    let accuracy = match averaging {
        Averaging::Micro => correct as f64 / evaluated as f64,
        Averaging::Macro => {
            let mut per_class: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
            for (&(cat, _, _), &hit) in crops.iter().zip(&hits) {
                let e = per_class.entry(cat).or_default();
                e.0 += usize::from(hit);
                e.1 += 1;
            }
            per_class
                .values()
                .map(|&(c, n)| c as f64 / n as f64)
                .sum::<f64>()
                / per_class.len() as f64
        }
    };
    Ok(DatasetAccuracy {
        accuracy,
        evaluated,
        correct,
    })
}

/// Zero-based split index, displayed as `S1`, `S2`, ...
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SplitLabel(pub usize);

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0 + 1)
    }
}

impl FromStr for SplitLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .strip_prefix('S')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .map(|n| SplitLabel(n - 1))
            .ok_or_else(|| Error::InvalidValue(format!("bad split label {s:?}")))
    }
}

/// Dataset to split mapping.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    labels: BTreeMap<String, SplitLabel>,
}

impl SplitAssignment {
    pub fn from_labels(labels: BTreeMap<String, SplitLabel>) -> Self {
        Self { labels }
    }

    pub fn label_of(&self, dataset_id: &str) -> Option<SplitLabel> {
        self.labels.get(dataset_id).copied()
    }

    pub fn splits(&self) -> Vec<SplitLabel> {
        self.labels
            .values()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Member dataset ids of a split, ascending.
    pub fn members(&self, split: SplitLabel) -> Vec<&str> {
        self.labels
            .iter()
            .filter(|(_, &l)| l == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, SplitLabel)> {
        self.labels.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

fn check_accuracy(dataset_id: &str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::InvalidAccuracy {
            dataset_id: dataset_id.to_owned(),
            value,
        })
    }
}

/// Ranking used for splits and the spectrum: accuracy descending, then id ascending.
fn ranked<'a, I>(accuracies: I) -> Vec<(&'a str, f64)>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut v: Vec<(&str, f64)> = accuracies.into_iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v
}

/// Cuts the ranking into consecutive splits of the requested sizes.
pub fn partition_splits(
    accuracies: &BTreeMap<String, f64>,
    sizes: &[usize],
) -> Result<SplitAssignment> {
    for (id, &a) in accuracies {
        check_accuracy(id, a)?;
    }
    let total: usize = sizes.iter().sum();
    if total != accuracies.len() {
        return Err(Error::SizeMismatch {
            sizes_total: total,
            datasets: accuracies.len(),
        });
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidValue("split sizes must be positive".into()));
    }
    let order = ranked(accuracies.iter().map(|(k, &v)| (k.as_str(), v)));
    let mut labels = BTreeMap::new();
    let mut rest = order.iter();
    for (split, &n) in sizes.iter().enumerate() {
        for (id, _) in rest.by_ref().take(n) {
            labels.insert((*id).to_owned(), SplitLabel(split));
        }
    }
    Ok(SplitAssignment { labels })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetScore {
    pub accuracy: f64,
    pub evaluated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescribabilityProfile {
    scores: BTreeMap<String, DatasetScore>,
    splits: SplitAssignment,
}

impl DescribabilityProfile {
    pub fn new(scores: BTreeMap<String, DatasetScore>, sizes: &[usize]) -> Result<Self> {
        let accuracies: BTreeMap<String, f64> =
            scores.iter().map(|(k, s)| (k.clone(), s.accuracy)).collect();
        let splits = partition_splits(&accuracies, sizes)?;
        Ok(Self { scores, splits })
    }

    pub fn scores(&self) -> &BTreeMap<String, DatasetScore> {
        &self.scores
    }

    pub fn splits(&self) -> &SplitAssignment {
        &self.splits
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumRow {
    pub dataset_id: String,
    pub accuracy: f64,
    pub evaluated: usize,
    pub split: SplitLabel,
}

/// Datasets in descending accuracy with their split labels.
pub fn spectrum(profile: &DescribabilityProfile) -> Vec<SpectrumRow> {
    ranked(profile.scores.iter().map(|(k, s)| (k.as_str(), s.accuracy)))
        .into_iter()
        .map(|(id, accuracy)| SpectrumRow {
            dataset_id: id.to_owned(),
            accuracy,
            evaluated: profile.scores[id].evaluated,
            split: profile
                .splits
                .label_of(id)
                .expect("every scored dataset is assigned"),
        })
        .collect()
}
