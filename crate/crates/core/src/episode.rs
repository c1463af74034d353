//! Seeded K-shot training episodes.
//!
//! An episode guarantees at least K selected images containing each category
//! (fewer only when the dataset does not have K such images). Images are chosen
//! greedily: categories are visited in a shuffled order and each draws uniformly
//! from its remaining candidate images until its quota is met. An image drawn for
//! one category also counts for every other category it contains.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{to_coco_annotation, CocoCategory, CocoFile, CocoImage, Dataset};
use crate::rng::Pcg32;
use crate::{fsutil, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub dataset_id: String,
    pub k: u32,
    pub seed: u64,
    /// Selected images, ascending.
    pub image_ids: Vec<u64>,
    /// Non-ignored annotations on the selected images, ascending.
    pub annotation_ids: Vec<u64>,
    /// Number of selected images containing each category (every category listed).
    pub per_category_image_counts: BTreeMap<u64, usize>,
    /// Categories that ended below K because the dataset has fewer candidate images.
    pub shortfall_categories: Vec<u64>,
}

/// One greedy insertion: `image_id` was drawn to fill `category_id`'s quota.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceStep {
    pub category_id: u64,
    pub image_id: u64,
}

/// Images (ascending) holding at least one non-ignored box of each category.
fn candidates_by_category(dataset: &Dataset) -> BTreeMap<u64, Vec<u64>> {
    let mut by_cat: BTreeMap<u64, BTreeSet<u64>> = dataset
        .categories()
        .iter()
        .map(|c| (c.id, BTreeSet::new()))
        .collect();
    for a in dataset.annotations().iter().filter(|a| !a.ignore) {
        by_cat.entry(a.category_id).or_default().insert(a.image_id);
    }
    by_cat
        .into_iter()
        .map(|(c, imgs)| (c, imgs.into_iter().collect()))
        .collect()
}

pub fn sample_episode(dataset: &Dataset, k: u32, seed: u64) -> Result<Episode> {
    sample_episode_traced(dataset, k, seed).map(|(e, _)| e)
}

/// Like [`sample_episode`], also returning the order in which images were drawn.
pub fn sample_episode_traced(
    dataset: &Dataset,
    k: u32,
    seed: u64,
) -> Result<(Episode, Vec<TraceStep>)> {
    if k == 0 {
        return Err(Error::InvalidValue("k must be at least 1".into()));
    }
    let quota = k as usize;
    let candidates = candidates_by_category(dataset);
    let mut rng = Pcg32::for_episode(dataset.dataset_id(), k, seed);

    let mut order: Vec<u64> = dataset.categories().iter().map(|c| c.id).collect();
    rng.shuffle(&mut order);

    let mut selected: HashSet<u64> = HashSet::new();
    let mut trace = Vec::new();
    for &cat in &order {
        let cands = &candidates[&cat];
        let mut have = cands.iter().filter(|i| selected.contains(i)).count();
        if have >= quota {
            continue;
        }
        let mut remaining: Vec<u64> = cands
            .iter()
            .copied()
            .filter(|i| !selected.contains(i))
            .collect();
        while have < quota && !remaining.is_empty() {
            let image_id = remaining.remove(rng.index(remaining.len()));
            selected.insert(image_id);
            trace.push(TraceStep {
                category_id: cat,
                image_id,
            });
            have += 1;
        }
    }

    let mut image_ids: Vec<u64> = selected.into_iter().collect();
    image_ids.sort_unstable();
    let episode = build_episode(dataset, k, seed, image_ids, &candidates);
    Ok((episode, trace))
}

fn build_episode(
    dataset: &Dataset,
    k: u32,
    seed: u64,
    image_ids: Vec<u64>,
    candidates: &BTreeMap<u64, Vec<u64>>,
) -> Episode {
    let chosen: HashSet<u64> = image_ids.iter().copied().collect();
    let mut annotation_ids: Vec<u64> = image_ids
        .iter()
        .flat_map(|&i| dataset.annotations_on(i))
        .filter(|a| !a.ignore)
        .map(|a| a.id)
        .collect();
    annotation_ids.sort_unstable();
    let per_category_image_counts: BTreeMap<u64, usize> = candidates
        .iter()
        .map(|(&c, imgs)| (c, imgs.iter().filter(|i| chosen.contains(i)).count()))
        .collect();
    let shortfall_categories = per_category_image_counts
        .iter()
        .filter(|&(_, &n)| n < k as usize)
        .map(|(&c, _)| c)
        .collect();
    Episode {
        dataset_id: dataset.dataset_id().to_owned(),
        k,
        seed,
        image_ids,
        annotation_ids,
        per_category_image_counts,
        shortfall_categories,
    }
}

/// Samples every `(k, seed)` pair on a pool of `jobs` threads. Output order follows `requests`.
pub fn sample_many(dataset: &Dataset, requests: &[(u32, u64)], jobs: usize) -> Result<Vec<Episode>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidValue(format!("thread pool: {e}")))?;
    pool.install(|| {
        requests
            .par_iter()
            .map(|&(k, seed)| sample_episode(dataset, k, seed))
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeStats {
    pub images: usize,
    pub annotations: usize,
    pub per_category: BTreeMap<u64, usize>,
}

/// Image and box totals of an episode, recounted from the dataset.
pub fn episode_stats(episode: &Episode, dataset: &Dataset) -> Result<EpisodeStats> {
    if episode.dataset_id != dataset.dataset_id() {
        return Err(Error::ForeignEpisode {
            episode: episode.dataset_id.clone(),
            dataset: dataset.dataset_id().to_owned(),
        });
    }
    let candidates = candidates_by_category(dataset);
    let chosen: HashSet<u64> = episode.image_ids.iter().copied().collect();
    let annotations = episode
        .image_ids
        .iter()
        .flat_map(|&i| dataset.annotations_on(i))
        .filter(|a| !a.ignore)
        .count();
    Ok(EpisodeStats {
        images: chosen.len(),
        annotations,
        per_category: candidates
            .iter()
            .map(|(&c, imgs)| (c, imgs.iter().filter(|i| chosen.contains(i)).count()))
            .collect(),
    })
}

/// Sidecar header written next to an episode's COCO file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub dataset_id: String,
    pub k: u32,
    pub seed: u64,
    pub n_images: usize,
    pub n_annotations: usize,
    pub shortfall_categories: Vec<u64>,
}

/// `episode.json` -> `episode.meta.json`.
pub fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("meta.json")
}

/// COCO subset of the dataset restricted to the episode (all categories kept).
pub fn episode_coco(episode: &Episode, dataset: &Dataset) -> Result<CocoFile> {
    if episode.dataset_id != dataset.dataset_id() {
        return Err(Error::ForeignEpisode {
            episode: episode.dataset_id.clone(),
            dataset: dataset.dataset_id().to_owned(),
        });
    }
    let images = episode
        .image_ids
        .iter()
        .map(|&id| {
            let i = dataset
                .image(id)
                .ok_or_else(|| Error::DanglingReference(format!("episode image {id}")))?;
            Ok(CocoImage {
                id: i.id,
                width: i.width,
                height: i.height,
                file_name: i.file_name.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let wanted: HashSet<u64> = episode.annotation_ids.iter().copied().collect();
    let annotations = dataset
        .annotations()
        .iter()
        .filter(|a| wanted.contains(&a.id))
        .map(to_coco_annotation)
        .collect();
    let categories = dataset
        .categories()
        .iter()
        .map(|c| CocoCategory {
            id: c.id,
            name: c.name.clone(),
        })
        .collect();
    Ok(CocoFile {
        images,
        annotations,
        categories,
    })
}

pub fn write_episode_manifest(episode: &Episode, dataset: &Dataset, path: &Path) -> Result<()> {
    let coco = episode_coco(episode, dataset)?;
    let header = ManifestHeader {
        dataset_id: episode.dataset_id.clone(),
        k: episode.k,
        seed: episode.seed,
        n_images: episode.image_ids.len(),
        n_annotations: episode.annotation_ids.len(),
        shortfall_categories: episode.shortfall_categories.clone(),
    };
    let body = serde_json::to_vec_pretty(&coco).expect("COCO structs always serialize");
    let head = serde_json::to_vec_pretty(&header).expect("header always serializes");
    fsutil::write_atomic(path, &body)?;
    fsutil::write_atomic(&sidecar_path(path), &head)
}

pub fn read_episode_manifest(path: &Path) -> Result<Episode> {
    let head: ManifestHeader =
        serde_json::from_str(&fsutil::read_to_string(&sidecar_path(path))?)
            .map_err(|e| Error::MalformedFile(format!("episode header: {e}")))?;
    let body = Dataset::from_json(head.dataset_id.clone(), &fsutil::read_to_string(path)?)?;
    if body.images().len() != head.n_images || body.annotations().len() != head.n_annotations {
        return Err(Error::MalformedFile(format!(
            "episode header declares {}/{} images/annotations, body has {}/{}",
            head.n_images,
            head.n_annotations,
            body.images().len(),
            body.annotations().len()
        )));
    }
    if head.k == 0 {
        return Err(Error::MalformedFile("episode header has k = 0".into()));
    }
    let image_ids = body.images().iter().map(|i| i.id).collect();
    let episode = build_episode(
        &body,
        head.k,
        head.seed,
        image_ids,
        &candidates_by_category(&body),
    );
    if episode.annotation_ids.len() != head.n_annotations {
        return Err(Error::MalformedFile("episode body contains ignore regions".into()));
    }
    if episode.shortfall_categories != head.shortfall_categories {
        return Err(Error::MalformedFile(
            "episode header shortfall disagrees with body".into(),
        ));
    }
    Ok(episode)
}
