//! Straightforward reference implementations used to cross-check the library.

use std::collections::BTreeMap;

/// Integer box `[x, y, w, h]`.
pub type IBox = [i64; 4];

fn inter_union(a: &IBox, b: &IBox) -> (i64, i64) {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0);
    let inter = iw * ih;
    (inter, a[2] * a[3] + b[2] * b[3] - inter)
}

/// IoU as an exact fraction `(num, den)`.
pub fn iou_frac(a: &IBox, b: &IBox) -> (i64, i64) {
    let (i, u) = inter_union(a, b);
    if u <= 0 {
        (0, 1)
    } else {
        (i, u)
    }
}

fn frac_gt(a: (i64, i64), b: (i64, i64)) -> bool {
    a.0 * b.1 > b.0 * a.1
}

#[derive(Clone, Debug)]
pub struct OGt {
    pub image: u64,
    pub class: u64,
    pub bbox: IBox,
    pub crowd: bool,
}

#[derive(Clone, Debug)]
pub struct ODet {
    pub image: u64,
    pub class: u64,
    pub bbox: IBox,
    pub score: f64,
}

/// Outcome of one detection at one threshold: Some(true) hit, Some(false) miss,
/// None when it only overlaps a crowd region.
fn match_image(gts: &[&OGt], dets: &[&ODet], pct: i64) -> Vec<(f64, Option<bool>)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // insertion sort keeps equal scores in input order
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && dets[order[j]].score > dets[order[j - 1]].score {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    order.truncate(100);
    let passes = |f: (i64, i64)| f.0 * 100 >= pct * f.1;
    let mut used = vec![false; gts.len()];
    let mut out = Vec::new();
    for &d in &order {
        let det = dets[d];
        let mut pick: Option<(usize, (i64, i64))> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.crowd || used[g] {
                continue;
            }
            let f = iou_frac(&det.bbox, &gt.bbox);
            if passes(f) && pick.is_none_or(|(_, best)| frac_gt(f, best)) {
                pick = Some((g, f));
            }
        }
        if let Some((g, _)) = pick {
            used[g] = true;
            out.push((det.score, Some(true)));
            continue;
        }
        let crowd_hit = gts
            .iter()
            .any(|gt| gt.crowd && passes(iou_frac(&det.bbox, &gt.bbox)));
        out.push((det.score, if crowd_hit { None } else { Some(false) }));
    }
    out
}

/// Precision at recall point r is the best precision at any rank whose recall reaches r.
fn ap_101(hits: &[bool], n_gt: i64) -> f64 {
    let mut sum = 0.0;
    for point in 0..=100i64 {
        let mut best = 0.0f64;
        let mut tp = 0i64;
        for (j, &h) in hits.iter().enumerate() {
            tp += i64::from(h);
            if tp * 100 >= point * n_gt {
                best = best.max(tp as f64 / (j + 1) as f64);
            }
        }
        sum += best;
    }
    sum / 101.0
}

/// Per-class AP averaged over the ten thresholds, then over classes with regular boxes.
pub fn coco_ap(images: &[u64], classes: &[u64], gts: &[OGt], dets: &[ODet]) -> (Option<f64>, BTreeMap<u64, Option<f64>>) {
    let mut per_class = BTreeMap::new();
    for &c in classes {
        let n_gt = gts.iter().filter(|g| g.class == c && !g.crowd).count() as i64;
        if n_gt == 0 {
            per_class.insert(c, None);
            continue;
        }
        let mut total = 0.0;
        for step in 0..10 {
            let pct = 50 + 5 * step;
            let mut pooled: Vec<(f64, bool)> = Vec::new();
            let mut sorted_images = images.to_vec();
            sorted_images.sort_unstable();
            for &img in &sorted_images {
                let g: Vec<&OGt> = gts.iter().filter(|g| g.image == img && g.class == c).collect();
                let d: Vec<&ODet> = dets.iter().filter(|d| d.image == img && d.class == c).collect();
                for (score, outcome) in match_image(&g, &d, pct) {
                    if let Some(hit) = outcome {
                        pooled.push((score, hit));
                    }
                }
            }
            // stable descending by score
            let mut ranked: Vec<(f64, bool)> = Vec::with_capacity(pooled.len());
            for item in pooled {
                let at = ranked.iter().position(|r| r.0 < item.0).unwrap_or(ranked.len());
                ranked.insert(at, item);
            }
            let hits: Vec<bool> = ranked.iter().map(|r| r.1).collect();
            total += ap_101(&hits, n_gt);
        }
        per_class.insert(c, Some(total / 10.0));
    }
    let defined: Vec<f64> = per_class.values().flatten().copied().collect();
    let mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    (mean, per_class)
}

/// Index of the prompt with the highest cosine similarity; first index on ties.
pub fn cosine_argmax(crop: &[f32], prompts: &[Vec<f32>]) -> usize {
    let norm = |v: &[f32]| v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    let cn = norm(crop);
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, p) in prompts.iter().enumerate() {
        let dot: f64 = crop.iter().zip(p).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
        let cos = dot / (cn * norm(p));
        if cos > best.1 {
            best = (i, cos);
        }
    }
    best.0
}

/// Split mean and spread across seeds from rows of (seed, dataset, ap).
pub fn split_stats(rows: &[(u32, String, f64)], members: &[String]) -> (f64, f64, usize) {
    let mut by_seed: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (seed, d, ap) in rows {
        if members.contains(d) {
            by_seed.entry(*seed).or_default().push(*ap);
        }
    }
    let seed_means: Vec<f64> = by_seed
        .values()
        .map(|v| {
            assert_eq!(v.len(), members.len(), "incomplete fixture");
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    let n = seed_means.len() as f64;
    let mean = seed_means.iter().sum::<f64>() / n;
    let var = seed_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt(), seed_means.len())
}
