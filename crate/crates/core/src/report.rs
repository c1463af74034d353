//! Per-split aggregation of per-run AP, OVD/COD ratios and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::describability::{SplitAssignment, SplitLabel, SpectrumRow};
use crate::eval::APResult;
use crate::{fsutil, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunKey {
    pub method: String,
    pub k: u32,
    pub seed: u32,
    pub dataset_id: String,
}

/// AP (as a fraction) for every (method, k, seed, dataset) run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMatrix {
    entries: BTreeMap<RunKey, f64>,
}

impl RunMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: RunKey, ap: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&ap) {
            return Err(Error::InvalidValue(format!(
                "AP {ap} for {} k={} seed={} {} is outside [0, 1]",
                key.method, key.k, key.seed, key.dataset_id
            )));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateCell {
                method: key.method,
                k: key.k,
                seed: key.seed,
                dataset_id: key.dataset_id,
            });
        }
        self.entries.insert(key, ap);
        Ok(())
    }

    pub fn get(&self, method: &str, k: u32, seed: u32, dataset_id: &str) -> Option<f64> {
        self.entries
            .get(&RunKey {
                method: method.to_owned(),
                k,
                seed,
                dataset_id: dataset_id.to_owned(),
            })
            .copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RunKey, f64)> {
        self.entries.iter().map(|(k, &v)| (k, v))
    }

    /// Seeds present for each (method, k).
    pub fn seeds(&self) -> BTreeMap<(String, u32), BTreeSet<u32>> {
        let mut out: BTreeMap<(String, u32), BTreeSet<u32>> = BTreeMap::new();
        for key in self.entries.keys() {
            out.entry((key.method.clone(), key.k))
                .or_default()
                .insert(key.seed);
        }
        out
    }

    /// Checks that each (method, k) uses seeds `0..S`.
    pub fn validate(&self) -> Result<()> {
        for ((method, k), seeds) in self.seeds() {
            if seeds.iter().copied().ne(0..seeds.len() as u32) {
                return Err(Error::NonContiguousSeeds {
                    method,
                    k,
                    seeds: seeds.into_iter().collect(),
                });
            }
        }
        Ok(())
    }

    /// Reads `method,k,seed,dataset_id` plus either `ap` (fraction) or `ap_percent`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::MalformedFile(format!("run matrix header: {e}")))?
            .clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let need = |name: &str| {
            col(name).ok_or_else(|| Error::MalformedFile(format!("run matrix lacks column {name:?}")))
        };
        let (mi, ki, si, di) = (need("method")?, need("k")?, need("seed")?, need("dataset_id")?);
        let (vi, scale) = match (col("ap"), col("ap_percent")) {
            (Some(i), None) => (i, 1.0),
            (None, Some(i)) => (i, 100.0),
            _ => {
                return Err(Error::MalformedFile(
                    "run matrix needs exactly one of the columns ap, ap_percent".into(),
                ))
            }
        };
        let mut matrix = RunMatrix::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::MalformedFile(format!("run matrix: {e}")))?;
            let field = |i: usize| record.get(i).unwrap_or("");
            let bad = |what: &str| {
                Error::MalformedFile(format!("run matrix row {}: bad {what}", line + 2))
            };
            let key = RunKey {
                method: field(mi).to_owned(),
                k: field(ki).parse().map_err(|_| bad("k"))?,
                seed: field(si).parse().map_err(|_| bad("seed"))?,
                dataset_id: field(di).to_owned(),
            };
            let value: f64 = field(vi).parse().map_err(|_| bad("AP value"))?;
            matrix.insert(key, value / scale)?;
        }
        matrix.validate()?;
        Ok(matrix)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(fsutil::read(path)?.as_slice())
    }

    /// Builds the matrix from evaluation results carrying run information.
    pub fn from_results<'a, I>(results: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a APResult>,
    {
        let mut matrix = RunMatrix::new();
        for r in results {
            let run = r.run.as_ref().ok_or_else(|| {
                Error::MalformedFile(format!("result for {} has no run information", r.dataset_id))
            })?;
            let ap = r.ap_5095.ok_or_else(|| {
                Error::InvalidValue(format!("result for {} has no defined AP", r.dataset_id))
            })?;
            matrix.insert(
                RunKey {
                    method: run.method.clone(),
                    k: run.k,
                    seed: run.seed,
                    dataset_id: r.dataset_id.clone(),
                },
                ap,
            )?;
        }
        matrix.validate()?;
        Ok(matrix)
    }
}

/// Loads every `*.json` result file in `dir` (sorted by name) into a matrix.
pub fn load_results_dir(dir: &Path) -> Result<RunMatrix> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let results = paths
        .iter()
        .map(|p| crate::eval::read_ap_result(p))
        .collect::<Result<Vec<_>>>()?;
    RunMatrix::from_results(&results)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StdMode {
    /// Divide by the number of seeds.
    #[default]
    Population,
    /// Divide by the number of seeds minus one.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SummaryKey {
    pub method: String,
    pub k: u32,
    pub split: SplitLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitStats {
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    /// Split-average AP for seeds `0..n_seeds`.
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitSummary {
    pub rows: BTreeMap<SummaryKey, SplitStats>,
}

impl SplitSummary {
    pub fn get(&self, method: &str, k: u32, split: SplitLabel) -> Option<&SplitStats> {
        self.rows.get(&SummaryKey {
            method: method.to_owned(),
            k,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Mean of values summed in sorted order, so any permutation gives the same bits.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn mean_std(values: &[f64], mode: StdMode) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match mode {
        StdMode::Population => n,
        StdMode::Sample if values.len() > 1 => n - 1.0,
        StdMode::Sample => 1.0,
    };
    (mean, (ss / denom).sqrt())
}

/// For each (method, k, split): per-seed mean over the split's datasets, then
/// mean and std of those across seeds.
pub fn aggregate(matrix: &RunMatrix, splits: &SplitAssignment, mode: StdMode) -> Result<SplitSummary> {
    matrix.validate()?;
    let seeds = matrix.seeds();
    if seeds.is_empty() {
        let first = splits.iter().next().map(|(id, _)| id.to_owned()).unwrap_or_default();
        return Err(Error::MissingCell {
            method: "<any>".into(),
            k: 0,
            seed: 0,
            dataset_id: first,
        });
    }
    let mut rows = BTreeMap::new();
    for ((method, k), seed_set) in &seeds {
        for split in splits.splits() {
            let members = splits.members(split);
            let per_seed = seed_set
                .iter()
                .map(|&seed| {
                    let mut values = members
                        .iter()
                        .map(|&d| {
                            matrix.get(method, *k, seed, d).ok_or_else(|| Error::MissingCell {
                                method: method.clone(),
                                k: *k,
                                seed,
                                dataset_id: d.to_owned(),
                            })
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    Ok(stable_mean(&mut values))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&per_seed, mode);
            rows.insert(
                SummaryKey {
                    method: method.clone(),
                    k: *k,
                    split,
                },
                SplitStats {
                    mean,
                    std,
                    n_seeds: per_seed.len(),
                    per_seed,
                },
            );
        }
    }
    Ok(SplitSummary { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioRow {
    pub ovd: String,
    pub cod: String,
    pub k: u32,
    pub split: SplitLabel,
    pub ovd_mean: f64,
    pub cod_mean: f64,
    pub ratio: f64,
}

/// `mean(ovd) / mean(cod)` for every (k, split) both methods cover.
pub fn ap_ratio(summary: &SplitSummary, ovd: &str, cod: &str) -> Result<Vec<RatioRow>> {
    let cells = |m: &str| -> BTreeMap<(u32, SplitLabel), f64> {
        summary
            .rows
            .iter()
            .filter(|(key, _)| key.method == m)
            .map(|(key, s)| ((key.k, key.split), s.mean))
            .collect()
    };
    let (o, c) = (cells(ovd), cells(cod));
    if o.is_empty() || c.is_empty() || o.keys().ne(c.keys()) {
        return Err(Error::CoverageMismatch(format!(
            "{ovd} covers {} (k, split) cells and {cod} covers {}, or they differ",
            o.len(),
            c.len()
        )));
    }
    o.iter()
        .map(|(&(k, split), &ovd_mean)| {
            let cod_mean = c[&(k, split)];
            if cod_mean == 0.0 {
                return Err(Error::DivisionByZeroMean {
                    k,
                    split: split.to_string(),
                });
            }
            Ok(RatioRow {
                ovd: ovd.to_owned(),
                cod: cod.to_owned(),
                k,
                split,
                ovd_mean,
                cod_mean,
                ratio: ovd_mean / cod_mean,
            })
        })
        .collect()
}

/// Rounds half away from zero at one decimal, tolerating binary representation
/// error just below the halfway point.
pub fn round_half_up_1dp(x: f64) -> f64 {
    let scaled = x * 10.0;
    let eps = 1e-9 * scaled.abs().max(1.0);
    (scaled.abs() + 0.5 + eps).floor().copysign(scaled) / 10.0
}

/// Fraction to a percentage string with one decimal.
pub fn percent_1dp(fraction: f64) -> String {
    let v = round_half_up_1dp(fraction * 100.0);
    format!("{:.1}", if v == 0.0 { 0.0 } else { v })
}

pub fn summary_csv(summary: &SplitSummary) -> String {
    let mut out = String::from("method,k,split,mean,std,n_seeds\n");
    for (key, s) in &summary.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&key.method),
            key.k,
            key.split,
            percent_1dp(s.mean),
            percent_1dp(s.std),
            s.n_seeds
        );
    }
    out
}

#[derive(Serialize)]
struct SummaryJsonRow<'a> {
    method: &'a str,
    k: u32,
    split: String,
    mean: f64,
    std: f64,
    mean_percent: String,
    std_percent: String,
    n_seeds: usize,
    per_seed: &'a [f64],
}

pub fn summary_json(summary: &SplitSummary) -> String {
    let rows: Vec<SummaryJsonRow> = summary
        .rows
        .iter()
        .map(|(key, s)| SummaryJsonRow {
            method: &key.method,
            k: key.k,
            split: key.split.to_string(),
            mean: s.mean,
            std: s.std,
            mean_percent: percent_1dp(s.mean),
            std_percent: percent_1dp(s.std),
            n_seeds: s.n_seeds,
            per_seed: &s.per_seed,
        })
        .collect();
    serde_json::to_string_pretty(&rows).expect("summary rows always serialize") + "\n"
}

pub fn ratios_csv(ratios: &[RatioRow]) -> String {
    let mut out = String::from("ovd,cod,k,split,ovd_mean,cod_mean,ratio\n");
    for r in ratios {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6}",
            csv_field(&r.ovd),
            csv_field(&r.cod),
            r.k,
            r.split,
            percent_1dp(r.ovd_mean),
            percent_1dp(r.cod_mean),
            r.ratio
        );
    }
    out
}

pub fn spectrum_csv(rows: &[SpectrumRow]) -> String {
    let mut out = String::from("dataset_id,accuracy,evaluated_crops,split\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{},{}",
            csv_field(&r.dataset_id),
            r.accuracy,
            r.evaluated,
            r.split
        );
    }
    out
}

pub fn parse_spectrum_csv<R: Read>(reader: R) -> Result<Vec<SpectrumRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::MalformedFile(format!("spectrum: {e}")))?;
        let bad = || Error::MalformedFile(format!("spectrum row {}", line + 2));
        if record.len() != 4 {
            return Err(bad());
        }
        rows.push(SpectrumRow {
            dataset_id: record[0].to_owned(),
            accuracy: record[1].parse().map_err(|_| bad())?,
            evaluated: record[2].parse().map_err(|_| bad())?,
            split: record[3].parse()?,
        });
    }
    Ok(rows)
}

pub fn splits_csv(splits: &SplitAssignment) -> String {
    let mut out = String::from("dataset_id,split\n");
    for (id, label) in splits.iter() {
        let _ = writeln!(out, "{},{label}", csv_field(id));
    }
    out
}

pub fn parse_splits_csv<R: Read>(reader: R) -> Result<SplitAssignment> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::MalformedFile(format!("splits: {e}")))?
        .clone();
    let id_col = headers.iter().position(|h| h == "dataset_id");
    let split_col = headers.iter().position(|h| h == "split");
    let (Some(ic), Some(sc)) = (id_col, split_col) else {
        return Err(Error::MalformedFile("splits file needs dataset_id and split columns".into()));
    };
    let mut labels = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::MalformedFile(format!("splits: {e}")))?;
        let id = record.get(ic).unwrap_or("").to_owned();
        let label: SplitLabel = record.get(sc).unwrap_or("").parse()?;
        if labels.insert(id.clone(), label).is_some() {
            return Err(Error::DuplicateId(format!("dataset {id} listed twice in splits")));
        }
    }
    Ok(SplitAssignment::from_labels(labels))
}

pub fn load_splits(path: &Path) -> Result<SplitAssignment> {
    parse_splits_csv(fsutil::read(path)?.as_slice())
}

pub fn load_spectrum(path: &Path) -> Result<Vec<SpectrumRow>> {
    parse_spectrum_csv(fsutil::read(path)?.as_slice())
}

/// Quotes a CSV field when it contains a delimiter, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const SPLIT_COLORS: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn split_color(split: SplitLabel) -> &'static str {
    SPLIT_COLORS[split.0 % SPLIT_COLORS.len()]
}

/// Horizontal bars of accuracy per dataset, colored by split.
pub fn spectrum_svg(rows: &[SpectrumRow]) -> String {
    let (label_w, bar_w, row_h, top) = (220.0, 400.0, 16.0, 30.0);
    let height = top + row_h * rows.len() as f64 + 20.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        label_w + bar_w + 60.0
    );
    let _ = writeln!(svg, "<text x=\"{label_w}\" y=\"18\">zero-shot crop accuracy (%)</text>");
    for (i, r) in rows.iter().enumerate() {
        let y = top + row_h * i as f64;
        let w = bar_w * r.accuracy;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            label_w - 6.0,
            y + row_h * 0.75,
            xml_escape(&r.dataset_id)
        );
        let _ = writeln!(
            svg,
            "<rect x=\"{label_w}\" y=\"{}\" width=\"{w:.2}\" height=\"{}\" fill=\"{}\"><title>{}</title></rect>",
            y + 2.0,
            row_h - 4.0,
            split_color(r.split),
            r.split
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{}\">{}</text>",
            label_w + w + 4.0,
            y + row_h * 0.75,
            percent_1dp(r.accuracy)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// One line per (pair, split) of ratio against K.
pub fn ratios_svg(ratios: &[RatioRow]) -> String {
    let (w, h, pad) = (480.0, 300.0, 50.0);
    let ks: BTreeSet<u32> = ratios.iter().map(|r| r.k).collect();
    let ks: Vec<u32> = ks.into_iter().collect();
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.ratio), hi.max(r.ratio))
    });
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let x_of = |k: u32| {
        let i = ks.iter().position(|&v| v == k).unwrap_or(0) as f64;
        pad + i * (w - 2.0 * pad) / (ks.len().max(2) - 1) as f64
    };
    let y_of = |v: f64| h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        h - pad,
        w - pad
    );
    for &k in &ks {
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">K={k}</text>", x_of(k), h - pad + 16.0);
    }
    let mut lines: BTreeMap<(&str, &str, SplitLabel), Vec<&RatioRow>> = BTreeMap::new();
    for r in ratios {
        lines.entry((&r.ovd, &r.cod, r.split)).or_default().push(r);
    }
    for (i, ((ovd, cod, split), pts)) in lines.iter().enumerate() {
        let path: Vec<String> = pts
            .iter()
            .map(|r| format!("{:.2},{:.2}", x_of(r.k), y_of(r.ratio)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            split_color(*split),
            path.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{}\">{} / {} {split}</text>",
            pad + 4.0,
            14.0 + 13.0 * i as f64,
            split_color(*split),
            xml_escape(ovd),
            xml_escape(cod)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `summary.csv`, `summary.json`, `ratios.csv` (only when there are ratios)
/// and `spectrum.csv` (only when given), plus SVG charts when `svg` is set.
/// Returns the written paths.
pub fn render_reports(
    summary: &SplitSummary,
    ratios: &[RatioRow],
    spectrum: Option<&[SpectrumRow]>,
    out_dir: &Path,
    svg: bool,
) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(&str, String)> = vec![
        ("summary.csv", summary_csv(summary)),
        ("summary.json", summary_json(summary)),
    ];
    if !ratios.is_empty() {
        files.push(("ratios.csv", ratios_csv(ratios)));
        if svg {
            files.push(("ratios.svg", ratios_svg(ratios)));
        }
    }
    if let Some(rows) = spectrum {
        files.push(("spectrum.csv", spectrum_csv(rows)));
        if svg {
            files.push(("spectrum.svg", spectrum_svg(rows)));
        }
    }
    files
        .into_iter()
        .map(|(name, body)| {
            let path = out_dir.join(name);
            fsutil::write_atomic(&path, body.as_bytes()).map(|_| path)
        })
        .collect()
}
