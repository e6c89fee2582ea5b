//! UCR-style labelled series: loading, statistics, normalization and a
//! deterministic synthetic two-class generator.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    pub values: Vec<f64>,
    pub label: usize,
}

/// Global statistics over every value of every series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub class_counts: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Delimiter {
    #[default]
    Tab,
    Comma,
}

impl Delimiter {
    fn as_char(self) -> char {
        match self {
            Delimiter::Tab => '\t',
            Delimiter::Comma => ',',
        }
    }
}

/// Explicit raw-label to class-index mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap(Vec<(f64, usize)>);

impl LabelMap {
    pub fn new(pairs: Vec<(f64, usize)>) -> Self {
        Self(pairs)
    }

    fn get(&self, raw: f64) -> Option<usize> {
        self.0.iter().find(|(r, _)| *r == raw).map(|&(_, c)| c)
    }
}

/// A set of equal-length univariate series with class labels.
///
/// Construction validates labels, lengths and finiteness and computes
/// [`DatasetStats`]; the value is immutable afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    series: Vec<LabeledSeries>,
    num_classes: usize,
    length: usize,
    stats: DatasetStats,
    /// Raw label for each class index, used when writing the dataset back.
    raw_labels: Vec<f64>,
}

impl Dataset {
    pub fn new(series: Vec<LabeledSeries>, num_classes: usize) -> Result<Self> {
        let raw_labels = (0..num_classes).map(|c| c as f64).collect();
        Self::with_raw_labels(series, num_classes, raw_labels)
    }

    fn with_raw_labels(
        series: Vec<LabeledSeries>,
        num_classes: usize,
        raw_labels: Vec<f64>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {num_classes}")));
        }
        let first = series
            .first()
            .ok_or_else(|| Error::Data("dataset has no series".into()))?;
        let length = first.values.len();
        if length == 0 {
            return Err(Error::Data("series have length 0".into()));
        }
        let mut class_counts = vec![0; num_classes];
        for (i, s) in series.iter().enumerate() {
            if s.values.len() != length {
                return Err(Error::Data(format!(
                    "series {i} has length {}, expected {length}",
                    s.values.len()
                )));
            }
            if s.label >= num_classes {
                return Err(Error::Data(format!(
                    "series {i} has label {} >= num_classes {num_classes}",
                    s.label
                )));
            }
            if let Some(v) = s.values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Data(format!("series {i} contains non-finite value {v}")));
            }
            class_counts[s.label] += 1;
        }
        let stats = compute_stats(&series, class_counts);
        Ok(Self {
            series,
            num_classes,
            length,
            stats,
            raw_labels,
        })
    }

    pub fn series(&self) -> &[LabeledSeries] {
        &self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn stats(&self) -> &DatasetStats {
        &self.stats
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.series.iter().map(|s| s.label)
    }

    /// Series of class `c`, paired with their index in the dataset.
    pub fn of_class(&self, c: usize) -> impl Iterator<Item = (usize, &LabeledSeries)> + '_ {
        self.series.iter().enumerate().filter(move |(_, s)| s.label == c)
    }

    /// Mapping from the raw labels this dataset was read with to class
    /// indices, for loading a matching test split.
    pub fn label_map(&self) -> LabelMap {
        LabelMap(self.raw_labels.iter().enumerate().map(|(c, &r)| (r, c)).collect())
    }

    /// Writes the UCR text form; raw labels are restored.
    pub fn to_ucr_string(&self, delimiter: Delimiter) -> String {
        let d = delimiter.as_char();
        let mut out = String::new();
        for s in &self.series {
            let _ = write!(out, "{}", self.raw_labels[s.label]);
            for v in &s.values {
                let _ = write!(out, "{d}{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save_ucr(&self, path: &Path, delimiter: Delimiter) -> Result<()> {
        std::fs::write(path, self.to_ucr_string(delimiter)).map_err(|e| Error::io(path, e))
    }

    /// Key-value text export of [`DatasetStats`] plus shape information.
    pub fn stats_text(&self) -> String {
        let s = &self.stats;
        let mut out = String::from("# seqdream dataset stats v1\n");
        let _ = writeln!(out, "series={}", self.len());
        let _ = writeln!(out, "length={}", self.length);
        let _ = writeln!(out, "num_classes={}", self.num_classes);
        let _ = writeln!(out, "min={}", s.min);
        let _ = writeln!(out, "max={}", s.max);
        let _ = writeln!(out, "mean={}", s.mean);
        let _ = writeln!(out, "std={}", s.std);
        for (c, n) in s.class_counts.iter().enumerate() {
            let _ = writeln!(out, "class_count.{c}={n}");
        }
        out
    }
}

fn compute_stats(series: &[LabeledSeries], class_counts: Vec<usize>) -> DatasetStats {
    let all = || series.iter().flat_map(|s| s.values.iter().copied());
    let n = all().count() as f64;
    let mean = all().sum::<f64>() / n;
    let var = all().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    DatasetStats {
        min: all().fold(f64::INFINITY, f64::min),
        max: all().fold(f64::NEG_INFINITY, f64::max),
        mean,
        std: var.sqrt(),
        class_counts,
    }
}

/// Parses UCR text: one series per line, the raw label first.
///
/// Without `label_map`, the distinct raw labels are sorted ascending and
/// numbered from 0, so FordA's `{-1, 1}` become `{0, 1}`.
pub fn parse_ucr(text: &str, delimiter: Delimiter, label_map: Option<&LabelMap>) -> Result<Dataset> {
    let d = delimiter.as_char();
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut width = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(d).collect();
        let expected = *width.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: "row has a label but no values".into(),
            });
        }
        let mut nums = fields.iter().enumerate().map(|(col, f)| {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("field {} is not a number: {f:?}", col + 1),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse {
                    line: line_no,
                    msg: format!("field {} is not finite: {f:?}", col + 1),
                })
            }
        });
        let raw = nums.next().unwrap()?;
        let values = nums.collect::<Result<Vec<_>>>()?;
        rows.push((raw, values));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no data rows".into(),
        });
    }

    let (series, num_classes, raw_labels) = match label_map {
        Some(map) => {
            let mut series = Vec::with_capacity(rows.len());
            for (raw, values) in rows {
                let label = map
                    .get(raw)
                    .ok_or_else(|| Error::Data(format!("raw label {raw} is not in the label map")))?;
                series.push(LabeledSeries { values, label });
            }
            let num_classes = map.0.iter().map(|&(_, c)| c + 1).max().unwrap_or(0);
            let mut raw_labels: Vec<f64> = (0..num_classes).map(|c| c as f64).collect();
            for &(r, c) in &map.0 {
                raw_labels[c] = r;
            }
            (series, num_classes.max(2), raw_labels)
        }
        None => {
            let mut distinct: Vec<f64> = rows.iter().map(|(r, _)| *r).collect();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let series = rows
                .into_iter()
                .map(|(raw, values)| LabeledSeries {
                    label: distinct.iter().position(|&r| r == raw).unwrap(),
                    values,
                })
                .collect();
            let num_classes = distinct.len();
            (series, num_classes, distinct)
        }
    };
    let mut raw_labels = raw_labels;
    raw_labels.resize(num_classes.max(raw_labels.len()), f64::NAN);
    for (c, r) in raw_labels.iter_mut().enumerate() {
        if r.is_nan() {
            *r = c as f64;
        }
    }
    Dataset::with_raw_labels(series, num_classes, raw_labels)
}

pub fn load_ucr_tsv(path: &Path, delimiter: Delimiter, label_map: Option<&LabelMap>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ucr(&text, delimiter, label_map)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScope {
    PerSeries,
    Global,
}

/// Result of [`z_normalize`]: indices of series left untouched because their
/// scope had zero standard deviation.
#[derive(Clone, Debug)]
pub struct Normalized {
    pub dataset: Dataset,
    pub flagged: Vec<usize>,
}

pub fn z_normalize(ds: &Dataset, scope: NormScope) -> Result<Normalized> {
    let mut flagged = Vec::new();
    let series = match scope {
        NormScope::PerSeries => ds
            .series
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (mean, std) = mean_std(&s.values);
                if std > 0.0 {
                    LabeledSeries {
                        values: s.values.iter().map(|v| (v - mean) / std).collect(),
                        label: s.label,
                    }
                } else {
                    flagged.push(i);
                    s.clone()
                }
            })
            .collect(),
        NormScope::Global => {
            let (mean, std) = (ds.stats.mean, ds.stats.std);
            if std > 0.0 {
                ds.series
                    .iter()
                    .map(|s| LabeledSeries {
                        values: s.values.iter().map(|v| (v - mean) / std).collect(),
                        label: s.label,
                    })
                    .collect()
            } else {
                flagged.extend(0..ds.len());
                ds.series.clone()
            }
        }
    };
    Ok(Normalized {
        dataset: Dataset::with_raw_labels(series, ds.num_classes, ds.raw_labels.clone())?,
        flagged,
    })
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub const SYNTH_SMOOTH_WINDOW: usize = 5;
pub const SYNTH_BUMP_AMPLITUDE: f64 = 2.0;

/// Recipe behind one synthetic pair, before z-normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    /// Moving-average-smoothed Gaussian noise (class 0).
    pub base: Vec<f64>,
    /// `base` plus a Gaussian bump (class 1).
    pub bumped: Vec<f64>,
    pub center: f64,
}

fn synth_pair<R: Rng>(rng: &mut R, m: usize) -> SynthPair {
    let noise: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
    let base = centered_moving_average(&noise, SYNTH_SMOOTH_WINDOW);
    let center = rng.random_range(m as f64 / 4.0..=3.0 * m as f64 / 4.0);
    let width = m as f64 / 16.0;
    let bumped = base
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let z = (i as f64 - center) / width;
            v + SYNTH_BUMP_AMPLITUDE * (-0.5 * z * z).exp()
        })
        .collect();
    SynthPair { base, bumped, center }
}

/// Centered moving average whose window shrinks at the edges.
pub(crate) fn centered_moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn znorm(values: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(values);
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Raw pair recipes in generation order: `n_train` then `n_test` series,
/// one pair per two series.
pub fn synth_pairs(n_train: usize, n_test: usize, m: usize, seed: u64) -> (Vec<SynthPair>, Vec<SynthPair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = (0..n_train.div_ceil(2)).map(|_| synth_pair(&mut rng, m)).collect();
    let test = (0..n_test.div_ceil(2)).map(|_| synth_pair(&mut rng, m)).collect();
    (train, test)
}

/// Deterministic stand-in for a binary UCR dataset: even positions are
/// smoothed noise (class 0), odd positions the same noise plus a bump
/// (class 1); every series is z-normalized.
pub fn synth_binary(n_train: usize, n_test: usize, m: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if m < 32 {
        return Err(Error::invalid(format!("synthetic series length must be >= 32, got {m}")));
    }
    if n_train < 2 || n_test < 2 {
        return Err(Error::invalid("synthetic splits need at least 2 series each"));
    }
    let (train, test) = synth_pairs(n_train, n_test, m, seed);
    let build = |pairs: Vec<SynthPair>, n: usize| {
        let series = pairs
            .into_iter()
            .flat_map(|p| {
                [
                    LabeledSeries { values: znorm(&p.base), label: 0 },
                    LabeledSeries { values: znorm(&p.bumped), label: 1 },
                ]
            })
            .take(n)
            .collect();
        Dataset::new(series, 2)
    };
    Ok((build(train, n_train)?, build(test, n_test)?))
}
