//! Core records shared by every calibration scheme: samples, datasets,
//! splits, prediction sets, and coverage reports.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation: features, privileged information, the observed
/// (possibly corrupted) label, the clean label when known, and the
/// corruption flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub privileged: Vec<f64>,
    /// Observed label; `None` encodes a missing response.
    pub observed_label: Option<f64>,
    /// Ground-truth label, present for synthetic data.
    pub clean_label: Option<f64>,
    /// True when the observed label is corrupted.
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub d_x: usize,
    pub d_z: usize,
    pub standardized: bool,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, d_x: usize, d_z: usize) -> Result<Self> {
        for s in &samples {
            if s.features.len() != d_x {
                return Err(Error::DimensionMismatch {
                    expected: d_x,
                    got: s.features.len(),
                });
            }
            if s.privileged.len() != d_z {
                return Err(Error::DimensionMismatch {
                    expected: d_z,
                    got: s.privileged.len(),
                });
            }
            // an uncorrupted sample carries its observed label, and that
            // label is the clean one whenever the clean one is known
            if !s.corrupted {
                match (s.observed_label, s.clean_label) {
                    (None, _) => {
                        return Err(Error::DataInvariant(
                            "uncorrupted sample without an observed label".into(),
                        ))
                    }
                    (Some(obs), Some(clean)) if obs != clean => {
                        return Err(Error::DataInvariant(format!(
                            "uncorrupted sample with observed label {obs} != clean label {clean}"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            samples,
            d_x,
            d_z,
            standardized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Disjoint index sets for one experiment repeat. `reference` is empty
/// unless the split was built with a reference carve-out for imputation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
    pub reference: Vec<usize>,
}

impl SplitIndices {
    /// Calibration block before the reference carve-out.
    pub fn full_cal(&self) -> Vec<usize> {
        let mut v = self.reference.clone();
        v.extend_from_slice(&self.cal);
        v
    }
}

/// Deterministic shuffle split. Sizes are floor-rounded with the
/// remainder assigned to train; `with_ref` halves the calibration block
/// into reference/calibration with the ceil half going to reference.
pub fn split(
    n: usize,
    fractions: [f64; 4],
    with_ref: bool,
    seed: u64,
) -> Result<SplitIndices> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions { sum });
    }
    if n < 10 {
        return Err(Error::SplitTooSmall { n });
    }
    let n_val = (n as f64 * fractions[1]).floor() as usize;
    let n_cal = (n as f64 * fractions[2]).floor() as usize;
    let n_test = (n as f64 * fractions[3]).floor() as usize;
    let n_train = n - n_val - n_cal - n_test;
    if n_train == 0 || n_val == 0 || n_cal == 0 || n_test == 0 {
        return Err(Error::SplitTooSmall { n });
    }
    if with_ref && n_cal < 2 {
        return Err(Error::SplitTooSmall { n });
    }

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);

    let train = idx[..n_train].to_vec();
    let val = idx[n_train..n_train + n_val].to_vec();
    let cal_block = &idx[n_train + n_val..n_train + n_val + n_cal];
    let test = idx[n_train + n_val + n_cal..].to_vec();

    let (reference, cal) = if with_ref {
        let n_ref = n_cal.div_ceil(2);
        (cal_block[..n_ref].to_vec(), cal_block[n_ref..].to_vec())
    } else {
        (Vec::new(), cal_block.to_vec())
    };

    Ok(SplitIndices {
        train,
        val,
        cal,
        test,
        reference,
    })
}

/// Per-column affine transform fitted on one split. A recorded scale of
/// zero marks a constant column, which maps to zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandardizeTransform {
    pub x_stats: Vec<(f64, f64)>,
    pub z_stats: Vec<(f64, f64)>,
    pub y_stat: (f64, f64),
}

impl StandardizeTransform {
    fn apply(stat: (f64, f64), v: f64) -> f64 {
        if stat.1 == 0.0 {
            0.0
        } else {
            (v - stat.0) / stat.1
        }
    }

    pub fn label_to_std(&self, y: f64) -> f64 {
        Self::apply(self.y_stat, y)
    }

    /// Inverse map for interval endpoints on the label axis.
    pub fn label_from_std(&self, v: f64) -> f64 {
        if !v.is_finite() {
            return v;
        }
        self.y_stat.0 + self.y_stat.1 * v
    }

    /// Width multiplier from standardized label units back to original units.
    pub fn label_scale(&self) -> f64 {
        if self.y_stat.1 == 0.0 {
            1.0
        } else {
            self.y_stat.1
        }
    }

    /// Map a prediction set built in standardized label units back to
    /// the original scale, endpoint by endpoint.
    pub fn set_from_std(&self, set: &PredictionSet) -> PredictionSet {
        let mut out = PredictionSet::from_intervals(
            set.intervals
                .iter()
                .map(|iv| Interval {
                    lo: self.label_from_std(iv.lo),
                    hi: self.label_from_std(iv.hi),
                })
                .collect(),
        );
        out.threshold_provenance = set.threshold_provenance.clone();
        out
    }
}

fn column_stat(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        (mean, 0.0)
    } else {
        (mean, sd)
    }
}

/// Fit a per-column zero-mean unit-variance transform on `fit_on` and
/// apply it to every row. Label statistics come from the clean label
/// where known, otherwise from the observed one.
pub fn standardize(
    dataset: &Dataset,
    fit_on: &[usize],
) -> Result<(Dataset, StandardizeTransform)> {
    if fit_on.is_empty() {
        return Err(Error::EmptyFitSplit);
    }
    let mut x_stats = Vec::with_capacity(dataset.d_x);
    for j in 0..dataset.d_x {
        let col: Vec<f64> = fit_on
            .iter()
            .map(|&i| dataset.samples[i].features[j])
            .collect();
        x_stats.push(column_stat(&col));
    }
    let mut z_stats = Vec::with_capacity(dataset.d_z);
    for j in 0..dataset.d_z {
        let col: Vec<f64> = fit_on
            .iter()
            .map(|&i| dataset.samples[i].privileged[j])
            .collect();
        z_stats.push(column_stat(&col));
    }
    let labels: Vec<f64> = fit_on
        .iter()
        .filter_map(|&i| {
            let s = &dataset.samples[i];
            s.clean_label.or(s.observed_label)
        })
        .collect();
    if labels.is_empty() {
        return Err(Error::EmptyFitSplit);
    }
    let y_stat = column_stat(&labels);
    let transform = StandardizeTransform {
        x_stats,
        z_stats,
        y_stat,
    };

    let samples = dataset
        .samples
        .iter()
        .map(|s| Sample {
            features: s
                .features
                .iter()
                .enumerate()
                .map(|(j, &v)| StandardizeTransform::apply(transform.x_stats[j], v))
                .collect(),
            privileged: s
                .privileged
                .iter()
                .enumerate()
                .map(|(j, &v)| StandardizeTransform::apply(transform.z_stats[j], v))
                .collect(),
            observed_label: s.observed_label.map(|v| transform.label_to_std(v)),
            clean_label: s.clean_label.map(|v| transform.label_to_std(v)),
            corrupted: s.corrupted,
        })
        .collect();

    Ok((
        Dataset {
            samples,
            d_x: dataset.d_x,
            d_z: dataset.d_z,
            standardized: true,
        },
        transform,
    ))
}

/// Closed interval on the label axis; endpoints may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Union of disjoint closed intervals, normalized on construction, with
/// per-method threshold provenance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub intervals: Vec<Interval>,
    pub threshold_provenance: BTreeMap<String, f64>,
}

impl PredictionSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn full_line() -> Self {
        Self::from_intervals(vec![Interval {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }])
    }

    pub fn from_intervals(mut raw: Vec<Interval>) -> Self {
        raw.retain(|iv| iv.lo <= iv.hi);
        raw.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        let mut intervals: Vec<Interval> = Vec::with_capacity(raw.len());
        for iv in raw {
            match intervals.last_mut() {
                // closed intervals touching at an endpoint merge
                Some(last) if iv.lo <= last.hi => {
                    if iv.hi > last.hi {
                        last.hi = iv.hi;
                    }
                }
                _ => intervals.push(iv),
            }
        }
        Self {
            intervals,
            threshold_provenance: BTreeMap::new(),
        }
    }

    pub fn with_provenance(mut self, method: &str, threshold: f64) -> Self {
        self.threshold_provenance.insert(method.to_string(), threshold);
        self
    }

    pub fn contains(&self, y: f64) -> bool {
        self.intervals.iter().any(|iv| iv.lo <= y && y <= iv.hi)
    }

    pub fn is_empty_set(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Total length; infinite when any interval is unbounded.
    pub fn length(&self) -> f64 {
        self.intervals.iter().map(Interval::width).sum()
    }

    pub fn union(&self, other: &PredictionSet) -> PredictionSet {
        let mut raw = self.intervals.clone();
        raw.extend_from_slice(&other.intervals);
        let mut out = PredictionSet::from_intervals(raw);
        out.threshold_provenance = self.threshold_provenance.clone();
        out.threshold_provenance
            .extend(other.threshold_provenance.clone());
        out
    }
}

/// Minimal disjoint-interval union of many sets, provenance maps merged.
pub fn set_union(sets: &[PredictionSet]) -> PredictionSet {
    let mut raw = Vec::new();
    let mut prov = BTreeMap::new();
    for s in sets {
        raw.extend_from_slice(&s.intervals);
        prov.extend(s.threshold_provenance.clone());
    }
    let mut out = PredictionSet::from_intervals(raw);
    out.threshold_provenance = prov;
    out
}

/// Per-method, per-repeat evaluation summary. `mean_length` averages the
/// finite sets only; unbounded sets are tallied in `n_infinite`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub method: String,
    pub repeat_id: u32,
    pub coverage: f64,
    pub mean_length: f64,
    pub n_infinite: usize,
    pub n_test: usize,
}

impl CoverageReport {
    /// Exact empirical coverage plus finite-length aggregation.
    pub fn from_outcomes(
        method: &str,
        repeat_id: u32,
        covered: &[bool],
        lengths: &[f64],
    ) -> Self {
        let n_test = covered.len();
        let coverage = covered.iter().filter(|&&c| c).count() as f64 / n_test as f64;
        let finite: Vec<f64> = lengths.iter().copied().filter(|l| l.is_finite()).collect();
        let n_infinite = lengths.len() - finite.len();
        let mean_length = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        Self {
            method: method.to_string(),
            repeat_id,
            coverage,
            mean_length,
            n_infinite,
            n_test,
        }
    }
}

fn format_field(v: f64) -> String {
    // shortest round-trip representation keeps files byte-stable
    let mut s = format!("{v}");
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

/// Write the dataset in the exchange format:
/// `x0..x{dx-1},z0..z{dz-1},y,y_obs,m` with missing fields left empty.
pub fn write_csv<P: AsRef<Path>>(dataset: &Dataset, path: P) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = Vec::new();
    for j in 0..dataset.d_x {
        header.push(format!("x{j}"));
    }
    for j in 0..dataset.d_z {
        header.push(format!("z{j}"));
    }
    header.push("y".into());
    header.push("y_obs".into());
    header.push("m".into());
    writeln!(f, "{}", header.join(","))?;
    for s in &dataset.samples {
        let mut row: Vec<String> = s.features.iter().map(|&v| format_field(v)).collect();
        row.extend(s.privileged.iter().map(|&v| format_field(v)));
        row.push(s.clean_label.map(format_field).unwrap_or_default());
        row.push(s.observed_label.map(format_field).unwrap_or_default());
        row.push(if s.corrupted { "1" } else { "0" }.into());
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::CsvParse {
            line: 1,
            message: "empty file".into(),
        })??;
    let cols: Vec<&str> = header.split(',').collect();
    let d_x = cols.iter().filter(|c| c.starts_with('x')).count();
    let d_z = cols.iter().filter(|c| c.starts_with('z')).count();
    let expected = d_x + d_z + 3;
    if cols.len() != expected {
        return Err(Error::CsvParse {
            line: 1,
            message: format!("expected {expected} columns, got {}", cols.len()),
        });
    }
    let parse = |field: &str, line: usize| -> Result<f64> {
        field.trim().parse::<f64>().map_err(|e| Error::CsvParse {
            line,
            message: format!("bad number '{field}': {e}"),
        })
    };
    let mut samples = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = k + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(Error::CsvParse {
                line: lineno,
                message: format!("expected {expected} fields, got {}", fields.len()),
            });
        }
        let features: Vec<f64> = fields[..d_x]
            .iter()
            .map(|f| parse(f, lineno))
            .collect::<Result<_>>()?;
        let privileged: Vec<f64> = fields[d_x..d_x + d_z]
            .iter()
            .map(|f| parse(f, lineno))
            .collect::<Result<_>>()?;
        let clean = fields[d_x + d_z].trim();
        let obs = fields[d_x + d_z + 1].trim();
        let m = fields[d_x + d_z + 2].trim();
        let corrupted = match m {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::CsvParse {
                    line: lineno,
                    message: format!("m must be 0 or 1, got '{other}'"),
                })
            }
        };
        samples.push(Sample {
            features,
            privileged,
            clean_label: if clean.is_empty() {
                None
            } else {
                Some(parse(clean, lineno)?)
            },
            observed_label: if obs.is_empty() {
                None
            } else {
                Some(parse(obs, lineno)?)
            },
            corrupted,
        });
    }
    Dataset::new(samples, d_x, d_z)
}
