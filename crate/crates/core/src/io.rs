//! Observation CSV ingestion, model documents and atomic output.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FhmmError, Result};
use crate::mi::StateMi;
use crate::model::{
    ChainParams, EmissionFamily, EmissionParams, FhmmModel, HiddenState, InflatedMixtureParams, Inflation, K,
    NUM_STATES,
};
use crate::variant::Variant;

pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_WIND_FLOOR: f64 = 0.05;
pub const DEFAULT_MAX_GAP: usize = 3;
/// Below this share of rows at the maximum, inflation modeling is probably
/// unnecessary.
pub const INFLATION_WARN_FRACTION: f64 = 0.01;

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| FhmmError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| FhmmError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| FhmmError::io(path, e))?;
    tmp.persist(path).map_err(|e| FhmmError::io(path, e.error))?;
    Ok(())
}

/// Serializes rows with a header and writes them atomically.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| FhmmError::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub features: Vec<String>,
    /// Replaces exact zeros in the `wind` column.
    pub wind_floor: f64,
    /// Longest run of missing values that is interpolated.
    pub max_gap: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            features: crate::fixtures::default_feature_names(),
            wind_floor: DEFAULT_WIND_FLOOR,
            max_gap: DEFAULT_MAX_GAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub timestamps: Vec<String>,
    pub feature_names: Vec<String>,
    /// `T×E`, strictly positive.
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<HiddenState>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.feature_names.iter().position(|f| f == name)?;
        Some(self.features.iter().map(|r| r[i]).collect())
    }

    pub fn require_labels(&self) -> Result<&[HiddenState]> {
        self.labels
            .as_deref()
            .ok_or_else(|| FhmmError::Schema("input has no label_haze/label_dust columns".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IngestReport {
    pub input_rows: usize,
    pub output_rows: usize,
    /// Cells filled by interpolation.
    pub imputed: usize,
    pub dropped: usize,
    pub wind_floored: usize,
}

fn is_missing(field: &str) -> bool {
    matches!(field, "" | "NA" | "na" | "NaN" | "nan" | "null")
}

fn parse_label(field: &str, line: usize, column: &str) -> Result<bool> {
    match field {
        "0" | "0.0" | "false" => Ok(false),
        "1" | "1.0" | "true" => Ok(true),
        _ => Err(FhmmError::Parse {
            line,
            message: format!("column '{column}': label must be 0 or 1, got '{field}'"),
        }),
    }
}

/// Reads an observation CSV. Columns are matched by name; short runs of
/// missing values are linearly interpolated and rows in longer or
/// unbounded runs are dropped.
pub fn load_csv(path: &Path, opts: &LoadOptions) -> Result<(Dataset, IngestReport)> {
    let file = fs::File::open(path).map_err(|e| FhmmError::io(path, e))?;
    read_csv(file, opts)
}

pub fn read_csv<R: std::io::Read>(input: R, opts: &LoadOptions) -> Result<(Dataset, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| find(name).ok_or_else(|| FhmmError::Schema(format!("missing required column '{name}'")));
    let ts_col = need("timestamp")?;
    let cols: Vec<usize> = opts.features.iter().map(|f| need(f)).collect::<Result<_>>()?;
    let label_cols = match (find("label_haze"), find("label_dust")) {
        (Some(h), Some(d)) => Some((h, d)),
        (None, None) => None,
        (Some(_), None) => return Err(FhmmError::Schema("missing required column 'label_dust'".into())),
        (None, Some(_)) => return Err(FhmmError::Schema("missing required column 'label_haze'".into())),
    };
    let wind = opts.features.iter().position(|f| f == "wind");

    let mut timestamps = Vec::new();
    let mut lines = Vec::new();
    let mut values: Vec<Vec<Option<f64>>> = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let ts = rec.get(ts_col).unwrap_or("").to_string();
        if ts.is_empty() {
            return Err(FhmmError::Parse {
                line,
                message: "empty timestamp".into(),
            });
        }
        if let Some(prev) = timestamps.last() {
            if &ts <= prev {
                return Err(FhmmError::Parse {
                    line,
                    message: format!("timestamp '{ts}' does not follow '{prev}'"),
                });
            }
        }
        let mut row = Vec::with_capacity(cols.len());
        for (name, &c) in opts.features.iter().zip(&cols) {
            let field = rec.get(c).unwrap_or("");
            if is_missing(field) {
                row.push(None);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| FhmmError::Parse {
                line,
                message: format!("column '{name}': cannot parse '{field}'"),
            })?;
            if !v.is_finite() {
                return Err(FhmmError::Parse {
                    line,
                    message: format!("column '{name}': non-finite value"),
                });
            }
            row.push(Some(v));
        }
        if let Some((h, d)) = label_cols {
            let haze = parse_label(rec.get(h).unwrap_or(""), line, "label_haze")?;
            let dust = parse_label(rec.get(d).unwrap_or(""), line, "label_dust")?;
            labels.push(HiddenState::new(haze, dust));
        }
        timestamps.push(ts);
        lines.push(line);
        values.push(row);
    }

    let n = values.len();
    let mut report = IngestReport {
        input_rows: n,
        ..Default::default()
    };
    let mut drop = vec![false; n];
    for c in 0..cols.len() {
        let mut t = 0;
        while t < n {
            if values[t][c].is_some() {
                t += 1;
                continue;
            }
            let start = t;
            while t < n && values[t][c].is_none() {
                t += 1;
            }
            let len = t - start;
            if start > 0 && t < n && len <= opts.max_gap {
                let a = values[start - 1][c].unwrap();
                let b = values[t][c].unwrap();
                for (j, row) in values[start..t].iter_mut().enumerate() {
                    let f = (j + 1) as f64 / (len + 1) as f64;
                    row[c] = Some(a + (b - a) * f);
                }
                report.imputed += len;
            } else {
                drop[start..t].iter_mut().for_each(|d| *d = true);
            }
        }
    }

    let mut ds = Dataset {
        timestamps: Vec::new(),
        feature_names: opts.features.clone(),
        features: Vec::new(),
        labels: label_cols.map(|_| Vec::new()),
    };
    for t in 0..n {
        if drop[t] {
            report.dropped += 1;
            continue;
        }
        let mut row: Vec<f64> = values[t].iter().map(|v| v.unwrap()).collect();
        for (i, v) in row.iter_mut().enumerate() {
            if Some(i) == wind && *v == 0.0 {
                *v = opts.wind_floor;
                report.wind_floored += 1;
            }
            if !(*v > 0.0) {
                return Err(FhmmError::Parse {
                    line: lines[t],
                    message: format!("column '{}': value {v} must be positive", opts.features[i]),
                });
            }
        }
        ds.timestamps.push(timestamps[t].clone());
        ds.features.push(row);
        if let Some(l) = ds.labels.as_mut() {
            l.push(labels[t]);
        }
    }
    report.output_rows = ds.features.len();
    Ok((ds, report))
}

/// Writes a dataset in the same layout `load_csv` reads.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut header: Vec<&str> = vec!["timestamp"];
    header.extend(ds.feature_names.iter().map(String::as_str));
    if ds.labels.is_some() {
        header.extend(["label_haze", "label_dust"]);
    }
    let rows = (0..ds.len()).map(|t| {
        let mut r = vec![ds.timestamps[t].clone()];
        r.extend(ds.features[t].iter().map(|v| v.to_string()));
        if let Some(l) = &ds.labels {
            r.push(u8::from(l[t].haze).to_string());
            r.push(u8::from(l[t].dust).to_string());
        }
        r
    });
    write_csv(path, &header, rows)
}

/// `YYYY-MM-DDTHH:00:00` for hour offsets from 2000-01-01T00:00:00.
pub fn hourly_timestamps(n: usize) -> Vec<String> {
    (0..n)
        .map(|h| {
            let days = (h / 24) as i64;
            let (y, m, d) = civil_from_days(days + 10957);
            format!("{y:04}-{m:02}-{d:02}T{:02}:00:00", h % 24)
        })
        .collect()
}

/// Proleptic Gregorian date from days since 1970-01-01.
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = yoe + era * 400 + i64::from(m <= 2);
    (y, m, d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflationReport {
    pub c: f64,
    pub fraction: f64,
    /// Fewer than 1% of rows sit at `c`.
    pub sparse: bool,
}

/// The inflation point is the largest recorded value; its share of rows
/// says whether a censoring atom is present.
pub fn detect_inflation(values: &[f64]) -> Result<InflationReport> {
    if values.is_empty() {
        return Err(FhmmError::InvalidInput("no values to inspect".into()));
    }
    let c = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let at = values.iter().filter(|&&v| v == c).count();
    let fraction = if at > 1 { at as f64 / values.len() as f64 } else { 0.0 };
    let sparse = fraction < INFLATION_WARN_FRACTION;
    if sparse {
        warn!("only {:.3}% of rows at the maximum {c}; inflation modeling may be unnecessary", 100.0 * fraction);
    }
    Ok(InflationReport { c, fraction, sparse })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InflatedDoc {
    pi0: f64,
    theta: f64,
    eta2: f64,
    c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDoc {
    k: usize,
    mi: Vec<Vec<f64>>,
    fallback: [bool; NUM_STATES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    version: u32,
    family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variant: Option<String>,
    feature_names: Vec<String>,
    phi: [[f64; K]; 2],
    #[serde(rename = "A")]
    a: [[[f64; K]; K]; 2],
    mu: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    r: Option<Vec<Vec<f64>>>,
    #[serde(rename = "Sigma", default, skip_serializing_if = "Option::is_none")]
    covariances: Option<Vec<Vec<Vec<f64>>>>,
    inflated: Option<InflatedDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<WeightsDoc>,
}

/// A model plus the decoding metadata stored with it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: FhmmModel,
    pub variant: Option<Variant>,
    /// MI table used to build decoding weights.
    pub mi_profile: Option<StateMi>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], e: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != e || rows.iter().any(|r| r.len() != e) {
        return Err(FhmmError::Schema(format!("{what} must be {e}x{e}")));
    }
    Ok(DMatrix::from_fn(e, e, |i, j| rows[i][j]))
}

impl ModelFile {
    pub fn new(model: FhmmModel) -> Self {
        ModelFile {
            model,
            variant: None,
            mi_profile: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let em = &m.emissions;
        let doc = ModelDocument {
            version: MODEL_VERSION,
            family: em.family.as_str().to_string(),
            variant: self.variant.map(|v| v.as_str().to_string()),
            feature_names: m.feature_names.clone(),
            phi: [m.chains[0].phi, m.chains[1].phi],
            a: [m.chains[0].a, m.chains[1].a],
            mu: em.mu.clone(),
            sigma: em.sigma.clone(),
            r: (em.family == EmissionFamily::LogNormalCopula).then(|| rows(&em.r_global)),
            covariances: em.covariances.as_ref().map(|c| c.iter().map(rows).collect()),
            inflated: em.inflated.map(|i| InflatedDoc {
                pi0: i.params.pi0,
                theta: i.params.theta,
                eta2: i.params.eta2,
                c: i.params.c,
                dim: Some(i.dim),
            }),
            weights: self.mi_profile.as_ref().map(|p| WeightsDoc {
                k: p.k,
                mi: p.values.clone(),
                fallback: p.fallback,
            }),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.version != MODEL_VERSION {
            return Err(FhmmError::Schema(format!(
                "unsupported model version {} (expected {MODEL_VERSION})",
                doc.version
            )));
        }
        let family = EmissionFamily::parse(&doc.family)
            .ok_or_else(|| FhmmError::Schema(format!("unknown family '{}'", doc.family)))?;
        let e = doc.feature_names.len();
        for (name, t) in [("mu", &doc.mu), ("sigma", &doc.sigma)] {
            if t.len() != NUM_STATES || t.iter().any(|r| r.len() != e) {
                return Err(FhmmError::Schema(format!("{name} must be {NUM_STATES}x{e}")));
            }
        }
        let (r_global, covariances) = match family {
            EmissionFamily::LogNormalCopula => {
                let r = doc.r.as_ref().ok_or_else(|| FhmmError::Schema("copula model needs 'R'".into()))?;
                (matrix(r, e, "R")?, None)
            }
            EmissionFamily::JointGaussian => {
                let s = doc
                    .covariances
                    .as_ref()
                    .ok_or_else(|| FhmmError::Schema("joint Gaussian model needs 'Sigma'".into()))?;
                if s.len() != NUM_STATES {
                    return Err(FhmmError::Schema(format!("Sigma must hold {NUM_STATES} matrices")));
                }
                let covs = s.iter().map(|m| matrix(m, e, "each Sigma")).collect::<Result<Vec<_>>>()?;
                (DMatrix::identity(e, e), Some(covs))
            }
        };
        let inflated = match doc.inflated {
            None => None,
            Some(d) => {
                let dim = match d.dim {
                    Some(i) => i,
                    None => doc
                        .feature_names
                        .iter()
                        .position(|f| f == "visibility")
                        .ok_or_else(|| FhmmError::Schema("inflated.dim missing and no 'visibility' feature".into()))?,
                };
                if dim >= e {
                    return Err(FhmmError::Schema(format!("inflated.dim {dim} out of range")));
                }
                Some(Inflation {
                    dim,
                    params: InflatedMixtureParams {
                        pi0: d.pi0,
                        theta: d.theta,
                        eta2: d.eta2,
                        c: d.c,
                    },
                })
            }
        };
        let variant = doc.variant.as_deref().map(str::parse::<Variant>).transpose()?;
        let mi_profile = match doc.weights {
            None => None,
            Some(w) => {
                if w.mi.len() != NUM_STATES || w.mi.iter().any(|r| r.len() != e) {
                    return Err(FhmmError::Schema(format!("weights.mi must be {NUM_STATES}x{e}")));
                }
                Some(StateMi {
                    values: w.mi,
                    fallback: w.fallback,
                    k: w.k,
                })
            }
        };
        let model = FhmmModel {
            chains: [
                ChainParams::new(doc.phi[0], doc.a[0]),
                ChainParams::new(doc.phi[1], doc.a[1]),
            ],
            emissions: EmissionParams {
                family,
                mu: doc.mu,
                sigma: doc.sigma,
                covariances,
                r_global,
                inflated,
            },
            feature_names: doc.feature_names,
        };
        model.validate()?;
        Ok(ModelFile {
            model,
            variant,
            mi_profile,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FhmmError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}
