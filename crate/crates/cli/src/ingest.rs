use crate::error::{CliError, CliResult, InModule};
use nbmix_core::CountMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

/// One `sample=condition` assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub sample: String,
    pub condition: String,
}

/// Sample-to-condition assignments in the order they were given.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionMap(pub Vec<ConditionEntry>);

impl ConditionMap {
    /// Parses `sample=condition` strings.
    pub fn from_pairs<S: AsRef<str>>(pairs: &[S]) -> CliResult<Self> {
        let mut entries = Vec::with_capacity(pairs.len());
        for p in pairs {
            let p = p.as_ref();
            let (sample, condition) = p
                .split_once('=')
                .filter(|(s, c)| !s.trim().is_empty() && !c.trim().is_empty())
                .ok_or_else(|| {
                    CliError::Config(format!(
                        "condition assignment '{p}' is not of the form sample=condition"
                    ))
                })?;
            entries.push(ConditionEntry {
                sample: sample.trim().to_string(),
                condition: condition.trim().to_string(),
            });
        }
        let map = Self(entries);
        map.check_consistent()?;
        Ok(map)
    }

    /// Reads a two-column file (tab, comma or whitespace separated), one
    /// sample per line. Blank lines and lines starting with `#` are skipped.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut entries = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == '\t' || c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .collect();
            if fields.len() != 2 {
                return Err(CliError::Parse {
                    path: path.to_path_buf(),
                    row: line_no + 1,
                    col: fields.len().min(3),
                    message: format!("expected 2 columns (sample, condition), found {}", fields.len()),
                });
            }
            entries.push(ConditionEntry {
                sample: fields[0].to_string(),
                condition: fields[1].to_string(),
            });
        }
        let map = Self(entries);
        map.check_consistent()?;
        Ok(map)
    }

    pub fn merge(mut self, other: ConditionMap) -> CliResult<Self> {
        self.0.extend(other.0);
        self.check_consistent()?;
        Ok(self)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check_consistent(&self) -> CliResult<()> {
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for e in &self.0 {
            if let Some(prev) = seen.insert(&e.sample, &e.condition) {
                if prev != e.condition {
                    return Err(CliError::Config(format!(
                        "sample '{}' assigned to both '{prev}' and '{}'",
                        e.sample, e.condition
                    )));
                }
            }
        }
        Ok(())
    }

    fn lookup(&self) -> HashMap<&str, &str> {
        self.0
            .iter()
            .map(|e| (e.sample.as_str(), e.condition.as_str()))
            .collect()
    }
}

fn delimiter_for(path: &Path, first_line: &str) -> u8 {
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv || (!first_line.contains('\t') && first_line.contains(',')) {
        b','
    } else {
        b'\t'
    }
}

fn parse_count(cell: &str) -> std::result::Result<u64, String> {
    let cell = cell.trim();
    if let Ok(v) = cell.parse::<u64>() {
        return Ok(v);
    }
    match cell.parse::<f64>() {
        Ok(v) if v < 0.0 => Err(format!("negative count '{cell}'")),
        // integer-valued decimals such as "12.0" are accepted
        Ok(v) if v.is_finite() && v.fract() == 0.0 && v < u64::MAX as f64 => Ok(v as u64),
        Ok(_) => Err(format!("non-integer count '{cell}'")),
        Err(_) => Err(format!("non-numeric count '{cell}'")),
    }
}

/// Reads a genes × samples count table and assigns samples to conditions.
///
/// The header holds the sample names, optionally preceded by a label for the
/// gene-id column. Conditions are numbered in the order of their first sample
/// in the header, so the first condition is the numerator of the tests.
pub fn ingest(path: &Path, conditions: &ConditionMap) -> CliResult<CountMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let first_line = text.lines().next().unwrap_or("");
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter_for(path, first_line))
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let parse_err = |row: usize, col: usize, message: String| CliError::Parse {
        path: path.to_path_buf(),
        row,
        col,
        message,
    };
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line() as usize);
            parse_err(row, 0, e.to_string())
        })?;
        let row = rec.position().map_or(records.len() + 1, |p| p.line() as usize);
        records.push((row, rec));
    }
    let Some(((_, header), body)) = records.split_first() else {
        return Err(parse_err(1, 1, "empty file".into()));
    };
    let Some((first_row, first)) = body.first() else {
        return Err(parse_err(2, 1, "no gene rows".into()));
    };
    let width = first.len();
    let samples: Vec<String> = if header.len() == width {
        header.iter().skip(1).map(|s| s.trim().to_string()).collect()
    } else if header.len() + 1 == width {
        header.iter().map(|s| s.trim().to_string()).collect()
    } else {
        return Err(parse_err(
            *first_row,
            width,
            format!("{} fields but the header names {} samples", width, header.len()),
        ));
    };
    if samples.is_empty() {
        return Err(parse_err(1, 1, "no sample columns".into()));
    }
    let mut seen = HashSet::new();
    for (s, name) in samples.iter().enumerate() {
        if name.is_empty() {
            return Err(parse_err(1, s + 2, "empty sample name".into()));
        }
        if !seen.insert(name.as_str()) {
            return Err(parse_err(1, s + 2, format!("duplicate sample name '{name}'")));
        }
    }

    let n = samples.len();
    let mut gene_ids = Vec::with_capacity(body.len());
    let mut seen_genes = HashMap::new();
    let mut cells = Vec::with_capacity(body.len() * n);
    for (row, rec) in body {
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != n + 1 {
            return Err(parse_err(
                *row,
                rec.len(),
                format!("expected {} fields, found {}", n + 1, rec.len()),
            ));
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_err(*row, 1, "empty gene id".into()));
        }
        if let Some(prev) = seen_genes.insert(id.clone(), *row) {
            return Err(parse_err(
                *row,
                1,
                format!("duplicate gene id '{id}' (first seen on row {prev})"),
            ));
        }
        gene_ids.push(id);
        for (s, cell) in rec.iter().skip(1).enumerate() {
            let v = parse_count(cell).map_err(|m| parse_err(*row, s + 2, format!("sample '{}': {m}", samples[s])))?;
            cells.push(v);
        }
    }
    if gene_ids.is_empty() {
        return Err(parse_err(2, 1, "no gene rows".into()));
    }

    let lookup = conditions.lookup();
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| !lookup.contains_key(s.as_str()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "samples without a condition: {}",
            missing.join(", ")
        )));
    }
    let mut labels: Vec<String> = Vec::new();
    let condition_of_sample = samples
        .iter()
        .map(|s| {
            let c = lookup[s.as_str()];
            match labels.iter().position(|l| l == c) {
                Some(j) => j,
                None => {
                    labels.push(c.to_string());
                    labels.len() - 1
                }
            }
        })
        .collect();
    let counts = Array2::from_shape_vec((gene_ids.len(), n), cells).expect("row-major cells");
    CountMatrix::new(counts, gene_ids, samples, condition_of_sample, labels).in_module("nb-core")
}

/// Tab-separated table readable by [`ingest`].
pub fn counts_tsv(data: &CountMatrix) -> String {
    let mut out = String::from("gene_id");
    for s in data.sample_names() {
        out.push('\t');
        out.push_str(s);
    }
    out.push('\n');
    for (i, id) in data.gene_ids().iter().enumerate() {
        out.push_str(id);
        for y in data.gene_row(i) {
            let _ = write!(out, "\t{y}");
        }
        out.push('\n');
    }
    out
}

/// Two-column sample/condition table readable by [`ConditionMap::from_file`].
pub fn conditions_tsv(data: &CountMatrix) -> String {
    let labels = data.condition_labels();
    data.sample_names()
        .iter()
        .zip(data.condition_of_sample())
        .map(|(s, &j)| format!("{s}\t{}\n", labels[j]))
        .collect()
}

/// Keeps genes whose mean count over all samples is strictly above
/// `min_mean_count`; returns the filtered matrix and the dropped gene ids.
pub fn filter_genes(data: &CountMatrix, min_mean_count: f64) -> (CountMatrix, Vec<String>) {
    let (keep, dropped): (Vec<usize>, Vec<usize>) =
        (0..data.n_genes()).partition(|&i| data.gene_mean(i) > min_mean_count);
    let ids = dropped.iter().map(|&i| data.gene_ids()[i].clone()).collect();
    (data.select_genes(&keep), ids)
}
