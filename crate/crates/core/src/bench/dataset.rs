use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::Serialize;

use super::BenchError;
use crate::model::{PartyId, VerticalPartition};

pub type SampleId = u64;

/// n x d real features with a binary label, row-major.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Dataset {
    feature_names: Vec<String>,
    values: Vec<f64>,
    labels: Vec<f64>,
    sample_ids: Vec<SampleId>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        values: Vec<f64>,
        labels: Vec<f64>,
        sample_ids: Option<Vec<SampleId>>,
    ) -> Result<Self, BenchError> {
        let d = feature_names.len();
        let n = labels.len();
        if values.len() != n * d {
            return Err(BenchError::Shape(format!(
                "{} values for {n} rows x {d} columns",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(BenchError::BadCell {
                row: i / d.max(1) + 1,
                column: feature_names[i % d].clone(),
                reason: "not a finite number".into(),
            });
        }
        if let Some(i) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
            return Err(BenchError::BadLabel { row: i + 1 });
        }
        let sample_ids = sample_ids.unwrap_or_else(|| (0..n as u64).collect());
        if sample_ids.len() != n {
            return Err(BenchError::Shape("one sample id per row required".into()));
        }
        Ok(Dataset {
            feature_names,
            values,
            labels,
            sample_ids,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn cols(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn sample_ids(&self) -> &[SampleId] {
        &self.sample_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.cols();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.values[row * self.cols() + feature]
    }

    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().sum::<f64>() / self.rows().max(1) as f64
    }

    /// Rows `[start, end)` as a new dataset, keeping sample ids.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let d = self.cols();
        Dataset {
            feature_names: self.feature_names.clone(),
            values: self.values[start * d..end * d].to_vec(),
            labels: self.labels[start..end].to_vec(),
            sample_ids: self.sample_ids[start..end].to_vec(),
        }
    }

    /// The first `pct` percent of rows (at least one).
    pub fn head_percent(&self, pct: f64) -> Dataset {
        let n = ((self.rows() as f64 * pct / 100.0).round() as usize).clamp(1, self.rows());
        self.slice(0, n)
    }

    /// Training / validation / test split by row order, e.g. (0.6, 0.2).
    pub fn split_fractions(&self, train: f64, validation: f64) -> (Dataset, Dataset, Dataset) {
        let n = self.rows();
        let a = (n as f64 * train).round() as usize;
        let b = ((n as f64 * (train + validation)).round() as usize).min(n);
        (self.slice(0, a), self.slice(a, b), self.slice(b, n))
    }
}

/// Reads a CSV with a header row; every column except `label_column` is a feature.
pub fn ingest_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset, BenchError> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| BenchError::Io(e.to_string()))?;
    ingest_csv_reader(file, label_column)
}

pub fn ingest_csv_reader<R: Read>(reader: R, label_column: &str) -> Result<Dataset, BenchError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| BenchError::Csv(e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(BenchError::Empty);
    }
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| BenchError::MissingLabelColumn(label_column.to_string()))?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.trim().to_string())
        .collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        // row numbers count data rows from 1, header excluded
        let row = r + 1;
        let record = record.map_err(|e| BenchError::Csv(format!("row {row}: {e}")))?;
        if record.len() != headers.len() {
            return Err(BenchError::BadCell {
                row,
                column: "<record>".into(),
                reason: format!("{} cells, header has {}", record.len(), headers.len()),
            });
        }
        for (i, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let column = headers[i].trim().to_string();
            if cell.is_empty() {
                return Err(BenchError::BadCell {
                    row,
                    column,
                    reason: "missing value".into(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| BenchError::BadCell {
                row,
                column: column.clone(),
                reason: format!("`{cell}` is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(BenchError::BadCell {
                    row,
                    column,
                    reason: "not a finite number".into(),
                });
            }
            if i == label_idx {
                if v != 0.0 && v != 1.0 {
                    return Err(BenchError::BadLabel { row });
                }
                labels.push(v);
            } else {
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(BenchError::Empty);
    }
    Dataset::new(names, values, labels, None)
}

/// Writes a dataset as CSV with the label in the last column.
pub fn write_csv(dataset: &Dataset, label_column: &str, path: impl AsRef<Path>) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::Csv(e.to_string()))?;
    let mut header: Vec<String> = dataset.feature_names().to_vec();
    header.push(label_column.to_string());
    w.write_record(&header).map_err(|e| BenchError::Csv(e.to_string()))?;
    for i in 0..dataset.rows() {
        let mut rec: Vec<String> = dataset.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(dataset.labels()[i].to_string());
        w.write_record(&rec).map_err(|e| BenchError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| BenchError::Io(e.to_string()))
}

/// Writes one party's share: a `sample_id` column, its features, and the
/// label column for the guest.
pub fn write_party_csv(table: &PartyTable, label_column: &str, path: impl AsRef<Path>) -> Result<(), BenchError> {
    let csv_err = |e: csv::Error| BenchError::Csv(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend(table.feature_names().iter().cloned());
    if table.labels().is_some() {
        header.push(label_column.to_string());
    }
    w.write_record(&header).map_err(csv_err)?;
    for (row, id) in table.sample_ids().iter().enumerate() {
        let mut rec = vec![id.to_string()];
        rec.extend(table.feature_ids().iter().map(|&f| table.value(row, f).unwrap().to_string()));
        if let Some(labels) = table.labels() {
            rec.push(labels[row].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| BenchError::Io(e.to_string()))
}

/// One party's columns, keyed by shared sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct PartyTable {
    party: PartyId,
    feature_ids: Vec<usize>,
    names: Vec<String>,
    local_col: Vec<Option<usize>>,
    values: Vec<f64>,
    sample_ids: Vec<SampleId>,
    row_of: HashMap<SampleId, usize>,
    labels: Option<Vec<f64>>,
}

impl PartyTable {
    pub fn party(&self) -> PartyId {
        self.party
    }

    /// Global column ids held, ascending.
    pub fn feature_ids(&self) -> &[usize] {
        &self.feature_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.names
    }

    pub fn sample_ids(&self) -> &[SampleId] {
        &self.sample_ids
    }

    pub fn rows(&self) -> usize {
        self.sample_ids.len()
    }

    /// Labels stay with the guest.
    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn row_of(&self, id: SampleId) -> Option<usize> {
        self.row_of.get(&id).copied()
    }

    /// Value of global feature `feature` in local row `row`, if this party holds it.
    pub fn value(&self, row: usize, feature: usize) -> Option<f64> {
        let c = (*self.local_col.get(feature)?)?;
        Some(self.values[row * self.feature_ids.len() + c])
    }

    pub fn local_row(&self, row: usize) -> LocalRow<'_> {
        LocalRow { table: self, row }
    }
}

/// A row of a [`PartyTable`], addressable by global feature id.
#[derive(Clone, Copy, Debug)]
pub struct LocalRow<'a> {
    table: &'a PartyTable,
    row: usize,
}

impl LocalRow<'_> {
    pub fn get(&self, feature: usize) -> Option<f64> {
        self.table.value(self.row, feature)
    }
}

/// Column-disjoint per-party tables with identical row order.
pub fn vertical_split(dataset: &Dataset, partition: &VerticalPartition) -> Result<Vec<PartyTable>, BenchError> {
    if partition.feature_count() != dataset.cols() {
        return Err(BenchError::Shape(format!(
            "partition covers {} columns, dataset has {}",
            partition.feature_count(),
            dataset.cols()
        )));
    }
    let row_of: HashMap<SampleId, usize> = dataset
        .sample_ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    Ok((0..partition.party_count())
        .map(|party| {
            let feature_ids = partition.features_of(party);
            let mut local_col = vec![None; dataset.cols()];
            for (c, &f) in feature_ids.iter().enumerate() {
                local_col[f] = Some(c);
            }
            let mut values = Vec::with_capacity(dataset.rows() * feature_ids.len());
            for i in 0..dataset.rows() {
                values.extend(feature_ids.iter().map(|&f| dataset.value(i, f)));
            }
            PartyTable {
                party,
                names: feature_ids.iter().map(|&f| dataset.feature_names()[f].clone()).collect(),
                feature_ids,
                local_col,
                values,
                sample_ids: dataset.sample_ids().to_vec(),
                row_of: row_of.clone(),
                labels: (party == crate::model::GUEST).then(|| dataset.labels().to_vec()),
            }
        })
        .collect())
}

/// Joins per-party tables back into one dataset on sample id.
pub fn merge_tables(tables: &[PartyTable], feature_names: &[String]) -> Result<Dataset, BenchError> {
    let guest = tables
        .iter()
        .find(|t| t.labels.is_some())
        .ok_or_else(|| BenchError::Shape("no table carries labels".into()))?;
    let d = feature_names.len();
    let mut values = vec![f64::NAN; guest.rows() * d];
    for (i, &id) in guest.sample_ids().iter().enumerate() {
        for t in tables {
            let r = t
                .row_of(id)
                .ok_or_else(|| BenchError::Shape(format!("sample {id} missing at party {}", t.party)))?;
            for &f in t.feature_ids() {
                values[i * d + f] = t.value(r, f).expect("own column");
            }
        }
    }
    Dataset::new(
        feature_names.to_vec(),
        values,
        guest.labels().unwrap().to_vec(),
        Some(guest.sample_ids().to_vec()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::synth::SyntheticCredit;

    #[test]
    fn toy_csv() {
        let text = "a,b,y\n1,2,0\n3.5,-1,1\n0,0,0\n";
        let d = ingest_csv_reader(text.as_bytes(), "y").unwrap();
        assert_eq!(d.rows(), 3);
        assert_eq!(d.cols(), 2);
        assert_eq!(d.row(1), &[3.5, -1.0]);
        assert_eq!(d.labels(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn csv_errors_name_the_row() {
        let blank = ingest_csv_reader("a,y\n1,0\n,1\n".as_bytes(), "y").unwrap_err();
        assert!(matches!(blank, BenchError::BadCell { row: 2, .. }), "{blank:?}");
        assert!(blank.to_string().contains("row 2"));
        let text = ingest_csv_reader("a,y\n1,0\nabc,1\n".as_bytes(), "y").unwrap_err();
        assert!(matches!(text, BenchError::BadCell { row: 2, .. }));
        assert!(matches!(
            ingest_csv_reader("a,y\n1,0\n".as_bytes(), "label").unwrap_err(),
            BenchError::MissingLabelColumn(_)
        ));
        assert!(matches!(ingest_csv_reader("a,y\n".as_bytes(), "y").unwrap_err(), BenchError::Empty));
        assert!(matches!(ingest_csv_reader("".as_bytes(), "y").unwrap_err(), BenchError::Empty | BenchError::MissingLabelColumn(_)));
        assert!(matches!(
            ingest_csv_reader("a,y\n1,2\n".as_bytes(), "y").unwrap_err(),
            BenchError::BadLabel { row: 1 }
        ));
    }

    #[test]
    fn credit_shaped_file_ingests_at_full_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("credit.csv");
        let data = SyntheticCredit::new(7, 10).generate(150_000);
        write_csv(&data, "SeriousDlqin2yrs", &path).unwrap();
        let back = ingest_csv(&path, "SeriousDlqin2yrs").unwrap();
        assert_eq!((back.rows(), back.cols()), (150_000, 10));
        assert_eq!(back.labels(), data.labels());
    }

    #[test]
    fn split_and_merge() {
        let data = SyntheticCredit::new(3, 10).generate(200);
        let p = VerticalPartition::guest_first(10, 5, 2).unwrap();
        let tables = vertical_split(&data, &p).unwrap();
        assert_eq!(tables[0].feature_ids().len(), 5);
        assert_eq!(tables[1].feature_ids().len(), 5);
        assert!(tables[1].labels().is_none());
        assert_eq!(tables[0].value(0, 6), None);
        assert_eq!(merge_tables(&tables, data.feature_names()).unwrap(), data);

        let single = vertical_split(&data, &VerticalPartition::single_party(10)).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(merge_tables(&single, data.feature_names()).unwrap(), data);

        let bad = VerticalPartition::guest_first(9, 5, 2).unwrap();
        assert!(vertical_split(&data, &bad).is_err());
    }
}
