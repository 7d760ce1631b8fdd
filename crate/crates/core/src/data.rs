//! Schema documents, CSV ingestion, missing-row removal and feature encoding.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

/// Cell values treated as missing.
pub const MISSING_MARKERS: [&str; 2] = ["?", ""];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema parse error: {0}")]
    SchemaParse(#[from] serde_json::Error),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: expected {expected} cells, found {found}")]
    Arity { row: usize, expected: usize, found: usize },
    #[error("row {row}, column '{column}': '{value}' is not a number")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("row {row}, column '{column}': category '{value}' is not declared in the schema")]
    UnknownCategory { row: usize, column: String, value: String },
    #[error("row {row} has a missing value in column '{column}'")]
    MissingValue { row: usize, column: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    #[serde(default)]
    pub description: String,
}

/// Dataset metadata: background context, ordered features and the cluster count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub dataset_name: String,
    #[serde(default)]
    pub context: String,
    pub k_star: usize,
    pub features: Vec<FeatureSpec>,
    /// Name of an optional trailing ground-truth column. It is never used as a feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let schema: Schema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.k_star < 2 {
            return Err(DataError::InvalidSchema(format!("k_star must be at least 2, got {}", self.k_star)));
        }
        if self.features.is_empty() {
            return Err(DataError::InvalidSchema("schema declares no features".into()));
        }
        let mut names = HashSet::new();
        for f in &self.features {
            if !names.insert(f.name.as_str()) {
                return Err(DataError::InvalidSchema(format!("duplicate feature name '{}'", f.name)));
            }
            match f.kind {
                FeatureKind::Categorical => {
                    if f.categories.is_empty() {
                        return Err(DataError::InvalidSchema(format!(
                            "categorical feature '{}' has no categories",
                            f.name
                        )));
                    }
                    let mut seen = HashSet::new();
                    for c in &f.categories {
                        if !seen.insert(c.as_str()) {
                            return Err(DataError::InvalidSchema(format!(
                                "feature '{}' repeats category '{c}'",
                                f.name
                            )));
                        }
                    }
                }
                FeatureKind::Numeric => {
                    if !f.categories.is_empty() {
                        return Err(DataError::InvalidSchema(format!(
                            "numeric feature '{}' must not list categories",
                            f.name
                        )));
                    }
                }
            }
        }
        if let Some(t) = &self.target {
            if names.contains(t.as_str()) {
                return Err(DataError::InvalidSchema(format!("target '{t}' is also a feature")));
            }
        }
        Ok(())
    }

    /// Number of features `m`.
    pub fn m(&self) -> usize {
        self.features.len()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    fn column_count(&self) -> usize {
        self.features.len() + usize::from(self.target.is_some())
    }

    fn header(&self) -> Vec<&str> {
        let mut h: Vec<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        if let Some(t) = &self.target {
            h.push(t);
        }
        h
    }
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<Schema, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Schema::from_json(&text)
}

/// One data row with cells kept verbatim.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRow {
    /// Zero-based position of the row among the file's data rows.
    pub row_id: usize,
    pub cells: Vec<String>,
    pub label: Option<String>,
}

impl RawRow {
    pub fn is_missing(&self) -> bool {
        self.cells.iter().any(|c| is_missing(c)) || self.label.as_deref().is_some_and(is_missing)
    }
}

pub fn is_missing(cell: &str) -> bool {
    MISSING_MARKERS.contains(&cell.trim())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawTable {
    pub rows: Vec<RawRow>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Option<Vec<String>> {
        self.rows.iter().map(|r| r.label.clone()).collect()
    }
}

/// Reads a comma-separated file whose columns follow the schema's feature order,
/// plus the target column when the schema names one. A leading row equal to the
/// column names is treated as a header.
pub fn load_table(path: impl AsRef<Path>, schema: &Schema) -> Result<RawTable, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_table(&text, schema)
}

pub fn parse_table(text: &str, schema: &Schema) -> Result<RawTable, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let expected = schema.column_count();
    let header = schema.header();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if line == 0 && record.iter().eq(header.iter().copied()) {
            continue;
        }
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != expected {
            return Err(DataError::Arity {
                row: rows.len(),
                expected,
                found: record.len(),
            });
        }
        let mut cells: Vec<String> = record.iter().map(str::to_owned).collect();
        let label = schema.target.as_ref().map(|_| cells.pop().expect("target cell"));
        rows.push(RawRow {
            row_id: rows.len(),
            cells,
            label,
        });
    }
    Ok(RawTable { rows })
}

/// Removes rows holding any missing marker, preserving order.
pub fn drop_missing(table: RawTable) -> RawTable {
    RawTable {
        rows: table.rows.into_iter().filter(|r| !r.is_missing()).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl ColumnStats {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }

    /// Whether the column is treated as constant and mapped to zeros.
    pub fn is_constant(&self) -> bool {
        self.std <= 1e-12 * self.mean.abs().max(1.0)
    }

    pub fn apply(&self, value: f64) -> f64 {
        if self.is_constant() {
            0.0
        } else {
            (value - self.mean) / self.std
        }
    }
}

/// Where a schema feature lives inside an [`EncodedDataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSlot {
    /// Column of `numeric_values`.
    Numeric(usize),
    /// Column of `categorical_indices`, with the category count.
    Categorical { column: usize, cardinality: usize },
}

/// Slot layout for the schema's features, in schema order.
pub fn feature_layout(schema: &Schema) -> Vec<FeatureSlot> {
    let (mut num, mut cat) = (0, 0);
    schema
        .features
        .iter()
        .map(|f| match f.kind {
            FeatureKind::Numeric => {
                num += 1;
                FeatureSlot::Numeric(num - 1)
            }
            FeatureKind::Categorical => {
                cat += 1;
                FeatureSlot::Categorical {
                    column: cat - 1,
                    cardinality: f.categories.len(),
                }
            }
        })
        .collect()
}

/// Numeric features standardized, categorical features as category indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub n: usize,
    /// `n × num_numeric` standardized values.
    pub numeric_values: Tensor,
    /// `n` rows of `num_categorical` category indices.
    pub categorical_indices: Vec<Vec<usize>>,
    pub row_ids: Vec<usize>,
    pub standardization_stats: Vec<ColumnStats>,
    pub layout: Vec<FeatureSlot>,
    /// Ground-truth labels mapped to dense ids in first-seen order.
    pub labels: Option<Vec<usize>>,
    pub label_names: Vec<String>,
}

impl EncodedDataset {
    pub fn num_numeric(&self) -> usize {
        self.standardization_stats.len()
    }

    pub fn num_categorical(&self) -> usize {
        self.layout.len() - self.num_numeric()
    }

    /// Gathers the listed rows (positions, not row ids).
    pub fn batch(&self, positions: &[usize]) -> TabularBatch {
        let numeric = self
            .numeric_values
            .select_rows(positions)
            .expect("batch positions are in range");
        let categorical = (0..self.num_categorical())
            .map(|c| positions.iter().map(|&p| self.categorical_indices[p][c]).collect())
            .collect();
        TabularBatch { numeric, categorical }
    }

    pub fn all(&self) -> TabularBatch {
        let positions: Vec<usize> = (0..self.n).collect();
        self.batch(&positions)
    }

    /// Maps category indices back to the schema's category strings.
    pub fn decode_categorical(&self, schema: &Schema) -> Vec<Vec<String>> {
        let cat_features: Vec<&FeatureSpec> = schema
            .features
            .iter()
            .filter(|f| f.kind == FeatureKind::Categorical)
            .collect();
        self.categorical_indices
            .iter()
            .map(|row| row.iter().zip(&cat_features).map(|(&i, f)| f.categories[i].clone()).collect())
            .collect()
    }
}

/// Column-organized slice of an [`EncodedDataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct TabularBatch {
    /// `B × num_numeric`.
    pub numeric: Tensor,
    /// One index vector of length `B` per categorical column.
    pub categorical: Vec<Vec<usize>>,
}

impl TabularBatch {
    pub fn len(&self) -> usize {
        self.numeric.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Standardizes numeric columns (population std, constant columns to zero) and
/// maps categorical cells through the schema's category order.
pub fn encode(table: &RawTable, schema: &Schema) -> Result<EncodedDataset, DataError> {
    let layout = feature_layout(schema);
    let n = table.len();
    let num_numeric = layout.iter().filter(|s| matches!(s, FeatureSlot::Numeric(_))).count();
    let mut raw_numeric = vec![Vec::with_capacity(n); num_numeric];
    let mut categorical_indices = vec![Vec::with_capacity(layout.len() - num_numeric); n];

    for (pos, row) in table.rows.iter().enumerate() {
        for ((feature, slot), cell) in schema.features.iter().zip(&layout).zip(&row.cells) {
            if is_missing(cell) {
                return Err(DataError::MissingValue {
                    row: row.row_id,
                    column: feature.name.clone(),
                });
            }
            match slot {
                FeatureSlot::Numeric(col) => {
                    let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                        DataError::NotNumeric {
                            row: row.row_id,
                            column: feature.name.clone(),
                            value: cell.clone(),
                        }
                    })?;
                    raw_numeric[*col].push(v);
                }
                FeatureSlot::Categorical { .. } => {
                    let idx = feature.categories.iter().position(|c| c == cell).ok_or_else(|| {
                        DataError::UnknownCategory {
                            row: row.row_id,
                            column: feature.name.clone(),
                            value: cell.clone(),
                        }
                    })?;
                    categorical_indices[pos].push(idx);
                }
            }
        }
    }

    let standardization_stats: Vec<ColumnStats> = raw_numeric.iter().map(|c| ColumnStats::fit(c)).collect();
    let mut numeric = vec![0.0; n * num_numeric];
    for (col, (values, stats)) in raw_numeric.iter().zip(&standardization_stats).enumerate() {
        for (i, &v) in values.iter().enumerate() {
            numeric[i * num_numeric + col] = stats.apply(v);
        }
    }

    let mut label_names: Vec<String> = Vec::new();
    let labels = table.labels().map(|ls| {
        ls.into_iter()
            .map(|l| match label_names.iter().position(|x| *x == l) {
                Some(i) => i,
                None => {
                    label_names.push(l);
                    label_names.len() - 1
                }
            })
            .collect()
    });

    Ok(EncodedDataset {
        n,
        numeric_values: Tensor::matrix(n, num_numeric, numeric).expect("numeric matrix shape"),
        categorical_indices,
        row_ids: table.rows.iter().map(|r| r.row_id).collect(),
        standardization_stats,
        layout,
        labels,
        label_names,
    })
}

/// Loads, cleans and encodes a dataset in one call.
pub fn load_dataset(
    data_path: impl AsRef<Path>,
    schema: &Schema,
) -> Result<(RawTable, EncodedDataset), DataError> {
    let table = drop_missing(load_table(data_path, schema)?);
    let encoded = encode(&table, schema)?;
    Ok((table, encoded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn weather_schema() -> Schema {
        Schema::from_json(
            r#"{"dataset_name":"weather","context":"toy","k_star":2,"features":[
                {"name":"outlook","kind":"categorical","categories":["sunny","rain"],"description":"sky"},
                {"name":"temp","kind":"numeric","description":"degrees"},
                {"name":"color","kind":"categorical","categories":["red","blue"]}
            ]}"#,
        )
        .unwrap()
    }

    #[test]
    fn schema_validation() {
        let dup = r#"{"dataset_name":"d","k_star":2,"features":[
            {"name":"age","kind":"numeric"},{"name":"age","kind":"numeric"}]}"#;
        assert!(matches!(Schema::from_json(dup), Err(DataError::InvalidSchema(_))));
        let minimal = r#"{"dataset_name":"d","k_star":2,"features":[
            {"name":"c","kind":"categorical","categories":["a"]}]}"#;
        assert_eq!(Schema::from_json(minimal).unwrap().m(), 1);
        let k1 = r#"{"dataset_name":"d","k_star":1,"features":[{"name":"a","kind":"numeric"}]}"#;
        assert!(matches!(Schema::from_json(k1), Err(DataError::InvalidSchema(_))));
        assert!(matches!(Schema::from_json("{nope"), Err(DataError::SchemaParse(_))));
    }

    #[test]
    fn header_is_skipped_and_arity_checked() {
        let schema = weather_schema();
        let t = parse_table("outlook,temp,color\nsunny,1,red\nrain,2,blue\n", &schema).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.rows[1].row_id, 1);
        let err = parse_table("sunny,1\n", &schema).unwrap_err();
        assert!(matches!(err, DataError::Arity { expected: 3, found: 2, .. }));
    }

    #[test]
    fn drop_missing_counts() {
        let schema = weather_schema();
        let t = parse_table("sunny,1,red\nrain,?,blue\nsunny,3,red\nrain,4,red\nsunny,5,blue\n", &schema).unwrap();
        let kept = drop_missing(t.clone());
        assert_eq!(kept.len(), 4);
        assert_eq!(kept.rows.iter().map(|r| r.row_id).collect::<Vec<_>>(), vec![0, 2, 3, 4]);
        let clean = parse_table("sunny,1,red\n", &schema).unwrap();
        assert_eq!(drop_missing(clean.clone()), clean);
        let all_missing = parse_table("?,1,red\nsunny,,red\n", &schema).unwrap();
        assert!(drop_missing(all_missing).is_empty());
    }

    #[test]
    fn encode_examples() {
        let schema = weather_schema();
        let t = parse_table("sunny,1,red\nrain,2,blue\nsunny,3,red\n", &schema).unwrap();
        let e = encode(&t, &schema).unwrap();
        let col: Vec<f64> = (0..3).map(|i| e.numeric_values.get(i, 0)).collect();
        assert!((col[0] + 1.2247).abs() < 1e-4 && col[1].abs() < 1e-12 && (col[2] - 1.2247).abs() < 1e-4);
        assert_eq!(
            e.categorical_indices.iter().map(|r| r[1]).collect::<Vec<_>>(),
            vec![0, 1, 0]
        );
        assert!((e.standardization_stats[0].std - 0.816496580927726).abs() < 1e-12);

        let t = parse_table("sunny,5,red\nrain,5,blue\nsunny,5,red\n", &schema).unwrap();
        let e = encode(&t, &schema).unwrap();
        assert!(e.numeric_values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_errors() {
        let schema = weather_schema();
        let t = parse_table("sunny,warm,red\n", &schema).unwrap();
        assert!(matches!(encode(&t, &schema), Err(DataError::NotNumeric { .. })));
        let t = parse_table("fog,1,red\n", &schema).unwrap();
        assert!(matches!(encode(&t, &schema), Err(DataError::UnknownCategory { .. })));
    }

    fn arb_rows() -> impl Strategy<Value = Vec<(bool, f64, bool, bool)>> {
        prop::collection::vec((any::<bool>(), -1e3..1e3f64, any::<bool>(), prop::bool::weighted(0.2)), 1..40)
    }

    fn render(rows: &[(bool, f64, bool, bool)]) -> String {
        rows.iter()
            .map(|(o, t, c, missing)| {
                let temp = if *missing { "?".to_string() } else { t.to_string() };
                format!("{},{temp},{}\n", if *o { "sunny" } else { "rain" }, if *c { "red" } else { "blue" })
            })
            .collect()
    }

    proptest! {
        #[test]
        fn encoding_invariants(rows in arb_rows()) {
            let schema = weather_schema();
            let text = render(&rows);
            let table = drop_missing(parse_table(&text, &schema).unwrap());
            prop_assume!(!table.is_empty());
            let a = encode(&table, &schema).unwrap();
            let b = encode(&drop_missing(parse_table(&text, &schema).unwrap()), &schema).unwrap();
            prop_assert_eq!(&a, &b);

            // Standardized column: mean 0, population std 1 (or all zeros when constant).
            let col: Vec<f64> = (0..a.n).map(|i| a.numeric_values.get(i, 0)).collect();
            let stats = ColumnStats::fit(&col);
            prop_assert!(stats.mean.abs() < 1e-9);
            if a.standardization_stats[0].is_constant() {
                prop_assert!(col.iter().all(|&v| v == 0.0));
            } else {
                prop_assert!((stats.std - 1.0).abs() < 1e-9);
            }

            // Stored stats reproduce the transform; categorical indices decode to the cells.
            let decoded = a.decode_categorical(&schema);
            for (i, row) in table.rows.iter().enumerate() {
                let raw: f64 = row.cells[1].parse().unwrap();
                prop_assert_eq!(a.standardization_stats[0].apply(raw), a.numeric_values.get(i, 0));
                prop_assert_eq!(&decoded[i][0], &row.cells[0]);
                prop_assert_eq!(&decoded[i][1], &row.cells[2]);
            }
        }
    }
}
