//! CSV loading against a declared schema.
//!
//! Comma-delimited UTF-8 with a header row; cells are trimmed. Any value
//! outside a column's declared categories rejects the whole load, naming the
//! offending row and column: silently bucketing unknown categories would
//! corrupt the group statistics the fairness metrics depend on.

use super::schema::{DatasetSchema, FeatureKind};
use super::DataError;
use std::path::Path;

#[derive(Debug, Clone)]
pub enum RawColumn {
    Categorical(Vec<usize>),
    Continuous(Vec<f64>),
}

/// Typed rows in schema order, column-major.
#[derive(Debug, Clone)]
pub struct RawTable {
    rows: usize,
    pub(crate) feature_columns: Vec<RawColumn>,
    /// Category index per row, one vec per sensitive attribute.
    pub(crate) sensitive_columns: Vec<Vec<usize>>,
    pub(crate) labels: Vec<usize>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }
}

fn category_index(
    categories: &[String],
    value: &str,
    row: usize,
    column: &str,
) -> Result<usize, DataError> {
    categories
        .iter()
        .position(|c| c == value)
        .ok_or_else(|| DataError::UnknownCategory {
            row,
            column: column.to_string(),
            value: value.to_string(),
        })
}

pub fn load_csv(path: &Path, schema: &DatasetSchema) -> Result<RawTable, DataError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };

    let feature_idx: Vec<usize> = schema
        .features
        .iter()
        .map(|f| find(&f.name))
        .collect::<Result<_, _>>()?;
    let sensitive_idx: Vec<usize> = schema
        .sensitive
        .iter()
        .map(|s| find(&s.name))
        .collect::<Result<_, _>>()?;
    let label_idx = find(&schema.label)?;

    let mut feature_columns: Vec<RawColumn> = schema
        .features
        .iter()
        .map(|f| match f.kind {
            FeatureKind::Categorical => RawColumn::Categorical(Vec::new()),
            FeatureKind::Continuous => RawColumn::Continuous(Vec::new()),
        })
        .collect();
    let mut sensitive_columns: Vec<Vec<usize>> = vec![Vec::new(); schema.sensitive.len()];
    let mut labels = Vec::new();

    // Data rows are reported 1-based (the header is row 0).
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let cell = |idx: usize| record.get(idx).unwrap_or("");

        for (spec, (&idx, col)) in schema
            .features
            .iter()
            .zip(feature_idx.iter().zip(feature_columns.iter_mut()))
        {
            let value = cell(idx);
            match (spec.kind, col) {
                (FeatureKind::Categorical, RawColumn::Categorical(out)) => {
                    out.push(category_index(&spec.categories, value, row, &spec.name)?);
                }
                (FeatureKind::Continuous, RawColumn::Continuous(out)) => {
                    let parsed: f64 =
                        value
                            .parse()
                            .map_err(|_| DataError::UnparseableNumber {
                                row,
                                column: spec.name.clone(),
                                value: value.to_string(),
                            })?;
                    if !parsed.is_finite() {
                        return Err(DataError::UnparseableNumber {
                            row,
                            column: spec.name.clone(),
                            value: value.to_string(),
                        });
                    }
                    out.push(parsed);
                }
                _ => unreachable!("column kind fixed at construction"),
            }
        }
        for (spec, (&idx, out)) in schema
            .sensitive
            .iter()
            .zip(sensitive_idx.iter().zip(sensitive_columns.iter_mut()))
        {
            out.push(category_index(
                &spec.categories,
                cell(idx),
                row,
                &spec.name,
            )?);
        }
        labels.push(category_index(
            &schema.label_values,
            cell(label_idx),
            row,
            &schema.label,
        )?);
    }

    Ok(RawTable {
        rows: labels.len(),
        feature_columns,
        sensitive_columns,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::super::schema::DatasetSchema;
    use super::*;

    fn write_csv(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    fn toy_schema() -> DatasetSchema {
        DatasetSchema::from_json(
            r#"{
                "features": [
                    {"name": "age", "kind": "continuous"},
                    {"name": "job", "kind": "categorical", "categories": ["clerk", "chef"]}
                ],
                "label": "hired",
                "label_values": ["no", "yes"],
                "sensitive": [{"name": "team", "categories": ["red", "blue"]}]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn loads_typed_rows() {
        let (_dir, path) = write_csv(
            "age,job,team,hired\n31.5, clerk ,red,yes\n24,chef,blue,no\n40,clerk,blue,yes\n",
        );
        let table = load_csv(&path, &toy_schema()).unwrap();
        assert_eq!(table.len(), 3);
        assert_eq!(table.labels, vec![1, 0, 1]);
        match &table.feature_columns[0] {
            RawColumn::Continuous(v) => assert_eq!(v, &vec![31.5, 24.0, 40.0]),
            _ => panic!("expected continuous"),
        }
        assert_eq!(table.sensitive_columns[0], vec![0, 1, 1]);
    }

    #[test]
    fn unknown_category_names_row_and_column() {
        let (_dir, path) =
            write_csv("age,job,team,hired\n31,clerk,red,yes\n24,pilot,blue,no\n");
        let err = load_csv(&path, &toy_schema()).unwrap_err();
        match err {
            DataError::UnknownCategory { row, column, value } => {
                assert_eq!(row, 2);
                assert_eq!(column, "job");
                assert_eq!(value, "pilot");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_column_and_bad_number_are_reported() {
        let (_dir, path) = write_csv("age,job,hired\n31,clerk,yes\n");
        assert!(matches!(
            load_csv(&path, &toy_schema()),
            Err(DataError::MissingColumn(c)) if c == "team"
        ));

        let (_dir, path) = write_csv("age,job,team,hired\nthirty,clerk,red,yes\n");
        assert!(matches!(
            load_csv(&path, &toy_schema()),
            Err(DataError::UnparseableNumber { row: 1, .. })
        ));
    }
}
