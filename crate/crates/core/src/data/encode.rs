//! Feature encoding and the joint-group index.
//!
//! Categorical columns become one-hot blocks in schema order; continuous
//! columns pass through raw here and are standardized by the split step with
//! training statistics. The selected sensitive attributes are combined into a
//! single joint group per row by a mixed-radix (row-major) index, which is a
//! bijection between attribute-value tuples and `0..group_card`.

use super::schema::{DatasetSchema, FeatureKind};
use super::table::{RawColumn, RawTable};
use super::{DataError, Matrix};

/// Encoded feature matrix plus labels and the sensitive-group view used for
/// fairness terms and metrics. Immutable after construction; training runs
/// share it read-only.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    x: Matrix,
    column_names: Vec<String>,
    continuous_cols: Vec<usize>,
    y: Vec<usize>,
    class_count: usize,
    s_multi: Matrix,
    group: Vec<usize>,
    group_card: usize,
    sensitive_names: Vec<String>,
    sensitive_cards: Vec<usize>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.x
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    /// Provenance of each feature-matrix column.
    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Multi-hot encoding of the selected sensitive attributes: one block per
    /// attribute, exactly one 1 inside each block per row.
    pub fn multi_hot(&self) -> &Matrix {
        &self.s_multi
    }

    /// Joint group index per row, in `0..group_card`.
    pub fn groups(&self) -> &[usize] {
        &self.group
    }

    pub fn group_card(&self) -> usize {
        self.group_card
    }

    pub fn sensitive_names(&self) -> &[String] {
        &self.sensitive_names
    }

    pub fn sensitive_cards(&self) -> &[usize] {
        &self.sensitive_cards
    }

    /// One-hot of the joint group for the given rows, `rows.len() x group_card`.
    pub fn group_one_hot(&self, rows: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(rows.len(), self.group_card);
        for (r, &row) in rows.iter().enumerate() {
            m.set(r, self.group[row], 1.0);
        }
        m
    }

    /// Group indices projected onto a subset of the encoded sensitive
    /// attributes, with the subset's cardinalities.
    pub fn project_groups(&self, subset: &[String]) -> Result<(Vec<usize>, Vec<usize>), DataError> {
        let positions: Vec<usize> = subset
            .iter()
            .map(|name| {
                self.sensitive_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| DataError::UnknownSensitive(name.clone()))
            })
            .collect::<Result<_, _>>()?;
        let cards: Vec<usize> = positions.iter().map(|&p| self.sensitive_cards[p]).collect();
        let groups = self
            .group
            .iter()
            .map(|&g| project_group(g, &self.sensitive_cards, &positions))
            .collect::<Result<_, _>>()?;
        Ok((groups, cards))
    }

    pub(crate) fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.gather(rows),
            column_names: self.column_names.clone(),
            continuous_cols: self.continuous_cols.clone(),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            class_count: self.class_count,
            s_multi: self.s_multi.gather(rows),
            group: rows.iter().map(|&r| self.group[r]).collect(),
            group_card: self.group_card,
            sensitive_names: self.sensitive_names.clone(),
            sensitive_cards: self.sensitive_cards.clone(),
        }
    }

    /// Population mean and standard deviation of each continuous column.
    pub(crate) fn continuous_stats(&self) -> Result<Vec<(usize, f64, f64)>, DataError> {
        let n = self.len() as f64;
        let mut stats = Vec::with_capacity(self.continuous_cols.len());
        for &c in &self.continuous_cols {
            let mean: f64 = (0..self.len()).map(|r| self.x.get(r, c)).sum::<f64>() / n;
            let var: f64 = (0..self.len())
                .map(|r| (self.x.get(r, c) - mean).powi(2))
                .sum::<f64>()
                / n;
            if var <= 0.0 {
                return Err(DataError::ZeroVariance(self.column_names[c].clone()));
            }
            stats.push((c, mean, var.sqrt()));
        }
        Ok(stats)
    }

    pub(crate) fn standardize(&mut self, stats: &[(usize, f64, f64)]) {
        for &(c, mean, std) in stats {
            for r in 0..self.len() {
                let v = (self.x.get(r, c) - mean) / std;
                self.x.set(r, c, v);
            }
        }
    }
}

/// Mixed-radix (row-major) index of one attribute-value tuple.
pub fn map_to_group(indices: &[usize], cardinalities: &[usize]) -> Result<usize, DataError> {
    debug_assert_eq!(indices.len(), cardinalities.len());
    let mut out = 0usize;
    for (&idx, &card) in indices.iter().zip(cardinalities) {
        if idx >= card {
            return Err(DataError::IndexOutOfRange {
                index: idx,
                cardinality: card,
            });
        }
        out = out * card + idx;
    }
    Ok(out)
}

/// Inverse of [`map_to_group`].
pub fn unmap_group(group: usize, cardinalities: &[usize]) -> Result<Vec<usize>, DataError> {
    let total: usize = cardinalities.iter().product();
    if group >= total {
        return Err(DataError::GroupOutOfRange {
            index: group,
            cardinality: total,
        });
    }
    let mut rest = group;
    let mut out = vec![0usize; cardinalities.len()];
    for (slot, &card) in out.iter_mut().zip(cardinalities).rev() {
        *slot = rest % card;
        rest /= card;
    }
    Ok(out)
}

/// Project a full joint-group index onto the attributes at `positions`,
/// yielding the group index in the subset's own product space.
pub fn project_group(
    group: usize,
    cardinalities: &[usize],
    positions: &[usize],
) -> Result<usize, DataError> {
    let full = unmap_group(group, cardinalities)?;
    let sub_indices: Vec<usize> = positions.iter().map(|&p| full[p]).collect();
    let sub_cards: Vec<usize> = positions.iter().map(|&p| cardinalities[p]).collect();
    map_to_group(&sub_indices, &sub_cards)
}

/// Encode a loaded table. `selected_sensitive` picks which sensitive
/// attributes define the joint group (order matters for the group index);
/// the feature matrix itself always follows the schema.
pub fn encode(
    table: &RawTable,
    schema: &DatasetSchema,
    selected_sensitive: &[String],
) -> Result<EncodedDataset, DataError> {
    let n = table.len();

    let selected: Vec<usize> = selected_sensitive
        .iter()
        .map(|name| {
            schema
                .sensitive
                .iter()
                .position(|s| &s.name == name)
                .ok_or_else(|| DataError::UnknownSensitive(name.clone()))
        })
        .collect::<Result<_, _>>()?;
    if selected.is_empty() {
        return Err(DataError::InvalidSchema(
            "select at least one sensitive attribute".into(),
        ));
    }

    // Feature matrix: declared features, then (optionally) every sensitive
    // attribute one-hot, independent of the debias selection so model input
    // dims do not depend on what is being debiased.
    let mut column_names = Vec::new();
    let mut continuous_cols = Vec::new();
    for (spec, col) in schema.features.iter().zip(&table.feature_columns) {
        match (spec.kind, col) {
            (FeatureKind::Categorical, RawColumn::Categorical(_)) => {
                for cat in &spec.categories {
                    column_names.push(format!("{}={}", spec.name, cat));
                }
            }
            (FeatureKind::Continuous, RawColumn::Continuous(values)) => {
                // Flag degenerate columns at encode time; split re-checks on
                // the training subsample.
                let mean: f64 = values.iter().sum::<f64>() / n.max(1) as f64;
                let var: f64 =
                    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
                if var <= 0.0 {
                    return Err(DataError::ZeroVariance(spec.name.clone()));
                }
                continuous_cols.push(column_names.len());
                column_names.push(spec.name.clone());
            }
            _ => unreachable!("column kind fixed at load"),
        }
    }
    if schema.include_sensitive_in_features {
        for spec in &schema.sensitive {
            for cat in &spec.categories {
                column_names.push(format!("{}={}", spec.name, cat));
            }
        }
    }

    let d = column_names.len();
    let mut x = Matrix::zeros(n, d);
    for row in 0..n {
        let mut col = 0usize;
        for (spec, raw) in schema.features.iter().zip(&table.feature_columns) {
            match raw {
                RawColumn::Categorical(idx) => {
                    x.set(row, col + idx[row], 1.0);
                    col += spec.categories.len();
                }
                RawColumn::Continuous(values) => {
                    x.set(row, col, values[row]);
                    col += 1;
                }
            }
        }
        if schema.include_sensitive_in_features {
            for (spec, values) in schema.sensitive.iter().zip(&table.sensitive_columns) {
                x.set(row, col + values[row], 1.0);
                col += spec.categories.len();
            }
        }
    }

    // Sensitive view over the selected attributes only.
    let sensitive_names: Vec<String> = selected
        .iter()
        .map(|&i| schema.sensitive[i].name.clone())
        .collect();
    let sensitive_cards: Vec<usize> = selected
        .iter()
        .map(|&i| schema.sensitive[i].categories.len())
        .collect();
    let group_card: usize = sensitive_cards.iter().product();
    let multi_width: usize = sensitive_cards.iter().sum();

    let mut s_multi = Matrix::zeros(n, multi_width);
    let mut group = Vec::with_capacity(n);
    let mut indices = vec![0usize; selected.len()];
    for row in 0..n {
        let mut offset = 0usize;
        for (k, &attr) in selected.iter().enumerate() {
            let idx = table.sensitive_columns[attr][row];
            indices[k] = idx;
            s_multi.set(row, offset + idx, 1.0);
            offset += sensitive_cards[k];
        }
        group.push(map_to_group(&indices, &sensitive_cards)?);
    }

    Ok(EncodedDataset {
        x,
        column_names,
        continuous_cols,
        y: table.labels.clone(),
        class_count: schema.label_values.len(),
        s_multi,
        group,
        group_card,
        sensitive_names,
        sensitive_cards,
    })
}
