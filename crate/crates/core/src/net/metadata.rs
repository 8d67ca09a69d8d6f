use super::{NetError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Admission variables available to the fused classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataField {
    Age,
    Sex,
    Hypertension,
    IntraparenchymalHematoma,
    AcuteHydrocephalus,
    Wfns,
    HuntHess,
    FisherGt2,
}

impl MetadataField {
    pub const ALL: [MetadataField; 8] = [
        Self::Age,
        Self::Sex,
        Self::Hypertension,
        Self::IntraparenchymalHematoma,
        Self::AcuteHydrocephalus,
        Self::Wfns,
        Self::HuntHess,
        Self::FisherGt2,
    ];

    /// Column name used in cohort tables.
    pub fn key(self) -> &'static str {
        match self {
            Self::Age => "age",
            Self::Sex => "sex",
            Self::Hypertension => "hypertension",
            Self::IntraparenchymalHematoma => "intraparenchymal_hematoma",
            Self::AcuteHydrocephalus => "acute_hydrocephalus",
            Self::Wfns => "wfns",
            Self::HuntHess => "hunt_hess",
            Self::FisherGt2 => "fisher_gt2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.key() == s)
    }

    /// Continuous and ordinal fields are standardized; binary flags are not.
    pub fn standardized_by_default(self) -> bool {
        matches!(self, Self::Age | Self::Wfns | Self::HuntHess)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldEncoding {
    pub field: MetadataField,
    pub standardize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

/// Ordered metadata encoding. Standardization statistics are fitted once,
/// on the training split, and frozen afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataSpec {
    fields: Vec<FieldEncoding>,
    stats: Option<Vec<Standardizer>>,
}

impl Default for MetadataSpec {
    fn default() -> Self {
        Self::new(
            MetadataField::ALL
                .iter()
                .map(|&field| FieldEncoding { field, standardize: field.standardized_by_default() })
                .collect(),
        )
    }
}

impl MetadataSpec {
    pub fn new(fields: Vec<FieldEncoding>) -> Self {
        Self { fields, stats: None }
    }

    pub fn fields(&self) -> &[FieldEncoding] {
        &self.fields
    }

    pub fn dim(&self) -> usize {
        self.fields.len()
    }

    pub fn is_fitted(&self) -> bool {
        self.stats.is_some()
    }

    pub fn stats(&self) -> Option<&[Standardizer]> {
        self.stats.as_deref()
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim() {
            return Err(NetError::Metadata(format!("row has {} values, expected {}", row.len(), self.dim())));
        }
        if let Some(i) = row.iter().position(|v| !v.is_finite()) {
            return Err(NetError::Metadata(format!("non-finite value for '{}'", self.fields[i].field.key())));
        }
        Ok(())
    }

    /// Fits per-field mean and population standard deviation. Fields that
    /// are not standardized get the identity transform; a zero spread falls
    /// back to 1.
    pub fn fit(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        if self.stats.is_some() {
            return Err(NetError::Metadata("standardization is already fitted".into()));
        }
        if rows.is_empty() {
            return Err(NetError::Metadata("cannot fit on zero rows".into()));
        }
        for r in rows {
            self.check_row(r)?;
        }
        let n = rows.len() as f64;
        let stats = self
            .fields
            .iter()
            .enumerate()
            .map(|(j, enc)| {
                if !enc.standardize {
                    return Standardizer { mean: 0.0, std: 1.0 };
                }
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                Standardizer { mean, std }
            })
            .collect();
        self.stats = Some(stats);
        Ok(())
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>> {
        let stats = self.stats.as_ref().ok_or_else(|| NetError::Metadata("standardization not fitted".into()))?;
        self.check_row(row)?;
        Ok(row.iter().zip(stats).map(|(v, s)| (v - s.mean) / s.std).collect())
    }

    /// Transformed rows as a `[N, m]` tensor.
    pub fn transform_batch(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.dim());
        for r in rows {
            data.extend(self.transform(r)?);
        }
        Ok(Tensor::new(vec![rows.len(), self.dim()], data)?)
    }
}
