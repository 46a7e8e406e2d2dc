//! Shared data model: observed units, datasets with typed schemas,
//! principal strata, and estimate records.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Type declaration for the intermediate variable S or the auxiliary
/// variable W. Discrete variables carry their category values (not indices),
/// so relabeling a category is a pure renaming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum VarKind {
    Discrete { categories: Vec<f64> },
    Continuous,
}

impl VarKind {
    pub fn is_discrete(&self) -> bool {
        matches!(self, VarKind::Discrete { .. })
    }

    pub fn categories(&self) -> Option<&[f64]> {
        match self {
            VarKind::Discrete { categories } => Some(categories),
            VarKind::Continuous => None,
        }
    }

    fn admits(&self, v: f64) -> bool {
        match self {
            VarKind::Discrete { categories } => categories.contains(&v),
            VarKind::Continuous => v.is_finite(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YKind {
    Binary,
    Continuous,
}

/// Schema of a dataset: declared types of S, W, Y and covariate count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub s: VarKind,
    pub w: VarKind,
    pub y: YKind,
    pub n_covariates: usize,
}

impl Schema {
    pub fn new(s: VarKind, w: VarKind, y: YKind, n_covariates: usize) -> Self {
        Schema {
            s,
            w,
            y,
            n_covariates,
        }
    }
}

/// One sampled unit: treatment, observed intermediate, outcome, auxiliary
/// value, and an optional covariate vector (length 0 means no covariates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedUnit {
    pub z: u8,
    pub s: f64,
    pub y: f64,
    pub w: f64,
    #[serde(default)]
    pub x: Vec<f64>,
}

impl ObservedUnit {
    pub fn new(z: u8, s: f64, y: f64, w: f64) -> Self {
        ObservedUnit {
            z,
            s,
            y,
            w,
            x: Vec::new(),
        }
    }

    pub fn with_x(z: u8, s: f64, y: f64, w: f64, x: Vec<f64>) -> Self {
        ObservedUnit { z, s, y, w, x }
    }
}

/// An ordered collection of units conforming to a schema.
///
/// Construction validates every unit, so estimators can rely on the schema
/// invariants without re-checking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    units: Vec<ObservedUnit>,
    schema: Schema,
}

impl Dataset {
    pub fn new(units: Vec<ObservedUnit>, schema: Schema) -> Result<Self> {
        for (i, u) in units.iter().enumerate() {
            if u.z > 1 {
                return Err(Error::SchemaViolation(format!(
                    "unit {i}: z={} not in {{0,1}}",
                    u.z
                )));
            }
            if !u.y.is_finite() {
                return Err(Error::SchemaViolation(format!("unit {i}: non-finite y")));
            }
            if schema.y == YKind::Binary && u.y != 0.0 && u.y != 1.0 {
                return Err(Error::SchemaViolation(format!(
                    "unit {i}: y={} not binary",
                    u.y
                )));
            }
            if !schema.s.admits(u.s) {
                return Err(Error::SchemaViolation(format!(
                    "unit {i}: s={} outside declared S domain",
                    u.s
                )));
            }
            if !schema.w.admits(u.w) {
                return Err(Error::SchemaViolation(format!(
                    "unit {i}: w={} outside declared W domain",
                    u.w
                )));
            }
            if u.x.len() != schema.n_covariates {
                return Err(Error::SchemaViolation(format!(
                    "unit {i}: {} covariates, schema declares {}",
                    u.x.len(),
                    schema.n_covariates
                )));
            }
        }
        Ok(Dataset { units, schema })
    }

    pub fn units(&self) -> &[ObservedUnit] {
        &self.units
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn treated(&self) -> impl Iterator<Item = &ObservedUnit> {
        self.units.iter().filter(|u| u.z == 1)
    }

    pub fn control(&self) -> impl Iterator<Item = &ObservedUnit> {
        self.units.iter().filter(|u| u.z == 0)
    }

    /// Estimation entry points require both arms to be populated.
    pub fn require_both_arms(&self) -> Result<()> {
        if self.treated().next().is_none() {
            return Err(Error::EmptyCell("z=1".into()));
        }
        if self.control().next().is_none() {
            return Err(Error::EmptyCell("z=0".into()));
        }
        Ok(())
    }

    /// Distinct observed values of W, in ascending order.
    pub fn w_values(&self) -> Vec<f64> {
        match &self.schema.w {
            VarKind::Discrete { categories } => categories.clone(),
            VarKind::Continuous => {
                let mut vs: Vec<f64> = self.units.iter().map(|u| u.w).collect();
                vs.sort_by(f64::total_cmp);
                vs.dedup();
                vs
            }
        }
    }

    /// Unit-level resample with replacement (bootstrap). Schema is reused
    /// without re-validation since every drawn unit already conforms.
    pub fn resample<R: Rng>(&self, rng: &mut R) -> Dataset {
        let n = self.units.len();
        let units = (0..n)
            .map(|_| self.units[rng.random_range(0..n)].clone())
            .collect();
        Dataset {
            units,
            schema: self.schema.clone(),
        }
    }
}

/// A principal stratum. `s0 = None` encodes the constant-control setting in
/// which only `s1` indexes strata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrincipalStratum {
    pub s1: f64,
    pub s0: Option<f64>,
}

impl PrincipalStratum {
    pub fn joint(s1: f64, s0: f64) -> Self {
        PrincipalStratum { s1, s0: Some(s0) }
    }

    pub fn marginal(s1: f64) -> Self {
        PrincipalStratum { s1, s0: None }
    }

    pub fn label(&self) -> String {
        match self.s0 {
            Some(s0) => format!("({},{})", self.s1, s0),
            None => format!("({})", self.s1),
        }
    }
}

/// Two-sided interval at a nominal coverage level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// One principal causal effect estimate plus provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PceEstimate {
    pub stratum: PrincipalStratum,
    pub point: f64,
    pub interval: Option<Interval>,
    pub method: String,
    pub seed: u64,
    #[serde(default)]
    pub diagnostics: BTreeMap<String, serde_json::Value>,
}

impl PceEstimate {
    pub fn new(stratum: PrincipalStratum, point: f64, method: &str, seed: u64) -> Self {
        PceEstimate {
            stratum,
            point,
            interval: None,
            method: method.to_string(),
            seed,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn tag(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.diagnostics.insert(key.to_string(), value.into());
    }

    /// Attach a percentile interval. If the point estimate falls outside the
    /// interval (possible when the point comes from the full sample and the
    /// interval from resamples) the inversion is recorded rather than hidden.
    pub fn with_interval(mut self, lower: f64, upper: f64, level: f64) -> Self {
        if self.point < lower || self.point > upper {
            self.tag("interval_excludes_point", true);
        }
        self.interval = Some(Interval {
            lower,
            upper,
            level,
        });
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_schema() -> Schema {
        Schema::new(
            VarKind::Discrete {
                categories: vec![0.0, 1.0],
            },
            VarKind::Discrete {
                categories: vec![1.0, 2.0],
            },
            YKind::Binary,
            0,
        )
    }

    #[test]
    fn rejects_off_schema_units() {
        let schema = binary_schema();
        assert!(Dataset::new(vec![ObservedUnit::new(1, 2.0, 0.0, 1.0)], schema.clone()).is_err());
        assert!(Dataset::new(vec![ObservedUnit::new(1, 1.0, 0.5, 1.0)], schema.clone()).is_err());
        assert!(Dataset::new(vec![ObservedUnit::new(3, 1.0, 1.0, 1.0)], schema.clone()).is_err());
        assert!(Dataset::new(vec![ObservedUnit::new(1, 1.0, 1.0, 3.0)], schema).is_err());
    }

    #[test]
    fn empty_covariates_are_legal() {
        let schema = binary_schema();
        let d = Dataset::new(
            vec![
                ObservedUnit::new(1, 1.0, 1.0, 1.0),
                ObservedUnit::new(0, 0.0, 0.0, 2.0),
            ],
            schema,
        )
        .unwrap();
        assert!(d.require_both_arms().is_ok());
    }

    #[test]
    fn both_arms_check() {
        let schema = binary_schema();
        let d = Dataset::new(vec![ObservedUnit::new(1, 1.0, 1.0, 1.0)], schema).unwrap();
        assert!(d.require_both_arms().is_err());
    }

    #[test]
    fn interval_inversion_is_recorded() {
        let e = PceEstimate::new(PrincipalStratum::joint(1.0, 0.0), 0.5, "test", 0)
            .with_interval(0.6, 0.9, 0.95);
        assert!(e.diagnostics.contains_key("interval_excludes_point"));
    }
}
