//! Configuration resolution: model documents (file or preset), initial
//! segments, and the small list/grid argument grammars.

use std::path::Path;

use serde_json::Value;

use sfde_core::model::DelayModel;
use sfde_core::segment::{Segment, SegmentGrid};
use sfde_core::{Error, Result};

/// A model together with the resolved JSON document it was built from; the
/// document is echoed into manifests so a run can be replayed bit-exactly
/// without the original file.
#[derive(Debug, Clone)]
pub struct ResolvedModel {
    pub document: Value,
    pub model: DelayModel,
}

impl ResolvedModel {
    pub fn from_document(document: Value) -> Result<Self> {
        let model = DelayModel::from_json_value(&document)?;
        Ok(ResolvedModel { document, model })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("model", format!("cannot read {}: {e}", path.display())))?;
        let document: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config("model", format!("invalid JSON: {e}")))?;
        Self::from_document(document)
    }

    /// The built-in benchmark: d = m = 1, r = 1, f(x) = -x|x|^2,
    /// g(zeta) = 0.5 zeta(-1), h(zeta) = 0.5 (1 + zeta(-1)).
    pub fn preset_eq11() -> Self {
        let document = serde_json::json!({
            "d": 1,
            "m": 1,
            "r": 1.0,
            "drift": {"kind": "poly", "s": 2.0},
            "g": {"kind": "point_delay", "G": [[0.5]]},
            "h": {"kind": "affine", "H0": [[0.5]], "H1": [[0.0]], "H2": [[0.5]]}
        });
        Self::from_document(document).expect("preset is well-formed")
    }

    pub fn resolve(model_path: Option<&Path>, preset: Option<&str>) -> Result<Self> {
        match (model_path, preset) {
            (Some(_), Some(_)) => Err(Error::config(
                "model",
                "pass either --model or --preset, not both",
            )),
            (Some(path), None) => Self::from_file(path),
            (None, Some("paper-eq11")) => Ok(Self::preset_eq11()),
            (None, Some(other)) => Err(Error::config(
                "preset",
                format!("unknown preset {other:?} (expected \"paper-eq11\")"),
            )),
            (None, None) => Err(Error::config(
                "model",
                "one of --model or --preset is required",
            )),
        }
    }
}

/// Initial segment specification: a constant vector or explicit node values.
#[derive(Debug, Clone)]
pub struct ResolvedPhi {
    pub document: Value,
}

impl ResolvedPhi {
    pub fn constant(value: &[f64]) -> Self {
        ResolvedPhi {
            document: serde_json::json!({"kind": "constant", "value": value}),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("phi", format!("cannot read {}: {e}", path.display())))?;
        let document: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config("phi", format!("invalid JSON: {e}")))?;
        Ok(ResolvedPhi { document })
    }

    /// Build the segment on the run grid.
    pub fn build(&self, grid: SegmentGrid, d: usize) -> Result<Segment> {
        let kind = self
            .document
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::config("phi.kind", "missing or non-string"))?;
        match kind {
            "constant" => {
                let value = self
                    .document
                    .get("value")
                    .and_then(|v| v.as_array())
                    .ok_or_else(|| Error::config("phi.value", "expected an array of numbers"))?;
                if value.len() != d {
                    return Err(Error::config(
                        "phi.value",
                        format!("expected {d} components, got {}", value.len()),
                    ));
                }
                let value: Vec<f64> = value
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .ok_or_else(|| Error::config("phi.value", "expected a number"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Segment::constant(grid, &value)
            }
            "nodes" => {
                let rows = self
                    .document
                    .get("values")
                    .and_then(|v| v.as_array())
                    .ok_or_else(|| Error::config("phi.values", "expected an array of node rows"))?;
                if rows.len() != grid.num_nodes() {
                    return Err(Error::config(
                        "phi.values",
                        format!(
                            "expected {} node rows for this grid, got {}",
                            grid.num_nodes(),
                            rows.len()
                        ),
                    ));
                }
                let mut values = Vec::with_capacity(rows.len() * d);
                for (i, row) in rows.iter().enumerate() {
                    let row = row.as_array().ok_or_else(|| {
                        Error::config(format!("phi.values[{i}]"), "expected an array of numbers")
                    })?;
                    if row.len() != d {
                        return Err(Error::config(
                            format!("phi.values[{i}]"),
                            format!("expected {d} components, got {}", row.len()),
                        ));
                    }
                    for (j, x) in row.iter().enumerate() {
                        values.push(x.as_f64().ok_or_else(|| {
                            Error::config(format!("phi.values[{i}][{j}]"), "expected a number")
                        })?);
                    }
                }
                Segment::new(grid, d, values)
            }
            other => Err(Error::config(
                "phi.kind",
                format!("unknown kind {other:?} (expected \"constant\" or \"nodes\")"),
            )),
        }
    }
}

/// Comma-separated float list, e.g. "0.2,0.1,0.05".
pub fn parse_float_list(text: &str, path: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = text
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(path, format!("{part:?} is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::config(path, "empty list"));
    }
    Ok(values)
}

/// Geometric grid grammar "start:factor:end", e.g. "1:2:1024".
pub fn parse_geometric_grid(text: &str, path: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::config(
            path,
            format!("expected start:factor:end, got {text:?}"),
        ));
    }
    let start: f64 = parts[0]
        .parse()
        .map_err(|_| Error::config(path, format!("bad start {:?}", parts[0])))?;
    let factor: f64 = parts[1]
        .parse()
        .map_err(|_| Error::config(path, format!("bad factor {:?}", parts[1])))?;
    let end: f64 = parts[2]
        .parse()
        .map_err(|_| Error::config(path, format!("bad end {:?}", parts[2])))?;
    if !(start > 0.0) || !(factor > 1.0) || end < start {
        return Err(Error::config(
            path,
            "need start > 0, factor > 1, end >= start",
        ));
    }
    let mut grid = Vec::new();
    let mut x = start;
    while x <= end * (1.0 + 1e-12) {
        grid.push(x);
        x *= factor;
    }
    Ok(grid)
}

/// "mid" (the midpoint of (1/p, 1/2)) or an explicit number.
pub fn parse_alpha(text: &str, p: f64) -> Result<f64> {
    if text == "mid" {
        Ok(sfde_core::factorization::midpoint_alpha(p))
    } else {
        text.parse::<f64>().map_err(|_| {
            Error::config("alpha", format!("{text:?} is neither \"mid\" nor a number"))
        })
    }
}
