//! Model-spec documents (TOML).
//!
//! ```toml
//! levels = [2, 2, 4, 6, 10]          # n(d), n(z1) .. n(zL), d_x
//! edges = [["d.1", "z1.1"], ["z1.1", "z2.1"], ["z3.1", "x"]]
//!
//! [mechanisms."z2.1"]
//! family = "linear-gaussian"
//! params = [0.9, 0.0]
//! noise = { family = "gaussian", scale = 0.3 }
//!
//! [roots.1]
//! values = [
//!   { kind = "degenerate", value = 0.0 },
//!   { kind = "interval", lo = 1.0, hi = 2.0, density = "uniform" },
//! ]
//! ```
//!
//! Unknown fields are rejected. Lattice roots use `density = "lattice"` with
//! a `points` count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HierError, Result};
use crate::model::{
    parse_variable_name, HierModel, MechanismFamily, MechanismSpec, NoiseFamily, NoiseSpec, RootConditionalSpec,
    RootDensity, RootValue,
};

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<usize>>,
    #[serde(default)]
    edges: Vec<(String, String)>,
    #[serde(default)]
    mechanisms: BTreeMap<String, RawMechanism>,
    #[serde(default)]
    roots: BTreeMap<String, RawRoot>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawMechanism {
    family: MechanismFamily,
    params: Vec<f64>,
    #[serde(default = "no_noise")]
    noise: RawNoise,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    family: NoiseFamily,
    scale: f64,
}

fn no_noise() -> RawNoise {
    RawNoise { family: NoiseFamily::Gaussian, scale: 0.0 }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawRoot {
    values: Vec<RawRootValue>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawRootValue {
    kind: RawRootKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    density: Option<RawDensity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<u32>,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RawRootKind {
    Degenerate,
    Interval,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RawDensity {
    Uniform,
    Lattice,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the n-th (0-based) line mentioning both quoted names, if any.
fn find_edge_line(text: &str, parent: &str, child: &str, nth: usize) -> Option<usize> {
    let p = format!("\"{parent}\"");
    let c = format!("\"{child}\"");
    let mut seen = 0;
    for (i, line) in text.lines().enumerate() {
        if let (Some(a), Some(b)) = (line.find(&p), line.find(&c)) {
            if a < b {
                if seen == nth {
                    return Some(i + 1);
                }
                seen += 1;
            }
        }
    }
    None
}

/// Parses a model-spec document. Structural problems (skipped levels,
/// non-degenerate absence, ...) do not fail the load; run
/// [`HierModel::validate`] for those.
pub fn load_model(text: &str) -> Result<HierModel> {
    let raw: RawDoc = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start));
        HierError::parse(line, None, e.message().trim().to_string())
    })?;

    let widths = match raw.levels {
        Some(w) if !w.is_empty() => w,
        _ => return Err(HierError::parse(None, Some("levels"), "missing levels")),
    };
    if widths.len() < 3 {
        return Err(HierError::parse(
            None,
            Some("levels"),
            format!("missing levels: need at least [n(d), n(z1), d_x], got {} entries", widths.len()),
        ));
    }
    let num_levels = widths.len() - 2;

    let mut edges = Vec::with_capacity(raw.edges.len());
    let mut seen = std::collections::BTreeSet::new();
    for (p, c) in &raw.edges {
        let parent = parse_variable_name(p, num_levels)
            .map_err(|e| HierError::parse(find_edge_line(text, p, c, 0), Some("edges"), e.to_string()))?;
        let child = parse_variable_name(c, num_levels)
            .map_err(|e| HierError::parse(find_edge_line(text, p, c, 0), Some("edges"), e.to_string()))?;
        if !seen.insert((parent, child)) {
            return Err(HierError::parse(
                find_edge_line(text, p, c, 1),
                Some("edges"),
                format!("duplicate edge [{p}, {c}]"),
            ));
        }
        edges.push((parent, child));
    }

    let mut mechanisms = BTreeMap::new();
    for (name, m) in raw.mechanisms {
        let v = parse_variable_name(&name, num_levels)
            .map_err(|e| HierError::parse(None, Some(&format!("mechanisms.{name}")), e.to_string()))?;
        mechanisms.insert(
            v,
            MechanismSpec {
                family: m.family,
                params: m.params,
                noise: NoiseSpec { family: m.noise.family, scale: m.noise.scale },
            },
        );
    }

    let mut roots = BTreeMap::new();
    for (key, r) in raw.roots {
        let field = format!("roots.{key}");
        let i: u32 = key
            .parse()
            .map_err(|_| HierError::parse(None, Some(&field), format!("root key `{key}` is not an index")))?;
        let values = r
            .values
            .into_iter()
            .enumerate()
            .map(|(c, v)| {
                root_value(v).map_err(|msg| HierError::parse(None, Some(&format!("{field}.values[{c}]")), msg))
            })
            .collect::<Result<Vec<_>>>()?;
        roots.insert(i, RootConditionalSpec { values });
    }

    Ok(HierModel::new(widths, edges, mechanisms, roots))
}

fn root_value(v: RawRootValue) -> std::result::Result<RootValue, String> {
    match v.kind {
        RawRootKind::Degenerate => {
            if v.lo.is_some() || v.hi.is_some() || v.density.is_some() || v.points.is_some() {
                return Err("degenerate values take only `value`".into());
            }
            let value = v.value.ok_or("degenerate value needs `value`")?;
            Ok(RootValue::Degenerate { value })
        }
        RawRootKind::Interval => {
            if v.value.is_some() {
                return Err("interval values take `lo`, `hi`, `density`".into());
            }
            let lo = v.lo.ok_or("interval needs `lo`")?;
            let hi = v.hi.ok_or("interval needs `hi`")?;
            let density = match (v.density.unwrap_or(RawDensity::Uniform), v.points) {
                (RawDensity::Uniform, None) => RootDensity::Uniform,
                (RawDensity::Uniform, Some(_)) => return Err("`points` only applies to lattice densities".into()),
                (RawDensity::Lattice, Some(points)) => RootDensity::Lattice { points },
                (RawDensity::Lattice, None) => return Err("lattice density needs `points`".into()),
            };
            Ok(RootValue::Interval { lo, hi, density })
        }
    }
}

/// Serializes a model back to its canonical document.
pub fn save_model(model: &HierModel) -> String {
    let edges = model.edges().iter().map(|&(p, c)| (model.name(p), model.name(c))).collect();
    let mechanisms = model
        .mechanisms()
        .iter()
        .map(|(&v, m)| {
            (
                model.name(v),
                RawMechanism {
                    family: m.family,
                    params: m.params.clone(),
                    noise: RawNoise { family: m.noise.family, scale: m.noise.scale },
                },
            )
        })
        .collect();
    let roots = model
        .roots()
        .iter()
        .map(|(&i, r)| {
            let values = r
                .values
                .iter()
                .map(|v| match *v {
                    RootValue::Degenerate { value } => RawRootValue {
                        kind: RawRootKind::Degenerate,
                        value: Some(value),
                        lo: None,
                        hi: None,
                        density: None,
                        points: None,
                    },
                    RootValue::Interval { lo, hi, density } => RawRootValue {
                        kind: RawRootKind::Interval,
                        value: None,
                        lo: Some(lo),
                        hi: Some(hi),
                        density: Some(match density {
                            RootDensity::Uniform => RawDensity::Uniform,
                            RootDensity::Lattice { .. } => RawDensity::Lattice,
                        }),
                        points: match density {
                            RootDensity::Lattice { points } => Some(points),
                            RootDensity::Uniform => None,
                        },
                    },
                })
                .collect();
            (i.to_string(), RawRoot { values })
        })
        .collect();
    let raw = RawDoc { levels: Some(model.widths().to_vec()), edges, mechanisms, roots };
    toml::to_string(&raw).expect("model documents always serialize")
}

/// SHA-256 of the canonical document, hex encoded.
pub fn model_hash(model: &HierModel) -> String {
    let digest = Sha256::digest(save_model(model).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads and parses a model file.
pub fn read_model(path: &std::path::Path) -> Result<HierModel> {
    let text = std::fs::read_to_string(path)?;
    load_model(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::ViolationKind;

    #[test]
    fn layered_document_loads() {
        let m = load_model(&save_model(&fixtures::layered_linear(0.3))).unwrap();
        assert_eq!(&m.widths()[..4], &[2, 2, 4, 6]);
        assert!(m.validate().is_valid());
    }

    #[test]
    fn empty_document_is_missing_levels() {
        let err = load_model("").unwrap_err();
        assert!(err.to_string().contains("missing levels"), "{err}");
    }

    #[test]
    fn duplicate_edge_is_rejected_with_line() {
        let text = r#"levels = [1, 1, 1]
edges = [
  ["d.1", "z1.1"],
  ["z1.1", "x"],
  ["d.1", "z1.1"],
]
"#;
        let err = load_model(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate edge"), "{msg}");
        assert!(msg.contains("line 5"), "{msg}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = load_model("levels = [1, 1, 1]\ncolour = 3\n").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn invalid_structure_still_loads() {
        let text = r#"levels = [1, 1, 1, 1, 1]
edges = [["d.1", "z1.1"], ["z1.1", "z3.1"], ["z1.1", "z2.1"], ["z2.1", "z3.1"], ["z3.1", "x"]]
"#;
        let m = load_model(text).unwrap();
        let report = m.validate();
        assert!(report.contains(ViolationKind::NonAdjacentEdge));
        assert!(report.contains(ViolationKind::MissingMechanism));
    }

    #[test]
    fn lattice_roots_round_trip() {
        let m = fixtures::two_root_singleton_table();
        let text = save_model(&m);
        assert!(text.contains("lattice"));
        assert_eq!(load_model(&text).unwrap(), m);
    }

    #[test]
    fn hash_is_stable() {
        let a = model_hash(&fixtures::layered_linear(0.3));
        let b = model_hash(&fixtures::layered_linear(0.3));
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert_ne!(a, model_hash(&fixtures::layered_linear(0.4)));
    }
}
