use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{component_map, shape_table, ArchSpec, Model, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnosticCode {
    Spec,
    FlagPattern,
    HeadDivisibility,
    HeadDim,
    MissingTensor,
    UnexpectedTensor,
    ShapeMismatch,
    ShapeCoupling,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub code: DiagnosticCode,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let code = serde_json::to_value(self.code).ok();
        let code = code.as_ref().and_then(|v| v.as_str()).unwrap_or("?");
        write!(f, "{code}: {}", self.message)
    }
}

fn diag(code: DiagnosticCode, message: String) -> Diagnostic {
    Diagnostic { code, message }
}

fn spec_diagnostics(spec: &ArchSpec, out: &mut Vec<Diagnostic>) {
    let mut head_dims: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for id in spec.block_ids() {
        if let Some(a) = spec.block(id).and_then(|b| b.attn) {
            if a.num_heads == 0 || a.dim % a.num_heads != 0 {
                out.push(diag(
                    DiagnosticCode::HeadDivisibility,
                    format!("block {id}: width {} not divisible by {} heads", a.dim, a.num_heads),
                ));
            } else {
                head_dims.entry(a.head_dim()).or_default().push(id.to_string());
            }
        }
    }
    if head_dims.len() > 1 {
        let desc: Vec<String> = head_dims.iter().map(|(d, b)| format!("{d} in {}", b.join(","))).collect();
        out.push(diag(DiagnosticCode::HeadDim, format!("inconsistent head dims: {}", desc.join("; "))));
    }
    if let Err(e) = spec.check_flags() {
        out.push(diag(DiagnosticCode::FlagPattern, e.to_string()));
    }
    if out.is_empty() {
        if let Err(e) = spec.check() {
            out.push(diag(DiagnosticCode::Spec, e.to_string()));
        }
    }
}

/// Every structural problem with `(spec, weights)`; empty means valid.
pub fn validate(spec: &ArchSpec, weights: &WeightStore) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    spec_diagnostics(spec, &mut out);

    // Coupling: each group's slices must agree on the channel count.
    for g in component_map(spec).groups {
        let extents: Vec<(String, usize)> = g
            .rules
            .iter()
            .filter_map(|r| weights.get(&r.key).and_then(|t| t.shape().get(r.axis)).map(|&e| (r.key.clone(), e)))
            .collect();
        if let Some((first_key, first)) = extents.first() {
            if let Some((k, e)) = extents.iter().find(|(_, e)| e != first) {
                out.push(diag(
                    DiagnosticCode::ShapeCoupling,
                    format!("group {}: {first_key} has {first} channels but {k} has {e}", g.label()),
                ));
            }
        }
    }

    let table = shape_table(spec);
    for (name, shape) in &table {
        match weights.get(name) {
            None => out.push(diag(DiagnosticCode::MissingTensor, format!("missing {name}"))),
            Some(t) if t.shape() != shape.as_slice() => out.push(diag(
                DiagnosticCode::ShapeMismatch,
                format!("{name}: expected {shape:?}, found {:?}", t.shape()),
            )),
            _ => {}
        }
    }
    let expected: std::collections::BTreeSet<&str> = table.iter().map(|(n, _)| n.as_str()).collect();
    for name in weights.names() {
        if !expected.contains(name.as_str()) {
            out.push(diag(DiagnosticCode::UnexpectedTensor, format!("unexpected {name}")));
        }
    }
    out
}

pub fn ensure_valid(model: &Model) -> Result<()> {
    let d = validate(&model.spec, &model.weights);
    if d.is_empty() {
        Ok(())
    } else {
        let msgs: Vec<String> = d.iter().map(Diagnostic::to_string).collect();
        Err(Error::Validation(msgs.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn fresh_model_is_valid() {
        let m = init_model(&ArchSpec::vit(8, 4, 3, 5, 8, 2, 2, 2), 1).unwrap();
        assert!(validate(&m.spec, &m.weights).is_empty());
        let p = init_model(&ArchSpec::pvt_v2_b0(32, 3), 1).unwrap();
        assert!(validate(&p.spec, &p.weights).is_empty());
    }

    #[test]
    fn half_cut_ffn_is_a_coupling_error() {
        let mut m = init_model(&ArchSpec::vit(8, 4, 3, 5, 8, 1, 2, 2), 1).unwrap();
        let w = m.weights.get("blocks.0.mlp.fc1.weight").unwrap().remove(0, &[3]).unwrap();
        m.weights.insert("blocks.0.mlp.fc1.weight", w);
        let d = validate(&m.spec, &m.weights);
        assert!(d.iter().any(|d| d.code == DiagnosticCode::ShapeCoupling && d.message.contains("c3")));
        assert!(d.iter().any(|d| d.code == DiagnosticCode::ShapeMismatch));
    }
}
