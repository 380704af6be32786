use serde::Serialize;

use crate::model::{shape_table, ArchSpec, BlockId, Variant};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModuleCost {
    pub module: String,
    pub params: usize,
    pub macs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub image_size: usize,
    pub params: usize,
    pub macs: usize,
    pub modules: Vec<ModuleCost>,
}

/// Module a parameter belongs to: the block half, stage stem, or head.
fn module_of(spec: &ArchSpec, name: &str) -> String {
    for id in spec.block_ids() {
        let pre = format!("{}.", spec.block_prefix(id));
        if let Some(rest) = name.strip_prefix(&pre) {
            let half = if rest.starts_with("norm1.") || rest.starts_with("attn.") {
                "attn"
            } else {
                "mlp"
            };
            return format!("{pre}{half}");
        }
    }
    if name.starts_with("norm.") || name.starts_with("head.") {
        return "head".into();
    }
    match name.split_once(".patch_embed") {
        Some((stage, _)) => format!("{stage}.patch_embed"),
        None if name.starts_with("stages.") => {
            let stage: Vec<&str> = name.splitn(3, '.').collect();
            format!("{}.{}.norm", stage[0], stage[1])
        }
        None => "patch_embed".into(),
    }
}

/// Exact parameter count and multiply-accumulates for one image at the
/// spec's resolution.
///
/// MACs count every matrix product (`T·in·out` per linear), both attention
/// products (`2·Tq·Tk·width`), and convolutions (`Ho·Wo·Cout·Cin/groups·k²`).
/// Norms, activations, softmax and additions are not counted.
pub fn cost_report(spec: &ArchSpec) -> CostReport {
    let mut modules: Vec<ModuleCost> = Vec::new();
    let mut add = |module: String, params: usize, macs: usize| {
        match modules.iter_mut().find(|m| m.module == module) {
            Some(m) => {
                m.params += params;
                m.macs += macs;
            }
            None => modules.push(ModuleCost { module, params, macs }),
        }
    };
    for (name, shape) in shape_table(spec) {
        add(module_of(spec, &name), shape.iter().product(), 0);
    }
    for (s, st) in spec.stages.iter().enumerate() {
        let d = st.embed_dim;
        let g = spec.grid(s);
        let n = g * g;
        let t = spec.seq_len(s);
        let stem = match spec.variant {
            Variant::Vanilla => "patch_embed".to_string(),
            Variant::Staged => format!("stages.{s}.patch_embed"),
        };
        let (k, _, _) = spec.patch_conv(s);
        add(stem, 0, n * spec.stage_in_channels(s) * k * k * d);
        for (bk, b) in st.blocks.iter().enumerate() {
            let pre = spec.block_prefix(BlockId::new(s, bk));
            if let Some(a) = &b.attn {
                let (tk, kv_in, sr_macs) = match &a.sr {
                    Some(sr) => {
                        let gr = g / sr.ratio;
                        (gr * gr, sr.dim, gr * gr * sr.dim * d * sr.ratio * sr.ratio)
                    }
                    None => (t, d, 0),
                };
                let macs = t * d * a.dim + 2 * tk * kv_in * a.dim + sr_macs + 2 * t * tk * a.dim + t * a.dim * d;
                add(format!("{pre}.attn"), 0, macs);
            }
            if let Some(f) = &b.ffn {
                let dw = if spec.variant == Variant::Staged { t * f.hidden_dim * 9 } else { 0 };
                add(format!("{pre}.mlp"), 0, 2 * t * d * f.hidden_dim + dw);
            }
        }
    }
    add("head".into(), 0, spec.final_dim() * spec.num_classes);
    CostReport {
        image_size: spec.image_size,
        params: modules.iter().map(|m| m.params).sum(),
        macs: modules.iter().map(|m| m.macs).sum(),
        modules,
    }
}

impl CostReport {
    /// Tab-separated breakdown with a header row and a closing total.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("module\tparams\tmacs\n");
        for m in &self.modules {
            s.push_str(&format!("{}\t{}\t{}\n", m.module, m.params, m.macs));
        }
        s.push_str(&format!("total\t{}\t{}\n", self.params, self.macs));
        s
    }
}
