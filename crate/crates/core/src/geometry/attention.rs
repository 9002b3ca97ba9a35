use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::{ActivationTrace, GroupKind};

/// Jensen-Shannon divergence in nats between two distributions.
///
/// Exactly symmetric in its arguments; the result lies in `[0, ln 2]`.
pub fn js_divergence(p: &[f32], q: &[f32]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a as f64, b as f64);
        let m = 0.5 * (a + b);
        s += term(a, m) + term(b, m);
    }
    (0.5 * s).clamp(0.0, std::f64::consts::LN_2)
}

/// Which query rows enter the JS average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsRows {
    #[default]
    All,
    ClsOnly,
}

fn check_pair(full: &ActivationTrace, ablated: &ActivationTrace, layer: usize) -> Result<()> {
    if full.layout != ablated.layout {
        return Err(Error::Contract("traces come from different layouts".into()));
    }
    if !full.has_attention() || !ablated.has_attention() {
        return Err(Error::Contract("trace was recorded without attention".into()));
    }
    let depth = full.attention.len().min(ablated.attention.len());
    if layer >= depth {
        return Err(Error::Range {
            what: "layer",
            index: layer,
            limit: depth,
        });
    }
    Ok(())
}

/// JS divergence between two traces' attention at one block: averaged over
/// the selected query rows, then over heads.
pub fn attention_js(
    full: &ActivationTrace,
    ablated: &ActivationTrace,
    layer: usize,
    rows: JsRows,
) -> Result<f64> {
    check_pair(full, ablated, layer)?;
    let heads = &full.attention[layer];
    let mut total = 0.0;
    for (a, b) in heads.iter().zip(&ablated.attention[layer]) {
        let row_ids: Vec<usize> = match rows {
            JsRows::All => (0..a.rows()).collect(),
            JsRows::ClsOnly => vec![full.layout.cls_index()],
        };
        let s: f64 = row_ids.iter().map(|&r| js_divergence(a.row(r), b.row(r))).sum();
        total += s / row_ids.len() as f64;
    }
    Ok(total / heads.len() as f64)
}

pub fn attention_js_per_layer(
    full: &ActivationTrace,
    ablated: &ActivationTrace,
    rows: JsRows,
) -> Result<Vec<f64>> {
    (0..full.depth())
        .map(|l| attention_js(full, ablated, l, rows))
        .collect()
}

/// Mean attention mass each source group sends to each target group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionFlowSummary {
    /// `fractions[layer][source]` indexed by [`GroupKind::ALL`] order;
    /// `None` for a source group with no tokens (registers when R = 0).
    pub fractions: Vec<[Option<[f64; 3]>; 3]>,
}

impl AttentionFlowSummary {
    pub fn fraction(&self, layer: usize, source: GroupKind, target: GroupKind) -> Option<f64> {
        self.fractions
            .get(layer)?
            .get(group_pos(source))
            .copied()
            .flatten()
            .map(|f| f[group_pos(target)])
    }
}

fn group_pos(g: GroupKind) -> usize {
    match g {
        GroupKind::Cls => 0,
        GroupKind::Registers => 1,
        GroupKind::Patches => 2,
    }
}

/// Per-layer flow averaged over heads, images and source rows.
pub fn attention_flow(traces: &[ActivationTrace]) -> Result<AttentionFlowSummary> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Contract("attention flow needs at least one trace".into()))?;
    let layout = &first.layout;
    let depth = first.attention.len();
    if depth == 0 {
        return Err(Error::Contract("trace was recorded without attention".into()));
    }
    if traces
        .iter()
        .any(|t| t.layout != *layout || t.attention.len() != depth)
    {
        return Err(Error::Contract("traces in a flow batch must share a layout".into()));
    }
    let ranges = GroupKind::ALL.map(|g| layout.indices(g));
    let mut fractions = Vec::with_capacity(depth);
    for layer in 0..depth {
        let mut per_source = [None; 3];
        for (s, src) in ranges.iter().enumerate() {
            if src.is_empty() {
                continue;
            }
            let mut acc = [0.0f64; 3];
            let mut n = 0usize;
            for t in traces {
                for head in &t.attention[layer] {
                    for r in src.clone() {
                        let row = head.row(r);
                        for (k, tgt) in ranges.iter().enumerate() {
                            acc[k] += row[tgt.clone()].iter().map(|&v| v as f64).sum::<f64>();
                        }
                        n += 1;
                    }
                }
            }
            per_source[s] = Some(acc.map(|a| a / n as f64));
        }
        fractions.push(per_source);
    }
    Ok(AttentionFlowSummary { fractions })
}
