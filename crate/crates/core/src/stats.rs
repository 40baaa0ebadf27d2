//! Architecture statistics emitted as CSV plot data: operator rates,
//! resolution preference, complexity distribution, and per-cell feature
//! moments.

use crate::decode::{ArchitecturePlan, DecodedModel};
use crate::error::{DenasError, Result};
use crate::graph::Graph;
use crate::latency::LatencyTable;
use crate::supernet::{ArchSnapshot, RESOLUTION_MENU};
use crate::tensor::{softmax_slice, TensorData};
use crate::zoo::OPERATOR_MENU;
use std::collections::BTreeMap;
use std::path::Path;

/// Per-part operator selection rates over retained cells; each part's
/// rates sum to 1.
pub fn operator_rates(plan: &ArchitecturePlan) -> Result<Vec<BTreeMap<String, f64>>> {
    let mut out = vec![];
    for part in &plan.parts {
        if part.cells.is_empty() {
            return Err(DenasError::arg("operator_rates", "part with no cells"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for kind in OPERATOR_MENU {
            counts.insert(kind.name().to_string(), 0);
        }
        for c in &part.cells {
            *counts
                .entry(c.op.clone())
                .or_insert(0) += 1;
        }
        let n = part.cells.len() as f64;
        out.push(counts.into_iter().map(|(k, v)| (k, v as f64 / n)).collect());
    }
    Ok(out)
}

/// Mean normalized resolution weights (up/same/down) per selected
/// operator, over all cells of all parts of a search run.
pub fn resolution_preference(
    snapshots: &[ArchSnapshot],
) -> Result<BTreeMap<String, [f64; 3]>> {
    let mut sums: BTreeMap<String, ([f64; 3], usize)> = BTreeMap::new();
    for snap in snapshots {
        for row in &snap.cells {
            for cell in row {
                if cell.alpha.is_empty() {
                    return Err(DenasError::arg("resolution_preference", "empty alpha"));
                }
                // ties resolve to the lower menu index, like decoding
                let mut op_idx = 0;
                for (i, &v) in cell.alpha.iter().enumerate() {
                    if v > cell.alpha[op_idx] {
                        op_idx = i;
                    }
                }
                let op = OPERATOR_MENU[op_idx].name().to_string();
                let b = softmax_slice(&cell.beta);
                let e = sums.entry(op).or_insert(([0.0; 3], 0));
                for i in 0..3 {
                    e.0[i] += b[i];
                }
                e.1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64]))
        .collect())
}

/// Expected total latency of each part of a decoded plan.
pub fn complexity_distribution(
    plan: &ArchitecturePlan,
    table: &LatencyTable,
) -> Result<Vec<f64>> {
    let mut out = vec![];
    for part in &plan.parts {
        let mut total = 0.0;
        for c in &part.cells {
            total += table.get(&c.op, c.row, c.w_in, c.w_out)?;
        }
        out.push(total);
    }
    Ok(out)
}

/// Mean and standard deviation of one retained cell's feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct CellFeatureStat {
    pub part: usize,
    pub row: usize,
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn moments(t: &TensorData) -> (f64, f64) {
    let n = t.data.len() as f64;
    let mean = t.data.iter().sum::<f64>() / n;
    let var = t.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-cell feature moments of a decoded model on one input.
pub fn feature_stats(model: &DecodedModel, x: &TensorData) -> Result<Vec<CellFeatureStat>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone())?;
    let mut cells = vec![];
    model.forward_collect(&mut g, xv, &mut Some(&mut cells))?;
    Ok(cells
        .into_iter()
        .map(|(part, row, layer, v)| {
            let (mean, std) = moments(g.value(v));
            CellFeatureStat {
                part,
                row,
                layer,
                mean,
                std,
            }
        })
        .collect())
}

pub fn write_operator_rates_csv(
    path: &Path,
    rates: &[BTreeMap<String, f64>],
) -> Result<()> {
    let mut s = String::from("part,op,rate\n");
    for (pi, part) in rates.iter().enumerate() {
        for (op, rate) in part {
            s.push_str(&format!("{pi},{op},{rate}\n"));
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_resolution_preference_csv(
    path: &Path,
    table: &BTreeMap<String, [f64; 3]>,
) -> Result<()> {
    let mut s = format!(
        "op,{},{},{}\n",
        RESOLUTION_MENU[0], RESOLUTION_MENU[1], RESOLUTION_MENU[2]
    );
    for (op, w) in table {
        s.push_str(&format!("{op},{},{},{}\n", w[0], w[1], w[2]));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_complexity_csv(path: &Path, costs: &[f64]) -> Result<()> {
    let mut s = String::from("part,expected_latency_s\n");
    for (pi, c) in costs.iter().enumerate() {
        s.push_str(&format!("{pi},{c}\n"));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_feature_stats_csv(path: &Path, stats: &[CellFeatureStat]) -> Result<()> {
    let mut s = String::from("part,row,layer,mean,std\n");
    for st in stats {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            st.part, st.row, st.layer, st.mean, st.std
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}
