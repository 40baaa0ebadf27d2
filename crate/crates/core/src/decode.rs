//! Decoding trained architecture weights into a discrete network:
//! threshold rules for resolution paths and dense connections, argmax for
//! operators and widths, reverse-BFS pruning, assembly and serialization.

use crate::error::{DenasError, Result};
use crate::graph::{Graph, Parameter, Var};
use crate::supernet::{ArchWeights, PartSpec, RESOLUTION_MENU};
use crate::tensor::{softmax_slice, TensorData};
use crate::zoo::{menu_width, Downsample, OperatorInstance, OperatorKind, SlimmableKernel, Upsample, LEAKY_SLOPE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

// ----------------------------------------------------------------------
// Pure decode rules
// ----------------------------------------------------------------------

/// Resolution-path rule: the argmax alone if its mass exceeds 0.5,
/// otherwise paths in descending mass until the selected sum exceeds 0.5.
/// Ties broken by menu order (lower index first).
pub fn decode_resolution(beta_bar: &[f64]) -> Vec<usize> {
    let order = descending_indices(beta_bar);
    if beta_bar[order[0]] > 0.5 {
        return vec![order[0]];
    }
    cumulative_over_half(beta_bar, &order)
}

/// Dense-connection rule: connections in descending mass until the
/// cumulative sum exceeds 0.5; ties broken by lower cell index.
pub fn decode_dense(delta_bar: &[f64]) -> Vec<usize> {
    let order = descending_indices(delta_bar);
    cumulative_over_half(delta_bar, &order)
}

/// Operator and out-width: plain argmax, ties by menu order.
pub fn decode_cell_and_kernel(alpha: &[f64], gamma: &[f64]) -> (usize, usize) {
    (argmax_first(alpha), argmax_first(gamma))
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn descending_indices(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps lower indices first among ties
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap());
    idx
}

fn cumulative_over_half(v: &[f64], order: &[usize]) -> Vec<usize> {
    let mut selected = vec![];
    let mut mass = 0.0;
    for &i in order {
        selected.push(i);
        mass += v[i];
        if mass > 0.5 {
            break;
        }
    }
    selected
}

// ----------------------------------------------------------------------
// Architecture plan (the serialized contract)
// ----------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CellPlan {
    pub row: usize,
    pub layer: usize,
    pub op: String,
    pub paths: Vec<String>,
    pub dense: Vec<usize>,
    pub w_in: usize,
    pub w_out: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PartPlan {
    pub cells: Vec<CellPlan>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdapterPlan {
    pub after_part: usize,
    pub from_width: usize,
    pub to_width: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArchitecturePlan {
    pub stem_width: usize,
    pub parts: Vec<PartPlan>,
    pub adapters: Vec<AdapterPlan>,
}

impl ArchitecturePlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

// ----------------------------------------------------------------------
// Per-part decode + BFS pruning
// ----------------------------------------------------------------------

/// Decode every cell of a part (before pruning).
pub fn decode_cells(arch: &ArchWeights, spec: &PartSpec) -> Vec<CellPlan> {
    let mut cells = vec![];
    for (r, row) in arch.cells.iter().enumerate() {
        let mut prev_wout = 0; // layer-0 feature is full width
        for (li, cell) in row.iter().enumerate() {
            let l = li + 1;
            // present resolution candidates are contiguous in menu order
            let start = if r + 1 < spec.rows { 0 } else { 1 };
            let end = if r > 0 { 3 } else { 2 };
            let beta_logits = cell.beta.value().data;
            let beta_bar = softmax_slice(&beta_logits[start..end]);
            let paths: Vec<String> = decode_resolution(&beta_bar)
                .into_iter()
                .map(|i| RESOLUTION_MENU[start + i].to_string())
                .collect();
            let delta_bar = softmax_slice(&cell.delta.value().data);
            let dense = decode_dense(&delta_bar);
            let (op_idx, w_out) =
                decode_cell_and_kernel(&cell.alpha.value().data, &cell.gamma.value().data);
            cells.push(CellPlan {
                row: r,
                layer: l,
                op: crate::zoo::OPERATOR_MENU[op_idx].name().to_string(),
                paths,
                dense,
                w_in: prev_wout,
                w_out,
            });
            prev_wout = w_out;
        }
    }
    cells
}

/// Reverse BFS from the output cell (row 0, last layer) over selected
/// edges; cells never reached are pruned.
pub fn bfs_topology(cells: Vec<CellPlan>, spec: &PartSpec) -> Result<Vec<CellPlan>> {
    let find = |r: usize, l: usize| cells.iter().find(|c| c.row == r && c.layer == l);
    let out = find(0, spec.cells_per_row)
        .ok_or_else(|| DenasError::Decode("missing output cell".into()))?;
    if out.paths.is_empty() && out.dense.is_empty() {
        return Err(DenasError::Decode("output cell has no incoming path".into()));
    }
    let mut retained = std::collections::HashSet::new();
    let mut queue = std::collections::VecDeque::new();
    queue.push_back((0usize, spec.cells_per_row));
    retained.insert((0usize, spec.cells_per_row));
    while let Some((r, l)) = queue.pop_front() {
        let cell = match find(r, l) {
            Some(c) => c,
            None => continue,
        };
        let mut preds: Vec<(usize, usize)> = vec![];
        for p in &cell.paths {
            let pr = match p.as_str() {
                "up" => r + 1,
                "same" => r,
                "down" => r.wrapping_sub(1),
                other => return Err(DenasError::Decode(format!("unknown path {other}"))),
            };
            preds.push((pr, l - 1));
        }
        for &j in &cell.dense {
            preds.push((r, j));
        }
        for (pr, pl) in preds {
            // layer 0 entries are row-initial features, not cells
            if pl >= 1 && pr < spec.rows && retained.insert((pr, pl)) {
                queue.push_back((pr, pl));
            }
        }
    }
    Ok(cells
        .into_iter()
        .filter(|c| retained.contains(&(c.row, c.layer)))
        .collect())
}

/// Full per-part decode: rules plus pruning.
pub fn decode_part(arch: &ArchWeights, spec: &PartSpec) -> Result<PartPlan> {
    let cells = bfs_topology(decode_cells(arch, spec), spec)?;
    Ok(PartPlan { cells })
}

/// Join three decoded parts into one plan; inserts width adapters at part
/// boundaries when widths disagree.
pub fn assemble(parts: Vec<PartPlan>, stem_width: usize) -> ArchitecturePlan {
    // all parts share the stem width by construction, so boundaries align
    // and the adapter list stays empty unless widths ever diverge
    ArchitecturePlan {
        stem_width,
        parts,
        adapters: vec![],
    }
}

// ----------------------------------------------------------------------
// Runnable decoded model
// ----------------------------------------------------------------------

struct DecodedCell {
    plan: CellPlan,
    op: OperatorInstance,
}

struct DecodedPart {
    stem: SlimmableKernel,
    cells: Vec<DecodedCell>,
    down: Vec<Downsample>,
    up: Vec<Upsample>,
    head: SlimmableKernel,
}

/// Fresh-parameter model built from an architecture plan ("train from
/// scratch": supernet weights are abandoned).
pub struct DecodedModel {
    pub plan: ArchitecturePlan,
    pub spec: PartSpec,
    pub in_channels: usize,
    parts: Vec<DecodedPart>,
    readout: SlimmableKernel,
}

impl DecodedModel {
    pub fn new(plan: &ArchitecturePlan, spec: &PartSpec, in_channels: usize, seed: u64) -> Result<Self> {
        if plan.stem_width != spec.base_width {
            return Err(DenasError::Decode(format!(
                "plan stem width {} vs spec base width {}",
                plan.stem_width, spec.base_width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = spec.base_width;
        let mut parts = vec![];
        for (pi, part_plan) in plan.parts.iter().enumerate() {
            let part_in = if pi == 0 { in_channels } else { w };
            let stem = SlimmableKernel::new(&format!("d/p{pi}/stem"), part_in, w, 3, 1, &mut rng);
            let mut cells = vec![];
            for plan in &part_plan.cells {
                let kind = OperatorKind::from_name(&plan.op).ok_or_else(|| {
                    DenasError::Decode(format!("unknown operator {}", plan.op))
                })?;
                let op = OperatorInstance::new(
                    kind,
                    spec.row_width(plan.row),
                    plan.layer % 2 == 1,
                    &format!("d/p{pi}/r{}/l{}", plan.row, plan.layer),
                    &mut rng,
                )?;
                cells.push(DecodedCell {
                    plan: plan.clone(),
                    op,
                });
            }
            let down = (1..spec.rows)
                .map(|r| Downsample::new(&format!("d/p{pi}/down{r}"), spec.row_width(r - 1), &mut rng))
                .collect();
            let up = (0..spec.rows.saturating_sub(1))
                .map(|r| {
                    Upsample::new(
                        &format!("d/p{pi}/up{r}"),
                        spec.row_width(r + 1),
                        spec.row_width(r),
                        spec.row_width(r),
                        &mut rng,
                    )
                })
                .collect();
            let head = SlimmableKernel::new(&format!("d/p{pi}/head"), w, w, 3, 1, &mut rng);
            parts.push(DecodedPart {
                stem,
                cells,
                down,
                up,
                head,
            });
        }
        let readout = SlimmableKernel::new("d/readout", w, in_channels, 3, 1, &mut rng);
        Ok(DecodedModel {
            plan: plan.clone(),
            spec: spec.clone(),
            in_channels,
            parts,
            readout,
        })
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut p = vec![];
        for part in &self.parts {
            p.extend(part.stem.parameters());
            for c in &part.cells {
                p.extend(c.op.parameters());
            }
            for d in &part.down {
                p.extend(d.parameters());
            }
            for u in &part.up {
                p.extend(u.parameters());
            }
            p.extend(part.head.parameters());
        }
        p.extend(self.readout.parameters());
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value().numel()).sum()
    }

    #[cfg(test)]
    fn forward_part(&self, g: &mut Graph, pi: usize, x: Var) -> Result<Var> {
        self.forward_part_collect(g, pi, x, &mut None)
    }

    /// `forward_part` that optionally records (part, row, layer, feature)
    /// for every retained cell.
    fn forward_part_collect(
        &self,
        g: &mut Graph,
        pi: usize,
        x: Var,
        collect: &mut Option<&mut Vec<(usize, usize, usize, Var)>>,
    ) -> Result<Var> {
        let spec = &self.spec;
        let part = &self.parts[pi];
        let w = spec.base_width;
        let stem_out = {
            let y = part.stem.apply_widths(g, x, part.stem.full_in, w)?;
            g.leaky_relu(y, LEAKY_SLOPE)?
        };
        // grid values; pruned cells pass their input through
        let mut grid: Vec<Vec<Option<Var>>> =
            vec![vec![None; spec.cells_per_row + 1]; spec.rows];
        grid[0][0] = Some(stem_out);
        for r in 1..spec.rows {
            let below = grid[r - 1][0].unwrap();
            grid[r][0] = Some(part.down[r - 1].apply(g, below)?);
        }
        for l in 1..=spec.cells_per_row {
            for r in 0..spec.rows {
                let cell = part
                    .cells
                    .iter()
                    .find(|c| c.plan.row == r && c.plan.layer == l);
                let out = match cell {
                    None => {
                        // pruned: carry the previous feature forward
                        grid[r][l - 1]
                    }
                    Some(cell) => {
                        let full = spec.row_width(r);
                        let w_in = menu_width(full, cell.plan.w_in);
                        let w_out = menu_width(full, cell.plan.w_out);
                        let mut path_feats = vec![];
                        for p in &cell.plan.paths {
                            let v = match p.as_str() {
                                "same" => grid[r][l - 1].ok_or_else(|| {
                                    DenasError::Decode("same-path source missing".into())
                                })?,
                                "up" => {
                                    let low = grid[r + 1][l - 1].ok_or_else(|| {
                                        DenasError::Decode("up-path source missing".into())
                                    })?;
                                    let low_full =
                                        g.adjust_width(low, spec.row_width(r + 1))?;
                                    let skip = grid[r][0].unwrap();
                                    part.up[r].apply(g, low_full, skip)?
                                }
                                "down" => {
                                    let hi = grid[r - 1][l - 1].ok_or_else(|| {
                                        DenasError::Decode("down-path source missing".into())
                                    })?;
                                    part.down[r - 1].apply(g, hi)?
                                }
                                other => {
                                    return Err(DenasError::Decode(format!(
                                        "unknown path {other}"
                                    )))
                                }
                            };
                            path_feats.push(g.adjust_width(v, w_in)?);
                        }
                        let mut dense_feats = vec![];
                        for &j in &cell.plan.dense {
                            let v = grid[r][j].ok_or_else(|| {
                                DenasError::Decode(format!("dense source ({r},{j}) missing"))
                            })?;
                            dense_feats.push(g.adjust_width(v, w_in)?);
                        }
                        let mean_of = |g: &mut Graph, feats: &[Var]| -> Result<Option<Var>> {
                            if feats.is_empty() {
                                return Ok(None);
                            }
                            let mut acc = feats[0];
                            for &f in &feats[1..] {
                                acc = g.add(acc, f)?;
                            }
                            Ok(Some(g.scale(acc, 1.0 / feats.len() as f64)?))
                        };
                        let mp = mean_of(g, &path_feats)?;
                        let md = mean_of(g, &dense_feats)?;
                        let cell_in = match (mp, md) {
                            (Some(a), Some(b)) => {
                                let s = g.add(a, b)?;
                                g.scale(s, 0.5)?
                            }
                            (Some(a), None) | (None, Some(a)) => a,
                            (None, None) => {
                                return Err(DenasError::Decode(format!(
                                    "cell ({r},{l}) has no inputs"
                                )))
                            }
                        };
                        let y = cell.op.apply(g, cell_in, w_in, w_out)?;
                        if let Some(sink) = collect.as_deref_mut() {
                            sink.push((pi, r, l, y));
                        }
                        Some(y)
                    }
                };
                grid[r][l] = out;
            }
        }
        let last = grid[0][spec.cells_per_row]
            .ok_or_else(|| DenasError::Decode("no output feature".into()))?;
        let full0 = g.adjust_width(last, w)?;
        part.head.apply_widths(g, full0, w, w)
    }

    /// Full forward: part boundary features and the denoised image
    /// (global input residual).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Vec<Var>, Var)> {
        self.forward_collect(g, x, &mut None)
    }

    /// `forward` that optionally records every retained cell's feature.
    pub fn forward_collect(
        &self,
        g: &mut Graph,
        x: Var,
        collect: &mut Option<&mut Vec<(usize, usize, usize, Var)>>,
    ) -> Result<(Vec<Var>, Var)> {
        let mut feats = vec![];
        let mut h = x;
        for pi in 0..self.parts.len() {
            h = self.forward_part_collect(g, pi, h, collect)?;
            feats.push(h);
        }
        let out = self
            .readout
            .apply_widths(g, h, self.spec.base_width, self.in_channels)?;
        let y = g.add(out, x)?;
        Ok((feats, y))
    }

    pub fn denoise(&self, x: &TensorData) -> Result<TensorData> {
        let mut g = Graph::new();
        let xv = g.input(x.clone())?;
        let (_, y) = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let snap = ModelSnapshot {
            plan: self.plan.clone(),
            spec: self.spec.clone(),
            in_channels: self.in_channels,
            params: self
                .parameters()
                .into_iter()
                .map(|p| (p.name().to_string(), p.value()))
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&snap)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let snap: ModelSnapshot = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let model = DecodedModel::new(&snap.plan, &snap.spec, snap.in_channels, 0)?;
        for p in model.parameters() {
            let v = snap.params.get(p.name()).ok_or_else(|| {
                DenasError::Config(format!("model file missing parameter {}", p.name()))
            })?;
            if v.shape != p.shape() {
                return Err(DenasError::shape(
                    "model_load",
                    format!("{}: {:?} vs {:?}", p.name(), v.shape, p.shape()),
                ));
            }
            p.set_value(v.clone());
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelSnapshot {
    plan: ArchitecturePlan,
    spec: PartSpec,
    in_channels: usize,
    params: std::collections::BTreeMap<String, TensorData>,
}
