//! Alternating architecture/weight search, decoded-model training, and
//! evaluation. One search run optimizes each part in sequence (or in
//! parallel threads) against the frozen prior's boundary features.

use crate::data::{DatasetSplit, PatchPair};
use crate::decode::{assemble, decode_part, ArchitecturePlan, DecodedModel};
use crate::error::{DenasError, Result};
use crate::graph::Graph;
use crate::latency::LatencyTable;
use crate::loss::{comp_loss, l1_loss, prior_loss, search_loss, use_dp_at_epoch, LossWeights};
use crate::metrics::{psnr, ssim};
use crate::optim::{cosine_lr, Adam, AdamState};
use crate::prior::PriorModel;
use crate::supernet::{ArchSnapshot, ArchWeights, BackwardMode, ForwardOptions, Part, PartSpec};
use crate::tensor::TensorData;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Search hyper-parameters. Defaults are the desk-scale settings; the
/// full-scale run uses `epochs = 150`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_w: f64,
    pub lr_arch: f64,
    pub lambda_tem_start: f64,
    pub lambda_tem_end: f64,
    pub backward: BackwardMode,
    /// false: alternate arch/w every batch; true: once per epoch
    pub per_epoch_alternation: bool,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 30,
            batch: 16,
            lr_w: 2e-4,
            lr_arch: 1e-4,
            lambda_tem_start: 5.0,
            lambda_tem_end: 0.1,
            backward: BackwardMode::SingleOp,
            per_epoch_alternation: false,
            plateau_window: 10,
            plateau_tol: 1e-4,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(DenasError::arg("search_config", "epochs/batch must be > 0"));
        }
        if !(self.lr_w > 0.0 && self.lr_arch > 0.0) {
            return Err(DenasError::arg("search_config", "learning rates must be > 0"));
        }
        if !(self.lambda_tem_start > 0.0 && self.lambda_tem_end > 0.0) {
            return Err(DenasError::arg("search_config", "temperatures must be > 0"));
        }
        self.weights.validate()
    }

    /// Linear temperature anneal over the epoch budget.
    pub fn lambda_tem_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lambda_tem_start;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.lambda_tem_start + t * (self.lambda_tem_end - self.lambda_tem_start)
    }
}

/// Per-epoch search metrics; one metrics.csv row.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_dp: f64,
    pub l_comp: f64,
    pub l_search: f64,
    pub lr_w: f64,
    pub lr_arch: f64,
}

/// Input/target tensors of one part's search, both data splits.
pub struct PartData {
    pub inputs_w: Vec<TensorData>,
    pub targets_w: Vec<TensorData>,
    pub inputs_arch: Vec<TensorData>,
    pub targets_arch: Vec<TensorData>,
}

/// Stack same-CHW tensors along the batch axis.
pub fn stack_batch(items: &[&TensorData]) -> Result<TensorData> {
    if items.is_empty() {
        return Err(DenasError::arg("stack_batch", "empty batch"));
    }
    let [_, c, h, w] = items[0].shape;
    let n: usize = items.iter().map(|t| t.shape[0]).sum();
    let mut out = TensorData::zeros([n, c, h, w]);
    let mut off = 0;
    for t in items {
        if t.shape[1..] != items[0].shape[1..] {
            return Err(DenasError::shape(
                "stack_batch",
                format!("{:?} vs {:?}", t.shape, items[0].shape),
            ));
        }
        out.data[off..off + t.data.len()].copy_from_slice(&t.data);
        off += t.data.len();
    }
    Ok(out)
}

/// Frozen-prior inputs and feature targets for every part: part 0 sees the
/// noisy patch and regresses the first boundary feature; part i sees the
/// prior's feature i-1 and regresses feature i.
pub fn prepare_part_data(prior: &PriorModel, split: &DatasetSplit) -> Result<Vec<PartData>> {
    let mut out: Vec<PartData> = (0..3)
        .map(|_| PartData {
            inputs_w: vec![],
            targets_w: vec![],
            inputs_arch: vec![],
            targets_arch: vec![],
        })
        .collect();
    let mut fill = |pairs: &[PatchPair], w_split: bool| -> Result<()> {
        for pair in pairs {
            let (feats, _) = prior.eval_features(&pair.noisy)?;
            let inputs = [pair.noisy.clone(), feats[0].clone(), feats[1].clone()];
            for (i, input) in inputs.into_iter().enumerate() {
                if w_split {
                    out[i].inputs_w.push(input);
                    out[i].targets_w.push(feats[i].clone());
                } else {
                    out[i].inputs_arch.push(input);
                    out[i].targets_arch.push(feats[i].clone());
                }
            }
        }
        Ok(())
    };
    fill(&split.pairs_w, true)?;
    fill(&split.pairs_arch, false)?;
    Ok(out)
}

/// Output of one part's search.
pub struct SearchOutcome {
    pub snapshot: ArchSnapshot,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    next_epoch: usize,
    arch: ArchSnapshot,
    weights: BTreeMap<String, TensorData>,
    opt_w: AdamState,
    opt_arch: AdamState,
    metrics: Vec<EpochMetrics>,
}

/// One part's searchable state: supernet weights, architecture weights,
/// and their two optimizers.
pub struct PartSearch {
    pub part: Part,
    pub arch: ArchWeights,
    pub table: LatencyTable,
    pub cfg: SearchConfig,
    pub part_idx: usize,
    opt_w: Adam,
    opt_arch: Adam,
}

fn epoch_rng(seed: u64, part_idx: usize, epoch: usize) -> ChaCha8Rng {
    // independent stream per (seed, part, epoch) so resumed runs replay
    let k = 0x9e3779b97f4a7c15u64
        .wrapping_mul((part_idx as u64 + 1) << 32 | (epoch as u64 + 1));
    ChaCha8Rng::seed_from_u64(seed ^ k)
}

impl PartSearch {
    pub fn new(
        spec: &PartSpec,
        table: LatencyTable,
        cfg: &SearchConfig,
        part_idx: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7919 * part_idx as u64));
        let part = Part::new(spec, &mut rng)?;
        let arch = ArchWeights::new(spec);
        let opt_w = Adam::new(part.parameters(), cfg.lr_w);
        let opt_arch = Adam::new(arch.parameters(), cfg.lr_arch);
        Ok(PartSearch {
            part,
            arch,
            table,
            cfg: cfg.clone(),
            part_idx,
            opt_w,
            opt_arch,
        })
    }

    /// Architecture step: minimize L_search on an arch-split batch.
    /// Returns (l_dp, l_comp, l_search).
    pub fn arch_step(
        &mut self,
        input: &TensorData,
        target: &TensorData,
        lambda_tem: f64,
        rng: &mut impl Rng,
    ) -> Result<(f64, f64, f64)> {
        self.opt_arch.zero_grad();
        let mut g = Graph::new();
        let x = g.input(input.clone())?;
        let t = g.input(target.clone())?;
        let opts = ForwardOptions::sampled(self.cfg.backward, true, lambda_tem);
        let (y, _) = self.part.forward(&mut g, x, &self.arch, &opts, rng)?;
        let l_dp = prior_loss(&mut g, y, t)?;
        let l_comp = comp_loss(
            &mut g,
            &self.arch,
            &self.table,
            &self.part.spec,
            &self.cfg.weights,
        )?;
        let l_s = search_loss(&mut g, l_dp, l_comp, self.cfg.weights.lambda)?;
        let vals = (
            g.value(l_dp).scalar_value(),
            g.value(l_comp).scalar_value(),
            g.value(l_s).scalar_value(),
        );
        g.backward(l_s)?;
        self.opt_arch.step()?;
        Ok(vals)
    }

    /// Weight step: minimize L_dp on a w-split batch. Returns l_dp.
    pub fn w_step(
        &mut self,
        input: &TensorData,
        target: &TensorData,
        lambda_tem: f64,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        self.opt_w.zero_grad();
        let mut g = Graph::new();
        let x = g.input(input.clone())?;
        let t = g.input(target.clone())?;
        let opts = ForwardOptions::sampled(self.cfg.backward, false, lambda_tem);
        let (y, _) = self.part.forward(&mut g, x, &self.arch, &opts, rng)?;
        let l_dp = prior_loss(&mut g, y, t)?;
        let v = g.value(l_dp).scalar_value();
        g.backward(l_dp)?;
        self.opt_w.step()?;
        Ok(v)
    }

    /// One alternating epoch over both splits.
    pub fn run_epoch(&mut self, data: &PartData, epoch: usize) -> Result<EpochMetrics> {
        let cfg = self.cfg.clone();
        let mut rng = epoch_rng(cfg.seed, self.part_idx, epoch);
        let lambda_tem = cfg.lambda_tem_at(epoch);
        let batches = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.chunks(cfg.batch).map(|c| c.to_vec()).collect()
        };
        let b_arch = batches(data.inputs_arch.len(), &mut rng);
        let b_w = batches(data.inputs_w.len(), &mut rng);
        if b_arch.is_empty() || b_w.is_empty() {
            return Err(DenasError::arg("run_epoch", "empty data split"));
        }
        let gather = |set: &[TensorData], ids: &[usize]| -> Result<TensorData> {
            stack_batch(&ids.iter().map(|&i| &set[i]).collect::<Vec<_>>())
        };
        let mut sums = (0.0, 0.0, 0.0);
        let mut n_arch = 0usize;
        let (part_idx, seed) = (self.part_idx, cfg.seed);
        let ctx = move |e: DenasError| {
            DenasError::Diverged(format!("part {part_idx} epoch {epoch} seed {seed}: {e}"))
        };
        let steps = if cfg.per_epoch_alternation {
            1
        } else {
            b_arch.len().max(b_w.len())
        };
        for k in 0..steps {
            let arch_ids: Vec<&Vec<usize>> = if cfg.per_epoch_alternation {
                b_arch.iter().collect()
            } else {
                vec![&b_arch[k % b_arch.len()]]
            };
            let w_ids: Vec<&Vec<usize>> = if cfg.per_epoch_alternation {
                b_w.iter().collect()
            } else {
                vec![&b_w[k % b_w.len()]]
            };
            for ids in arch_ids {
                let x = gather(&data.inputs_arch, ids)?;
                let t = gather(&data.targets_arch, ids)?;
                let (dp, comp, s) = self
                    .arch_step(&x, &t, lambda_tem, &mut rng)
                    .map_err(&ctx)?;
                if !s.is_finite() {
                    return Err(ctx(DenasError::Diverged("non-finite search loss".into())));
                }
                sums = (sums.0 + dp, sums.1 + comp, sums.2 + s);
                n_arch += 1;
            }
            for ids in w_ids {
                let x = gather(&data.inputs_w, ids)?;
                let t = gather(&data.targets_w, ids)?;
                let dp = self.w_step(&x, &t, lambda_tem, &mut rng).map_err(&ctx)?;
                if !dp.is_finite() {
                    return Err(ctx(DenasError::Diverged("non-finite prior loss".into())));
                }
            }
        }
        let n = n_arch as f64;
        Ok(EpochMetrics {
            epoch,
            l_dp: sums.0 / n,
            l_comp: sums.1 / n,
            l_search: sums.2 / n,
            lr_w: cfg.lr_w,
            lr_arch: cfg.lr_arch,
        })
    }

    fn weight_map(&self) -> BTreeMap<String, TensorData> {
        self.part
            .parameters()
            .into_iter()
            .map(|p| (p.name().to_string(), p.value()))
            .collect()
    }

    fn restore_weights(&self, map: &BTreeMap<String, TensorData>) -> Result<()> {
        for p in self.part.parameters() {
            let v = map.get(p.name()).ok_or_else(|| {
                DenasError::Config(format!("checkpoint missing parameter {}", p.name()))
            })?;
            p.set_value(v.clone());
        }
        Ok(())
    }

    fn save_checkpoint(&self, path: &Path, next_epoch: usize, metrics: &[EpochMetrics]) -> Result<()> {
        let ck = Checkpoint {
            next_epoch,
            arch: self.arch.snapshot(),
            weights: self.weight_map(),
            opt_w: self.opt_w.state(),
            opt_arch: self.opt_arch.state(),
            metrics: metrics.to_vec(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    fn load_checkpoint(&mut self, path: &Path) -> Result<(usize, Vec<EpochMetrics>)> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        self.arch.restore(&ck.arch)?;
        self.restore_weights(&ck.weights)?;
        self.opt_w.restore(ck.opt_w)?;
        self.opt_arch.restore(ck.opt_arch)?;
        Ok((ck.next_epoch, ck.metrics))
    }
}

fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut s = String::from("epoch,l_dp,l_comp,l_search,lr_w,lr_arch\n");
    for m in metrics {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch, m.l_dp, m.l_comp, m.l_search, m.lr_w, m.lr_arch
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Search one part to convergence or the epoch cap. With a run directory,
/// writes archweights.json / metrics.csv / config.json every epoch and
/// resumes bit-identically from checkpoint.json when present.
pub fn search_part(
    spec: &PartSpec,
    table: &LatencyTable,
    cfg: &SearchConfig,
    part_idx: usize,
    data: &PartData,
    run_dir: Option<&Path>,
) -> Result<SearchOutcome> {
    search_part_capped(spec, table, cfg, part_idx, data, run_dir, None)
}

/// `search_part` that stops after `cap` epochs without touching the
/// schedule, mimicking an interrupted run that resumes later.
pub fn search_part_capped(
    spec: &PartSpec,
    table: &LatencyTable,
    cfg: &SearchConfig,
    part_idx: usize,
    data: &PartData,
    run_dir: Option<&Path>,
    cap: Option<usize>,
) -> Result<SearchOutcome> {
    let mut ps = PartSearch::new(spec, table.clone(), cfg, part_idx)?;
    let mut metrics: Vec<EpochMetrics> = vec![];
    let mut start = 0;
    let dir = match run_dir {
        Some(base) => {
            let d = base.join(format!("part{part_idx}"));
            std::fs::create_dir_all(&d)?;
            let ck = d.join("checkpoint.json");
            if ck.exists() {
                let (e, m) = ps.load_checkpoint(&ck)?;
                start = e;
                metrics = m;
            } else {
                #[derive(Serialize)]
                struct Echo<'a> {
                    spec: &'a PartSpec,
                    search: &'a SearchConfig,
                }
                std::fs::write(
                    d.join("config.json"),
                    serde_json::to_string_pretty(&Echo { spec, search: cfg })?,
                )?;
            }
            Some(d)
        }
        None => None,
    };
    let stop = cap.map_or(cfg.epochs, |c| c.min(cfg.epochs));
    for epoch in start..stop {
        let m = ps.run_epoch(data, epoch)?;
        metrics.push(m);
        if let Some(d) = &dir {
            write_metrics_csv(&d.join("metrics.csv"), &metrics)?;
            std::fs::write(
                d.join("archweights.json"),
                serde_json::to_string_pretty(&ps.arch.snapshot())?,
            )?;
            ps.save_checkpoint(&d.join("checkpoint.json"), epoch + 1, &metrics)?;
        }
        // plateau: best L_dp improvement over the window falls under tol
        if metrics.len() > cfg.plateau_window {
            let now = metrics.last().unwrap().l_dp;
            let before = metrics[metrics.len() - 1 - cfg.plateau_window].l_dp;
            if before - now < cfg.plateau_tol {
                break;
            }
        }
    }
    Ok(SearchOutcome {
        snapshot: ps.arch.snapshot(),
        metrics,
    })
}

/// Part spec actually used for part `i`: part 0 keeps the image channel
/// count, later parts consume the previous part's `base_width` features.
pub fn part_spec_for(template: &PartSpec, part_idx: usize) -> PartSpec {
    let mut s = template.clone();
    if part_idx > 0 {
        s.in_channels = s.base_width;
    }
    s.seed = template.seed.wrapping_add(part_idx as u64);
    s
}

/// Search all parts, sequentially or one thread per part; the two modes
/// produce bit-identical results. Completed parts keep their run
/// directories even if a later part fails.
pub fn search_all(
    prior: &PriorModel,
    template: &PartSpec,
    split: &DatasetSplit,
    table: &LatencyTable,
    cfg: &SearchConfig,
    run_dir: Option<&Path>,
    parallel: bool,
) -> Result<Vec<SearchOutcome>> {
    if prior.width != template.base_width {
        return Err(DenasError::Config(format!(
            "prior width {} must match part base width {}",
            prior.width, template.base_width
        )));
    }
    if prior.in_channels != template.in_channels {
        return Err(DenasError::Config(format!(
            "prior channels {} must match part input channels {}",
            prior.in_channels, template.in_channels
        )));
    }
    let data = prepare_part_data(prior, split)?;
    if !parallel {
        let mut out = vec![];
        for (i, d) in data.iter().enumerate() {
            out.push(search_part(
                &part_spec_for(template, i),
                table,
                cfg,
                i,
                d,
                run_dir,
            )?);
        }
        return Ok(out);
    }
    std::thread::scope(|scope| {
        let mut handles = vec![];
        for (i, d) in data.iter().enumerate() {
            let spec = part_spec_for(template, i);
            handles.push(scope.spawn(move || search_part(&spec, table, cfg, i, d, run_dir)));
        }
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| DenasError::Config("search thread panicked".into()))?
            })
            .collect()
    })
}

/// Decode every part of a finished search into one architecture plan.
pub fn decode_outcomes(
    outcomes: &[SearchOutcome],
    template: &PartSpec,
) -> Result<ArchitecturePlan> {
    let mut parts = vec![];
    for (i, o) in outcomes.iter().enumerate() {
        let spec = part_spec_for(template, i);
        let arch = ArchWeights::new(&spec);
        arch.restore(&o.snapshot)?;
        parts.push(decode_part(&arch, &spec)?);
    }
    Ok(assemble(parts, template.base_width))
}

/// Decoded-model training hyper-parameters (desk-scale defaults).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 8,
            lr_max: 2e-4,
            lr_min: 1e-6,
            warmup: 10,
            seed: 0,
        }
    }
}

/// Train a decoded model with cosine-annealed Adam: L1 plus the prior
/// feature term during warmup, pure L1 after. Returns per-epoch mean loss.
pub fn train_decoded(
    model: &DecodedModel,
    prior: &PriorModel,
    pairs: &[PatchPair],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(DenasError::arg("train_decoded", "empty pair set"));
    }
    // frozen prior feature targets, one triple per pair
    let mut feats = vec![];
    for p in pairs {
        feats.push(prior.eval_features(&p.noisy)?.0);
    }
    let mut opt = Adam::new(model.parameters(), cfg.lr_max);
    let mut history = vec![];
    for epoch in 0..cfg.epochs {
        opt.lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        let use_dp = use_dp_at_epoch(epoch, cfg.warmup);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xdec0 + epoch as u64));
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        let mut nb = 0usize;
        for chunk in idx.chunks(cfg.batch) {
            opt.zero_grad();
            let noisy =
                stack_batch(&chunk.iter().map(|&i| &pairs[i].noisy).collect::<Vec<_>>())?;
            let clean =
                stack_batch(&chunk.iter().map(|&i| &pairs[i].clean).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let x = g.input(noisy)?;
            let gt = g.input(clean)?;
            let (part_feats, y) = model.forward(&mut g, x)?;
            let mut loss = l1_loss(&mut g, y, gt)?;
            if use_dp {
                let k = part_feats.len().min(3);
                for (pi, &f) in part_feats.iter().take(k).enumerate() {
                    let target = stack_batch(
                        &chunk.iter().map(|&i| &feats[i][pi]).collect::<Vec<_>>(),
                    )?;
                    let tv = g.input(target)?;
                    let dp = prior_loss(&mut g, f, tv)?;
                    let dp = g.scale(dp, 1.0 / k as f64)?;
                    loss = g.add(loss, dp)?;
                }
            }
            let v = g.value(loss).scalar_value();
            if !v.is_finite() {
                return Err(DenasError::Diverged(format!(
                    "train epoch {epoch} seed {}: non-finite loss",
                    cfg.seed
                )));
            }
            total += v;
            nb += 1;
            g.backward(loss)?;
            opt.step()?;
        }
        history.push(total / nb as f64);
    }
    Ok(history)
}

/// PSNR/SSIM of a denoiser over a pair set, with the noisy-input PSNR as
/// the baseline.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr_noisy: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn evaluate(
    denoise: impl Fn(&TensorData) -> Result<TensorData>,
    pairs: &[PatchPair],
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(DenasError::arg("evaluate", "empty pair set"));
    }
    let (mut pn, mut pd, mut sd) = (0.0, 0.0, 0.0);
    for p in pairs {
        let y = denoise(&p.noisy)?;
        pn += psnr(&p.noisy, &p.clean, 1.0)?;
        pd += psnr(&y, &p.clean, 1.0)?;
        sd += ssim(&y, &p.clean, 1.0)?;
    }
    let n = pairs.len() as f64;
    Ok(EvalReport {
        psnr_noisy: pn / n,
        psnr: pd / n,
        ssim: sd / n,
    })
}

/// Random-architecture baseline: randomize the architecture weights and
/// decode, retrying if pruning leaves the output cell without inputs.
pub fn random_plan(
    template: &PartSpec,
    parts: usize,
    rng: &mut impl Rng,
) -> Result<ArchitecturePlan> {
    let mut plans = vec![];
    for i in 0..parts {
        let spec = part_spec_for(template, i);
        let plan = loop {
            let arch = ArchWeights::new(&spec);
            for p in arch.parameters() {
                let mut t = TensorData::zeros(p.shape());
                for v in &mut t.data {
                    *v = rng.random_range(-1.0..1.0);
                }
                p.set_value(t);
            }
            match decode_part(&arch, &spec) {
                Ok(p) => break p,
                Err(DenasError::Decode(_)) => continue,
                Err(e) => return Err(e),
            }
        };
        plans.push(plan);
    }
    Ok(assemble(plans, template.base_width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, NoiseCase};
    use tempfile::tempdir;

    fn tiny_spec() -> PartSpec {
        PartSpec {
            rows: 1,
            cells_per_row: 2,
            base_width: 8,
            in_channels: 1,
            seed: 0,
        }
    }

    fn tiny_setup(seed: u64) -> (PriorModel, DatasetSplit, LatencyTable, SearchConfig) {
        let spec = tiny_spec();
        let prior = PriorModel::new(1, 8, seed);
        let case = NoiseCase::Awgn {
            sigma: 25.0 / 255.0,
            seed: 0,
        };
        let split = make_dataset(&[], 8, 6, 0.5, &case, seed).unwrap();
        let table = LatencyTable::synthetic(&spec, |op, r, wi, wo| {
            1e-4 * (1.0 + op.len() as f64 + r as f64 + wi as f64 + wo as f64)
        })
        .unwrap();
        let cfg = SearchConfig {
            epochs: 2,
            batch: 3,
            seed,
            ..SearchConfig::default()
        };
        (prior, split, table, cfg)
    }

    fn checksum(params: &[crate::graph::Parameter]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in params {
            for v in &p.value().data {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    #[test]
    fn config_roundtrip_rejects_unknown_fields() {
        let cfg = SearchConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: SearchConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back.epochs, cfg.epochs);
        assert!(serde_json::from_str::<SearchConfig>(r#"{"bogus": 1}"#).is_err());
        // temperature anneal hits both endpoints
        assert_eq!(cfg.lambda_tem_at(0), cfg.lambda_tem_start);
        assert!((cfg.lambda_tem_at(cfg.epochs - 1) - cfg.lambda_tem_end).abs() < 1e-15);
    }

    #[test]
    fn stack_batch_concatenates_along_n() {
        let a = TensorData::filled([1, 2, 2, 2], 1.0);
        let b = TensorData::filled([1, 2, 2, 2], 2.0);
        let s = stack_batch(&[&a, &b]).unwrap();
        assert_eq!(s.shape, [2, 2, 2, 2]);
        assert_eq!(s.at(0, 0, 0, 0), 1.0);
        assert_eq!(s.at(1, 1, 1, 1), 2.0);
        let bad = TensorData::filled([1, 3, 2, 2], 0.0);
        assert!(stack_batch(&[&a, &bad]).is_err());
    }

    #[test]
    fn steps_update_only_their_own_family() {
        let (prior, split, table, cfg) = tiny_setup(11);
        let spec = tiny_spec();
        let data = &prepare_part_data(&prior, &split).unwrap()[0];
        let mut ps = PartSearch::new(&spec, table, &cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = &data.inputs_arch[0];
        let t = &data.targets_arch[0];

        let w_before = checksum(&ps.part.parameters());
        let arch_before = checksum(&ps.arch.parameters());
        ps.arch_step(x, t, 1.0, &mut rng).unwrap();
        assert_eq!(checksum(&ps.part.parameters()), w_before, "arch step moved w");
        assert_ne!(checksum(&ps.arch.parameters()), arch_before, "arch step was a no-op");

        let arch_after = checksum(&ps.arch.parameters());
        ps.w_step(x, t, 1.0, &mut rng).unwrap();
        assert_eq!(checksum(&ps.arch.parameters()), arch_after, "w step moved arch");
        assert_ne!(checksum(&ps.part.parameters()), w_before, "w step was a no-op");
    }

    #[test]
    fn lambda_zero_removes_table_influence() {
        let (prior, split, table_a, mut cfg) = tiny_setup(5);
        cfg.weights.lambda = 0.0;
        let spec = tiny_spec();
        let data = &prepare_part_data(&prior, &split).unwrap()[0];
        let table_b =
            LatencyTable::synthetic(&spec, |_, r, wi, wo| 7e-3 * (1 + r + wi + wo) as f64)
                .unwrap();
        let a = search_part(&spec, &table_a, &cfg, 0, data, None).unwrap();
        let b = search_part(&spec, &table_b, &cfg, 0, data, None).unwrap();
        assert_eq!(a.snapshot, b.snapshot);
        // with lambda > 0 the tables do change the trajectory
        cfg.weights.lambda = 5.0;
        let c = search_part(&spec, &table_a, &cfg, 0, data, None).unwrap();
        let d = search_part(&spec, &table_b, &cfg, 0, data, None).unwrap();
        assert_ne!(c.snapshot, d.snapshot);
    }

    #[test]
    fn search_part_is_deterministic_and_writes_run_dir() {
        let (prior, split, table, cfg) = tiny_setup(3);
        let spec = tiny_spec();
        let data = &prepare_part_data(&prior, &split).unwrap()[0];
        let dir = tempdir().unwrap();
        let a = search_part(&spec, &table, &cfg, 0, data, Some(dir.path())).unwrap();
        let b = search_part(&spec, &table, &cfg, 0, data, None).unwrap();
        assert_eq!(a.snapshot, b.snapshot);
        assert_eq!(a.metrics, b.metrics);
        let part_dir = dir.path().join("part0");
        for f in ["archweights.json", "metrics.csv", "config.json", "checkpoint.json"] {
            assert!(part_dir.join(f).exists(), "missing {f}");
        }
        let csv = std::fs::read_to_string(part_dir.join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,l_dp,l_comp,l_search,lr_w,lr_arch");
        assert_eq!(lines.count(), a.metrics.len());
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_run() {
        let (prior, split, table, mut cfg) = tiny_setup(9);
        cfg.epochs = 4;
        let spec = tiny_spec();
        let data = &prepare_part_data(&prior, &split).unwrap()[0];
        let full = search_part(&spec, &table, &cfg, 0, data, None).unwrap();

        let dir = tempdir().unwrap();
        search_part_capped(&spec, &table, &cfg, 0, data, Some(dir.path()), Some(2)).unwrap();
        let resumed = search_part(&spec, &table, &cfg, 0, data, Some(dir.path())).unwrap();
        assert_eq!(resumed.snapshot, full.snapshot);
        assert_eq!(resumed.metrics, full.metrics);
    }

    #[test]
    fn parallel_matches_sequential() {
        let (prior, split, table, cfg) = tiny_setup(17);
        let spec = tiny_spec();
        let seq = search_all(&prior, &spec, &split, &table, &cfg, None, false).unwrap();
        let par = search_all(&prior, &spec, &split, &table, &cfg, None, true).unwrap();
        assert_eq!(seq.len(), 3);
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.snapshot, b.snapshot);
            assert_eq!(a.metrics, b.metrics);
        }
    }

    #[test]
    fn search_reduces_prior_loss() {
        let (prior, split, table, mut cfg) = tiny_setup(23);
        cfg.epochs = 8;
        cfg.lr_w = 5e-3;
        cfg.plateau_window = 100;
        let spec = tiny_spec();
        let data = &prepare_part_data(&prior, &split).unwrap()[0];
        let out = search_part(&spec, &table, &cfg, 0, data, None).unwrap();
        let first = out.metrics[0].l_dp;
        let best = out.metrics.iter().map(|m| m.l_dp).fold(f64::INFINITY, f64::min);
        assert!(best < first, "first {first} best {best}");
    }

    #[test]
    fn random_plan_decodes_and_runs() {
        let spec = tiny_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plan = random_plan(&spec, 3, &mut rng).unwrap();
        assert_eq!(plan.parts.len(), 3);
        let model = DecodedModel::new(&plan, &spec, 1, 0).unwrap();
        let x = TensorData::filled([1, 1, 8, 8], 0.4);
        let y = model.denoise(&x).unwrap();
        assert_eq!(y.shape, x.shape);
    }

    #[test]
    fn train_decoded_reduces_loss_and_respects_warmup() {
        let spec = tiny_spec();
        let prior = PriorModel::new(1, 8, 31);
        let case = NoiseCase::Awgn {
            sigma: 25.0 / 255.0,
            seed: 0,
        };
        let split = make_dataset(&[], 8, 4, 1.0, &case, 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = random_plan(&spec, 3, &mut rng).unwrap();
        let model = DecodedModel::new(&plan, &spec, 1, 7).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch: 2,
            lr_max: 2e-3,
            warmup: 2,
            seed: 31,
            ..TrainConfig::default()
        };
        let history = train_decoded(&model, &prior, &split.pairs_w, &cfg).unwrap();
        assert_eq!(history.len(), 6);
        assert!(history.last().unwrap() < &history[0]);
    }

    #[test]
    fn evaluate_identity_matches_noisy_psnr() {
        let case = NoiseCase::Awgn {
            sigma: 25.0 / 255.0,
            seed: 0,
        };
        let split = make_dataset(&[], 16, 4, 1.0, &case, 41).unwrap();
        let rep = evaluate(|x| Ok(x.clone()), &split.pairs_w).unwrap();
        assert_eq!(rep.psnr, rep.psnr_noisy);
        assert!(rep.ssim > 0.0 && rep.ssim <= 1.0);
    }
}
