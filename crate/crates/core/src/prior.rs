//! The denoising prior: a small fixed 3-part residual CNN trained on the
//! synthetic data, then frozen. Its part-boundary features are the
//! regression targets of the prior regularization.

use crate::data::PatchPair;
use crate::error::{DenasError, Result};
use crate::graph::{Graph, Parameter, Var};
use crate::optim::Adam;
use crate::tensor::TensorData;
use crate::zoo::{SlimmableKernel, LEAKY_SLOPE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One prior part: three 3x3 convolutions with a residual shortcut.
pub struct PriorPart {
    conv1: SlimmableKernel,
    conv2: SlimmableKernel,
    conv3: SlimmableKernel,
}

impl PriorPart {
    fn new(name: &str, in_ch: usize, width: usize, rng: &mut impl rand::Rng) -> Self {
        PriorPart {
            conv1: SlimmableKernel::new(&format!("{name}/c1"), in_ch, width, 3, 1, rng),
            conv2: SlimmableKernel::new(&format!("{name}/c2"), width, width, 3, 1, rng),
            conv3: SlimmableKernel::new(&format!("{name}/c3"), width, width, 3, 1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = self.conv1.full_out;
        let h = self.conv1.apply_widths(g, x, self.conv1.full_in, w)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.conv2.apply_widths(g, h, w, w)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.conv3.apply_widths(g, h, w, w)?;
        let r = g.adjust_width(x, w)?;
        g.add(h, r)
    }

    fn parameters(&self) -> Vec<Parameter> {
        let mut p = self.conv1.parameters();
        p.extend(self.conv2.parameters());
        p.extend(self.conv3.parameters());
        p
    }
}

/// Frozen three-part prior plus an image readout head.
pub struct PriorModel {
    pub parts: [PriorPart; 3],
    pub head: SlimmableKernel,
    pub in_channels: usize,
    pub width: usize,
}

impl PriorModel {
    pub fn new(in_channels: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = [
            PriorPart::new("prior/p0", in_channels, width, &mut rng),
            PriorPart::new("prior/p1", width, width, &mut rng),
            PriorPart::new("prior/p2", width, width, &mut rng),
        ];
        let head = SlimmableKernel::new("prior/head", width, in_channels, 3, 1, &mut rng);
        PriorModel {
            parts,
            head,
            in_channels,
            width,
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut p = vec![];
        for part in &self.parts {
            p.extend(part.parameters());
        }
        p.extend(self.head.parameters());
        p
    }

    /// Differentiable forward for training the prior itself; returns the
    /// three boundary features and the denoised image (input residual).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<([Var; 3], Var)> {
        let f0 = self.parts[0].forward(g, x)?;
        let f1 = self.parts[1].forward(g, f0)?;
        let f2 = self.parts[2].forward(g, f1)?;
        let out = self
            .head
            .apply_widths(g, f2, self.width, self.in_channels)?;
        let y = g.add(out, x)?;
        Ok(([f0, f1, f2], y))
    }

    /// Frozen evaluation: boundary features and denoised image as plain
    /// values, computed on a private graph so no gradients can reach the
    /// prior's parameters from any search graph.
    pub fn eval_features(&self, x: &TensorData) -> Result<([TensorData; 3], TensorData)> {
        let mut g = Graph::new();
        let xv = g.input(x.clone())?;
        let ([f0, f1, f2], y) = self.forward(&mut g, xv)?;
        Ok((
            [
                g.value(f0).clone(),
                g.value(f1).clone(),
                g.value(f2).clone(),
            ],
            g.value(y).clone(),
        ))
    }

    pub fn denoise(&self, x: &TensorData) -> Result<TensorData> {
        Ok(self.eval_features(x)?.1)
    }

    /// Stable digest of all parameter bits, for frozen-ness assertions.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.parameters() {
            for v in &p.value().data {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = BTreeMap::new();
        for p in self.parameters() {
            let v = p.value();
            params.insert(
                p.name().to_string(),
                ParamBlob {
                    shape: v.shape,
                    data: v.data.clone(),
                },
            );
        }
        let snap = PriorSnapshot {
            in_channels: self.in_channels,
            width: self.width,
            params,
        };
        std::fs::write(path, serde_json::to_string(&snap)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let snap: PriorSnapshot = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let model = PriorModel::new(snap.in_channels, snap.width, 0);
        for p in model.parameters() {
            let blob = snap.params.get(p.name()).ok_or_else(|| {
                DenasError::Config(format!("prior file missing parameter {}", p.name()))
            })?;
            if blob.shape != p.shape() {
                return Err(DenasError::shape(
                    "prior_load",
                    format!("{}: {:?} vs {:?}", p.name(), blob.shape, p.shape()),
                ));
            }
            p.set_value(TensorData::new(blob.shape, blob.data.clone())?);
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamBlob {
    shape: [usize; 4],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PriorSnapshot {
    in_channels: usize,
    width: usize,
    params: BTreeMap<String, ParamBlob>,
}

/// Train the prior on noisy->clean pairs with Adam/MSE until the loss
/// plateaus (< `plateau_tol` improvement over 5 epochs) or `epochs` caps.
/// Returns the per-epoch mean loss history.
pub fn train_prior(
    model: &PriorModel,
    pairs: &[PatchPair],
    epochs: usize,
    lr: f64,
    plateau_tol: f64,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(DenasError::arg("train_prior", "empty pair set"));
    }
    let mut opt = Adam::new(model.parameters(), lr);
    let mut history: Vec<f64> = vec![];
    for _epoch in 0..epochs {
        let mut total = 0.0;
        for pair in pairs {
            opt.zero_grad();
            let mut g = Graph::new();
            let x = g.input(pair.noisy.clone())?;
            let gt = g.input(pair.clean.clone())?;
            let (_, y) = model.forward(&mut g, x)?;
            let loss = g.mse(y, gt)?;
            total += g.value(loss).scalar_value();
            g.backward(loss)?;
            opt.step()?;
        }
        let mean = total / pairs.len() as f64;
        history.push(mean);
        if history.len() >= 6 {
            let prev = history[history.len() - 6];
            if prev - mean < plateau_tol {
                break;
            }
        }
    }
    Ok(history)
}
