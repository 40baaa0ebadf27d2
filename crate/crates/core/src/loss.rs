//! Search and training losses: denoising-prior feature matching,
//! lookup-table complexity cost, and their combinations.

use crate::error::{DenasError, Result};
use crate::graph::{Graph, Var};
use crate::latency::LatencyTable;
use crate::supernet::{ArchWeights, PartSpec};
use crate::tensor::TensorData;
use crate::zoo::{OPERATOR_MENU, WIDTH_MENU_LEN};
use serde::{Deserialize, Serialize};

/// Complexity-regularization mixing weights.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub lambda_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.001,
            lambda_alpha: 0.27,
            lambda_beta: 0.27,
            lambda_gamma: 0.46,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let s = self.lambda_alpha + self.lambda_beta + self.lambda_gamma;
        if (s - 1.0).abs() > 1e-12 {
            return Err(DenasError::arg(
                "loss_weights",
                format!("component weights sum to {s}, expected 1"),
            ));
        }
        if self.lambda < 0.0 {
            return Err(DenasError::arg("loss_weights", "lambda < 0"));
        }
        Ok(())
    }
}

/// Expected cost of one normalized categorical: <softmax(logits), t>.
fn expected_cost(g: &mut Graph, logits: Var, times: &[f64]) -> Result<Var> {
    let norm = g.softmax_c(logits)?;
    let t = g.input(TensorData::new([1, times.len(), 1, 1], times.to_vec())?)?;
    g.dot(norm, t)
}

/// Lookup-table complexity loss: per-cell expected operator, resolution
/// and width costs under the normalized architecture weights, mixed by
/// the per-family lambdas. Differentiable w.r.t. alpha, beta, gamma.
pub fn comp_loss(
    g: &mut Graph,
    arch: &ArchWeights,
    table: &LatencyTable,
    spec: &PartSpec,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let mut l_alpha: Option<Var> = None;
    let mut l_beta: Option<Var> = None;
    let mut l_gamma: Option<Var> = None;
    let add_to = |g: &mut Graph, acc: &mut Option<Var>, v: Var| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    for (r, row) in arch.cells.iter().enumerate() {
        // alpha: operator times marginalized over widths
        let op_times: Vec<f64> = OPERATOR_MENU
            .iter()
            .map(|k| table.op_mean(k.name(), r))
            .collect::<Result<_>>()?;
        // gamma: out-width times marginalized over operators and in-widths
        let width_times: Vec<f64> = (0..WIDTH_MENU_LEN)
            .map(|wout| table.width_mean(r, wout))
            .collect::<Result<_>>()?;
        // beta: mean row cost of each candidate's source resolution;
        // menu order (up, same, down) maps to source rows (r+1, r, r-1)
        let beta_sources: Vec<Option<usize>> = vec![
            (r + 1 < spec.rows).then_some(r + 1),
            Some(r),
            r.checked_sub(1),
        ];
        let present: Vec<usize> = (0..3).filter(|&i| beta_sources[i].is_some()).collect();
        let start = present[0];
        let beta_times: Vec<f64> = present
            .iter()
            .map(|&i| table.row_mean(beta_sources[i].unwrap()))
            .collect::<Result<_>>()?;

        for cell in row {
            let a = g.param(&cell.alpha)?;
            let va = expected_cost(g, a, &op_times)?;
            add_to(g, &mut l_alpha, va)?;

            let gm = g.param(&cell.gamma)?;
            let vg = expected_cost(g, gm, &width_times)?;
            add_to(g, &mut l_gamma, vg)?;

            let b = g.param(&cell.beta)?;
            let sub = g.slice_c(b, start, present.len())?;
            let vb = expected_cost(g, sub, &beta_times)?;
            add_to(g, &mut l_beta, vb)?;
        }
    }
    let la = g.scale(l_alpha.unwrap(), weights.lambda_alpha)?;
    let lb = g.scale(l_beta.unwrap(), weights.lambda_beta)?;
    let lg = g.scale(l_gamma.unwrap(), weights.lambda_gamma)?;
    let s = g.add(la, lb)?;
    g.add(s, lg)
}

/// Denoising-prior loss: mean squared feature distance.
pub fn prior_loss(g: &mut Graph, s_out: Var, omega_out: Var) -> Result<Var> {
    if s_out.shape != omega_out.shape {
        return Err(DenasError::shape(
            "prior_loss",
            format!("{:?} vs {:?}", s_out.shape, omega_out.shape),
        ));
    }
    g.mse(s_out, omega_out)
}

/// L_search = L_dp + lambda * L_comp.
pub fn search_loss(g: &mut Graph, l_dp: Var, l_comp: Var, lambda: f64) -> Result<Var> {
    let scaled = g.scale(l_comp, lambda)?;
    g.add(l_dp, scaled)
}

/// Mean absolute error.
pub fn l1_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    if pred.shape != gt.shape {
        return Err(DenasError::shape(
            "l1_loss",
            format!("{:?} vs {:?}", pred.shape, gt.shape),
        ));
    }
    let d = g.sub(pred, gt)?;
    let total = g.l1(d)?;
    let n: usize = pred.shape.iter().product();
    g.scale(total, 1.0 / n as f64)
}

/// Training loss: prior term plus L1 during warmup, pure L1 after.
pub fn train_loss(
    g: &mut Graph,
    pred: Var,
    gt: Var,
    s_out: Var,
    omega_out: Var,
    use_dp: bool,
) -> Result<Var> {
    let l1 = l1_loss(g, pred, gt)?;
    if use_dp {
        let dp = prior_loss(g, s_out, omega_out)?;
        g.add(l1, dp)
    } else {
        Ok(l1)
    }
}

/// Warmup rule: the prior term is active strictly before `warmup` epochs.
pub fn use_dp_at_epoch(epoch: usize, warmup: usize) -> bool {
    epoch < warmup
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Parameter;
    use crate::tensor::softmax_slice;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn spec() -> PartSpec {
        PartSpec {
            rows: 2,
            cells_per_row: 2,
            base_width: 8,
            in_channels: 8,
            seed: 0,
        }
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            lambda_alpha: 0.5,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn expected_cost_convex_combination() {
        // two ops, equal mass, t = (10ms, 20ms) -> 15ms
        let p = Parameter::new("a", TensorData::zeros([1, 2, 1, 1]));
        let mut g = Graph::new();
        let a = g.param(&p).unwrap();
        let v = expected_cost(&mut g, a, &[0.010, 0.020]).unwrap();
        assert!((g.value(v).scalar_value() - 0.015).abs() < 1e-15);

        // one-hot on the cheapest op -> its time
        let p = Parameter::new("a", TensorData::new([1, 2, 1, 1], vec![80.0, 0.0]).unwrap());
        let mut g = Graph::new();
        let a = g.param(&p).unwrap();
        let v = expected_cost(&mut g, a, &[0.010, 0.020]).unwrap();
        assert!((g.value(v).scalar_value() - 0.010).abs() < 1e-12);
    }

    #[test]
    fn expected_cost_gradient_sign_oracle() {
        // d<sm(a), t>/da_i = sm_i (t_i - <sm, t>): sign matches (t_i - mean)
        let mut r = rng(1);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
            let times: Vec<f64> = (0..5).map(|_| r.random_range(0.5..2.0)).collect();
            let p = Parameter::new("a", TensorData::new([1, 5, 1, 1], logits.clone()).unwrap());
            let mut g = Graph::new();
            let a = g.param(&p).unwrap();
            let v = expected_cost(&mut g, a, &times).unwrap();
            g.backward(v).unwrap();
            let sm = softmax_slice(&logits);
            let mean: f64 = sm.iter().zip(&times).map(|(s, t)| s * t).sum();
            for i in 0..5 {
                let expect = sm[i] * (times[i] - mean);
                assert!((p.grad().data[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn comp_loss_shift_invariant_and_bounded() {
        let spec = spec();
        let table = LatencyTable::synthetic(&spec, |op, row, win, wout| {
            1e-6 * (1.0 + row as f64) * (1.0 + win as f64 + wout as f64)
                + if op == "skip" { 1e-7 } else { 2e-6 }
        })
        .unwrap();
        let arch = ArchWeights::new(&spec);
        let mut r = rng(2);
        for row in &arch.cells {
            for c in row {
                for p in [&c.alpha, &c.beta, &c.gamma] {
                    p.update(|_, _| r.random_range(-1.0..1.0));
                }
            }
        }
        let w = LossWeights::default();
        let eval = |arch: &ArchWeights| {
            let mut g = Graph::new();
            let v = comp_loss(&mut g, arch, &table, &spec, &w).unwrap();
            g.value(v).scalar_value()
        };
        let base = eval(&arch);
        // add a constant to all alpha logits of every cell
        for row in &arch.cells {
            for c in row {
                c.alpha.update(|_, v| v + 7.3);
            }
        }
        assert!((eval(&arch) - base).abs() < 1e-10);
        // per-cell expected costs are convex combinations, so the total is
        // bounded by the extreme per-family times
        assert!(base > 0.0);
    }

    #[test]
    fn comp_loss_differentiable_in_all_families() {
        let spec = spec();
        let table = LatencyTable::synthetic(&spec, |_, row, win, wout| {
            1e-6 * (1 + row) as f64 + 1e-7 * (win + wout) as f64 + 1e-8
        })
        .unwrap();
        let arch = ArchWeights::new(&spec);
        let mut g = Graph::new();
        let v = comp_loss(&mut g, &arch, &table, &spec, &LossWeights::default()).unwrap();
        g.backward(v).unwrap();
        let grads_nonzero = |fam: &str| {
            arch.parameters()
                .iter()
                .filter(|p| p.name().contains(fam))
                .any(|p| p.grad().data.iter().any(|&x| x != 0.0))
        };
        assert!(grads_nonzero("alpha"));
        assert!(grads_nonzero("gamma"));
        // beta at uniform logits with differing source-row costs
        assert!(grads_nonzero("beta"));
        // delta never enters the complexity loss
        assert!(!grads_nonzero("delta"));
    }

    #[test]
    fn prior_loss_cases() {
        let mut g = Graph::new();
        let a = g.input(TensorData::filled([1, 2, 3, 3], 0.4)).unwrap();
        let b = g.input(TensorData::filled([1, 2, 3, 3], 0.4)).unwrap();
        let z = prior_loss(&mut g, a, b).unwrap();
        assert_eq!(g.value(z).scalar_value(), 0.0);

        // constant offset c -> c^2
        let c = g.input(TensorData::filled([1, 2, 3, 3], 0.9)).unwrap();
        let v = prior_loss(&mut g, a, c).unwrap();
        assert!((g.value(v).scalar_value() - 0.25).abs() < 1e-12);

        // random pair vs elementwise oracle
        let mut r = rng(3);
        let x = TensorData::random([1, 3, 4, 4], 1.0, &mut r);
        let y = TensorData::random([1, 3, 4, 4], 1.0, &mut r);
        let oracle: f64 = x
            .data
            .iter()
            .zip(&y.data)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / x.numel() as f64;
        let xv = g.input(x).unwrap();
        let yv = g.input(y).unwrap();
        let l = prior_loss(&mut g, xv, yv).unwrap();
        assert!((g.value(l).scalar_value() - oracle).abs() < 1e-12);

        let small = g.input(TensorData::ones([1, 1, 2, 2])).unwrap();
        assert!(prior_loss(&mut g, a, small).is_err());
    }

    #[test]
    fn search_loss_arithmetic_and_linearity() {
        let p = Parameter::new("a", TensorData::scalar(2.0));
        // lambda = 0: L_search == L_dp exactly
        let mut g = Graph::new();
        let a = g.param(&p).unwrap();
        let dp = g.sum(a).unwrap();
        let comp = g.input(TensorData::scalar(100.0)).unwrap();
        let l = search_loss(&mut g, dp, comp, 0.0).unwrap();
        assert_eq!(g.value(l).scalar_value(), 2.0);

        // lambda=0.001, L_dp=1, L_comp=100 -> 1.1
        let mut g = Graph::new();
        let dp = g.input(TensorData::scalar(1.0)).unwrap();
        let comp = g.input(TensorData::scalar(100.0)).unwrap();
        let l = search_loss(&mut g, dp, comp, 0.001).unwrap();
        assert!((g.value(l).scalar_value() - 1.1).abs() < 1e-15);

        // gradient linearity: d(L_dp + k*L_comp)/dp = dL_dp/dp + k*dL_comp/dp
        let grad_of = |k: f64, include_comp: bool| {
            p.zero_grad();
            let mut g = Graph::new();
            let a = g.param(&p).unwrap();
            let dp = g.sum(a).unwrap();
            let sq = g.mul(a, a).unwrap();
            let comp = g.sum(sq).unwrap();
            let l = if include_comp {
                search_loss(&mut g, dp, comp, k).unwrap()
            } else {
                dp
            };
            g.backward(l).unwrap();
            p.grad().scalar_value()
        };
        let g_dp = grad_of(0.0, false);
        let g_full = grad_of(0.001, true);
        // dL_comp/dp = 2p = 4
        assert!((g_full - (g_dp + 0.001 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn train_loss_cases_and_warmup_rule() {
        let mut g = Graph::new();
        let a = g.input(TensorData::filled([1, 1, 2, 2], 0.25)).unwrap();
        let b = g.input(TensorData::filled([1, 1, 2, 2], 0.75)).unwrap();
        let s = g.input(TensorData::filled([1, 4, 2, 2], 0.1)).unwrap();
        // pred == gt, s == omega -> 0
        let z = train_loss(&mut g, a, a, s, s, true).unwrap();
        assert_eq!(g.value(z).scalar_value(), 0.0);
        // use_dp = false, |pred - gt| = 0.5 -> 0.5
        let l = train_loss(&mut g, a, b, s, s, false).unwrap();
        assert!((g.value(l).scalar_value() - 0.5).abs() < 1e-15);

        assert!(use_dp_at_epoch(0, 60));
        assert!(use_dp_at_epoch(59, 60));
        assert!(!use_dp_at_epoch(60, 60));
    }
}
