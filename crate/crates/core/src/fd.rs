//! Central finite-difference gradient oracle.

use crate::error::{DenasError, Result};
use crate::graph::{Graph, Parameter, Var};

const ABS_FLOOR: f64 = 1e-8;

/// Compare recorded gradients of `params` against central finite
/// differences of the scalar function described by `build`.
///
/// `build` must re-record the same computation on every call (it is
/// invoked once per perturbed parameter element). Returns the worst
/// relative error, with an absolute floor of 1e-8 in the denominator.
/// Detects non-determinism by evaluating the function twice at the base
/// point.
pub fn finite_difference_check<F>(mut build: F, params: &[Parameter], h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    finite_difference_check_sampled(&mut build, params, h, usize::MAX)
}

/// Like [`finite_difference_check`] but probing at most `max_elems`
/// elements per parameter (evenly strided), for large composites.
pub fn finite_difference_check_sampled<F>(
    build: &mut F,
    params: &[Parameter],
    h: f64,
    max_elems: usize,
) -> Result<f64>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let eval = |build: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let v = build(&mut g)?;
        if !g.value(v).is_scalar() {
            return Err(DenasError::arg("finite_difference_check", "non-scalar f"));
        }
        Ok(g.value(v).scalar_value())
    };

    let base_a = eval(build)?;
    let base_b = eval(build)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(DenasError::NonDeterministic(format!(
            "f evaluated twice at the same params: {base_a} vs {base_b}"
        )));
    }

    for p in params {
        p.zero_grad();
    }
    {
        let mut g = Graph::new();
        let v = build(&mut g)?;
        g.backward(v)?;
    }

    let mut worst = 0.0f64;
    for p in params {
        let analytic = p.grad();
        let n = analytic.numel();
        let stride = if n <= max_elems {
            1
        } else {
            n.div_ceil(max_elems)
        };
        for i in (0..n).step_by(stride) {
            let orig = p.with_value(|v| v.data[i]);
            p.update(|j, v| if j == i { orig + h } else { v });
            let f_plus = eval(build)?;
            p.update(|j, v| if j == i { orig - h } else { v });
            let f_minus = eval(build)?;
            p.update(|j, v| if j == i { orig } else { v });
            let fd = (f_plus - f_minus) / (2.0 * h);
            let an = analytic.data[i];
            let denom = an.abs().max(fd.abs()).max(ABS_FLOOR);
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let p = Parameter::new("p", TensorData::random([1, 4, 2, 2], 1.0, &mut r));
        for h in [1e-6, 1e-4, 1e-3] {
            let err = finite_difference_check(
                |g| {
                    let v = g.param(&p)?;
                    g.sum(v)
                },
                &[p.clone()],
                h,
            )
            .unwrap();
            assert!(err <= 1e-9, "h={h} err={err}");
        }
    }

    #[test]
    fn cubic_matches_analytic_derivative() {
        // f = sum(p^3) at p = 2: analytic derivative 12, FD picks up O(h^2).
        let p = Parameter::new("p", TensorData::filled([1, 1, 1, 1], 2.0));
        let err = finite_difference_check(
            |g| {
                let v = g.param(&p)?;
                let sq = g.mul(v, v)?;
                let cube = g.mul(sq, v)?;
                g.sum(cube)
            },
            &[p.clone()],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-7, "err={err}");
        assert!((p.grad().data[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn detects_non_determinism() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let p = Parameter::new("p", TensorData::scalar(1.0));
        let err = finite_difference_check(
            |g| {
                counter.set(counter.get() + 1.0);
                let v = g.input(TensorData::scalar(counter.get()))?;
                let pv = g.param(&p)?;
                let m = g.mul(v, pv)?;
                g.sum(m)
            },
            &[p.clone()],
            1e-5,
        );
        assert!(matches!(err, Err(DenasError::NonDeterministic(_))));
    }

    #[test]
    fn composite_conv_norm_attention_gradient() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let c = 4;
        let k = Parameter::new("k", TensorData::random([c, c, 3, 3], 0.4, &mut r));
        let b = Parameter::new("b", TensorData::random([1, c, 1, 1], 0.2, &mut r));
        let wq = Parameter::new("wq", TensorData::random([1, c, c, 1], 0.4, &mut r));
        let wk = Parameter::new("wk", TensorData::random([1, c, c, 1], 0.4, &mut r));
        let wv = Parameter::new("wv", TensorData::random([1, c, c, 1], 0.4, &mut r));
        let wo = Parameter::new("wo", TensorData::random([1, c, c, 1], 0.4, &mut r));
        let x = TensorData::random([1, c, 4, 4], 1.0, &mut r);
        let params = [
            k.clone(),
            b.clone(),
            wq.clone(),
            wk.clone(),
            wv.clone(),
            wo.clone(),
        ];
        let err = finite_difference_check(
            |g| {
                let xi = g.input(x.clone())?;
                let kv = g.param(&k)?;
                let bv = g.param(&b)?;
                let y = g.conv2d(xi, kv, Some(bv), 1, 1, 1)?;
                let n = g.instance_norm(y, 1e-5)?;
                let wqv = g.param(&wq)?;
                let wkv = g.param(&wk)?;
                let wvv = g.param(&wv)?;
                let wov = g.param(&wo)?;
                let a = g.window_attention(n, 2, 1, wqv, wkv, wvv, wov)?;
                g.l2_sq(a)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "composite FD err {err}");
    }
}
