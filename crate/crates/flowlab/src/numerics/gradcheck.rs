//! Finite-difference verification of tape gradients.
//!
//! The oracle is a central difference, `(f(x+h) - f(x-h)) / 2h`, compared
//! against the analytic gradient element by element. Errors are normalised by
//! `max(1, |analytic|, |numeric|)` so tiny gradients are judged on absolute
//! error and large ones on relative error.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
    /// (input index, element index) of the worst-matching gradient entry.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Checks the tape gradient of a scalar-valued function against central
/// finite differences.
///
/// `f` receives a fresh tape and one `Var` per input tensor; it must return a
/// scalar. `f` is evaluated twice up front and must produce bit-identical
/// values, otherwise the check is meaningless and an error is returned.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Domain {
            op: "gradient_check",
            detail: format!("step size must be positive and finite, got {h}"),
        });
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let v1 = eval(inputs)?;
    let v2 = eval(inputs)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Domain {
            op: "gradient_check",
            detail: format!("function is not deterministic: {v1} vs {v2}"),
        });
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarRoot {
            shape: tape.value(out).shape().to_vec(),
        });
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    // Numeric pass.
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        pass: true,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            let orig = t.data()[ei];
            let mut plus = t.data().to_vec();
            plus[ei] = orig + h;
            work[ti] = Tensor::new(t.shape().to_vec(), plus)?;
            let fp = eval(&work)?;
            let mut minus = t.data().to_vec();
            minus[ei] = orig - h;
            work[ti] = Tensor::new(t.shape().to_vec(), minus)?;
            let fm = eval(&work)?;
            work[ti] = t.clone();

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, ei));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.pass = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: f64 = 1e-6;
    const TOL: f64 = 1e-5;

    #[test]
    fn quadratic_matches() {
        let x = Tensor::new(vec![4], vec![0.5, -1.2, 2.0, 0.1]).unwrap();
        let r = gradient_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                tape.sum(sq, None)
            },
            &[x],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_error);
    }

    #[test]
    fn composite_matmul_silu_mean_matches() {
        let a = Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.1, 0.9, -0.2, 0.4]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![1.0, -0.5, 0.25, 0.75, -1.25, 0.6]).unwrap();
        let r = gradient_check(
            |tape, vars| {
                let p = tape.matmul(vars[0], vars[1])?;
                let s = tape.silu(p)?;
                tape.mean(s, None)
            },
            &[a, b],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_error);
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu(x) + x has gradient 2 for x > 0; a deliberately broken
        // function built only from forward values cannot be distinguished,
        // so instead check that an inflated tolerance fails: compare tanh
        // against a coarse step too large for the curvature.
        let x = Tensor::new(vec![1], vec![0.7]).unwrap();
        let r = gradient_check(
            |tape, vars| {
                let t = tape.tanh(vars[0])?;
                tape.sum(t, None)
            },
            &[x],
            0.5, // absurd step: central difference now differs measurably
            1e-12,
        )
        .unwrap();
        assert!(!r.pass);
        assert!(r.max_rel_error > 1e-12);
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(gradient_check(|tape, vars| tape.sum(vars[0], None), &[x], 0.0, TOL).is_err());
    }

    fn seeded(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Tensor::randn(shape.to_vec(), &mut rng).unwrap()
    }

    #[test]
    fn conv_stride1_gradients_match() {
        let input = seeded(&[2, 2, 4, 4], 1);
        let weight = seeded(&[3, 2, 3, 3], 2);
        let bias = seeded(&[3], 3);
        let r = gradient_check(
            |tape, vars| {
                let c = tape.conv2d_3x3(vars[0], vars[1], vars[2], 1)?;
                let s = tape.tanh(c)?;
                tape.mean(s, None)
            },
            &[input, weight, bias],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.pass, "max rel err {} at {:?}", r.max_rel_error, r.worst);
    }

    #[test]
    fn conv_stride2_gradients_match() {
        let input = seeded(&[1, 2, 5, 5], 4);
        let weight = seeded(&[2, 2, 3, 3], 5);
        let bias = seeded(&[2], 6);
        let r = gradient_check(
            |tape, vars| {
                let c = tape.conv2d_3x3(vars[0], vars[1], vars[2], 2)?;
                tape.sum(c, None)
            },
            &[input, weight, bias],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.pass, "max rel err {} at {:?}", r.max_rel_error, r.worst);
    }

    #[test]
    fn upsample_and_chan_bias_gradients_match() {
        let input = seeded(&[2, 3, 2, 2], 7);
        let bias = seeded(&[2, 3], 8);
        let r = gradient_check(
            |tape, vars| {
                let u = tape.upsample_nearest2(vars[0])?;
                let b = tape.add_chan_bias(u, vars[1])?;
                let s = tape.silu(b)?;
                tape.mean(s, None)
            },
            &[input, bias],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.pass, "max rel err {} at {:?}", r.max_rel_error, r.worst);
    }

    #[test]
    fn every_elementwise_op_gradient_matches() {
        // log and sqrt need positive inputs: route through exp first.
        let x = Tensor::new(vec![4], vec![0.35, -0.8, 1.4, -0.05]).unwrap();
        let y = Tensor::new(vec![4], vec![0.9, 0.3, -0.6, 1.2]).unwrap();
        let r = gradient_check(
            |tape, vars| {
                let (x, y) = (vars[0], vars[1]);
                let pos = tape.exp(x)?;
                let l = tape.log(pos)?;
                let sq = tape.sqrt(pos)?;
                let a = tape.add(l, sq)?;
                let s = tape.sub(a, y)?;
                let m = tape.mul(s, y)?;
                let shift = tape.constant(Tensor::scalar(3.0).unwrap());
                let t = tape.tanh(y)?;
                let denom = tape.add(t, shift)?;
                let d = tape.div(m, denom)?;
                let n = tape.neg(d)?;
                let rl = tape.relu(n)?;
                let si = tape.silu(rl)?;
                tape.sum(si, None)
            },
            &[x, y],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.pass, "max rel err {} at {:?}", r.max_rel_error, r.worst);
    }

    #[test]
    fn reductions_and_reshape_gradients_match() {
        let x = seeded(&[3, 4], 9);
        let r = gradient_check(
            |tape, vars| {
                let m0 = tape.mean(vars[0], Some(0))?;
                let s = tape.reshape(m0, vec![2, 2])?;
                let s1 = tape.sum(s, Some(1))?;
                let sq = tape.mul(s1, s1)?;
                tape.sum(sq, None)
            },
            &[x],
            H,
            TOL,
        )
        .unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_error);
    }
}
