//! Central finite-difference gradient verification.
//!
//! Runs at f64 only: f32 round-off would drown the signal at the tolerances
//! we verify against.

use super::{Tape, Tensor, Var};

/// Outcome of a [`grad_check`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked coordinates of |tape - fd| / max(|g|_inf, |fd|_inf, 1e-12).
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub passed: bool,
    pub tol: f64,
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `point`.
///
/// `f` rebuilds the computation on a fresh tape from the input var and must
/// return a scalar var. `max_coords = 0` checks every coordinate; otherwise
/// a deterministic stride-spread subset of that size is checked. Errors are
/// measured relative to the largest gradient magnitude observed, so a
/// function with constant output reports exactly zero error.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, tol: f64, h: f64, max_coords: usize) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let n = point.numel();

    // Tape gradient.
    let mut tape = Tape::new();
    let x = tape.input(point, true);
    let root = f(&mut tape, x);
    assert_eq!(tape.value(root).len(), 1, "grad_check function must be scalar-valued");
    tape.backward(root).expect("grad_check backward");
    let tape_grad: Vec<f64> = match tape.grad(x) {
        Some(g) => g.to_vec(),
        None => vec![0.0; n],
    };

    let coords: Vec<usize> = if max_coords == 0 || max_coords >= n {
        (0..n).collect()
    } else {
        // evenly spread deterministic subset
        (0..max_coords).map(|i| i * n / max_coords).collect()
    };

    let eval = |data: &[f64]| -> f64 {
        let mut t = Tape::new();
        let probe = Tensor::new(data.to_vec(), &point.shape);
        let v = t.input(&probe, false);
        let r = f(&mut t, v);
        t.value(r)[0]
    };

    let mut fd = vec![0.0; coords.len()];
    let mut buf = point.data.clone();
    for (j, &c) in coords.iter().enumerate() {
        let orig = buf[c];
        buf[c] = orig + h;
        let fp = eval(&buf);
        buf[c] = orig - h;
        let fm = eval(&buf);
        buf[c] = orig;
        fd[j] = (fp - fm) / (2.0 * h);
    }

    let scale = tape_grad
        .iter()
        .map(|g| g.abs())
        .chain(fd.iter().map(|g| g.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let max_rel_err = coords
        .iter()
        .zip(&fd)
        .map(|(&c, &fdv)| (tape_grad[c] - fdv).abs() / scale)
        .fold(0.0f64, f64::max);

    GradCheckReport { max_rel_err, n_checked: coords.len(), passed: max_rel_err <= tol, tol }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // d/dw sum(w*w) = 2w
        let w = Tensor::new(vec![1.0, 2.0, 3.0], &[3]);
        let rep = grad_check(
            |t, x| {
                let sq = t.mul(x, x);
                t.sum_all(sq)
            },
            &w,
            1e-6,
            1e-3,
            0,
        );
        assert!(rep.passed, "rel err {}", rep.max_rel_err);

        // exact analytic check of the tape side
        let mut tape = Tape::new();
        let x = tape.input(&w, true);
        let sq = tape.mul(x, x);
        let root = tape.sum_all(sq);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let p = Tensor::new(vec![0.0f64], &[1]);
        let mut tape = Tape::new();
        let x = tape.input(&p, true);
        let s = tape.sigmoid(x);
        let root = tape.sum_all(s);
        tape.backward(root).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_function_reports_zero_error() {
        let p = Tensor::new(vec![1.0, -2.0], &[2]);
        let rep = grad_check(
            |t, _x| {
                let c = t.constant(&[3.0], &[1]);
                t.sum_all(c)
            },
            &p,
            1e-6,
            1e-3,
            0,
        );
        assert_eq!(rep.max_rel_err, 0.0);
        assert!(rep.passed);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let p = Tensor::new(vec![1.0, 2.0], &[2]);
        let mut tape = Tape::new();
        let x = tape.input(&p, true);
        let y = tape.mul(x, x);
        assert!(tape.backward(y).is_err());
    }
}
