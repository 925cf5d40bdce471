//! Finite-difference check of reverse-mode gradients.

use super::parallel;
use super::{Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(1e-8, |a| + |n|)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Objective value at the unperturbed inputs.
    pub value: f64,
    /// `(input index, coordinate, analytic, numeric)` of every checked coordinate.
    pub coords: Vec<(usize, usize, f64, f64)>,
}

impl std::fmt::Debug for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCheckReport")
            .field("max_rel_error", &self.max_rel_error)
            .field("worst", &self.worst)
            .field("analytic", &self.analytic)
            .field("numeric", &self.numeric)
            .field("coords_checked", &self.coords_checked)
            .field("value", &self.value)
            .finish_non_exhaustive()
    }
}

impl GradCheckReport {
    /// Coordinates whose relative error exceeds `tol`.
    pub fn count_above(&self, tol: f64) -> usize {
        self.coords.iter().filter(|c| rel_error(c.2, c.3) > tol).count()
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / f64::max(1e-8, a.abs() + n.abs())
}

/// Compare the tape gradient of the scalar `f(inputs)` against central
/// differences `(f(x + h e) - f(x - h e)) / 2h` for every coordinate of every
/// input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k)))
        .collect();
    check_coords(&f, inputs, h, &coords)
}

/// Like [`grad_check`] but only on up to `per_input` randomly chosen
/// coordinates of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    per_input: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if t.numel() <= per_input {
            coords.extend((0..t.numel()).map(|k| (i, k)));
        } else {
            coords.extend((0..per_input).map(|_| (i, rng.below(t.numel()))));
        }
    }
    check_coords(&f, inputs, h, &coords)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = tape.item(out)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check objective".into(),
        });
    }
    Ok(v)
}

fn check_coords<F>(f: &F, inputs: &[Tensor<f64>], h: f64, coords: &[(usize, usize)]) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::config(format!("finite-difference step must be > 0, got {h}")));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = tape.item(out)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check objective".into(),
        });
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let numeric = parallel::map_indexed(coords.len(), |c| {
        let (i, k) = coords[c];
        let mut shifted = inputs.to_vec();
        let x0 = inputs[i].data()[k];
        shifted[i].data_mut()[k] = x0 + h;
        let plus = evaluate(f, &shifted)?;
        shifted[i].data_mut()[k] = x0 - h;
        let minus = evaluate(f, &shifted)?;
        Ok::<f64, Error>((plus - minus) / (2.0 * h))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: coords.len(),
        value,
        coords: Vec::with_capacity(coords.len()),
    };
    for (&(i, k), n) in coords.iter().zip(numeric) {
        let n = n?;
        let a = grads.get(vars[i]).map_or(0.0, |g| g.data()[k]);
        let err = rel_error(a, n);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (i, k);
            report.analytic = a;
            report.numeric = n;
        }
        report.coords.push((i, k, a, n));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let s = t.square(v[0])?;
                t.sum(s)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        assert_eq!(r.coords_checked, 2);
    }

    #[test]
    fn non_finite_objective_errors() {
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let big = t.scale(v[0], 1e300)?;
                let s = t.square(big)?;
                t.sum(s)
            },
            &[x],
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
