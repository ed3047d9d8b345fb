//! Derivative-free simplex minimisation for the hyperparameter posterior.
//!
//! A standard Nelder-Mead iteration (reflection, expansion, contraction,
//! shrink) over internal hyperparameter coordinates.  Objective evaluations
//! that error are treated as infinitely bad, which steers the simplex away
//! from regions where a grid point's inner mode search fails instead of
//! aborting the whole optimisation.

use crate::error::{Error, Result};

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Relative objective-spread tolerance across the simplex.  Each objective
/// evaluation is itself an inner mode search accepted at a small but nonzero
/// gradient, which leaves roughly `1e-6 * |f|` of noise in the values;
/// demanding a tighter spread than that stalls the simplex forever.
const VALUE_TOL: f64 = 1e-7;
/// Absolute coordinate-spread tolerance across the simplex (internal
/// hyperparameter coordinates).  The minimiser only seeds a grid whose
/// steps are orders of magnitude wider than this.
const POINT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

fn spread(simplex: &[(Vec<f64>, f64)]) -> (f64, f64) {
    let best = &simplex[0];
    let worst = &simplex[simplex.len() - 1];
    let f_spread = worst.1 - best.1;
    let x_spread = simplex
        .iter()
        .map(|(x, _)| {
            x.iter()
                .zip(&best.0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    (f_spread, x_spread)
}

/// Minimises `f` from `x0` with an initial simplex of edge `initial_step`.
///
/// Errors from `f` count as `+inf`.  Fails with [`Error::NoConvergence`] if
/// the spread tolerances are not met within `max_iter` iterations, and with
/// [`Error::Numerical`] if no finite objective value was ever seen.
pub fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x0: &[f64],
    initial_step: f64,
    max_iter: usize,
) -> Result<NelderMeadResult> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::invalid("cannot minimise over zero coordinates"));
    }
    if !(initial_step > 0.0 && initial_step.is_finite()) {
        return Err(Error::invalid("initial simplex step must be positive"));
    }
    let mut evaluations = 0usize;
    let mut eval = |x: &[f64]| -> f64 {
        evaluations += 1;
        match f(x) {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(x0);
    simplex.push((x0.to_vec(), v0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += initial_step;
        let v = eval(&x);
        simplex.push((x, v));
    }

    for it in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (f_spread, x_spread) = spread(&simplex);
        if f_spread <= VALUE_TOL * (1.0 + simplex[0].1.abs()) && x_spread <= POINT_TOL {
            if !simplex[0].1.is_finite() {
                return Err(Error::numerical(
                    "simplex search never found a finite objective value",
                ));
            }
            return Ok(NelderMeadResult {
                x: simplex[0].0.clone(),
                value: simplex[0].1,
                iterations: it,
                evaluations,
            });
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let second_worst = simplex[n - 1].1;
        let best = simplex[0].1;

        let blend = |a: f64| -> Vec<f64> {
            // centroid + a * (centroid - worst)
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + a * (c - w))
                .collect()
        };

        let reflected = blend(REFLECT);
        let f_reflected = eval(&reflected);
        if f_reflected < best {
            let expanded = blend(EXPAND);
            let f_expanded = eval(&expanded);
            simplex[n] = if f_expanded < f_reflected {
                (expanded, f_expanded)
            } else {
                (reflected, f_reflected)
            };
            continue;
        }
        if f_reflected < second_worst {
            simplex[n] = (reflected, f_reflected);
            continue;
        }
        // Contract toward the better of the worst vertex and its reflection.
        let contracted = if f_reflected < worst.1 {
            blend(CONTRACT)
        } else {
            blend(-CONTRACT)
        };
        let f_contracted = eval(&contracted);
        if f_contracted < worst.1.min(f_reflected) {
            simplex[n] = (contracted, f_contracted);
            continue;
        }
        // Shrink everything toward the best vertex.
        let best_x = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = vertex
                .0
                .iter()
                .zip(&best_x)
                .map(|(xi, bi)| bi + SHRINK * (xi - bi))
                .collect();
            let v = eval(&x);
            *vertex = (x, v);
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (f_spread, _) = spread(&simplex);
    Err(Error::NoConvergence {
        iterations: max_iter,
        criterion: f_spread,
        context: "Nelder-Mead simplex search".to_string(),
    })
}
