//! Generalized distance transform under a quadratic spring (max-convolution).

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::map::Map2;
use crate::partmodel::Pos;

thread_local! {
    static DT_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`dt_2d`] calls made on the current thread since the last reset.
pub fn dt_call_count() -> usize {
    DT_CALLS.with(|c| c.get())
}

pub fn reset_dt_call_count() {
    DT_CALLS.with(|c| c.set(0));
}

#[inline]
fn spring_value(f: f64, beta: f64, d: i64) -> f64 {
    f - beta * (d * d) as f64
}

/// Scratch buffers for repeated 1-D transforms.
#[derive(Default)]
pub(crate) struct DtScratch {
    v: Vec<usize>,
    z: Vec<f64>,
}

/// `g[x] = max_x' f[x'] - beta (x - x')^2`, `arg[x]` the maximizing `x'`
/// (smallest on ties). Linear time via the lower envelope of parabolas.
pub(crate) fn gdt_1d_into(
    f: &[f64],
    beta: f64,
    g: &mut [f64],
    arg: &mut [u32],
    scratch: &mut DtScratch,
) {
    let n = f.len();
    debug_assert!(g.len() == n && arg.len() == n);
    if n == 0 {
        return;
    }
    if beta == 0.0 {
        let mut best = 0;
        for q in 1..n {
            if f[q] > f[best] {
                best = q;
            }
        }
        g.fill(f[best]);
        arg.fill(best as u32);
        return;
    }
    if beta.is_infinite() {
        g.copy_from_slice(f);
        for (x, a) in arg.iter_mut().enumerate() {
            *a = x as u32;
        }
        return;
    }

    let v = &mut scratch.v;
    let z = &mut scratch.z;
    v.clear();
    z.clear();
    v.push(0);
    z.push(f64::NEG_INFINITY);
    // envelope of upward parabolas beta (x - q)^2 - f[q]
    let intersect = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        (f[p] - f[q]) / (2.0 * beta * (qf - pf)) + (qf + pf) / 2.0
    };
    for q in 1..n {
        let mut s = intersect(q, v[v.len() - 1]);
        while s <= z[z.len() - 1] {
            v.pop();
            z.pop();
            s = intersect(q, v[v.len() - 1]);
        }
        v.push(q);
        z.push(s);
    }

    let mut k = 0;
    for x in 0..n {
        let xf = x as f64;
        while k + 1 < v.len() && z[k + 1] < xf {
            k += 1;
        }
        // Breakpoints carry rounding error; settle against the neighbouring
        // envelope entries so values and tie-breaks match exhaustive search.
        let lo = k.saturating_sub(1);
        let hi = (k + 1).min(v.len() - 1);
        let mut best_q = v[lo];
        let mut best = spring_value(f[best_q], beta, x as i64 - best_q as i64);
        for &q in &v[lo + 1..=hi] {
            let val = spring_value(f[q], beta, x as i64 - q as i64);
            if val > best || (val == best && q < best_q) {
                best = val;
                best_q = q;
            }
        }
        g[x] = best;
        arg[x] = best_q as u32;
    }
}

/// One-dimensional transform of `f` with spring `beta >= 0`.
pub fn gdt_1d(f: &[f64], beta: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if !(beta >= 0.0) {
        return Err(Error::Domain(format!(
            "spring coefficient must be non-negative, got {beta}"
        )));
    }
    if let Some(v) = f.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite input {v}")));
    }
    let mut g = vec![0.0; f.len()];
    let mut arg = vec![0u32; f.len()];
    gdt_1d_into(f, beta, &mut g, &mut arg, &mut DtScratch::default());
    Ok((g, arg.into_iter().map(|a| a as usize).collect()))
}

/// Message map of one part: transformed values plus the maximizing part location.
#[derive(Clone, Debug)]
pub struct MessageMap {
    pub values: Map2<f64>,
    pub argmax: Map2<Pos>,
}

/// Separable 2-D transform:
/// `out(y, x) = max_{y', x'} r(y', x') - beta_x (x - x')^2 - beta_y (y - y')^2`,
/// computed along rows (x) first, then along columns (y). Ties resolve to the
/// first maximizer in raster order.
pub fn dt_2d(response: &Map2<f64>, beta_x: f64, beta_y: f64) -> Result<MessageMap> {
    for beta in [beta_x, beta_y] {
        if !(beta >= 0.0) {
            return Err(Error::Domain(format!(
                "spring coefficient must be non-negative, got {beta}"
            )));
        }
    }
    DT_CALLS.with(|c| c.set(c.get() + 1));
    let (rows, cols) = (response.rows(), response.cols());
    let mut scratch = DtScratch::default();

    let mut pass1 = Map2::filled(rows, cols, 0.0);
    let mut arg_x = Map2::filled(rows, cols, 0u32);
    for r in 0..rows {
        gdt_1d_into(
            response.row(r),
            beta_x,
            pass1.row_mut(r),
            arg_x.row_mut(r),
            &mut scratch,
        );
    }

    let mut values = Map2::filled(rows, cols, 0.0);
    let mut argmax = Map2::filled(rows, cols, Pos::new(0, 0));
    let mut column = vec![0.0; rows];
    let mut g = vec![0.0; rows];
    let mut arg_y = vec![0u32; rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = pass1.get(r, c);
        }
        gdt_1d_into(&column, beta_y, &mut g, &mut arg_y, &mut scratch);
        for r in 0..rows {
            let y = arg_y[r] as usize;
            values.set(r, c, g[r]);
            argmax.set(r, c, Pos::new(y as i64, arg_x.get(y, c) as i64));
        }
    }
    Ok(MessageMap { values, argmax })
}
