use crate::error::{MfgError, Result};

/// Sufficient-decrease constant.
pub const ARMIJO_C: f64 = 1e-4;
pub const MAX_BACKTRACKS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchResult {
    pub alpha: f64,
    pub value: f64,
    pub backtracks: usize,
    /// The supplied direction was not a descent direction and −g was used.
    pub reset_direction: bool,
}

/// Backtracking Armijo search along `dir` from `x` with f(x) = `f0` and
/// ∇f(x) = `g`. Non-finite trial values count as rejections. If `dir` is not
/// a descent direction it is replaced by −g in place.
pub fn armijo_search<F>(mut f: F, x: &[f64], f0: f64, g: &[f64], dir: &mut [f64]) -> Result<LineSearchResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut slope = dot(g, dir);
    let mut reset_direction = false;
    if !(slope < 0.0) {
        for (d, gi) in dir.iter_mut().zip(g) {
            *d = -gi;
        }
        slope = -dot(g, g);
        reset_direction = true;
        if slope == 0.0 {
            return Ok(LineSearchResult {
                alpha: 0.0,
                value: f0,
                backtracks: 0,
                reset_direction,
            });
        }
    }
    let mut alpha = 1.0;
    let mut trial = vec![0.0; x.len()];
    for backtracks in 0..=MAX_BACKTRACKS {
        for ((t, xi), di) in trial.iter_mut().zip(x).zip(dir.iter()) {
            *t = xi + alpha * di;
        }
        let value = f(&trial);
        if value.is_finite() && value <= f0 + ARMIJO_C * alpha * slope {
            return Ok(LineSearchResult {
                alpha,
                value,
                backtracks,
                reset_direction,
            });
        }
        alpha *= 0.5;
    }
    Err(MfgError::LineSearch {
        backtracks: MAX_BACKTRACKS,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
