//! Finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{CoreError, Result};

/// Max relative error between an analytic gradient and central differences of
/// `f`, per coordinate: |analytic - cd| / (|analytic| + |cd| + 1e-12).
///
/// Perturbed points are rounded to f32 (the storage format); the divisor uses
/// the actually-representable step so the check measures the backward rule,
/// not float representation error.
pub fn central_diff_max_rel_err<F>(
    f: F,
    analytic: &[f64],
    point: &Tensor,
    h: f32,
) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    central_diff_max_rel_err_scaled(f, analytic, point, h, 0.0)
}

/// Like [`central_diff_max_rel_err`] with a denominator floor of
/// `scale_frac * max|analytic|`. Composite functions can have coordinates
/// whose true gradient is orders below the tensor's scale; there the
/// per-coordinate quotient measures finite-difference truncation rather than
/// the backward rule, and the floor keeps the comparison anchored to the
/// gradient's signal level. A floor of 0 is the strict per-coordinate form.
pub fn central_diff_max_rel_err_scaled<F>(
    mut f: F,
    analytic: &[f64],
    point: &Tensor,
    h: f32,
    scale_frac: f64,
) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if analytic.len() != point.numel() {
        return Err(CoreError::Shape(format!(
            "analytic gradient has {} entries for {} coordinates",
            analytic.len(),
            point.numel()
        )));
    }
    let scale = analytic.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let floor = 1e-12 + scale_frac * scale;
    let mut max_err = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        let mut minus = point.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let span = plus[i] as f64 - minus[i] as f64;
        let tp = Tensor::new(point.shape().to_vec(), plus)?;
        let tm = Tensor::new(point.shape().to_vec(), minus)?;
        let fp = f(&tp)?;
        let fm = f(&tm)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CoreError::NonFinite(format!("function evaluation at coordinate {i}")));
        }
        let cd = (fp - fm) / span;
        let err = (analytic[i] - cd).abs() / (analytic[i].abs() + cd.abs() + floor);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Gradient-check a scalar tape function of one tensor input.
///
/// `build` receives a fresh tape and the input leaf and must return the scalar
/// output var. The analytic gradient comes from `backward`; the reference from
/// central differences of the same tape function.
pub fn grad_check_tape<B>(build: B, point: &Tensor, h: f32) -> Result<f64>
where
    B: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let out = build(&mut tape, x)?;
    if tape.value_f64(out).len() != 1 {
        return Err(CoreError::Shape("grad_check_tape: function must be scalar".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt_f64(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);
    central_diff_max_rel_err(
        |p| {
            let mut t = Tape::new();
            let xv = t.leaf(p);
            let o = build(&mut t, xv)?;
            t.scalar(o)
        },
        &analytic,
        point,
        h,
    )
}
