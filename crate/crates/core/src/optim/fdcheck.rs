/// Denominator floor for the relative error, so that gradient entries near
/// zero are compared in absolute terms.
pub const FD_ABS_FLOOR: f64 = 1e-4;

/// Largest relative error between central differences of `f` and `analytic`
/// over the coordinates in `indices`.
///
/// The relative error of a coordinate is
/// `|num − ana| / max(|num|, |ana|, FD_ABS_FLOOR)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], indices: &[usize], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut worst = 0.0f64;
    let mut x = params.to_vec();
    for &i in indices {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let num = (fp - fm) / (2.0 * h);
        let ana = analytic[i];
        let err = (num - ana).abs() / num.abs().max(ana.abs()).max(FD_ABS_FLOOR);
        if !err.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}
