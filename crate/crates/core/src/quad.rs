//! Adaptive Gauss–Kronrod quadrature.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("quadrature did not converge: estimate {estimate}, error {error} after {evaluations} evaluations")]
    NoConvergence { estimate: f64, error: f64, evaluations: usize },
    #[error("integrand returned a non-finite value at x = {0}")]
    NonFinite(f64),
}

// 15-point Kronrod extension of the 7-point Gauss rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Result of one Gauss–Kronrod panel: (kronrod estimate, |kronrod - gauss|).
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Result<(f64, f64), QuadratureError> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    if !fc.is_finite() {
        return Err(QuadratureError::NonFinite(c));
    }
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for i in 0..7 {
        let dx = h * XGK[i];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        if !f1.is_finite() {
            return Err(QuadratureError::NonFinite(c - dx));
        }
        if !f2.is_finite() {
            return Err(QuadratureError::NonFinite(c + dx));
        }
        kron += WGK[i] * (f1 + f2);
        if i % 2 == 1 {
            gauss += WG[i / 2] * (f1 + f2);
        }
    }
    Ok((kron * h, ((kron - gauss) * h).abs()))
}

/// Globally adaptive integration of `f` over `[a, b]` to relative tolerance `rel_tol`
/// (or absolute tolerance `abs_tol`, whichever is looser).
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> Result<f64, QuadratureError> {
    const MAX_PANELS: usize = 2000;
    let (v, e) = gk15(&f, a, b)?;
    let mut panels = vec![(a, b, v, e)];
    let mut evaluations = 15;
    loop {
        let total: f64 = panels.iter().map(|p| p.2).sum();
        let err: f64 = panels.iter().map(|p| p.3).sum();
        if err <= (rel_tol * total.abs()).max(abs_tol) {
            return Ok(total);
        }
        if panels.len() >= MAX_PANELS {
            return Err(QuadratureError::NoConvergence { estimate: total, error: err, evaluations });
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("nonempty panel list");
        let (pa, pb, _, _) = panels.swap_remove(worst);
        let mid = 0.5 * (pa + pb);
        let (v1, e1) = gk15(&f, pa, mid)?;
        let (v2, e2) = gk15(&f, mid, pb)?;
        evaluations += 30;
        panels.push((pa, mid, v1, e1));
        panels.push((mid, pb, v2, e2));
    }
}

/// Integral of `f` over `[0, ∞)`, growing the upper limit `W` by doubling until
/// `tail_bound(W)` drops below `tail_tol`.
pub fn integrate_half_line<F, T>(f: F, tail_bound: T, rel_tol: f64, tail_tol: f64) -> Result<f64, QuadratureError>
where
    F: Fn(f64) -> f64,
    T: Fn(f64) -> f64,
{
    let mut upper = 1.0;
    while tail_bound(upper) >= tail_tol {
        upper *= 2.0;
        if upper > 1e12 {
            return Err(QuadratureError::NoConvergence { estimate: f64::NAN, error: tail_bound(upper), evaluations: 0 });
        }
    }
    // Panels [0,1], [1,2], [2,4], ... keep the adaptive search well conditioned
    // when the integrand is concentrated near the origin.
    let mut total = integrate(&f, 0.0, 1.0, rel_tol, 0.0)?;
    let mut lo = 1.0;
    while lo < upper {
        let hi = 2.0 * lo;
        total += integrate(&f, lo, hi, rel_tol, rel_tol * total.abs() * 1e-3)?;
        lo = hi;
    }
    Ok(total)
}
