//! Deterministic least-squares fitting.
//!
//! Nonlinear fits use Levenberg-Marquardt with analytic Jacobians and a
//! fixed schedule: stop when the relative change of the residual sum of
//! squares drops below `1e-10` or after 200 iterations. Parameter
//! uncertainties are the square roots of the diagonal of
//! `(J^T W J)^-1 * chi2_red`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{LineShape, Profile};
use crate::tagstore::{CoincidenceHistogram, CoincidenceMeta, FoldedHistogram};

pub const MAX_ITERATIONS: usize = 200;
pub const RSS_TOLERANCE: f64 = 1e-10;

/// Named parameters with one-sigma uncertainties.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    /// Weighted residual sum of squares.
    pub rss: f64,
    pub dof: usize,
    pub converged: bool,
    pub iterations: usize,
    pub covariance: DMatrix<f64>,
}

impl FitResult {
    fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no fit parameter named {name}"))
    }

    pub fn value(&self, name: &str) -> f64 {
        self.values[self.index(name)]
    }

    pub fn error(&self, name: &str) -> f64 {
        self.errors[self.index(name)]
    }

    /// Residual sum of squares per degree of freedom; a chi-square only
    /// when the fit was weighted by the data errors.
    pub fn reduced_chi2(&self) -> f64 {
        if self.dof == 0 {
            0.0
        } else {
            self.rss / self.dof as f64
        }
    }
}

/// Straight-line least squares, closed form.
///
/// With `sigmas` the fit is weighted by `1/sigma^2` and the uncertainties
/// follow from the supplied errors. Without them the uncertainties are
/// scaled by the reduced chi-square of the residuals.
pub fn fit_linear(xs: &[f64], ys: &[f64], sigmas: Option<&[f64]>) -> Result<FitResult> {
    if xs.len() != ys.len() || sigmas.is_some_and(|s| s.len() != xs.len()) {
        return Err(Error::invalid("xs, ys and sigmas must have equal length"));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("linear fit needs at least two points"));
    }
    if let Some(s) = sigmas {
        if s.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("sigmas must be > 0"));
        }
    }
    let w = |i: usize| sigmas.map_or(1.0, |s| 1.0 / (s[i] * s[i]));
    let (mut s0, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..xs.len() {
        let wi = w(i);
        s0 += wi;
        sx += wi * xs[i];
        sy += wi * ys[i];
    }
    // Centre on the weighted mean for numerical stability.
    let xm = sx / s0;
    let ym = sy / s0;
    for i in 0..xs.len() {
        let wi = w(i);
        let dx = xs[i] - xm;
        sxx += wi * dx * dx;
        sxy += wi * dx * (ys[i] - ym);
    }
    if !(sxx > 0.0) || sxx <= 1e-300 * s0 {
        return Err(Error::fit("degenerate abscissae: all x values are equal"));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let rss: f64 = (0..xs.len())
        .map(|i| {
            let r = ys[i] - (slope * xs[i] + intercept);
            w(i) * r * r
        })
        .sum();
    let dof = xs.len() - 2;
    let scale = match sigmas {
        Some(_) => 1.0,
        None if dof > 0 => rss / dof as f64,
        None => 0.0,
    };
    let var_slope = scale / sxx;
    let var_intercept = scale * (1.0 / s0 + xm * xm / sxx);
    let cov = -xm * var_slope;
    Ok(FitResult {
        names: vec!["slope".into(), "intercept".into()],
        values: vec![slope, intercept],
        errors: vec![var_slope.sqrt(), var_intercept.sqrt()],
        rss,
        dof,
        converged: true,
        iterations: 0,
        covariance: DMatrix::from_row_slice(2, 2, &[var_slope, cov, cov, var_intercept]),
    })
}

/// A model `y(x; p)` with an analytic gradient in `p`.
pub trait FitModel {
    fn n_params(&self) -> usize;
    /// Value at `x`; writes `dy/dp` into `grad`.
    fn eval(&self, x: f64, p: &[f64], grad: &mut [f64]) -> f64;
    /// Whether `p` is inside the admissible domain.
    fn admissible(&self, _p: &[f64]) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    pub errors: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub rss: f64,
    pub dof: usize,
    pub converged: bool,
    pub iterations: usize,
}

fn weighted_system<M: FitModel>(
    model: &M,
    xs: &[f64],
    ys: &[f64],
    weights: &[f64],
    p: &[f64],
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let np = model.n_params();
    let mut jtj = DMatrix::zeros(np, np);
    let mut jtr = DVector::zeros(np);
    let mut grad = vec![0.0; np];
    let mut rss = 0.0;
    for i in 0..xs.len() {
        let y = model.eval(xs[i], p, &mut grad);
        let r = ys[i] - y;
        let w = weights[i];
        rss += w * r * r;
        for a in 0..np {
            let ga = w * grad[a];
            jtr[a] += ga * r;
            for b in 0..=a {
                jtj[(a, b)] += ga * grad[b];
            }
        }
    }
    for a in 0..np {
        for b in 0..a {
            jtj[(b, a)] = jtj[(a, b)];
        }
    }
    (jtj, jtr, rss)
}

fn weighted_rss<M: FitModel>(model: &M, xs: &[f64], ys: &[f64], weights: &[f64], p: &[f64]) -> f64 {
    let mut grad = vec![0.0; model.n_params()];
    xs.iter()
        .zip(ys)
        .zip(weights)
        .map(|((&x, &y), &w)| {
            let r = y - model.eval(x, p, &mut grad);
            w * r * r
        })
        .sum()
}

/// Levenberg-Marquardt minimisation of `sum w_i (y_i - f(x_i; p))^2`.
pub fn levenberg_marquardt<M: FitModel>(
    model: &M,
    xs: &[f64],
    ys: &[f64],
    weights: &[f64],
    p0: &[f64],
) -> Result<LmOutcome> {
    let np = model.n_params();
    if p0.len() != np {
        return Err(Error::invalid("initial parameter count mismatch"));
    }
    if xs.len() != ys.len() || xs.len() != weights.len() {
        return Err(Error::invalid("data length mismatch"));
    }
    if xs.len() < np {
        return Err(Error::invalid("fewer data points than parameters"));
    }
    if !model.admissible(p0) {
        return Err(Error::fit("initial parameters outside the model domain"));
    }
    let mut p = p0.to_vec();
    let (mut jtj, mut jtr, mut rss) = weighted_system(model, xs, ys, weights, &p);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for k in 0..np {
                let d = jtj[(k, k)];
                a[(k, k)] = d + lambda * if d > 0.0 { d } else { 1.0 };
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&jtr);
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            if !model.admissible(&trial) {
                lambda *= 10.0;
                continue;
            }
            let trial_rss = weighted_rss(model, xs, ys, weights, &trial);
            if trial_rss.is_finite() && trial_rss <= rss {
                let change = if rss > 0.0 { (rss - trial_rss) / rss } else { 0.0 };
                p = trial;
                (jtj, jtr, rss) = weighted_system(model, xs, ys, weights, &p);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if change < RSS_TOLERANCE {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No downhill step at any damping: a stationary point.
            converged = true;
        }
        if converged {
            break;
        }
    }
    let dof = xs.len().saturating_sub(np);
    let chi2_red = if dof > 0 { rss / dof as f64 } else { 0.0 };
    let covariance = invert_symmetric(&jtj).map(|c| c * chi2_red).unwrap_or_else(|| {
        log::warn!("singular curvature matrix; uncertainties unavailable");
        DMatrix::from_element(np, np, f64::NAN)
    });
    let errors = (0..np).map(|k| covariance[(k, k)].max(0.0).sqrt()).collect();
    if !converged {
        log::warn!("fit did not converge in {MAX_ITERATIONS} iterations");
    }
    Ok(LmOutcome {
        params: p,
        errors,
        covariance,
        rss,
        dof,
        converged,
        iterations,
    })
}

fn invert_symmetric(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| m.clone().try_inverse())
}

/// `a * exp(-(t - t0) / tau) + b`, with the baseline optionally fixed.
struct ExpDecay {
    t0: f64,
    fixed_baseline: Option<f64>,
}

impl FitModel for ExpDecay {
    fn n_params(&self) -> usize {
        if self.fixed_baseline.is_some() {
            2
        } else {
            3
        }
    }

    fn eval(&self, t: f64, p: &[f64], grad: &mut [f64]) -> f64 {
        let (a, tau) = (p[0], p[1]);
        let u = (t - self.t0) / tau;
        let e = (-u).exp();
        grad[0] = e;
        grad[1] = a * e * u / tau;
        let b = match self.fixed_baseline {
            Some(b) => b,
            None => {
                grad[2] = 1.0;
                p[2]
            }
        };
        a * e + b
    }

    fn admissible(&self, p: &[f64]) -> bool {
        p[1] > 0.0 && p[1].is_finite()
    }
}

/// Single-exponential fit `a * exp(-(t - t0) / tau) + b` over the bins of
/// `hist` whose centres lie in `[t0, t1]`. The amplitude refers to `t0`.
pub fn fit_exponential(
    hist: &FoldedHistogram,
    window: (f64, f64),
    fix_baseline: Option<f64>,
) -> Result<FitResult> {
    let (t0, t1) = window;
    if !(t1 > t0) {
        return Err(Error::invalid("fit window must have t1 > t0"));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = (0..hist.counts.len())
        .map(|i| (hist.bin_center(i), hist.counts[i] as f64))
        .filter(|(t, _)| *t >= t0 && *t <= t1)
        .unzip();
    fit_exponential_points(&xs, &ys, t0, fix_baseline)
}

/// Exponential fit on arbitrary `(t, counts)` points; see [`fit_exponential`].
pub fn fit_exponential_points(
    xs: &[f64],
    ys: &[f64],
    t0: f64,
    fix_baseline: Option<f64>,
) -> Result<FitResult> {
    if xs.len() < 5 {
        return Err(Error::invalid("exponential fit needs at least 5 bins in the window"));
    }
    if ys.iter().all(|&y| y <= 0.0) {
        return Err(Error::fit("no positive counts in the fit window"));
    }
    let first = ys[0];
    if ys.iter().all(|&y| y == first) {
        return Err(Error::fit("no decay: counts are constant"));
    }
    let span = xs[xs.len() - 1] - xs[0];

    let tail = (xs.len() / 10).max(1);
    let b0 = fix_baseline.unwrap_or_else(|| {
        let mut last: Vec<f64> = ys[ys.len() - tail..].to_vec();
        last.sort_by(f64::total_cmp);
        last[last.len() / 2]
    });
    let (lx, ly): (Vec<f64>, Vec<f64>) = xs
        .iter()
        .zip(ys)
        .filter(|(_, &y)| y - b0 > 0.0)
        .map(|(&x, &y)| (x - t0, (y - b0).ln()))
        .unzip();
    let (mut a0, mut tau0) = (ys[0] - b0, span / 3.0);
    if lx.len() >= 2 {
        // Poisson error propagated through the logarithm.
        let sig: Vec<f64> = ly.iter().map(|l| 1.0 / l.exp().max(1.0).sqrt()).collect();
        if let Ok(lin) = fit_linear(&lx, &ly, Some(&sig)) {
            let slope = lin.value("slope");
            if slope < 0.0 && (-1.0 / slope).is_finite() {
                tau0 = -1.0 / slope;
                a0 = lin.value("intercept").exp();
            }
        }
    }
    if !(tau0 > 0.0 && tau0 < 100.0 * span.max(f64::MIN_POSITIVE)) {
        tau0 = span / 3.0;
    }

    let model = ExpDecay {
        t0,
        fixed_baseline: fix_baseline,
    };
    let mut p0 = vec![a0, tau0];
    if fix_baseline.is_none() {
        p0.push(b0);
    }
    let weights = vec![1.0; xs.len()];
    let out = levenberg_marquardt(&model, xs, ys, &weights, &p0)?;
    let (a, tau) = (out.params[0], out.params[1]);
    if !(a > 3.0 * out.errors[0]) || !(a > 0.0) {
        return Err(Error::fit("no decay: amplitude not significant"));
    }
    if !(tau > 0.0) || tau > 100.0 * span {
        return Err(Error::fit("no decay: lifetime outside the fit window scale"));
    }
    let mut names = vec!["amplitude".to_string(), "tau".into()];
    let mut values = out.params.clone();
    let mut errors = out.errors.clone();
    let mut covariance = out.covariance.clone();
    match fix_baseline {
        Some(b) => {
            names.push("baseline".into());
            values.push(b);
            errors.push(0.0);
            covariance = covariance.resize(3, 3, 0.0);
        }
        None => names.push("baseline".into()),
    }
    Ok(FitResult {
        names,
        values,
        errors,
        rss: out.rss,
        dof: out.dof,
        converged: out.converged,
        iterations: out.iterations,
        covariance,
    })
}

/// Peak profile family fitted by [`fit_peaks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeakKind {
    Lorentzian,
    Gaussian,
    GlProduct,
}

impl PeakKind {
    fn widths(self) -> usize {
        match self {
            PeakKind::GlProduct => 2,
            _ => 1,
        }
    }

    fn profile(self, w: &[f64]) -> Profile {
        match self {
            PeakKind::Lorentzian => Profile::Lorentzian { fwhm: w[0] },
            PeakKind::Gaussian => Profile::Gaussian { sigma: w[0] },
            PeakKind::GlProduct => Profile::GlProduct {
                sigma: w[0],
                fwhm_l: w[1],
            },
        }
    }
}

/// Sum of `k` peaks plus a shared baseline, parameters laid out per peak
/// as `[center, amplitude, widths..]` then the baseline.
struct PeakSum {
    kind: PeakKind,
    k: usize,
}

impl PeakSum {
    fn stride(&self) -> usize {
        2 + self.kind.widths()
    }
}

impl FitModel for PeakSum {
    fn n_params(&self) -> usize {
        self.k * self.stride() + 1
    }

    fn eval(&self, x: f64, p: &[f64], grad: &mut [f64]) -> f64 {
        let s = self.stride();
        let mut y = p[self.k * s];
        grad[self.k * s] = 1.0;
        for j in 0..self.k {
            let q = &p[j * s..(j + 1) * s];
            let g = &mut grad[j * s..(j + 1) * s];
            let (c, a) = (q[0], q[1]);
            let dx = x - c;
            match self.kind {
                PeakKind::Lorentzian => {
                    let w = q[2];
                    let u = 2.0 * dx / w;
                    let l = 1.0 / (1.0 + u * u);
                    let dl_du = -2.0 * u * l * l;
                    y += a * l;
                    g[0] = a * dl_du * (-2.0 / w);
                    g[1] = l;
                    g[2] = a * dl_du * (-u / w);
                }
                PeakKind::Gaussian => {
                    let sg = q[2];
                    let e = (-dx * dx / (2.0 * sg * sg)).exp();
                    y += a * e;
                    g[0] = a * e * dx / (sg * sg);
                    g[1] = e;
                    g[2] = a * e * dx * dx / (sg * sg * sg);
                }
                PeakKind::GlProduct => {
                    let (sg, w) = (q[2], q[3]);
                    let e = (-dx * dx / (2.0 * sg * sg)).exp();
                    let u = 2.0 * dx / w;
                    let l = 1.0 / (1.0 + u * u);
                    let dl_du = -2.0 * u * l * l;
                    y += a * e * l;
                    g[0] = a * (e * dx / (sg * sg) * l + e * dl_du * (-2.0 / w));
                    g[1] = e * l;
                    g[2] = a * l * e * dx * dx / (sg * sg * sg);
                    g[3] = a * e * dl_du * (-u / w);
                }
            }
        }
        y
    }

    fn admissible(&self, p: &[f64]) -> bool {
        let s = self.stride();
        (0..self.k).all(|j| p[j * s + 2..(j + 1) * s].iter().all(|w| *w > 0.0 && w.is_finite()))
    }
}

/// Result of [`fit_peaks`] in the original frequency units.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakFit {
    pub peaks: Vec<LineShape>,
    /// Numerical FWHM of each fitted peak.
    pub fwhm: Vec<f64>,
    pub baseline: f64,
    /// Raw parameters: per peak `center, amplitude, widths..`, then `baseline`.
    pub result: FitResult,
}

impl PeakFit {
    pub fn center_error(&self, peak: usize) -> f64 {
        self.result.errors[peak * (self.result.values.len() - 1) / self.peaks.len()]
    }

    /// Peaks ordered by centre.
    pub fn sorted_peaks(&self) -> Vec<LineShape> {
        let mut p = self.peaks.clone();
        p.sort_by(|a, b| a.center.total_cmp(&b.center));
        p
    }
}

/// Fits `k` peaks of `kind` plus a constant baseline to `(x, y, sigma)`
/// data. The abscissa is shifted and scaled internally. Initial peaks are
/// picked one at a time at the tallest remaining residual.
pub fn fit_peaks(xs: &[f64], ys: &[f64], sigmas: Option<&[f64]>, k: usize, kind: PeakKind) -> Result<PeakFit> {
    if k == 0 {
        return Err(Error::invalid("peak count must be >= 1"));
    }
    let stride = 2 + kind.widths();
    if xs.len() != ys.len() || sigmas.is_some_and(|s| s.len() != xs.len()) {
        return Err(Error::invalid("xs, ys and sigmas must have equal length"));
    }
    if xs.len() < stride * k + 1 {
        return Err(Error::invalid(format!(
            "{} points cannot constrain {} peaks",
            xs.len(),
            k
        )));
    }
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let x_lo = xs[order[0]];
    let x_hi = xs[order[order.len() - 1]];
    if !(x_hi > x_lo) {
        return Err(Error::invalid("degenerate abscissae"));
    }
    let shift = 0.5 * (x_lo + x_hi);
    let scale = 0.5 * (x_hi - x_lo);
    let u: Vec<f64> = order.iter().map(|&i| (xs[i] - shift) / scale).collect();
    let v: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
    let y_scale = v.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(f64::MIN_POSITIVE);
    let v: Vec<f64> = v.iter().map(|y| y / y_scale).collect();
    let weights: Vec<f64> = match sigmas {
        Some(s) => {
            if s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::invalid("sigmas must be > 0"));
            }
            order.iter().map(|&i| (y_scale / s[i]).powi(2)).collect()
        }
        None => vec![1.0; u.len()],
    };

    let p0 = initial_peaks(&u, &v, k, kind);
    let model = PeakSum { kind, k };
    let out = levenberg_marquardt(&model, &u, &v, &weights, &p0)?;

    let mut values = out.params.clone();
    let mut jac = vec![0.0; values.len()];
    for j in 0..k {
        let q = &mut values[j * stride..(j + 1) * stride];
        q[0] = q[0] * scale + shift;
        q[1] *= y_scale;
        q[2] *= scale;
        jac[j * stride] = scale;
        jac[j * stride + 1] = y_scale;
        jac[j * stride + 2] = scale;
        if stride == 4 {
            q[3] *= scale;
            jac[j * stride + 3] = scale;
        }
    }
    values[k * stride] *= y_scale;
    jac[k * stride] = y_scale;
    let n = values.len();
    let covariance = DMatrix::from_fn(n, n, |a, b| out.covariance[(a, b)] * jac[a] * jac[b]);
    let errors = out.errors.iter().zip(&jac).map(|(e, j)| e * j).collect();

    let mut names = Vec::with_capacity(n);
    let width_names: &[&str] = match kind {
        PeakKind::Lorentzian => &["fwhm"],
        PeakKind::Gaussian => &["sigma"],
        PeakKind::GlProduct => &["sigma", "fwhm_l"],
    };
    for j in 0..k {
        names.push(format!("center{j}"));
        names.push(format!("amplitude{j}"));
        for w in width_names {
            names.push(format!("{w}{j}"));
        }
    }
    names.push("baseline".into());

    let peaks: Vec<LineShape> = (0..k)
        .map(|j| {
            let q = &values[j * stride..(j + 1) * stride];
            LineShape::new(q[0], q[1], kind.profile(&q[2..]))
        })
        .collect();
    let fwhm = peaks.iter().map(|p| p.fwhm()).collect();
    // Weighted RSS in original units.
    let rss = out.rss * if sigmas.is_some() { 1.0 } else { y_scale * y_scale };
    Ok(PeakFit {
        peaks,
        fwhm,
        baseline: values[k * stride],
        result: FitResult {
            names,
            values,
            errors,
            rss,
            dof: out.dof,
            converged: out.converged,
            iterations: out.iterations,
            covariance,
        },
    })
}

fn initial_peaks(u: &[f64], v: &[f64], k: usize, kind: PeakKind) -> Vec<f64> {
    let n = u.len();
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let baseline = sorted[n / 10];
    let mut resid: Vec<f64> = v.iter().map(|y| y - baseline).collect();
    let min_width = 2.0 * (u[n - 1] - u[0]) / n as f64;
    let mut p = Vec::new();
    for _ in 0..k {
        let (imax, &amax) = resid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let half = 0.5 * amax;
        let mut lo = imax;
        while lo > 0 && resid[lo] > half {
            lo -= 1;
        }
        let mut hi = imax;
        while hi + 1 < n && resid[hi] > half {
            hi += 1;
        }
        let fwhm = (u[hi] - u[lo]).max(min_width);
        let amp = amax.max(f64::MIN_POSITIVE);
        let shape = match kind {
            PeakKind::Lorentzian => Profile::Lorentzian { fwhm },
            PeakKind::Gaussian => Profile::Gaussian { sigma: fwhm / 2.354_820_045 },
            PeakKind::GlProduct => Profile::GlProduct {
                sigma: 1.2 * fwhm / 2.354_820_045,
                fwhm_l: 1.2 * fwhm,
            },
        };
        let line = LineShape::new(u[imax], amp, shape);
        for (r, &x) in resid.iter_mut().zip(u) {
            *r -= line.eval(x);
        }
        p.push(u[imax]);
        p.push(amp);
        match shape {
            Profile::Lorentzian { fwhm } => p.push(fwhm),
            Profile::Gaussian { sigma } => p.push(sigma),
            Profile::GlProduct { sigma, fwhm_l } => {
                p.push(sigma);
                p.push(fwhm_l);
            }
        }
    }
    p.push(baseline);
    p
}

/// Non-negative least squares on the normal equations `G x = h`
/// (`G = J^T J`, `h = J^T y`) with `free[i]` marking unconstrained
/// variables. Lawson-Hanson active set.
pub fn nnls_gram(g: &DMatrix<f64>, h: &DVector<f64>, free: &[bool]) -> Result<DVector<f64>> {
    let n = h.len();
    if g.nrows() != n || g.ncols() != n || free.len() != n {
        return Err(Error::invalid("nnls dimension mismatch"));
    }
    let scale = (0..n).map(|i| g[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let tol = 1e-12 * scale * h.amax().max(1.0);
    let mut passive: Vec<bool> = free.to_vec();
    let mut x = DVector::zeros(n);
    if passive.iter().any(|&p| p) {
        x = solve_passive(g, h, &passive)?;
    }
    for _ in 0..(3 * n + 10) {
        let w = h - g * &x;
        let candidate = (0..n)
            .filter(|&i| !passive[i])
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = candidate else { break };
        if w[j] <= tol {
            break;
        }
        passive[j] = true;
        loop {
            let z = solve_passive(g, h, &passive)?;
            let bad: Vec<usize> = (0..n)
                .filter(|&i| passive[i] && !free[i] && z[i] <= 0.0)
                .collect();
            if bad.is_empty() {
                x = z;
                break;
            }
            let alpha = bad
                .iter()
                .map(|&i| x[i] / (x[i] - z[i]))
                .fold(f64::INFINITY, f64::min);
            x = &x + (&z - &x) * alpha;
            for i in 0..n {
                if passive[i] && !free[i] && x[i] <= 1e-15 * scale {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    Ok(x)
}

fn solve_passive(g: &DMatrix<f64>, h: &DVector<f64>, passive: &[bool]) -> Result<DVector<f64>> {
    let idx: Vec<usize> = (0..h.len()).filter(|&i| passive[i]).collect();
    let m = idx.len();
    let sub = DMatrix::from_fn(m, m, |a, b| g[(idx[a], idx[b])]);
    let rhs = DVector::from_fn(m, |a, _| h[idx[a]]);
    let sol = sub
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| sub.lu().solve(&rhs))
        .ok_or_else(|| Error::fit("singular normal equations"))?;
    let mut x = DVector::zeros(h.len());
    for (a, &i) in idx.iter().enumerate() {
        x[i] = sol[a];
    }
    Ok(x)
}

/// Fixed-lifetime exponential peak train fitted to a coincidence histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct G2TrainFit {
    /// Baseline, counts per bin.
    pub i0: f64,
    pub i0_error: f64,
    /// Peak amplitudes `A_n` for `n = -N..=N`, stored at index `n + N`,
    /// counts per bin.
    pub amplitudes: Vec<f64>,
    pub amplitude_errors: Vec<f64>,
    pub tau_c: f64,
    pub period: f64,
    pub bin_width: f64,
    pub n: u32,
    pub rss: f64,
    pub dof: usize,
    /// Covariance of `[I0, A_-N, .., A_N]`.
    pub covariance: DMatrix<f64>,
    pub meta: CoincidenceMeta,
    /// Set when `tau_c >= period / 2`, i.e. neighbouring peaks overlap.
    pub overlapping: bool,
}

impl G2TrainFit {
    pub fn amplitude(&self, n: i64) -> f64 {
        self.amplitudes[(n + self.n as i64) as usize]
    }

    pub fn amplitude_error(&self, n: i64) -> f64 {
        self.amplitude_errors[(n + self.n as i64) as usize]
    }

    /// Model value, counts per bin, for the bin centred at `delay`.
    pub fn model(&self, delay: f64) -> f64 {
        let n = self.n as i64;
        self.i0
            + (-n..=n)
                .map(|k| {
                    self.amplitude(k)
                        * bin_averaged_exp(delay - k as f64 * self.period, self.bin_width, self.tau_c)
                })
                .sum::<f64>()
    }
}

/// Mean of `exp(-|u| / tau)` over `[x - d/2, x + d/2]`.
pub fn bin_averaged_exp(x: f64, d: f64, tau: f64) -> f64 {
    let prim = |u: f64| u.signum() * tau * (1.0 - (-u.abs() / tau).exp());
    (prim(x + 0.5 * d) - prim(x - 0.5 * d)) / d
}

/// Fits `I0 + sum_n A_n exp(-|tau - n theta| / tau_c)` with `tau_c` fixed
/// and `A_n >= 0`, over the `2N + 1` periods around zero delay.
///
/// Each exponential is averaged over its bin, so a peak of amplitude `A`
/// holds exactly `2 A tau_c / d` counts when summed over bins.
pub fn fit_g2_train(hist: &CoincidenceHistogram, tau_c: f64, n: u32) -> Result<G2TrainFit> {
    if !(tau_c > 0.0) {
        return Err(Error::invalid("tau_c must be > 0"));
    }
    if hist.n_max < n {
        return Err(Error::invalid(format!(
            "histogram spans {} periods, fit needs {}",
            hist.n_max, n
        )));
    }
    let period = hist.meta.period;
    let d = hist.bin_width;
    let overlapping = tau_c >= 0.5 * period;
    if overlapping {
        log::warn!("tau_c >= period/2: neighbouring peaks overlap");
    }
    let limit = n as f64 * period + 0.5 * period;
    let rows: Vec<(f64, f64)> = (0..hist.counts.len())
        .map(|i| (hist.delay(i), hist.counts[i] as f64))
        .filter(|(t, _)| t.abs() <= limit + 1e-12 * limit)
        .collect();
    let np = 2 * n as usize + 2;
    if rows.len() <= np {
        return Err(Error::invalid("too few bins for the peak-train fit"));
    }
    let column = |t: f64, c: usize| -> f64 {
        if c == 0 {
            1.0
        } else {
            let k = c as i64 - 1 - n as i64;
            bin_averaged_exp(t - k as f64 * period, d, tau_c)
        }
    };
    let mut g = DMatrix::zeros(np, np);
    let mut h = DVector::zeros(np);
    let mut row = vec![0.0; np];
    for &(t, y) in &rows {
        for (c, r) in row.iter_mut().enumerate() {
            *r = column(t, c);
        }
        for a in 0..np {
            h[a] += row[a] * y;
            for b in 0..=a {
                g[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..np {
        for b in 0..a {
            g[(b, a)] = g[(a, b)];
        }
    }
    let mut free = vec![false; np];
    free[0] = true;
    let x = nnls_gram(&g, &h, &free)?;

    let mut rss = 0.0;
    for &(t, y) in &rows {
        let m: f64 = (0..np).map(|c| x[c] * column(t, c)).sum();
        rss += (y - m) * (y - m);
    }
    let dof = rows.len() - np;
    let chi2_red = rss / dof as f64;
    let covariance = invert_symmetric(&g)
        .map(|c| c * chi2_red)
        .ok_or_else(|| Error::fit("singular peak-train design"))?;
    let err = |c: usize| covariance[(c, c)].max(0.0).sqrt();
    Ok(G2TrainFit {
        i0: x[0],
        i0_error: err(0),
        amplitudes: (1..np).map(|c| x[c]).collect(),
        amplitude_errors: (1..np).map(err).collect(),
        tau_c,
        period,
        bin_width: d,
        n,
        rss,
        dof,
        covariance,
        meta: hist.meta,
        overlapping,
    })
}
