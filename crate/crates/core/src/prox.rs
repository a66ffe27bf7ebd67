//! Proximity operators and inner solvers used by the training loop.
//!
//! * [`prox_nonneg_l1`]: one-sided soft thresholding, the prox of
//!   `beta * |z| + indicator(z >= 0)` after a quadratic weight `w`.
//! * [`prox_logdet_svd`] and [`update_transform`]: the closed-form transform
//!   update (Cholesky change of variables, then the log-det prox on singular
//!   values).
//! * [`projected_newton_coeffs`]: the coefficient update of an inner layer,
//!   where the next layer's convolution couples entries of each channel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{
    conv_same_adjoint_into, conv_same_into, convolution_matrix, CoefficientStack, KernelBank,
};
use crate::error::{invalid, Error, Result};

/// `argmin_{z >= 0} beta * z + (weight / 2) * (z - u)^2 = max(u - beta / weight, 0)`.
pub fn prox_nonneg_l1(u: f64, beta: f64, weight: f64) -> Result<f64> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(invalid(format!("beta must be finite and non-negative, got {beta}")));
    }
    if !(weight.is_finite() && weight > 0.0) {
        return Err(invalid(format!("weight must be finite and positive, got {weight}")));
    }
    Ok((u - beta / weight).max(0.0))
}

fn svd(m: DMatrix<f64>) -> Result<SVD<f64, Dyn, Dyn>> {
    SVD::try_new(m, true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))
}

/// Sum of the logarithms of the singular values of `t`; `-inf` if any is zero.
pub fn log_det_sv(t: &DMatrix<f64>) -> f64 {
    if t.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    let sv = t.singular_values();
    if sv.iter().any(|&s| s <= 0.0) {
        return f64::NEG_INFINITY;
    }
    sv.iter().map(|s| s.ln()).sum()
}

/// Prox of `-lambda * sum_i log sigma_i(.)` at `y`: singular vectors are kept
/// and every singular value `s` becomes `(s + sqrt(s^2 + 4 lambda)) / 2`, the
/// positive root of `x^2 - s x - lambda = 0`.
pub fn prox_logdet_svd(y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(invalid(format!("lambda must be finite and positive, got {lambda}")));
    }
    if !y.is_square() {
        return Err(invalid("log-det prox needs a square matrix"));
    }
    let dec = svd(y.clone())?;
    let u = dec.u.as_ref().expect("u requested");
    let v_t = dec.v_t.as_ref().expect("v_t requested");
    let shrunk = dec
        .singular_values
        .map(|s| 0.5 * (s + (s * s + 4.0 * lambda).sqrt()));
    Ok(u * DMatrix::from_diagonal(&shrunk) * v_t)
}

/// Cholesky factorization of a matrix that should be positive definite,
/// retrying with `1e-10 * trace / K` (growing tenfold) on the diagonal.
pub fn cholesky_with_jitter(w: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning("matrix has non-finite entries".into()));
    }
    if let Some(c) = Cholesky::new(w.clone()) {
        return Ok(c);
    }
    let k = w.nrows().max(1) as f64;
    let base = (1e-10 * w.trace().abs() / k).max(f64::MIN_POSITIVE);
    let mut jitter = base;
    for _ in 0..3 {
        let mut shifted = w.clone();
        for i in 0..w.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Conditioning(format!(
        "matrix is not positive definite (jitter up to {:.3e})",
        jitter / 10.0
    )))
}

/// Everything the transform update of one layer needs.
///
/// With `D_m` the design matrix of sample `m` (its Toeplitz view), `gram =
/// sum_m D_m^T D_m` and `cross = sum_m D_m^T Z_m`; the update minimizes
///
/// ```text
/// 1/2 tr(T^T gram T) - tr(cross^T T) + mu |T|_F^2 - lambda log det T
///     + 1/(2 gamma1) |T - anchor|_F^2
/// ```
///
/// which is the data fit `1/2 sum_m |D_m T - Z_m|_F^2` up to a constant.
#[derive(Clone, Debug)]
pub struct TransformUpdateInputs {
    pub gram: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub anchor: DMatrix<f64>,
    pub mu: f64,
    pub lambda: f64,
    /// May be `f64::INFINITY`, which removes the proximal anchor.
    pub gamma1: f64,
}

impl TransformUpdateInputs {
    fn validate(&self) -> Result<usize> {
        let k = self.gram.nrows();
        for (name, m) in [("gram", &self.gram), ("cross", &self.cross), ("anchor", &self.anchor)] {
            if m.shape() != (k, k) {
                return Err(invalid(format!("{name} must be {k}x{k}, got {:?}", m.shape())));
            }
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(invalid(format!("mu must be non-negative, got {}", self.mu)));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.gamma1.is_nan() || self.gamma1 <= 0.0 {
            return Err(invalid(format!("gamma1 must be positive, got {}", self.gamma1)));
        }
        Ok(k)
    }

    /// Curvature `W = gram + (1/gamma1 + 2 mu) I`.
    pub fn curvature(&self) -> DMatrix<f64> {
        let k = self.gram.nrows();
        &self.gram + DMatrix::identity(k, k) * (self.gamma1.recip() + 2.0 * self.mu)
    }

    /// Linear term `G = cross + anchor / gamma1`.
    pub fn linear_term(&self) -> DMatrix<f64> {
        let inv = self.gamma1.recip();
        if inv == 0.0 {
            self.cross.clone()
        } else {
            &self.cross + &self.anchor * inv
        }
    }

    /// Value of the minimized function (without the constant data term).
    pub fn objective(&self, t: &DMatrix<f64>) -> f64 {
        let ld = log_det_sv(t);
        if ld == f64::NEG_INFINITY {
            return f64::INFINITY;
        }
        let quad = 0.5 * (t.transpose() * &self.gram).component_mul(&t.transpose()).sum();
        let lin = self.cross.component_mul(t).sum();
        let mut v = quad - lin + self.mu * t.norm_squared() - self.lambda * ld;
        let inv = self.gamma1.recip();
        if inv != 0.0 {
            v += 0.5 * inv * (t - &self.anchor).norm_squared();
        }
        v
    }

    /// Gradient of [`Self::objective`]: `W T - G - lambda T^{-T}`.
    pub fn stationarity_residual(&self, t: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let inv_t = t.clone().try_inverse()?;
        Some(self.curvature() * t - self.linear_term() - inv_t.transpose() * self.lambda)
    }
}

/// Closed-form global minimizer of [`TransformUpdateInputs::objective`].
///
/// With `W = L L^T` (Cholesky) the substitution `S = L^T T` turns the problem
/// into `1/2 |S - L^{-1} G|_F^2 - lambda log det S + const`, solved by
/// [`prox_logdet_svd`]; then `T = L^{-T} S`.
pub fn update_transform(inputs: &TransformUpdateInputs) -> Result<DMatrix<f64>> {
    inputs.validate()?;
    let chol = cholesky_with_jitter(&inputs.curvature())?;
    let l = chol.l();
    let g = inputs.linear_term();
    let y = l
        .solve_lower_triangular(&g)
        .ok_or_else(|| Error::Conditioning("singular Cholesky factor".into()))?;
    let s = prox_logdet_svd(&y, inputs.lambda)?;
    let t = l
        .tr_solve_lower_triangular(&s)
        .ok_or_else(|| Error::Conditioning("singular Cholesky factor".into()))?;
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("transform update produced non-finite entries".into()));
    }
    Ok(t)
}

/// Settings of the projected Newton coefficient solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonSettings {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub active_set_eps: f64,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            max_iters: 50,
            grad_tol: 1e-8,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            active_set_eps: 1e-10,
        }
    }
}

impl NewtonSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(invalid("newton max_iters must be positive"));
        }
        if self.grad_tol.is_nan() || self.grad_tol <= 0.0 {
            return Err(invalid("newton grad_tol must be positive"));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(invalid("newton armijo_c must be in (0, 1)"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(invalid("newton backtrack_factor must be in (0, 1)"));
        }
        if self.active_set_eps.is_nan() || self.active_set_eps < 0.0 {
            return Err(invalid("newton active_set_eps must be non-negative"));
        }
        Ok(())
    }
}

/// Next-layer term `1/2 sum_m |Z_{m,l} T_{l+1} - Z_{m,l+1}|_F^2`, which
/// convolves channel `k` of the unknown with kernel `k` of `next_transform`.
#[derive(Clone, Copy, Debug)]
pub struct Coupling<'a> {
    pub next_transform: &'a KernelBank,
    pub next_coeffs: &'a CoefficientStack,
}

/// Coefficient subproblem of one layer:
///
/// ```text
/// 1/(2 gamma2) |Z - anchor|^2 + 1/2 |forward - Z|^2
///     + [coupling term] + beta sum(Z) + indicator(Z >= 0)
/// ```
///
/// `forward` is the layer's forward product `Z_{m,l-1} T_l`.
#[derive(Clone, Copy, Debug)]
pub struct CoefficientProblem<'a> {
    pub forward: &'a CoefficientStack,
    pub anchor: &'a CoefficientStack,
    pub coupling: Option<Coupling<'a>>,
    pub beta: f64,
    /// May be `f64::INFINITY`, which removes the proximal anchor.
    pub gamma2: f64,
}

impl CoefficientProblem<'_> {
    pub fn validate(&self) -> Result<(usize, usize, usize)> {
        let dims = self.forward.dims();
        if self.anchor.dims() != dims {
            return Err(invalid(format!(
                "anchor dims {:?} differ from forward dims {dims:?}",
                self.anchor.dims()
            )));
        }
        if let Some(c) = &self.coupling {
            if c.next_coeffs.dims() != dims {
                return Err(invalid("next-layer coefficients have mismatched dims"));
            }
            if c.next_transform.size() != dims.2 {
                return Err(invalid("next-layer transform has mismatched kernel count"));
            }
            if dims.2 > dims.1 {
                return Err(invalid("kernel length exceeds signal length"));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(invalid(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.gamma2.is_nan() || self.gamma2 <= 0.0 {
            return Err(invalid(format!("gamma2 must be positive, got {}", self.gamma2)));
        }
        Ok(dims)
    }

    fn check_shape(&self, z: &CoefficientStack) -> Result<()> {
        if z.dims() != self.forward.dims() {
            return Err(invalid(format!(
                "coefficient dims {:?} differ from problem dims {:?}",
                z.dims(),
                self.forward.dims()
            )));
        }
        Ok(())
    }

    /// Smooth part, with `beta * |Z|_1` written as the linear form `beta *
    /// sum(Z)` (its value on the non-negative orthant).
    pub fn smooth_value(&self, z: &CoefficientStack) -> Result<f64> {
        self.check_shape(z)?;
        let inv_g2 = self.gamma2.recip();
        let (_, n, k) = z.dims();
        let mut buf = vec![0.0; n];
        let mut total = 0.0;
        for (m, block) in z.blocks.iter().enumerate() {
            let mut v = 0.0;
            for c in 0..k {
                let zc = block.channel(c);
                let a = self.forward.blocks[m].channel(c);
                let z0 = self.anchor.blocks[m].channel(c);
                for i in 0..n {
                    let d0 = zc[i] - z0[i];
                    let d1 = a[i] - zc[i];
                    if inv_g2 != 0.0 {
                        v += 0.5 * inv_g2 * d0 * d0;
                    }
                    v += 0.5 * d1 * d1 + self.beta * zc[i];
                }
                if let Some(cp) = &self.coupling {
                    conv_same_into(zc, cp.next_transform.kernel(c), &mut buf);
                    let b = cp.next_coeffs.blocks[m].channel(c);
                    v += 0.5 * buf.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                }
            }
            total += v;
        }
        Ok(total)
    }

    /// Full objective: `+inf` when any entry is negative.
    pub fn value(&self, z: &CoefficientStack) -> Result<f64> {
        self.check_shape(z)?;
        if z.iter().any(|&v| v < 0.0) {
            return Ok(f64::INFINITY);
        }
        self.smooth_value(z)
    }

    /// Gradient of [`Self::smooth_value`].
    pub fn gradient(&self, z: &CoefficientStack) -> Result<CoefficientStack> {
        self.check_shape(z)?;
        let inv_g2 = self.gamma2.recip();
        let (_, n, k) = z.dims();
        let mut grad = z.clone();
        let mut buf = vec![0.0; n];
        let mut adj = vec![0.0; n];
        for (m, block) in z.blocks.iter().enumerate() {
            for c in 0..k {
                let zc = block.channel(c);
                let a = self.forward.blocks[m].channel(c);
                let z0 = self.anchor.blocks[m].channel(c);
                let g = grad.blocks[m].channel_mut(c);
                for i in 0..n {
                    g[i] = inv_g2 * (zc[i] - z0[i]) + (zc[i] - a[i]) + self.beta;
                }
                if let Some(cp) = &self.coupling {
                    let t = cp.next_transform.kernel(c);
                    conv_same_into(zc, t, &mut buf);
                    let b = cp.next_coeffs.blocks[m].channel(c);
                    for (x, y) in buf.iter_mut().zip(b) {
                        *x -= y;
                    }
                    conv_same_adjoint_into(&buf, t, &mut adj);
                    for (gi, ai) in g.iter_mut().zip(&adj) {
                        *gi += ai;
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Closed-form coefficient update when there is no coupling term:
/// entrywise `max(0, (anchor / gamma2 + forward - beta) / (1 / gamma2 + 1))`.
pub fn separable_coeff_update(problem: &CoefficientProblem<'_>) -> Result<CoefficientStack> {
    problem.validate()?;
    if problem.coupling.is_some() {
        return Err(invalid("separable update called on a coupled problem"));
    }
    let inv_g2 = problem.gamma2.recip();
    let weight = 1.0 + inv_g2;
    let mut out = problem.forward.clone();
    for (m, block) in out.blocks.iter_mut().enumerate() {
        let anchor = &problem.anchor.blocks[m].0;
        for (zi, ai) in block.0.iter_mut().zip(anchor.iter()) {
            let u = if inv_g2 == 0.0 { *zi } else { (*zi + inv_g2 * ai) / weight };
            *zi = prox_nonneg_l1(u, problem.beta, weight)?;
        }
    }
    Ok(out)
}

/// Outcome of [`projected_newton_coeffs`] over all `(sample, channel)` blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NewtonReport {
    pub blocks: usize,
    /// Blocks that hit `max_iters` (or stalled) before meeting `grad_tol`.
    pub unconverged: usize,
    pub max_iterations: usize,
    pub total_iterations: usize,
}

impl NewtonReport {
    pub fn converged(&self) -> bool {
        self.unconverged == 0
    }
}

struct BlockOutcome {
    z: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn quad_value(q: &DMatrix<f64>, c: &DVector<f64>, z: &DVector<f64>) -> f64 {
    0.5 * z.dot(&(q * z)) - c.dot(z)
}

/// Projected Newton for `min_{z >= 0} 1/2 z^T Q z - c^T z` with `Q` positive
/// definite. Variables at (or within `active_set_eps` of) zero with positive
/// gradient are held; a Newton step is taken on the rest and projected, with
/// Armijo backtracking along the projection arc. Falls back to a projected
/// gradient step if the Newton step fails the line search.
fn newton_block(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    start: &[f64],
    s: &NewtonSettings,
) -> Result<BlockOutcome> {
    let n = start.len();
    let mut z = DVector::from_iterator(n, start.iter().map(|v| v.max(0.0)));
    let mut fz = quad_value(q, c, &z);
    if !fz.is_finite() {
        return Err(Error::Numerical("non-finite coefficient objective".into()));
    }
    let mut iterations = 0;
    let mut converged = false;
    let mut free = Vec::with_capacity(n);
    while iterations < s.max_iters {
        let g = q * &z - c;
        let kkt_ok = (0..n).all(|i| {
            if z[i] > s.active_set_eps {
                g[i].abs() <= s.grad_tol
            } else {
                g[i] >= -s.grad_tol
            }
        });
        if kkt_ok {
            converged = true;
            break;
        }
        iterations += 1;

        free.clear();
        free.extend((0..n).filter(|&i| !(z[i] <= s.active_set_eps && g[i] > 0.0)));
        let mut direction = DVector::zeros(n);
        if !free.is_empty() {
            let qff = DMatrix::from_fn(free.len(), free.len(), |a, b| q[(free[a], free[b])]);
            let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| -g[i]));
            if let Some(chol) = Cholesky::new(qff) {
                let d = chol.solve(&gf);
                for (a, &i) in free.iter().enumerate() {
                    direction[i] = d[a];
                }
            }
        }

        let accepted = match line_search(q, c, &z, fz, &g, &direction, s)? {
            Some(step) => Some(step),
            None => line_search(q, c, &z, fz, &g, &(-&g), s)?,
        };
        match accepted {
            Some((z_new, f_new)) => {
                let moved = z_new != z;
                z = z_new;
                fz = f_new;
                if !moved {
                    break;
                }
            }
            None => break,
        }
    }
    Ok(BlockOutcome {
        z: z.as_slice().to_vec(),
        iterations,
        converged,
    })
}

fn line_search(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    z: &DVector<f64>,
    fz: f64,
    g: &DVector<f64>,
    d: &DVector<f64>,
    s: &NewtonSettings,
) -> Result<Option<(DVector<f64>, f64)>> {
    if d.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let mut alpha = 1.0;
    for _ in 0..60 {
        let trial = (z + d * alpha).map(|v| v.max(0.0));
        let f = quad_value(q, c, &trial);
        if f.is_nan() {
            return Err(Error::Numerical("non-finite objective in line search".into()));
        }
        let decrease = g.dot(&(&trial - z));
        if decrease < 0.0 && f <= fz + s.armijo_c * decrease {
            return Ok(Some((trial, f)));
        }
        alpha *= s.backtrack_factor;
    }
    Ok(None)
}

/// Coefficient update of an inner layer (or any layer, when `coupling` is
/// `None`), solved block by block. Each `(sample, channel)` block is an
/// independent bound-constrained quadratic program with Hessian
/// `H_k^T H_k + (1 + 1/gamma2) I`, where `H_k` is the convolution matrix of
/// the next layer's kernel `k`.
///
/// Starts from `z0` (projected onto the orthant); every block's objective
/// is non-increasing from there. The result is exactly non-negative.
pub fn projected_newton_coeffs(
    z0: &CoefficientStack,
    problem: &CoefficientProblem<'_>,
    settings: &NewtonSettings,
) -> Result<(CoefficientStack, NewtonReport)> {
    settings.validate()?;
    let (m, n, k) = problem.validate()?;
    problem.check_shape(z0)?;
    let diag = 1.0 + problem.gamma2.recip();

    let hessians: Vec<DMatrix<f64>> = (0..k)
        .map(|c| {
            let base = DMatrix::identity(n, n) * diag;
            match &problem.coupling {
                Some(cp) => {
                    let h = convolution_matrix(cp.next_transform.kernel(c), n)?;
                    Ok(h.transpose() * h + base)
                }
                None => Ok(base),
            }
        })
        .collect::<Result<_>>()?;

    let inv_g2 = problem.gamma2.recip();
    let outcomes: Vec<BlockOutcome> = (0..m * k)
        .into_par_iter()
        .map(|idx| {
            let (s, c) = (idx / k, idx % k);
            let a = problem.forward.blocks[s].channel(c);
            let anchor = problem.anchor.blocks[s].channel(c);
            let mut lin = DVector::from_fn(n, |i, _| {
                let mut v = a[i] - problem.beta;
                if inv_g2 != 0.0 {
                    v += inv_g2 * anchor[i];
                }
                v
            });
            if let Some(cp) = &problem.coupling {
                let mut adj = vec![0.0; n];
                conv_same_adjoint_into(
                    cp.next_coeffs.blocks[s].channel(c),
                    cp.next_transform.kernel(c),
                    &mut adj,
                );
                for (l, v) in lin.iter_mut().zip(adj) {
                    *l += v;
                }
            }
            newton_block(&hessians[c], &lin, z0.blocks[s].channel(c), settings)
        })
        .collect::<Result<_>>()?;

    let mut out = CoefficientStack::zeros(m, n, k);
    let mut report = NewtonReport {
        blocks: m * k,
        ..Default::default()
    };
    for (idx, o) in outcomes.into_iter().enumerate() {
        let (s, c) = (idx / k, idx % k);
        out.blocks[s].channel_mut(c).copy_from_slice(&o.z);
        report.total_iterations += o.iterations;
        report.max_iterations = report.max_iterations.max(o.iterations);
        if !o.converged {
            report.unconverged += 1;
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::ChannelBlock;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_stack(rng: &mut ChaCha8Rng, m: usize, n: usize, k: usize, lo: f64) -> CoefficientStack {
        CoefficientStack {
            blocks: (0..m)
                .map(|_| ChannelBlock(DMatrix::from_fn(n, k, |_, _| rng.random_range(lo..1.0))))
                .collect(),
        }
    }

    #[test]
    fn nonneg_l1_examples() {
        assert_eq!(prox_nonneg_l1(0.0, 0.5, 1.0).unwrap(), 0.0);
        assert_eq!(prox_nonneg_l1(2.0, 0.5, 1.0).unwrap(), 1.5);
        assert_eq!(prox_nonneg_l1(-3.0, 0.0, 2.0).unwrap(), 0.0);
        assert!(prox_nonneg_l1(1.0, -0.1, 1.0).is_err());
        assert!(prox_nonneg_l1(1.0, 0.1, 0.0).is_err());
        assert!(prox_nonneg_l1(1.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn logdet_prox_of_zero() {
        let out = prox_logdet_svd(&DMatrix::zeros(2, 2), 1.0).unwrap();
        for s in out.singular_values().iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logdet_prox_small_lambda_is_identity_map() {
        let y = DMatrix::identity(3, 3) * 3.0;
        let out = prox_logdet_svd(&y, 1e-14).unwrap();
        assert!((out - y).abs().max() < 1e-12);
        assert!(prox_logdet_svd(&DMatrix::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn logdet_prox_satisfies_root_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_matrix(&mut rng, 4, 4);
        let out = prox_logdet_svd(&y, 0.3).unwrap();
        let mut sy: Vec<f64> = y.singular_values().iter().copied().collect();
        let mut so: Vec<f64> = out.singular_values().iter().copied().collect();
        sy.sort_by(f64::total_cmp);
        so.sort_by(f64::total_cmp);
        for (s, x) in sy.iter().zip(&so) {
            assert!((x - s - 0.3 / x).abs() < 1e-10);
        }
    }

    #[test]
    fn jitter_rescues_semidefinite_and_rejects_indefinite() {
        let psd = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky_with_jitter(&psd).is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_with_jitter(&bad), Err(Error::Conditioning(_))));
    }

    #[test]
    fn transform_update_least_squares_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Keep the target well conditioned so the log-det perturbation is tiny.
        let cross = DMatrix::identity(3, 3) * 2.0 + random_matrix(&mut rng, 3, 3) * 0.3;
        let inputs = TransformUpdateInputs {
            gram: DMatrix::identity(3, 3),
            cross: cross.clone(),
            anchor: DMatrix::zeros(3, 3),
            mu: 0.0,
            lambda: 1e-12,
            gamma1: f64::INFINITY,
        };
        let t = update_transform(&inputs).unwrap();
        assert!((t - cross).abs().max() < 1e-9);
    }

    #[test]
    fn transform_update_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let d = random_matrix(&mut rng, 12, 4);
            let inputs = TransformUpdateInputs {
                gram: d.transpose() * &d,
                cross: random_matrix(&mut rng, 4, 4),
                anchor: random_matrix(&mut rng, 4, 4),
                mu: 0.05,
                lambda: 0.2,
                gamma1: 0.7,
            };
            let t = update_transform(&inputs).unwrap();
            let r = inputs.stationarity_residual(&t).unwrap();
            assert!(r.norm() / inputs.linear_term().norm().max(1.0) < 1e-9);
            assert!(t.singular_values().min() > 0.0);
        }
    }

    #[test]
    fn transform_update_rejects_bad_parameters() {
        let base = TransformUpdateInputs {
            gram: DMatrix::identity(2, 2),
            cross: DMatrix::identity(2, 2),
            anchor: DMatrix::identity(2, 2),
            mu: 0.0,
            lambda: 0.1,
            gamma1: 1.0,
        };
        assert!(update_transform(&TransformUpdateInputs { lambda: 0.0, ..base.clone() }).is_err());
        assert!(update_transform(&TransformUpdateInputs { mu: -1.0, ..base.clone() }).is_err());
        assert!(update_transform(&TransformUpdateInputs { gamma1: 0.0, ..base.clone() }).is_err());
        let bad = TransformUpdateInputs {
            gram: DMatrix::from_row_slice(2, 2, &[-5.0, 0.0, 0.0, 1.0]),
            gamma1: f64::INFINITY,
            ..base
        };
        assert!(matches!(update_transform(&bad), Err(Error::Conditioning(_))));
    }

    #[test]
    fn decoupled_newton_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let forward = random_stack(&mut rng, 3, 8, 2, -1.0);
        let anchor = random_stack(&mut rng, 3, 8, 2, 0.0);
        let next = random_stack(&mut rng, 3, 8, 2, 0.0);
        let zero_bank = KernelBank(DMatrix::zeros(2, 2));
        let gamma2 = 0.8;
        let problem = CoefficientProblem {
            forward: &forward,
            anchor: &anchor,
            coupling: Some(Coupling { next_transform: &zero_bank, next_coeffs: &next }),
            beta: 0.0,
            gamma2,
        };
        let (z, report) = projected_newton_coeffs(&anchor, &problem, &NewtonSettings::default()).unwrap();
        assert!(report.converged());
        let inv = 1.0 / gamma2;
        for m in 0..3 {
            for (i, v) in z.blocks[m].0.iter().enumerate() {
                let expected = ((inv * anchor.blocks[m].0[i] + forward.blocks[m].0[i]) / (inv + 1.0)).max(0.0);
                assert!((v - expected).abs() < 1e-10);
            }
        }
        let uncoupled = CoefficientProblem { coupling: None, ..problem };
        let closed = separable_coeff_update(&uncoupled).unwrap();
        for (a, b) in closed.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn huge_beta_zeroes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let forward = random_stack(&mut rng, 2, 8, 2, 0.0);
        let anchor = random_stack(&mut rng, 2, 8, 2, 0.0);
        let next = random_stack(&mut rng, 2, 8, 2, 0.0);
        let bank = KernelBank(random_matrix(&mut rng, 2, 2));
        let problem = CoefficientProblem {
            forward: &forward,
            anchor: &anchor,
            coupling: Some(Coupling { next_transform: &bank, next_coeffs: &next }),
            beta: 1e6,
            gamma2: 1.0,
        };
        let (z, _) = projected_newton_coeffs(&anchor, &problem, &NewtonSettings::default()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn newton_meets_kkt_conditions_and_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = NewtonSettings::default();
        for _ in 0..100 {
            let forward = random_stack(&mut rng, 2, 10, 3, -1.0);
            let anchor = random_stack(&mut rng, 2, 10, 3, 0.0);
            let next = random_stack(&mut rng, 2, 10, 3, 0.0);
            let bank = KernelBank(random_matrix(&mut rng, 3, 3));
            let problem = CoefficientProblem {
                forward: &forward,
                anchor: &anchor,
                coupling: Some(Coupling { next_transform: &bank, next_coeffs: &next }),
                beta: rng.random_range(0.0..0.5),
                gamma2: rng.random_range(0.2..2.0),
            };
            let (z, report) = projected_newton_coeffs(&anchor, &problem, &s).unwrap();
            assert!(report.converged());
            assert!(z.min_entry() >= 0.0);
            assert!(problem.value(&z).unwrap() <= problem.value(&anchor).unwrap());
            let g = problem.gradient(&z).unwrap();
            for (zi, gi) in z.iter().zip(g.iter()) {
                if *zi > s.active_set_eps {
                    assert!(gi.abs() <= 10.0 * s.grad_tol, "free gradient {gi}");
                } else {
                    assert!(*gi >= -10.0 * s.grad_tol, "bound gradient {gi}");
                }
            }
        }
    }

    #[test]
    fn max_iters_returns_best_iterate_with_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let forward = random_stack(&mut rng, 2, 16, 3, -1.0);
        let anchor = random_stack(&mut rng, 2, 16, 3, 0.0);
        let next = random_stack(&mut rng, 2, 16, 3, 0.0);
        let bank = KernelBank(random_matrix(&mut rng, 3, 3) * 3.0);
        let problem = CoefficientProblem {
            forward: &forward,
            anchor: &anchor,
            coupling: Some(Coupling { next_transform: &bank, next_coeffs: &next }),
            beta: 0.1,
            gamma2: 1.0,
        };
        let settings = NewtonSettings { max_iters: 1, grad_tol: 1e-14, ..Default::default() };
        let (z, report) = projected_newton_coeffs(&anchor, &problem, &settings).unwrap();
        assert!(!report.converged());
        assert!(problem.value(&z).unwrap() <= problem.value(&anchor).unwrap());
    }

    #[test]
    fn coefficient_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let forward = random_stack(&mut rng, 2, 6, 2, -1.0);
        let anchor = random_stack(&mut rng, 2, 6, 2, 0.0);
        let next = random_stack(&mut rng, 2, 6, 2, 0.0);
        let bank = KernelBank(random_matrix(&mut rng, 2, 2));
        let problem = CoefficientProblem {
            forward: &forward,
            anchor: &anchor,
            coupling: Some(Coupling { next_transform: &bank, next_coeffs: &next }),
            beta: 0.3,
            gamma2: 0.5,
        };
        let z = random_stack(&mut rng, 2, 6, 2, 0.0);
        let g = problem.gradient(&z).unwrap();
        let h = 1e-6;
        for m in 0..2 {
            for i in 0..12 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp.blocks[m].0[i] += h;
                zm.blocks[m].0[i] -= h;
                let fd = (problem.smooth_value(&zp).unwrap() - problem.smooth_value(&zm).unwrap()) / (2.0 * h);
                let an = g.blocks[m].0[i];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0));
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn nonneg_l1_is_monotone_and_nonexpansive(
                u1 in -10.0f64..10.0,
                u2 in -10.0f64..10.0,
                beta in 0.0f64..5.0,
                w in 0.1f64..5.0,
            ) {
                let p1 = prox_nonneg_l1(u1, beta, w).unwrap();
                let p2 = prox_nonneg_l1(u2, beta, w).unwrap();
                prop_assert!((p1 - p2).abs() <= (u1 - u2).abs() + 1e-15);
                if u1 <= u2 {
                    prop_assert!(p1 <= p2);
                }
            }

            #[test]
            fn transform_update_never_increases_objective(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = random_matrix(&mut rng, 10, 3);
                let anchor = DMatrix::identity(3, 3) + random_matrix(&mut rng, 3, 3) * 0.2;
                let inputs = TransformUpdateInputs {
                    gram: d.transpose() * &d,
                    cross: random_matrix(&mut rng, 3, 3),
                    anchor: anchor.clone(),
                    mu: rng.random_range(0.0..0.5),
                    lambda: rng.random_range(0.01..1.0),
                    gamma1: rng.random_range(0.1..5.0),
                };
                let t = update_transform(&inputs).unwrap();
                prop_assert!(inputs.objective(&t) <= inputs.objective(&anchor) + 1e-12);
            }
        }
    }
}
