//! Bounded Levenberg–Marquardt least squares on dense residual vectors.
//!
//! Steps are computed from the SVD of the column-scaled Jacobian, so the
//! damped normal equations are never formed explicitly. Parameters may carry
//! box bounds; trial points are projected onto the box.

use nalgebra::{DMatrix, DVector};

/// A residual model `r(x)` with an analytic Jacobian `∂r/∂x`.
pub trait Model {
    fn residual_count(&self) -> usize;
    fn residuals(&self, params: &DVector<f64>, out: &mut DVector<f64>);
    fn jacobian(&self, params: &DVector<f64>, out: &mut DMatrix<f64>);
}

#[derive(Debug, Clone)]
pub struct LevenbergMarquardt {
    pub max_iterations: usize,
    /// Relative reduction of the residual sum of squares below which the fit stops.
    pub ftol: f64,
    /// Relative scaled step length below which the fit stops.
    pub xtol: f64,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

impl Default for LevenbergMarquardt {
    fn default() -> Self {
        Self {
            max_iterations: 400,
            ftol: 1e-15,
            xtol: 1e-14,
            lower: None,
            upper: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub params: DVector<f64>,
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Relative singular-value cutoff used to decide rank.
const RANK_TOL: f64 = 1e-11;

impl LevenbergMarquardt {
    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = Some(lower);
        self.upper = Some(upper);
        self
    }

    fn project(&self, x: &mut DVector<f64>) {
        if let Some(lo) = &self.lower {
            x.zip_apply(lo, |v, l| *v = v.max(l));
        }
        if let Some(hi) = &self.upper {
            x.zip_apply(hi, |v, h| *v = v.min(h));
        }
    }

    pub fn minimize<M: Model>(&self, model: &M, x0: DVector<f64>) -> Solution {
        let m = model.residual_count();
        let n = x0.len();
        let mut x = x0;
        self.project(&mut x);
        let mut r = DVector::zeros(m);
        let mut jac = DMatrix::zeros(m, n);
        model.residuals(&x, &mut r);
        model.jacobian(&x, &mut jac);
        let mut rss = r.norm_squared();
        let mut scale = column_norms(&jac).map(|d| if d > 0.0 { d } else { 1.0 });
        let mut lambda = 1e-3;
        let mut converged = false;
        let mut iterations = 0;
        let mut trial = DVector::zeros(m);

        while iterations < self.max_iterations && !converged {
            iterations += 1;
            if rss == 0.0 || !rss.is_finite() {
                converged = rss == 0.0;
                break;
            }
            for (s, c) in scale.iter_mut().zip(column_norms(&jac).iter()) {
                *s = s.max(*c);
            }
            let scaled = scaled_columns(&jac, &scale);
            let svd = scaled.svd(true, true);
            let u = svd.u.as_ref().expect("svd u");
            let v_t = svd.v_t.as_ref().expect("svd v_t");
            let sv = &svd.singular_values;
            let s_max = sv.max();
            if s_max == 0.0 {
                break;
            }
            let ut_r = u.transpose() * &r;

            let mut accepted = false;
            while !accepted {
                let mu = lambda * s_max * s_max;
                let coeff = DVector::from_iterator(
                    sv.len(),
                    sv.iter()
                        .zip(ut_r.iter())
                        .map(|(&s, &c)| if s > 0.0 { -s * c / (s * s + mu) } else { 0.0 }),
                );
                let step_scaled = v_t.transpose() * coeff;
                let step = step_scaled.component_div(&scale);
                let mut x_new = &x + &step;
                self.project(&mut x_new);
                model.residuals(&x_new, &mut trial);
                let rss_new = trial.norm_squared();
                if rss_new.is_finite() && rss_new <= rss {
                    let actual = (&x_new - &x).component_mul(&scale).norm();
                    let size = x.component_mul(&scale).norm();
                    let reduction = rss - rss_new;
                    x = x_new;
                    std::mem::swap(&mut r, &mut trial);
                    rss = rss_new;
                    model.jacobian(&x, &mut jac);
                    lambda = (lambda / 3.0).max(1e-15);
                    accepted = true;
                    if reduction <= self.ftol * rss || actual <= self.xtol * (size + self.xtol) {
                        converged = true;
                    }
                } else {
                    lambda *= 4.0;
                    if lambda > 1e16 {
                        // No descent direction left at machine precision.
                        converged = true;
                        break;
                    }
                }
            }
        }

        Solution {
            params: x,
            residuals: r,
            jacobian: jac,
            rss,
            iterations,
            converged,
        }
    }
}

fn column_norms(jac: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(jac.ncols(), jac.column_iter().map(|c| c.norm()))
}

fn scaled_columns(jac: &DMatrix<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    let mut out = jac.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col /= scale[j];
    }
    out
}

/// `(JᵀJ)⁻¹` for a Jacobian, or `None` when it is numerically singular.
pub fn inverse_normal_matrix(jac: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (cov, rank) = pseudo_inverse_normal_matrix(jac);
    (rank == jac.ncols()).then_some(cov)
}

/// Moore–Penrose `(JᵀJ)⁺` together with the numerical rank of `J`.
pub fn pseudo_inverse_normal_matrix(jac: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = jac.ncols();
    let scale = column_norms(jac).map(|d| if d > 0.0 { d } else { 1.0 });
    let scaled = scaled_columns(jac, &scale);
    let svd = scaled.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let sv = svd.singular_values;
    let s_max = sv.max();
    let mut inner = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (k, &s) in sv.iter().enumerate() {
        if s > RANK_TOL * s_max && s > 0.0 {
            rank += 1;
            let row = v_t.row(k);
            inner += row.transpose() * row / (s * s);
        }
    }
    for i in 0..n {
        for j in 0..n {
            inner[(i, j)] /= scale[i] * scale[j];
        }
    }
    (inner, rank)
}

/// Standard deviations from the diagonal of a covariance matrix.
pub fn sigmas(cov: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(cov.nrows(), cov.diagonal().iter().map(|v| v.max(0.0).sqrt()))
}

/// First-order variance of `f` given `∂f/∂x` and `cov(x)`.
pub fn propagate(gradient: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    (gradient.transpose() * cov * gradient)[(0, 0)].max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Exponential {
        t: Vec<f64>,
        y: Vec<f64>,
    }

    impl Model for Exponential {
        fn residual_count(&self) -> usize {
            self.t.len()
        }
        fn residuals(&self, p: &DVector<f64>, out: &mut DVector<f64>) {
            for (i, (&t, &y)) in self.t.iter().zip(&self.y).enumerate() {
                out[i] = p[0] * (-p[1] * t).exp() - y;
            }
        }
        fn jacobian(&self, p: &DVector<f64>, out: &mut DMatrix<f64>) {
            for (i, &t) in self.t.iter().enumerate() {
                let e = (-p[1] * t).exp();
                out[(i, 0)] = e;
                out[(i, 1)] = -p[0] * t * e;
            }
        }
    }

    #[test]
    fn recovers_exact_exponential() {
        let t: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let y = t.iter().map(|t| 2.5 * (-1.3 * t).exp()).collect();
        let sol = LevenbergMarquardt::default().minimize(&Exponential { t, y }, DVector::from_vec(vec![1.0, 0.5]));
        assert!(sol.converged);
        assert!((sol.params[0] - 2.5).abs() < 1e-12);
        assert!((sol.params[1] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn respects_bounds() {
        let t: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let y = t.iter().map(|t| 2.5 * (-1.3 * t).exp()).collect();
        let lm = LevenbergMarquardt::default().with_bounds(
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![10.0, 1.0]),
        );
        let sol = lm.minimize(&Exponential { t, y }, DVector::from_vec(vec![1.0, 0.5]));
        assert!(sol.params[1] <= 1.0);
        assert!((sol.params[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_normal_matrix_detected() {
        let jac = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(inverse_normal_matrix(&jac).is_none());
        let (pinv, rank) = pseudo_inverse_normal_matrix(&jac);
        assert_eq!(rank, 1);
        assert!(pinv.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn normal_matrix_inverse_matches_direct() {
        let jac = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 2.0, -1.0, 0.3, 4.0]);
        let direct = (jac.transpose() * &jac).try_inverse().unwrap();
        let ours = inverse_normal_matrix(&jac).unwrap();
        assert!((direct - ours).abs().max() < 1e-12);
    }
}
