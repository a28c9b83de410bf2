//! Entropic optimal transport between a weighted source batch and a target
//! distribution.
//!
//! The solver runs Sinkhorn updates on dual potentials in the log domain, so
//! cost-to-regularization ratios far beyond the `exp` range stay finite. The
//! coupling is parameterized relative to the product measure,
//!
//! ```text
//! T_ij = a_i b_j exp((f_i + g_j - C_ij) / lambda)
//! ```
//!
//! which makes `f` the exact gradient of the regularized transport value
//! `<C, T> + lambda * KL(T || a b^T)` with respect to the source marginal `a`
//! (up to the additive gauge shared by `f` and `g`).

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Sinkhorn solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub lambda: f64,
    /// Maximum number of full (row + column) sweeps.
    pub max_iter: usize,
    /// Threshold on the L1 marginal violation.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn new(lambda: f64, max_iter: usize, tol: f64) -> Result<Self> {
        let cfg = Self {
            lambda,
            max_iter,
            tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::input(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.max_iter == 0 {
            return Err(Error::input("max_iter must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::input(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// A probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal(Vec<f64>);

impl Marginal {
    /// Validates `mass` (entries >= 0, sum within 1e-9 of 1) and renormalizes
    /// it so the stored sum is as close to 1 as floating point allows.
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() {
            return Err(Error::input("marginal must be non-empty"));
        }
        if let Some((i, m)) = mass.iter().enumerate().find(|(_, m)| !(m.is_finite() && **m >= 0.0)) {
            return Err(Error::input(format!("marginal entry {i} is {m}")));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!("marginal sums to {total}, expected 1")));
        }
        Ok(Self(mass.into_iter().map(|m| m / total).collect()))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::input("marginal must be non-empty"));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    /// Normalizes an arbitrary nonnegative vector with positive total.
    pub fn from_unnormalized(mass: &[f64]) -> Result<Self> {
        let total: f64 = mass.iter().sum();
        if !(total > 0.0 && total.is_finite()) || mass.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::input("cannot normalize: need nonnegative entries with positive sum"));
        }
        Ok(Self(mass.iter().map(|m| m / total).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn strictly_positive(&self, name: &str) -> Result<()> {
        match self.0.iter().position(|m| *m <= 0.0) {
            Some(i) => Err(Error::input(format!(
                "{name} has zero mass at index {i}; remove zero-mass atoms before solving"
            ))),
            None => Ok(()),
        }
    }
}

/// Entropic coupling together with its dual potentials.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    /// Source potential, centered so that it sums to zero.
    pub dual_row: Array1<f64>,
    pub dual_col: Array1<f64>,
    /// `<T, C>` of the stored plan.
    pub ot_cost: f64,
    pub iterations: usize,
    /// `||rowsum(T) - a||_1 + ||colsum(T) - b||_1` of the stored plan.
    pub marginal_violation: f64,
    pub converged: bool,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Array1<f64> {
        self.plan.sum_axis(ndarray::Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.plan.sum_axis(ndarray::Axis(0))
    }
}

fn validate_problem(cost: &Array2<f64>, a: &Marginal, b: &Marginal) -> Result<()> {
    let (rows, cols) = cost.dim();
    if rows != a.len() || cols != b.len() {
        return Err(Error::input(format!(
            "cost is {rows}x{cols} but marginals have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if let Some(((i, j), c)) = cost.indexed_iter().find(|(_, c)| !c.is_finite()) {
        return Err(Error::input(format!("cost entry ({i}, {j}) is {c}")));
    }
    if let Some(((i, j), c)) = cost.indexed_iter().find(|(_, c)| **c < 0.0) {
        return Err(Error::input(format!("cost entry ({i}, {j}) is negative ({c})")));
    }
    a.strictly_positive("source marginal")?;
    b.strictly_positive("target marginal")?;
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn assemble_plan(cost: &Array2<f64>, a: &[f64], b: &[f64], f: &[f64], g: &[f64], lambda: f64) -> Array2<f64> {
    Array2::from_shape_fn(cost.dim(), |(i, j)| {
        a[i] * b[j] * ((f[i] + g[j] - cost[[i, j]]) / lambda).exp()
    })
}

fn violation(plan: &Array2<f64>, a: &[f64], b: &[f64]) -> f64 {
    let rows: f64 = plan
        .rows()
        .into_iter()
        .zip(a)
        .map(|(r, ai)| (r.sum() - ai).abs())
        .sum();
    let cols: f64 = plan
        .columns()
        .into_iter()
        .zip(b)
        .map(|(c, bj)| (c.sum() - bj).abs())
        .sum();
    rows + cols
}

/// Solves the entropic transport problem between `a` and `b` under `cost`.
///
/// Stops once the L1 marginal violation drops below `cfg.tol` or after
/// `cfg.max_iter` sweeps; `converged` records which.
pub fn sinkhorn_plan(cost: &Array2<f64>, a: &Marginal, b: &Marginal, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    validate_problem(cost, a, b)?;
    let (rows, cols) = cost.dim();
    let lambda = cfg.lambda;
    let (a, b) = (a.as_slice(), b.as_slice());
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();

    let mut f = vec![0.0; rows];
    let mut g = vec![0.0; cols];
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        iterations += 1;
        for i in 0..rows {
            let row = cost.row(i);
            f[i] = -lambda * log_sum_exp((0..cols).map(|j| log_b[j] + (g[j] - row[j]) / lambda));
        }
        for j in 0..cols {
            let col = cost.column(j);
            g[j] = -lambda * log_sum_exp((0..rows).map(|i| log_a[i] + (f[i] - col[i]) / lambda));
        }
        if violation(&assemble_plan(cost, a, b, &f, &g, lambda), a, b) < cfg.tol {
            break;
        }
    }

    // Fix the gauge: sum(f) = 0. The shift cancels in f_i + g_j.
    let shift = f.iter().sum::<f64>() / rows as f64;
    f.iter_mut().for_each(|x| *x -= shift);
    g.iter_mut().for_each(|x| *x += shift);
    let plan = assemble_plan(cost, a, b, &f, &g, lambda);
    let viol = violation(&plan, a, b);
    let ot_cost = (&plan * cost).sum();

    Ok(TransportPlan {
        plan,
        dual_row: Array1::from(f),
        dual_col: Array1::from(g),
        ot_cost,
        iterations,
        marginal_violation: viol,
        converged: viol < cfg.tol,
    })
}

/// Regularized transport value `<C, T> + lambda * KL(T || a b^T)` of a plan.
///
/// Evaluated from the plan entries alone, independent of the dual potentials.
pub fn regularized_value(cost: &Array2<f64>, plan: &Array2<f64>, a: &Marginal, b: &Marginal, lambda: f64) -> f64 {
    let (a, b) = (a.as_slice(), b.as_slice());
    let mut total = 0.0;
    for ((i, j), t) in plan.indexed_iter() {
        if *t > 0.0 {
            total += t * cost[[i, j]] + lambda * t * (t / (a[i] * b[j])).ln();
        }
    }
    total
}

/// Gradient of the entropic transport cost with respect to the source marginal.
#[derive(Debug, Clone)]
pub struct SourceGradient {
    /// Centered (sums to zero) gradient; only its simplex-tangent part is meaningful.
    pub gradient: Array1<f64>,
    /// False when Sinkhorn hit `max_iter` before reaching `tol`.
    pub converged: bool,
    pub plan: TransportPlan,
}

/// Gradient of the entropic transport cost with respect to `a`, read off the
/// centered source potential of the converged plan.
pub fn grad_ot_wrt_source(cost: &Array2<f64>, a: &Marginal, b: &Marginal, cfg: &SinkhornConfig) -> Result<SourceGradient> {
    let plan = sinkhorn_plan(cost, a, b, cfg)?;
    if !plan.converged {
        log::debug!(
            "sinkhorn stopped after {} sweeps with violation {:.3e}",
            plan.iterations,
            plan.marginal_violation
        );
    }
    Ok(SourceGradient {
        gradient: plan.dual_row.clone(),
        converged: plan.converged,
        plan,
    })
}

/// Central finite-difference estimate of the centered source gradient.
///
/// Component `i` is the directional derivative of [`regularized_value`] along
/// the simplex-tangent direction `e_i - 1/B`, which equals `grad_i - mean(grad)`.
/// Test oracle for [`grad_ot_wrt_source`].
pub fn finite_diff_grad(cost: &Array2<f64>, a: &Marginal, b: &Marginal, cfg: &SinkhornConfig, step: f64) -> Result<Array1<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::input(format!("step must be positive, got {step}")));
    }
    if let Some(i) = a.as_slice().iter().position(|x| *x <= step) {
        return Err(Error::input(format!(
            "source marginal entry {i} is within {step} of the simplex boundary"
        )));
    }
    validate_problem(cost, a, b)?;
    let n = a.len();
    let value_at = |mass: Vec<f64>| -> Result<f64> {
        let m = Marginal(mass);
        let plan = sinkhorn_plan(cost, &m, b, cfg)?;
        Ok(regularized_value(cost, &plan.plan, &m, b, cfg.lambda))
    };
    let mut out = Array1::zeros(n);
    for i in 0..n {
        let shifted = |sign: f64| -> Vec<f64> {
            a.as_slice()
                .iter()
                .enumerate()
                .map(|(k, x)| {
                    let dir = if k == i { 1.0 } else { 0.0 } - 1.0 / n as f64;
                    x + sign * step * dir
                })
                .collect()
        };
        let plus = value_at(shifted(1.0))?;
        let minus = value_at(shifted(-1.0))?;
        out[i] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// Largest absolute difference between `estimate` and `reference`, divided
/// by the largest magnitude in `reference` (or by 1 when that is zero).
pub fn max_relative_error(estimate: &Array1<f64>, reference: &Array1<f64>) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = estimate
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

/// Solution of the unregularized problem with a free source marginal.
#[derive(Debug, Clone)]
pub struct JointMinimum {
    pub a_star: Marginal,
    pub plan: Array2<f64>,
    pub cost: f64,
}

/// Minimizes `<T, C>` jointly over the source marginal and the coupling.
///
/// Every column sends all of its mass to its cheapest row; exact ties split
/// the mass equally.
pub fn joint_min_oracle(cost: &Array2<f64>, b: &Marginal) -> Result<JointMinimum> {
    let (rows, cols) = cost.dim();
    if cols != b.len() {
        return Err(Error::input(format!("cost has {cols} columns but target has {} atoms", b.len())));
    }
    if rows == 0 {
        return Err(Error::input("cost has no rows"));
    }
    if let Some(((i, j), c)) = cost.indexed_iter().find(|(_, c)| !c.is_finite()) {
        return Err(Error::input(format!("cost entry ({i}, {j}) is {c}")));
    }
    let mut plan = Array2::zeros((rows, cols));
    let mut a_star = vec![0.0; rows];
    let mut total = 0.0;
    for (j, bj) in b.as_slice().iter().enumerate() {
        let col = cost.column(j);
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        let ties: Vec<usize> = (0..rows).filter(|&i| col[i] == min).collect();
        let share = bj / ties.len() as f64;
        for i in ties {
            plan[[i, j]] = share;
            a_star[i] += share;
        }
        total += bj * min;
    }
    Ok(JointMinimum {
        a_star: Marginal(a_star),
        plan,
        cost: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Marginal {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        Marginal::from_unnormalized(&raw).unwrap()
    }

    fn random_cost(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..1.0))
    }

    fn tight() -> SinkhornConfig {
        SinkhornConfig::new(0.1, 100_000, 1e-13).unwrap()
    }

    #[test]
    fn symmetric_two_by_two() {
        let c = array![[0.0, 1.0], [1.0, 0.0]];
        let m = Marginal::uniform(2).unwrap();
        let p = sinkhorn_plan(&c, &m, &m, &SinkhornConfig::default()).unwrap();
        assert!((p.plan[[0, 0]] - 0.5).abs() < 1e-4);
        assert!((p.plan[[1, 1]] - 0.5).abs() < 1e-4);
        assert!(p.ot_cost <= 1e-4);
        let ratio = p.plan[[0, 1]] / p.plan[[0, 0]];
        assert!((ratio - (-10.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn zero_cost_gives_product_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_simplex(&mut rng, 5);
        let b = random_simplex(&mut rng, 3);
        let c = Array2::zeros((5, 3));
        let p = sinkhorn_plan(&c, &a, &b, &SinkhornConfig::default()).unwrap();
        for ((i, j), t) in p.plan.indexed_iter() {
            let expected = a.as_slice()[i] * b.as_slice()[j];
            assert!((t - expected).abs() <= 1e-15 * expected.max(1.0), "{t} vs {expected}");
        }
        assert_eq!(p.ot_cost, 0.0);
        assert!(p.converged);
        let g = grad_ot_wrt_source(&c, &a, &b, &SinkhornConfig::default()).unwrap();
        assert!(g.gradient.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn random_instance_beats_independent_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = random_cost(&mut rng, 6, 4);
        let a = random_simplex(&mut rng, 6);
        let b = random_simplex(&mut rng, 4);
        let cfg = SinkhornConfig::new(0.05, 200, 1e-6).unwrap();
        let p = sinkhorn_plan(&c, &a, &b, &cfg).unwrap();
        assert!(p.marginal_violation < 1e-6);
        let independent: f64 = c
            .indexed_iter()
            .map(|((i, j), cij)| cij * a.as_slice()[i] * b.as_slice()[j])
            .sum();
        assert!(p.ot_cost <= independent);
        assert!(p.plan.iter().all(|t| *t > 0.0));
        assert!(p.dual_row.sum().abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Marginal::uniform(2).unwrap();
        let b = Marginal::uniform(3).unwrap();
        let cfg = SinkhornConfig::default();
        assert!(matches!(sinkhorn_plan(&Array2::zeros((3, 3)), &a, &b, &cfg), Err(Error::Input(_))));
        let mut c = Array2::zeros((2, 3));
        c[[1, 2]] = f64::NAN;
        assert!(sinkhorn_plan(&c, &a, &b, &cfg).is_err());
        let zero_mass = Marginal::new(vec![1.0, 0.0]).unwrap();
        let err = sinkhorn_plan(&Array2::zeros((2, 3)), &zero_mass, &b, &cfg).unwrap_err();
        assert!(err.to_string().contains("zero mass"));
        assert!(SinkhornConfig::new(0.0, 10, 1e-6).is_err());
        assert!(SinkhornConfig::new(0.1, 0, 1e-6).is_err());
        assert!(Marginal::new(vec![0.6, 0.6]).is_err());
        assert!(Marginal::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn nonconvergence_is_flagged_not_fatal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_cost(&mut rng, 8, 8);
        let a = random_simplex(&mut rng, 8);
        let b = random_simplex(&mut rng, 8);
        let cfg = SinkhornConfig::new(0.01, 1, 1e-12).unwrap();
        let g = grad_ot_wrt_source(&c, &a, &b, &cfg).unwrap();
        assert!(!g.converged);
        assert_eq!(g.plan.iterations, 1);
    }

    #[test]
    fn row_shift_moves_only_that_gradient_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = random_cost(&mut rng, 5, 3);
        let a = random_simplex(&mut rng, 5);
        let b = random_simplex(&mut rng, 3);
        let shift = 0.37;
        let mut shifted = c.clone();
        shifted.row_mut(2).iter_mut().for_each(|x| *x += shift);
        let g0 = grad_ot_wrt_source(&c, &a, &b, &tight()).unwrap().gradient;
        let g1 = grad_ot_wrt_source(&shifted, &a, &b, &tight()).unwrap().gradient;
        // Gradients are centered, so compare gauge-free differences.
        let n = 5.0;
        for k in 0..5 {
            let expected = if k == 2 { shift * (1.0 - 1.0 / n) } else { -shift / n };
            assert!((g1[k] - g0[k] - expected).abs() < 1e-9, "component {k}");
        }
        for k in [0, 1, 3, 4] {
            assert!(((g1[2] - g1[k]) - (g0[2] - g0[k]) - shift).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_cost(&mut rng, 5, 3);
        let a = random_simplex(&mut rng, 5);
        let b = random_simplex(&mut rng, 3);
        let analytic = grad_ot_wrt_source(&c, &a, &b, &tight()).unwrap().gradient;
        let numeric = finite_diff_grad(&c, &a, &b, &tight(), 1e-5).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn finite_diff_zero_cost_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_simplex(&mut rng, 4);
        let b = random_simplex(&mut rng, 3);
        let z = finite_diff_grad(&Array2::zeros((4, 3)), &a, &b, &tight(), 1e-4).unwrap();
        assert!(z.iter().all(|x| x.abs() < 1e-9));

        let c = random_cost(&mut rng, 4, 3);
        let h = 1e-2;
        let exact = grad_ot_wrt_source(&c, &a, &b, &tight()).unwrap().gradient;
        let coarse = finite_diff_grad(&c, &a, &b, &tight(), h).unwrap();
        let fine = finite_diff_grad(&c, &a, &b, &tight(), h / 2.0).unwrap();
        let e1 = (&coarse - &exact).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let e2 = (&fine - &exact).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        // Second-order scheme: halving the step quarters the error.
        assert!(e2 < e1 / 3.0, "{e1} -> {e2}");
        assert!((&coarse - &fine).iter().all(|x| x.abs() < 10.0 * h * h));
    }

    #[test]
    fn finite_diff_rejects_boundary() {
        let a = Marginal::new(vec![0.999_999, 0.000_001]).unwrap();
        let b = Marginal::uniform(2).unwrap();
        assert!(finite_diff_grad(&Array2::zeros((2, 2)), &a, &b, &tight(), 1e-5).is_err());
    }

    #[test]
    fn joint_min_label_cost_split() {
        // Batch classes [A, A, A, B] against one atom per class.
        let c = array![[0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]];
        let b = Marginal::uniform(2).unwrap();
        let jm = joint_min_oracle(&c, &b).unwrap();
        assert_eq!(jm.a_star.as_slice(), &[1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5]);
        assert_eq!(jm.cost, 0.0);
    }

    #[test]
    fn joint_min_single_row() {
        let c = array![[0.3, 0.9, 0.1]];
        let b = Marginal::new(vec![0.2, 0.5, 0.3]).unwrap();
        let jm = joint_min_oracle(&c, &b).unwrap();
        assert_eq!(jm.a_star.as_slice(), &[1.0]);
        let expected: f64 = c.row(0).iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
        assert!((jm.cost - expected).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn plans_are_feasible(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..20, li in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cost(&mut rng, rows, cols);
            let a = random_simplex(&mut rng, rows);
            let b = random_simplex(&mut rng, cols);
            let lambda = [0.05, 0.1, 0.5][li];
            let plan = sinkhorn_plan(&c, &a, &b, &SinkhornConfig::new(lambda, 2000, 1e-9).unwrap()).unwrap();
            prop_assert!(plan.converged);
            prop_assert!(plan.plan.iter().all(|m| *m >= 0.0));
            prop_assert!(plan.marginal_violation < 1e-9);
            prop_assert!(plan.dual_row.sum().abs() < 1e-9);
        }

        #[test]
        fn joint_minimum_is_a_distribution(seed in any::<u64>(), rows in 1usize..10, cols in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cost(&mut rng, rows, cols);
            let b = random_simplex(&mut rng, cols);
            let best = joint_min_oracle(&c, &b).unwrap();
            prop_assert!((best.a_star.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let plan = sinkhorn_plan(&c, &Marginal::uniform(rows).unwrap(), &b, &SinkhornConfig::default()).unwrap();
            prop_assert!(best.cost <= plan.ot_cost + 1e-12);
        }
    }
}
