//! Solve a small entropic transport problem, inspect the plan and compare
//! the source-marginal gradient with finite differences.

use ndarray::array;
use ot_reweight::ot::{
    finite_diff_grad, grad_ot_wrt_source, joint_min_oracle, max_relative_error, sinkhorn_plan, Marginal,
    SinkhornConfig,
};

fn main() -> ot_reweight::Result<()> {
    let cost = array![[0.0, 1.0, 0.8], [1.0, 0.0, 0.6], [0.9, 0.7, 0.1], [0.2, 0.9, 1.0]];
    let a = Marginal::new(vec![0.4, 0.3, 0.2, 0.1])?;
    let b = Marginal::uniform(3)?;

    let cfg = SinkhornConfig::new(0.05, 200, 1e-9)?;
    let plan = sinkhorn_plan(&cost, &a, &b, &cfg)?;
    println!("plan after {} iterations (violation {:.2e}):", plan.iterations, plan.marginal_violation);
    for row in plan.plan.rows() {
        let cells: Vec<String> = row.iter().map(|m| format!("{m:.4}")).collect();
        println!("  {}", cells.join("  "));
    }
    println!("transport cost <C, T> = {:.4}", plan.ot_cost);

    let tight = SinkhornConfig::new(0.05, 100_000, 1e-13)?;
    let grad = grad_ot_wrt_source(&cost, &a, &b, &tight)?.gradient;
    let numeric = finite_diff_grad(&cost, &a, &b, &tight, 1e-6)?;
    println!("gradient wrt a:      {grad:.5}");
    println!("finite differences:  {numeric:.5}");
    println!("max relative error:  {:.2e}", max_relative_error(&grad, &numeric));

    let best = joint_min_oracle(&cost, &b)?;
    println!("best source marginal without regularization: {:?}", best.a_star.as_slice());
    Ok(())
}
