//! Weights learned on a fixed 10-class batch (10, 9, ..., 1 examples) under
//! each cost kind, printed per class.

use ot_reweight::cost::{CostConfig, CostKind};
use ot_reweight::ot::SinkhornConfig;
use ot_reweight::reweight::toy::ToyBatch;

fn main() -> ot_reweight::Result<()> {
    let toy = ToyBatch::long_tail(0)?;
    let sinkhorn = SinkhornConfig::default();
    for kind in CostKind::ALL {
        let cost = CostConfig { kind, label_coeff: 1.0 };
        let mut logits = vec![0.0; toy.len()];
        let (weights, update) = toy.optimize(&cost, &sinkhorn, 1.0, 500, &mut logits)?;
        println!(
            "{kind}: transport loss {:.4}, largest within-class spread {:.2e}",
            update.ot_loss,
            toy.within_class_spread(&weights)
        );
        for (class, mean) in toy.class_means(&weights).iter().enumerate() {
            let n = 10 - class;
            println!("  class {class} ({n:2} examples): mean weight {mean:.4}, class total {:.4}", mean * n as f64);
        }
    }
    Ok(())
}
