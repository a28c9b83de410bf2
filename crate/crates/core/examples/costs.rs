//! The three cost kinds between a batch and class prototypes.

use ndarray::array;
use ot_reweight::cost::{build_cost, CostConfig, CostKind, FeatureBatch, LabelBatch};

fn main() -> ot_reweight::Result<()> {
    let features = FeatureBatch::new(array![[1.0, 0.1], [0.9, -0.2], [0.1, 1.0], [-0.7, 0.7]])?;
    let labels = LabelBatch::new(vec![0, 0, 1, 1], 2)?;
    let prototypes = FeatureBatch::new(array![[1.0, 0.0], [0.0, 1.0]])?;
    let proto_labels = LabelBatch::new(vec![0, 1], 2)?;

    for kind in CostKind::ALL {
        let cfg = CostConfig { kind, label_coeff: 1.0 };
        let c = build_cost(&cfg, Some(&features), &labels, Some(&prototypes), &proto_labels)?;
        println!("{kind} cost (rows: batch examples, columns: class prototypes)");
        for row in c.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            println!("  {}", cells.join("  "));
        }
    }
    Ok(())
}
