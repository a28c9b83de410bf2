//! Run the ablation grid on a short schedule and print the markdown report.

use ot_reweight::config::ExperimentConfig;
use ot_reweight::cost::{CostConfig, CostKind};
use ot_reweight::eval::{run_ablation, write_ablation_outputs};
use ot_reweight::reweight::toy::{maintained_vs_scratch_gap, ToyBatch};

fn main() -> ot_reweight::Result<()> {
    let base = ExperimentConfig::from_kv(
        "runs=1\ndata.separation=4\ntrain.epochs_stage1=20\ntrain.epochs_stage2=5\ntrain.alpha=2\ntrain.beta=10\ntrain.momentum=0.5\n",
    )?;
    let cells = run_ablation(&base)?;
    let label = CostConfig {
        kind: CostKind::Label,
        label_coeff: 1.0,
    };
    let gap = maintained_vs_scratch_gap(&ToyBatch::long_tail(0)?, &label, &base.sinkhorn, 1.0, 500, 2)?;
    let out = std::env::temp_dir().join("otrw-ablation-example");
    write_ablation_outputs(&base, &cells, Some(gap), &out)?;
    print!("{}", std::fs::read_to_string(out.join("report.md"))?);
    Ok(())
}
