//! Stage-1 cross-entropy training followed by stage-2 training with
//! transport-learned example weights, compared with the baselines.

use ot_reweight::config::{ExperimentConfig, Method};
use ot_reweight::eval::run_experiment;

fn main() -> ot_reweight::Result<()> {
    let text = include_str!("../../../configs/synthetic.txt");
    for method in [Method::Ce, Method::Proportion, Method::OtDirect] {
        let mut cfg = ExperimentConfig::from_kv(text)?;
        cfg.method = method;
        cfg.runs = 2;
        for run in run_experiment(&cfg)? {
            println!(
                "{method:>10} seed {}: balanced accuracy {:.3} -> {:.3}, min recall {:.3} -> {:.3}",
                run.seed,
                run.stage1.balanced_accuracy,
                run.stage2.balanced_accuracy,
                run.stage1.min_recall(),
                run.stage2.min_recall()
            );
        }
    }
    Ok(())
}
