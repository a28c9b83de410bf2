//! Train an attention weight net on one batch of a stage-1 model's features
//! and watch the transport loss and per-class weights move.

use ot_reweight::config::ExperimentConfig;
use ot_reweight::data::stream;
use ot_reweight::eval::prepare;
use ot_reweight::model::extract_features;
use ot_reweight::reweight::toy::class_means;
use ot_reweight::reweight::{
    build_meta_distribution, weight_net_forward, weight_net_update, Batch, WeightNetParams,
};
use rand::seq::SliceRandom;

fn main() -> ot_reweight::Result<()> {
    let cfg = ExperimentConfig::from_kv("data.separation=4\ntrain.epochs_stage1=20\n")?;
    let prepared = prepare(&cfg, 0)?;
    let q = build_meta_distribution(&prepared.meta, cfg.q_mode, cfg.q_sample_k, &mut stream(0, 6))?;

    let mut order: Vec<usize> = (0..prepared.train.len()).collect();
    order.shuffle(&mut stream(0, 5));
    let batch = Batch::from_dataset(&prepared.train, &order[..128])?;
    let k = prepared.train.num_classes();
    let rarest = (0..k)
        .rev()
        .find(|c| batch.labels.labels().contains(c))
        .expect("batch is non-empty");

    let mut net = WeightNetParams::attention(cfg.feature_dim, 64, 7)?;
    for step in 0..=200 {
        let update = weight_net_update(&mut net, &batch, &prepared.model, &q, &cfg.cost, &cfg.sinkhorn, 0.1)?;
        if step % 50 == 0 {
            let z = extract_features(&prepared.model, &batch.x)?;
            let w = weight_net_forward(&z, &net)?;
            let means = class_means(w.as_slice(), batch.labels.labels(), k);
            println!(
                "step {step:3}: transport loss {:.4}, mean weight class 0 {:.4}, class {rarest} {:.4}",
                update.ot_loss,
                means[0],
                means[rarest]
            );
        }
    }
    Ok(())
}
