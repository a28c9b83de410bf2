//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! and then asserts the same condition.

use std::fs;
use std::time::Instant;

use ndarray::Array2;
use ot_reweight::cli::{random_problem, run_cli};
use ot_reweight::config::ExperimentConfig;
use ot_reweight::cost::{CostConfig, CostKind, LabelBatch};
use ot_reweight::data::{stream, Dataset, SplitTag};
use ot_reweight::eval::{mean_std, run_ablation, run_experiment};
use ot_reweight::model::{ModelParams, ModelShape};
use ot_reweight::ot::{
    finite_diff_grad, grad_ot_wrt_source, joint_min_oracle, max_relative_error, sinkhorn_plan, Marginal,
    SinkhornConfig,
};
use ot_reweight::reweight::toy::{maintained_vs_scratch_gap, ToyBatch};
use ot_reweight::reweight::{
    build_meta_distribution, step_b_logit_gradient, Batch, QMode, WeightMode, WeightState,
};
use rand::Rng;

const SYNTHETIC: &str = include_str!("../../../configs/synthetic.txt");

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {n} ({name}): {} | {detail}", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn c1_sinkhorn_feasibility() {
    let start = Instant::now();
    let mut rng = stream(1, 0);
    let mut worst = 0.0f64;
    let mut all_converged = true;
    for t in 0..100u64 {
        let rows = rng.random_range(1..=64);
        let cols = rng.random_range(1..=64);
        let lambda = [0.05, 0.1, 0.5][rng.random_range(0..3)];
        let (cost, a, b) = random_problem(rows, cols, 1000 + t).unwrap();
        let cfg = SinkhornConfig::new(lambda, 200, 1e-6).unwrap();
        let plan = sinkhorn_plan(&cost, &a, &b, &cfg).unwrap();
        worst = worst.max(plan.marginal_violation);
        all_converged &= plan.converged;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = all_converged && worst < 1e-6 && secs < 5.0;
    report(1, "sinkhorn feasibility", pass, &format!("worst violation {worst:.2e}, {secs:.2} s"));
    assert!(pass);
}

#[test]
fn c2_gradient_oracle() {
    let mut rng = stream(2, 0);
    let cfg = SinkhornConfig::new(0.1, 100_000, 1e-13).unwrap();
    let mut worst = 0.0f64;
    for t in 0..20u64 {
        let rows = rng.random_range(2..=10);
        let cols = rng.random_range(1..=10);
        let (cost, a, b) = random_problem(rows, cols, 2000 + t).unwrap();
        let analytic = grad_ot_wrt_source(&cost, &a, &b, &cfg).unwrap().gradient;
        let numeric = finite_diff_grad(&cost, &a, &b, &cfg, 1e-6).unwrap();
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    let pass = worst <= 1e-4;
    report(2, "gradient oracle", pass, &format!("max relative error {worst:.2e}"));
    assert!(pass);
}

#[test]
fn c3_closed_form_oracle() {
    let mut rng = stream(3, 0);
    let mut exact = true;
    for _ in 0..50 {
        let rows = rng.random_range(1..=12);
        let cols = rng.random_range(1..=12);
        let cost = Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>());
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.1..1.0)).collect();
        let b = Marginal::from_unnormalized(&raw).unwrap();
        let got = joint_min_oracle(&cost, &b).unwrap();
        let mut brute = vec![0.0; rows];
        let mut total = 0.0;
        for j in 0..cols {
            let mut best = 0;
            for i in 1..rows {
                if cost[[i, j]] < cost[[best, j]] {
                    best = i;
                }
            }
            brute[best] += b.as_slice()[j];
            total += b.as_slice()[j] * cost[[best, j]];
        }
        exact &= got.a_star.as_slice() == brute.as_slice() && got.cost == total;
    }

    let batch = LabelBatch::new(vec![0, 0, 0, 1], 2).unwrap();
    let atoms = LabelBatch::new(vec![0, 1], 2).unwrap();
    let cost = ot_reweight::cost::label_cost(&batch, &atoms).unwrap();
    let star = joint_min_oracle(&cost, &Marginal::uniform(2).unwrap()).unwrap();
    let expected = [1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5];
    let label_case = star.a_star.as_slice() == expected;

    let pass = exact && label_case;
    report(
        3,
        "closed-form oracle",
        pass,
        &format!("50 random costs exact: {exact}; [A,A,A,B] -> {:?}", star.a_star.as_slice()),
    );
    assert!(pass);
}

#[test]
fn c4_toy_weights_per_cost() {
    let start = Instant::now();
    let toy = ToyBatch::long_tail(0).unwrap();
    let sinkhorn = SinkhornConfig::default();
    let run = |kind| {
        let cost = CostConfig { kind, label_coeff: 1.0 };
        let mut logits = vec![0.0; toy.len()];
        toy.optimize(&cost, &sinkhorn, 1.0, 500, &mut logits).unwrap().0
    };

    let label = run(CostKind::Label);
    let label_cost = toy
        .cost(&CostConfig {
            kind: CostKind::Label,
            label_coeff: 1.0,
        })
        .unwrap();
    let star = joint_min_oracle(&label_cost, &toy.target).unwrap();
    let oracle_err = label
        .iter()
        .zip(star.a_star.as_slice())
        .fold(0.0f64, |m, (w, s)| m.max((w - s).abs()));
    let label_spread = toy.within_class_spread(&label);

    let feature = run(CostKind::Feature);
    let feature_spread = toy.within_class_spread(&feature);

    let combined = run(CostKind::Combined);
    let means = toy.class_means(&combined);
    let (head, tail) = (means[0], means[9]);

    let secs = start.elapsed().as_secs_f64();
    let pass = label_spread < 1e-3 && oracle_err < 1e-3 && feature_spread > 1e-3 && tail > head && secs < 30.0;
    report(
        4,
        "toy weights per cost",
        pass,
        &format!(
            "label spread {label_spread:.1e}, oracle error {oracle_err:.1e}; feature spread {feature_spread:.1e}; combined tail {tail:.3e} vs head {head:.3e}; {secs:.1} s"
        ),
    );
    assert!(pass);
}

#[test]
fn c5_classifier_independence() {
    let mut rng = stream(5, 0);
    let (k, dim, n) = (4, 6, 24);
    let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let train = Dataset::new(x.clone(), labels.clone(), k, SplitTag::Train).unwrap();
    let meta = Dataset::new(x, labels, k, SplitTag::Meta).unwrap();
    let q = build_meta_distribution(&meta, QMode::Prototype, 0, &mut stream(5, 6)).unwrap();
    let model = ModelParams::init(&ModelShape::new(dim, k), 5).unwrap();
    let mut state = WeightState::new(n, 1.0, WeightMode::Maintained);
    state
        .logits_mut()
        .iter_mut()
        .for_each(|u| *u = rng.random_range(-1.0..1.0));
    let batch = Batch::from_dataset(&train, &(0..12).collect::<Vec<_>>()).unwrap();
    let cfg = SinkhornConfig::default();

    let mut identical = 0;
    for kind in [CostKind::Feature, CostKind::Combined] {
        let cost = CostConfig { kind, label_coeff: 1.0 };
        let reference = step_b_logit_gradient(&state, &batch, &model, &q, &cost, &cfg).unwrap();
        for _ in 0..5 {
            let mut other = model.clone();
            other
                .classifier
                .weight
                .iter_mut()
                .chain(other.classifier.bias.iter_mut())
                .for_each(|v| *v = rng.random_range(-10.0..10.0));
            let g = step_b_logit_gradient(&state, &batch, &other, &q, &cost, &cfg).unwrap();
            let same = g.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits());
            identical += usize::from(same);
        }
    }
    let pass = identical == 10;
    report(5, "classifier independence", pass, &format!("{identical}/10 trials bitwise identical"));
    assert!(pass);
}

#[test]
fn c6_end_to_end_improvement() {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_kv(SYNTHETIC).unwrap();
    assert_eq!(
        (cfg.data.num_classes, cfg.data.n_head, cfg.data.imbalance_factor, cfg.data.dim, cfg.runs),
        (10, 300, 100.0, 16, 5)
    );
    let runs = run_experiment(&cfg).unwrap();
    let gains: Vec<f64> = runs
        .iter()
        .map(|r| r.stage2.balanced_accuracy - r.stage1.balanced_accuracy)
        .collect();
    let not_worse = gains.iter().filter(|g| **g >= 0.0).count();
    let recall_up = runs
        .iter()
        .filter(|r| r.stage2.min_recall() > r.stage1.min_recall())
        .count();
    let tail_heavy = runs.iter().filter(|r| r.tail_weight_dominates()).count();
    let (mean_gain, _) = mean_std(&gains);
    let secs = start.elapsed().as_secs_f64();
    let pass = not_worse == 5 && mean_gain > 0.0 && recall_up >= 4 && tail_heavy == 5 && secs < 300.0;
    report(
        6,
        "end-to-end improvement",
        pass,
        &format!(
            "mean gain {:.2} pts (target margin 3: {}), >= baseline {not_worse}/5, min recall up {recall_up}/5, tail weight >= head {tail_heavy}/5, {secs:.0} s",
            100.0 * mean_gain,
            if mean_gain >= 0.03 { "met" } else { "not met" }
        ),
    );
    assert!(pass);
}

#[test]
fn c7_ablation_grid() {
    let mut base = ExperimentConfig::from_kv(SYNTHETIC).unwrap();
    base.runs = 2;
    let cells = run_ablation(&base).unwrap();
    let complete = cells.iter().filter(|(_, runs)| runs.len() == 2).count();
    let mut grid = 0;
    for kind in CostKind::ALL {
        for q in QMode::ALL {
            grid += usize::from(cells.iter().any(|(c, _)| {
                c.method.is_ot() && c.cost.kind == kind && c.q_mode == q && c.weights_mode == WeightMode::Maintained
            }));
        }
    }
    let scratch = cells.iter().filter(|(c, _)| c.weights_mode == WeightMode::Scratch).count();

    let toy = ToyBatch::long_tail(0).unwrap();
    let gap_of = |kind| {
        let cost = CostConfig { kind, label_coeff: 1.0 };
        maintained_vs_scratch_gap(&toy, &cost, &SinkhornConfig::default(), 1.0, 500, 2).unwrap()
    };
    let gap = gap_of(CostKind::Label);
    let combined_gap = gap_of(CostKind::Combined);

    let pass = complete == cells.len() && cells.len() >= 11 && grid == 9 && scratch > 0 && gap < 1e-3;
    report(
        7,
        "ablation grid",
        pass,
        &format!(
            "{complete}/{} cells complete, cost x Q grid {grid}/9, {scratch} scratch cells, toy maintained-vs-scratch gap {gap:.1e} (label cost; combined cost, still descending: {combined_gap:.1e})",
            cells.len()
        ),
    );
    assert!(pass);
}

#[test]
fn c8_train_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("synthetic.txt");
    fs::write(&config, SYNTHETIC).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let argv = [
            "otrw",
            "train",
            "--config",
            config.to_str().unwrap(),
            "--method",
            "ot_direct",
            "--cost",
            "combined",
            "--q",
            "prototype",
            "--seed",
            "3",
            "--runs",
            "2",
            "-o",
            out.to_str().unwrap(),
        ];
        assert_eq!(run_cli(argv), 0);
        fs::read(out.join("metrics.csv")).unwrap()
    };
    let first = run("a");
    let second = run("b");
    let pass = first == second && !first.is_empty();
    report(8, "train determinism", pass, &format!("metrics.csv {} bytes, identical: {}", first.len(), first == second));
    assert!(pass);
}
