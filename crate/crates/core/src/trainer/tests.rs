use ndarray::Array2;

use super::*;
use crate::distill::{ce_loss_grad_into, DistillConfig};
use crate::synthgen::{gen_dataset, SyntheticSpec};

fn small_data(tau: f64, m: usize, n_train: usize, seed: u64) -> (Dataset, Dataset) {
    let spec = SyntheticSpec::new(16, 8, 2, tau, m, n_train, 1000, seed).unwrap();
    gen_dataset(&spec).unwrap()
}

fn run_config(distill: DistillConfig, steps: u64) -> RunConfig {
    RunConfig {
        model: MlpConfig::standard(16, 32, 8),
        distill,
        optimizer: OptimizerConfig::adam(1e-3),
        batch_size: 64,
        max_steps: steps,
        eval_every: 50,
        seed: 11,
        diagnostics_enabled: false,
    }
}

fn plain_inputs<'a>(train: &'a Dataset, valid: &'a Dataset) -> RunInputs<'a> {
    RunInputs {
        train,
        valid,
        teacher: TeacherInputs::default(),
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut opt = Optimizer::new(OptimizerConfig::adam(1e-2), &[1]).unwrap();
    let mut x = [5.0];
    let target = 1.5;
    for _ in 0..10_000 {
        let g = [2.0 * (x[0] - target)];
        opt.update(&mut [&mut x[..]], &[&g[..]]);
        if (x[0] - target).abs() < 1e-6 {
            break;
        }
    }
    assert!((x[0] - target).abs() < 1e-6, "x = {}", x[0]);
}

#[test]
fn adam_first_step_moves_by_lr() {
    // with bias correction the first update is lr * sign(g)
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &[2]).unwrap();
    let mut p = [0.0, 0.0];
    opt.update(&mut [&mut p[..]], &[&[3.0, -0.5][..]]);
    assert!((p[0] + 0.1).abs() < 1e-8);
    assert!((p[1] - 0.1).abs() < 1e-8);
}

#[test]
fn nesterov_matches_hand_computation() {
    let cfg = OptimizerConfig::sgd_nesterov(0.1, 0.9, 0.0);
    let mut opt = Optimizer::new(cfg, &[1]).unwrap();
    let mut p = [1.0];
    opt.update(&mut [&mut p[..]], &[&[1.0][..]]);
    // v = 1, p -= 0.1 * (1 + 0.9)
    assert!((p[0] - 0.81).abs() < 1e-15);
    opt.update(&mut [&mut p[..]], &[&[1.0][..]]);
    // v = 1.9, p -= 0.1 * (1 + 1.71)
    assert!((p[0] - (0.81 - 0.271)).abs() < 1e-15);
}

#[test]
fn schedule_switches_at_step() {
    let cfg = OptimizerConfig::sgd_nesterov(0.1, 0.9, 5e-4).with_schedule(vec![(10, 0.01), (20, 0.001)]);
    assert_eq!(cfg.lr_at(0), 0.1);
    assert_eq!(cfg.lr_at(9), 0.1);
    assert_eq!(cfg.lr_at(10), 0.01);
    assert_eq!(cfg.lr_at(25), 0.001);
    assert!(cfg.clone().with_schedule(vec![(20, 0.1), (10, 0.1)]).validate().is_err());
}

#[test]
fn one_step_means_one_update() {
    let (train_ds, valid) = small_data(0.2, 0, 512, 1);
    let cfg = run_config(DistillConfig::ce(), 1);
    let out = train(&cfg, &plain_inputs(&train_ds, &valid)).unwrap();
    assert_eq!(out.updates, 1);
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.history[0].step, 1);
}

#[test]
fn training_is_deterministic() {
    let (train_ds, valid) = small_data(0.2, 0, 512, 2);
    let cfg = run_config(DistillConfig::ls(0.3), 60);
    let a = train(&cfg, &plain_inputs(&train_ds, &valid)).unwrap();
    let b = train(&cfg, &plain_inputs(&train_ds, &valid)).unwrap();
    assert_eq!(a.last, b.last);
    assert_eq!(a.history, b.history);
}

#[test]
fn kd_with_zero_weight_is_ce_bit_for_bit() {
    let (train_ds, valid) = small_data(0.2, 0, 512, 3);
    let teacher = MlpParams::init(MlpConfig::standard(16, 32, 8), &SeededRng::new(99)).unwrap();
    let cache = precompute_teacher(&teacher, &train_ds, CacheKind::Full).unwrap();
    let ce = train(&run_config(DistillConfig::ce(), 40), &plain_inputs(&train_ds, &valid)).unwrap();
    let kd_inputs = RunInputs {
        train: &train_ds,
        valid: &valid,
        teacher: TeacherInputs {
            cache: Some(&cache),
            logit_weights: None,
        },
    };
    let kd = train(&run_config(DistillConfig::kd(0.0, 4.0), 40), &kd_inputs).unwrap();
    assert_eq!(ce.last, kd.last);
}

#[test]
fn ce_loss_decreases_early() {
    let (train_ds, valid) = small_data(0.0, 0, 4096, 4);
    let mut cfg = run_config(DistillConfig::ce(), 100);
    cfg.eval_every = 10;
    let out = train(&cfg, &plain_inputs(&train_ds, &valid)).unwrap();
    let xs: Vec<f64> = out.history.iter().map(|m| m.step as f64).collect();
    let ys: Vec<f64> = out.history.iter().map(|m| m.train_loss).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 10.0, ys.iter().sum::<f64>() / 10.0);
    let slope: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!(slope < 0.0, "slope {slope}");
}

#[test]
fn best_checkpoint_tracks_max_accuracy() {
    let (train_ds, valid) = small_data(0.2, 0, 1024, 5);
    let mut cfg = run_config(DistillConfig::ce(), 200);
    cfg.eval_every = 20;
    let out = train(&cfg, &plain_inputs(&train_ds, &valid)).unwrap();
    let max = out.history.iter().map(|m| m.valid_top1).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_accuracy, max);
    let first = out.history.iter().find(|m| m.valid_top1 == max).unwrap();
    assert_eq!(out.best_step, first.step);
    assert_eq!(evaluate(&out.best, &valid).unwrap(), max);
    assert!(out.history.windows(2).all(|w| w[1].best_so_far >= w[0].best_so_far));
}

#[test]
fn accuracy_of_constant_predictor() {
    // zero weights and zero logit bias give all-equal logits, so argmax is class 0
    let (_, valid) = small_data(0.2, 0, 16, 6);
    let params = MlpParams::zeros(MlpConfig::standard(16, 32, 8)).unwrap();
    let expected = valid.labels.iter().filter(|&&t| t == 0).count() as f64 / valid.len() as f64;
    assert_eq!(evaluate(&params, &valid).unwrap(), expected);
}

#[test]
fn empty_dataset_is_an_error() {
    let (_, valid) = small_data(0.2, 0, 16, 7);
    let empty = Dataset::new(8, 2, 0.2, 0, Split::Valid, Array2::zeros((0, 16)), vec![]).unwrap();
    let params = MlpParams::init(MlpConfig::standard(16, 32, 8), &SeededRng::new(0)).unwrap();
    assert!(evaluate(&params, &empty).is_err());
    assert!(evaluate(&params, &valid).is_ok());
}

#[test]
fn chunked_prediction_matches_single_pass() {
    let (train_ds, _) = small_data(0.2, 0, 2500, 8);
    let params = MlpParams::init(MlpConfig::standard(16, 32, 8), &SeededRng::new(1)).unwrap();
    let chunked = predict_logits(&params, &train_ds).unwrap();
    let whole = forward(&params, train_ds.features.view(), Mode::Eval).unwrap().z;
    let diff = (&chunked - &whole).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-12, "max diff {diff}");
}

#[test]
fn precompute_kinds_agree() {
    let (train_ds, _) = small_data(0.4, 0, 300, 9);
    let teacher = MlpParams::init(MlpConfig::standard(16, 32, 8), &SeededRng::new(2)).unwrap();
    let full = precompute_teacher(&teacher, &train_ds, CacheKind::Full).unwrap();
    let pt = precompute_teacher(&teacher, &train_ds, CacheKind::Pt).unwrap();
    let top = precompute_teacher(&teacher, &train_ds, CacheKind::TopK(3)).unwrap();
    for i in 0..train_ds.len() {
        let TeacherSignal::Full(p) = &full.signals[i] else { panic!() };
        let TeacherSignal::Pt(v) = pt.signals[i] else { panic!() };
        let TeacherSignal::TopK(pairs) = &top.signals[i] else { panic!() };
        assert_eq!(v, p[train_ds.labels[i] as usize]);
        assert_eq!(pairs, &top_k_pairs(p, 3).unwrap());
    }
}

#[test]
fn missing_teacher_is_a_config_error() {
    let (train_ds, valid) = small_data(0.2, 0, 64, 10);
    let err = train(&run_config(DistillConfig::kd(0.7, 3.0), 5), &plain_inputs(&train_ds, &valid));
    assert!(matches!(err, Err(Error::Config(_))));
    let err = train(&run_config(DistillConfig::kd_sim(0.7, 0.5, 0.5), 5), &plain_inputs(&train_ds, &valid));
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let (train_ds, valid) = small_data(0.2, 0, 256, 11);
    let mut cfg = run_config(DistillConfig::ce(), 500);
    cfg.optimizer = OptimizerConfig::sgd_nesterov(1e9, 0.9, 0.0);
    cfg.model.normalize_logits = false;
    let err = train(&cfg, &plain_inputs(&train_ds, &valid));
    assert!(matches!(err, Err(Error::Diverged { .. })), "{err:?}");
}

#[test]
fn metrics_csv_has_header_and_rows() {
    let history = vec![Metrics {
        step: 10,
        train_loss: 1.5,
        valid_top1: 0.25,
        best_so_far: 0.25,
    }];
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &history).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text, "step,train_loss,valid_top1,best_so_far\n10,1.5,0.25,0.25\n");
}

#[test]
fn ce_gradient_used_in_loop_sums_to_zero() {
    let mut g = [0.0; 4];
    ce_loss_grad_into(2, &[0.3, -1.0, 2.0, 0.1], &mut g);
    assert!(g.iter().sum::<f64>().abs() < 1e-15);
}

#[test]
#[ignore = "slow: ~20K steps"]
fn ce_fits_separable_data() {
    let (train_ds, valid) = small_data(0.0, 0, 20_000, 12);
    let mut cfg = run_config(DistillConfig::ce(), 20_000);
    cfg.eval_every = 1000;
    let out = train(&cfg, &plain_inputs(&train_ds, &valid)).unwrap();
    assert!(out.best_accuracy > 0.95, "accuracy {}", out.best_accuracy);
}
