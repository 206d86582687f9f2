use ferfuse::bench::median;
use ferfuse::checkpoint::{load_checkpoint, save_checkpoint};
use ferfuse::losses::LossWeights;
use ferfuse::model::{Ablation, Model, ModelConfig, ModelInput};
use ferfuse::synth::{self, DatasetProfile, Split};
use ferfuse::trainer::{evaluate, occlusion_sweep, prepare, Classifier, TrainConfig, Trainer};
use ferfuse::{Error, Result, Tape};

fn tiny_profile(seed: u64) -> DatasetProfile {
    DatasetProfile::separable_pair(20, 10, ModelConfig::tiny().grid, seed)
}

fn tiny_trainer(seed: u64, cfg: TrainConfig, ablation: Ablation) -> Trainer<Model> {
    let profile = tiny_profile(seed);
    let model = Model::new(ModelConfig::tiny(), ablation, 2, cfg.init_seed()).unwrap();
    let train = synth::build_split(&profile, Split::Train, None).unwrap();
    let val = synth::build_split(&profile, Split::Val, None).unwrap();
    Trainer::new(model, cfg, train, val).unwrap()
}

fn cfg(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        seed,
        steps,
        batch_size: 8,
        learning_rate: 1e-3,
        val_every: steps.max(1),
        ..TrainConfig::default()
    }
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn separable_pair_loss_drops() {
    let mut ratios = Vec::new();
    for seed in 0..3 {
        let (_, _, report) = tiny_trainer(seed, cfg(seed, 200), Ablation::default()).run().unwrap();
        let l = &report.step_losses;
        ratios.push(window_mean(&l[190..200]) / window_mean(&l[0..10]));
    }
    let m = median(&ratios);
    assert!(m < 0.5, "loss ratios {ratios:?}");
}

#[test]
fn runs_are_bitwise_repeatable() {
    let a = tiny_trainer(4, cfg(4, 15), Ablation::default()).run().unwrap();
    let b = tiny_trainer(4, cfg(4, 15), Ablation::default()).run().unwrap();
    assert_eq!(a.0.params.flatten(), b.0.params.flatten());
    assert_eq!(a.2, b.2);
    let c = tiny_trainer(5, cfg(5, 15), Ablation::default()).run().unwrap();
    assert_ne!(a.0.params.flatten(), c.0.params.flatten());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let t = tiny_trainer(1, TrainConfig { learning_rate: 0.0, ..cfg(1, 5) }, Ablation::default());
    let before = t.net.params.flatten();
    let (net, adam, _) = t.run().unwrap();
    assert_eq!(net.params.flatten(), before);
    assert_eq!(adam.t, 5);
}

#[test]
fn dropped_reintegration_leaves_gates_untouched() {
    let ab = Ablation {
        no_reintegration: true,
        ..Ablation::default()
    };
    let t = tiny_trainer(2, cfg(2, 1), ab);
    let gates = t.net.gates();
    let profile = tiny_profile(2);
    let s = synth::generate_scene(0, 99, &profile).unwrap();
    let input = ModelInput::from_scene(&s, t.net.config.heatmap_sigma).unwrap();
    let mut tape = Tape::new();
    let b = t.net.params.bind(&mut tape);
    let out = t.net.forward_on(&mut tape, &b, &input).unwrap();
    let loss = tape.cross_entropy(out.logits, 0).unwrap();
    let grads = tape.backward(loss).unwrap();
    for &g in &gates {
        if let Some(d) = grads.get(b.get(g)) {
            assert!(d.iter().all(|&v| v == 0.0));
        }
    }
    let before: Vec<f64> = gates.iter().map(|&g| t.net.params.get(g).data()[0]).collect();
    let (net, _, _) = t.run().unwrap();
    let after: Vec<f64> = gates.iter().map(|&g| net.params.get(g).data()[0]).collect();
    assert_eq!(before, after);
    assert!(after.iter().all(|&v| v == 0.0));
}

#[test]
fn checkpoint_reload_reproduces_metrics() {
    let c = cfg(3, 10);
    let (model, adam, _) = tiny_trainer(3, c.clone(), Ablation::default()).run().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.orsc");
    save_checkpoint(&path, &model.params, &adam).unwrap();
    let mut fresh = Model::new(ModelConfig::tiny(), Ablation::default(), 2, 12345).unwrap();
    let restored = load_checkpoint(&path, &mut fresh.params).unwrap();
    assert_eq!(restored.t, adam.t);
    let val = prepare(&synth::build_split(&tiny_profile(3), Split::Val, None).unwrap(), 1.0).unwrap();
    let w = LossWeights::default();
    assert_eq!(evaluate(&model, &val, w).unwrap(), evaluate(&fresh, &val, w).unwrap());
}

#[test]
fn confusion_rows_match_class_counts() {
    let (model, _, report) = tiny_trainer(6, cfg(6, 5), Ablation::default()).run().unwrap();
    let m = report.final_metrics().unwrap();
    let counts = tiny_profile(6).val_counts;
    for (row, &n) in m.confusion.iter().zip(&counts) {
        assert_eq!(row.iter().sum::<u64>(), n as u64);
    }
    assert_eq!(model.num_classes, m.per_class_accuracy.len());
}

#[test]
fn sweep_matches_evaluate_and_keeps_order() {
    let (model, _, _) = tiny_trainer(7, cfg(7, 5), Ablation::default()).run().unwrap();
    let profile = tiny_profile(7);
    let w = LossWeights::default();
    let sigma = model.config.heatmap_sigma;
    let clean = evaluate(&model, &prepare(&synth::build_split(&profile, Split::Val, None).unwrap(), sigma).unwrap(), w).unwrap();
    let rows = occlusion_sweep(&model, &profile, &[0.3, 0.0, 0.1], sigma, w).unwrap();
    let order: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    assert_eq!(order, vec![0.3, 0.0, 0.1]);
    assert_eq!(rows[1].metrics, clean);
}

struct Constant;

impl Classifier for Constant {
    fn num_classes(&self) -> usize {
        2
    }

    fn logits(&self, _: &ModelInput) -> Result<Vec<f64>> {
        Ok(vec![0.3, -0.2])
    }
}

#[test]
fn constant_predictor_is_flat_across_ratios() {
    let rows = occlusion_sweep(&Constant, &tiny_profile(8), &[0.0, 0.1, 0.2, 0.3], 1.0, LossWeights::default()).unwrap();
    for r in &rows {
        assert_eq!(r.metrics, rows[0].metrics);
    }
}

#[test]
fn nan_parameter_aborts_with_diverged() {
    let mut t = tiny_trainer(9, cfg(9, 3), Ablation::default());
    let id = t.net.params.id("head.weight").or_else(|| t.net.params.ids().last()).unwrap();
    t.net.params.get_mut(id).data_mut()[0] = f64::NAN;
    match t.step() {
        Err(Error::Diverged { step, batch_seed, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(batch_seed, t.batch_seed(0));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
