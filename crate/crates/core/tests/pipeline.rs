use prunecam::data::{generate_synth, stratified_kfold, SynthSpec};
use prunecam::model::{NetConfig, ResidualNet};
use prunecam::prune::{iterate, schedule_sparsity, FoldModel, LayerGeometry, PruneMasks, PruneSchedule};
use prunecam::train::{Example, TrainConfig};

fn setup() -> (Vec<Example>, prunecam::data::FoldPlan, Vec<FoldModel>) {
    let images = generate_synth(&SynthSpec {
        image_size: 16,
        samples_per_class: [6; 4],
        seed: 2,
        ..SynthSpec::default()
    })
    .unwrap();
    let examples: Vec<Example> = images.iter().map(|i| Example::from_image(i).unwrap()).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let plan = stratified_kfold(&labels, 2, 0).unwrap();
    let cfg = NetConfig {
        stage_channels: vec![8, 16],
        blocks_per_stage: vec![1, 1],
        input_size: 16,
        ..NetConfig::default()
    };
    let models = (0..2)
        .map(|fold| {
            let net = ResidualNet::build(&cfg, fold as u64).unwrap();
            FoldModel {
                fold,
                masks: PruneMasks::all_active(&net),
                net,
                val_acc: 0.25,
                confusion: Default::default(),
            }
        })
        .collect();
    (examples, plan, models)
}

fn schedule(num_steps: usize) -> PruneSchedule {
    PruneSchedule {
        fraction: 0.3,
        num_steps,
        fine_tune: TrainConfig {
            max_epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        },
    }
}

#[test]
fn zero_steps_reports_only_the_start() {
    let (examples, plan, models) = setup();
    let mut calls = 0;
    let reports = iterate(models, 0, &examples, &plan, &schedule(0), |r, _, logs| {
        calls += 1;
        assert!(logs.is_empty());
        assert_eq!(r.overall_sparsity, 0.0);
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 1);
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].step, 0);
    assert_eq!(reports[0].fold_accs, vec![0.25, 0.25]);
}

#[test]
fn steps_follow_schedule_and_keep_pruned_channels_dead() {
    let (examples, plan, models) = setup();
    let geometry = LayerGeometry::of(&models[0].net);
    let expected = schedule_sparsity(&geometry, 0.3, 3);
    let mut previous: Vec<PruneMasks> = models.iter().map(|m| m.masks.clone()).collect();
    let reports = iterate(models, 0, &examples, &plan, &schedule(3), |r, ms, logs| {
        assert_eq!(ms.len(), 2);
        if r.step > 0 {
            assert_eq!(logs.len(), 2);
        }
        for (m, before) in ms.iter().zip(previous.iter_mut()) {
            assert!(m.masks.is_monotone_after(before));
            // fine-tuning must not revive a pruned channel
            let mut copy = m.net.clone();
            m.masks.apply(&mut copy);
            assert_eq!(copy.tensors(), m.net.tensors());
            *before = m.masks.clone();
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(reports.len(), 4);
    for (r, want) in reports.iter().zip(&expected) {
        assert!((r.overall_sparsity - want).abs() < 1e-12, "step {}: {} vs {want}", r.step, r.overall_sparsity);
        assert!(r.per_layer_sparsity.values().all(|v| (0.0..1.0).contains(v)));
    }
}

#[test]
fn rejects_bad_fraction_before_touching_models() {
    let (examples, plan, models) = setup();
    let mut bad = schedule(1);
    bad.fraction = 1.0;
    let err = iterate(models, 0, &examples, &plan, &bad, |_, _, _| panic!("callback ran")).unwrap_err();
    assert!(err.to_string().contains("fraction"), "{err}");
}
