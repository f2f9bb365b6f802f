use fliplab::metrics::accuracy;
use fliplab::policy::closed_form_policy;
use fliplab::{corrupt, fit_generator, make_world, sample_clean, CorruptionConfig, LossKind, PolicyF32, TrainSchedule, Trainer};

#[test]
fn single_precision_training_tracks_double() {
    let world = make_world(40, 6, 2.0, 21).unwrap();
    let clean = sample_clean(&world, 6000, 22).unwrap();
    let test = sample_clean(&world, 2000, 23).unwrap();
    let gen = fit_generator(&clean, Some(&world), &CorruptionConfig { flip_ratio_target: 0.2, seed: 24, ..Default::default() }).unwrap();
    let data = corrupt(&clean, &gen, Some(&world), 25).unwrap();
    let sched = TrainSchedule { n_outer: 40, batch_size: 512, loss_kind: LossKind::Fadpo, seed: 26, ..Default::default() };
    let single = Trainer::<f32>::new(&world, &data, sched.clone()).with_test_set(&test).run().unwrap();
    let double = Trainer::<f64>::new(&world, &data, sched).with_test_set(&test).run().unwrap();
    let (a32, a64) = (single.history[0].accuracy, double.history[0].accuracy);
    assert!(a32 > 0.6 && (a32 - a64).abs() < 0.05, "f32 {a32} vs f64 {a64}");
}

#[test]
fn single_precision_closed_form_ranks_like_the_reward() {
    let world = make_world(30, 5, 3.0, 1).unwrap();
    let pol: PolicyF32 = closed_form_policy(&world, &world.true_reward, 0.1).unwrap();
    let reference = PolicyF32::reference(&world);
    let test = sample_clean(&world, 3000, 2).unwrap();
    let acc = accuracy(&pol, &reference, &test, 0.1f32).unwrap();
    let oracle = test
        .triples
        .iter()
        .filter(|t| world.true_reward[t.prompt_id][t.chosen_id] > world.true_reward[t.prompt_id][t.rejected_id])
        .count() as f64
        / test.len() as f64;
    assert!((acc - oracle).abs() < 1e-3, "{acc} vs {oracle}");
}
