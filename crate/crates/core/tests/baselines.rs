use vista::backbone::{ModelConfig, SegmentationModel};
use vista::engine::{init_state, run_tent_baseline};
use vista::phantom::{make_cohort, ContrastTable, PhantomSpec, ShiftKind, ShiftSpec};
use vista::VistaConfig;

fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec { shape: [16, 16, 16], edema_radius: (3.0, 4.0), seed, ..Default::default() }
}

#[test]
fn tent_entropy_is_non_increasing_in_most_trials() {
    let trials = 10;
    let mut monotone = 0;
    for t in 0..trials {
        let model = SegmentationModel::build(ModelConfig { base_channels: 4, seed: t, ..Default::default() }).unwrap();
        let shift = ShiftSpec::default_target(ShiftKind::Both, 0.5, t);
        let case = make_cohort(1, &small_spec(100 + t), &ContrastTable::default(), &shift).unwrap().remove(0);
        let mut st = init_state(&model, &VistaConfig { seed: t, ..Default::default() }).unwrap();
        let res = run_tent_baseline(&mut st, &[(case.id.clone(), case.volume.clone())]).unwrap();
        let losses: Vec<f64> = res[0].steps.iter().map(|s| s.loss_total).collect();
        assert_eq!(losses.len(), 10);
        monotone += losses.windows(2).all(|w| w[1] <= w[0]) as usize;
    }
    assert!(monotone * 10 >= trials as usize * 8, "{monotone} of {trials} trials monotone");
}
