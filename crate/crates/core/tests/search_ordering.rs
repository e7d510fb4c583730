use tada_core::search::CalibrationSet;
use tada_core::{score_plan, BitWidth, PrecisionPlan, ToyConfig, ToyModel, WeightSpec};

#[test]
fn eight_bit_scores_no_worse_than_two_bit() {
    let all8 = PrecisionPlan::uniform(4, BitWidth::Eight);
    let all2 = PrecisionPlan::uniform(4, BitWidth::Two);
    let mut wins = 0;
    for seed in 0..100u64 {
        let model = ToyModel::synthetic(ToyConfig::toy(), &WeightSpec::new(seed)).unwrap();
        let calib = CalibrationSet::sampled(&model, seed ^ 0x5eed, 8, 96).unwrap();
        let s8 = score_plan(&model, &all8, &calib).unwrap();
        let s2 = score_plan(&model, &all2, &calib).unwrap();
        wins += (s8 <= s2) as usize;
    }
    assert!(wins >= 95, "all-8 scored no worse in only {wins}/100 seeds");
}
