use priorreg::hnn::{make_hnn_dataset, regularizer_points, train_hnn, HamiltonianSpec, HnnRegularizer, RegMode};
use priorreg::oracles::{make_dataset, GridSpec, NoiseSpec, OracleSpec};
use priorreg::priors::PriorSpec;
use priorreg::training::{mse, predict, train, LossWeights, TrainConfig, TrainedModel};

fn short(steps: usize) -> TrainConfig {
    TrainConfig {
        hidden_layers: 2,
        width: 16,
        lr: 1e-3,
        steps,
        seed: 7,
        weight_decay: 0.0,
        eval_every: 50,
    }
}

#[test]
fn regularized_training_lowers_the_loss_and_reloads() {
    let grid = GridSpec::new(0.5, 32, 10).unwrap();
    let data = make_dataset(&OracleSpec::reaction(10.0), &grid, 30, NoiseSpec::new(0.1).unwrap(), 50, 1).unwrap();
    let priors = [PriorSpec::reaction(12.0).unwrap()];
    let m = train(&short(300), &data, &priors, &LossWeights::new(vec![1e-2]).unwrap()).unwrap();
    let first = m.history.first().unwrap().loss.total;
    let last = m.history.last().unwrap().loss.total;
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert_eq!(m.history.last().unwrap().step, 300);
    assert_eq!(m.final_test_mse, mse(&m.params, &data.test).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    m.save(&path).unwrap();
    let back = TrainedModel::load(&path).unwrap();
    let pts: Vec<[f64; 2]> = data.test.iter().take(50).map(|s| s.input).collect();
    assert_eq!(predict(&m.params, &pts).unwrap(), predict(&back.params, &pts).unwrap());
}

#[test]
fn hnn_training_runs_with_and_without_prior() {
    let spec = HamiltonianSpec::mass_spring();
    let ds = make_hnn_dataset(&spec, 4, 1, 2, (0.0, 2.0), 0.1, 0.05, 3).unwrap();
    let train_set = ds.train_samples();
    let plain = train_hnn(&short(100), &train_set, &ds.validation_samples(), None).unwrap();
    let reg = HnnRegularizer {
        spec,
        lambda: 1.0,
        mode: RegMode::Summed,
        points: regularizer_points(&train_set, 20, 3),
    };
    let with = train_hnn(&short(100), &train_set, &ds.validation_samples(), Some(reg)).unwrap();
    assert!(plain.final_test_mse.is_finite() && with.final_test_mse.is_finite());
    assert!(with.history.last().unwrap().loss.prior[0] >= 0.0);
}
