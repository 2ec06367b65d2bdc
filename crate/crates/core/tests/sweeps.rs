use lightcnn::experiments::{
    group_psd, run_sweep, SeedPolicy, SweepConfig, SweepParameter, METRIC_NAMES,
};
use lightcnn::model::ModelConfig;
use lightcnn::pipeline::{prepare, PrepareOptions};
use lightcnn::synthetic::{generate, SyntheticSpec};
use lightcnn::train::TrainConfig;
use lightcnn::{DatasetSplit, Label};

fn split(channels: usize, seed: u64) -> DatasetSplit {
    let spec = SyntheticSpec {
        subjects: 10,
        epochs_per_subject: 4,
        channels,
        fs: 100.0,
        seed,
        ..SyntheticSpec::default()
    };
    prepare(
        generate(&spec).unwrap(),
        &PrepareOptions {
            seed,
            ..PrepareOptions::default()
        },
    )
    .unwrap()
}

fn sweep(parameter: SweepParameter, values: Vec<usize>, in_channels: usize) -> SweepConfig {
    let mut cfg = SweepConfig::new(parameter, values);
    cfg.base_model_config = ModelConfig::new(in_channels, in_channels, 11, 2);
    cfg.base_train_config = TrainConfig {
        seed: 9,
        ..TrainConfig::default()
    };
    cfg
}

#[test]
fn channel_sweep_accuracy_is_flat_on_easy_data() {
    let data = split(8, 11);
    let report = run_sweep(
        &sweep(SweepParameter::OutChannels, vec![20, 40, 59], 8),
        &data,
    )
    .unwrap();
    assert_eq!(report.points.len(), 3);
    let accs: Vec<f64> = report
        .points
        .iter()
        .map(|p| p.metrics.as_ref().expect("point trained").accuracy)
        .collect();
    let spread = accs.iter().cloned().fold(f64::MIN, f64::max)
        - accs.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.05, "accuracies {accs:?}");
    for (p, v) in report.points.iter().zip([20, 40, 59]) {
        assert_eq!(p.model_config.out_channels, v);
    }
}

#[test]
fn single_value_sweep_normalizes_to_one() {
    let data = split(4, 12);
    let mut cfg = sweep(SweepParameter::KernelSize, vec![13], 4);
    cfg.base_train_config.epochs = 3;
    let report = run_sweep(&cfg, &data).unwrap();
    for name in METRIC_NAMES {
        let column = &report.normalized[name];
        assert_eq!(column.len(), 1);
        if let Some(v) = column[0] {
            assert_eq!(v, 1.0, "{name}");
        }
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("value,"));
}

#[test]
fn fixed_seed_sweeps_repeat_exactly() {
    let data = split(4, 13);
    let mut cfg = sweep(SweepParameter::KernelSize, vec![11, 15, 21], 4);
    cfg.base_train_config.epochs = 4;
    let a = run_sweep(&cfg, &data).unwrap();
    let b = run_sweep(&cfg, &data).unwrap();
    assert_eq!(a, b);
    assert!(a.points.iter().all(|p| p.seed == 9));

    cfg.seed_policy = SeedPolicy::PerValue;
    let c = run_sweep(&cfg, &data).unwrap();
    let seeds: Vec<u64> = c.points.iter().map(|p| p.seed).collect();
    assert_eq!(seeds, vec![9, 10, 11]);
}

#[test]
fn failing_points_are_recorded_not_fatal() {
    let data = split(4, 14);
    let mut cfg = sweep(SweepParameter::KernelSize, vec![11, 13], 4);
    cfg.base_train_config.learning_rate = 1e300;
    cfg.base_train_config.epochs = 2;
    let report = run_sweep(&cfg, &data).unwrap();
    for p in &report.points {
        assert!(p.metrics.is_none());
        assert!(
            p.error.as_deref().unwrap().contains("diverge"),
            "{:?}",
            p.error
        );
    }
    assert!(report.to_csv().contains("NA"));
}

#[test]
fn group_psd_peaks_at_class_frequencies() {
    let data = split(3, 15);
    let all: Vec<_> = data
        .train
        .iter()
        .chain(&data.validation)
        .chain(&data.test)
        .cloned()
        .collect();
    let psd = group_psd(&all, 100.0).unwrap();
    let peak = |label: Label| {
        let g = &psd.groups[&label];
        let i = (0..g.mean.len())
            .max_by(|&a, &b| g.mean[a].total_cmp(&g.mean[b]))
            .unwrap();
        psd.freqs[i]
    };
    assert_eq!(peak(Label::Control), 10.0);
    assert_eq!(peak(Label::Pd), 25.0);
    assert!(psd
        .to_csv()
        .starts_with("freq,mean_Control,sem_Control,mean_PD,sem_PD"));
}
