use segmatch::consistency::{Variant, VariantConfig};
use segmatch::data::synth_items;
use segmatch::tensor::{ImageTensor, LabelMask};
use segmatch::train::{init_model, run_training, TrainConfig, TrainData, TrainOutputs};

#[test]
fn supervised_epoch_loss_keeps_falling() {
    let items = synth_items(520, 64, 3, 1000).unwrap();
    let labeled: Vec<(ImageTensor, LabelMask)> = items[..8].iter().map(|s| (s.image.clone(), s.mask.clone())).collect();
    let unlabeled: Vec<ImageTensor> = items[8..].iter().map(|s| s.image.clone()).collect();
    let cfg = TrainConfig {
        variant: VariantConfig::preset(Variant::SupervisedOnly),
        train_size: 32,
        ..TrainConfig::default()
    };
    let mut model = init_model(&cfg).unwrap();
    let data = TrainData {
        labeled: &labeled,
        unlabeled: &unlabeled,
    };
    let report = run_training(&cfg, &data, &mut model, &TrainOutputs::default()).unwrap();

    let mut epochs = vec![(0.0, 0usize); cfg.total_epochs];
    for r in &report.records {
        epochs[r.epoch].0 += r.loss_s;
        epochs[r.epoch].1 += 1;
    }
    let means: Vec<f64> = epochs.iter().map(|(s, n)| s / *n as f64).collect();
    let falling = means.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(
        falling * 10 >= (means.len() - 1) * 9,
        "{falling} of {} epoch pairs decrease: {means:?}",
        means.len() - 1
    );
}
