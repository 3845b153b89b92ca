use dlsia_core::builders::{build_msdnet, MsdConfig};
use dlsia_core::graph::ParamStore;
use dlsia_core::loss::LossCfg;
use dlsia_core::train::{train, DataSet, NullClock, Target, TrainConfig};

#[test]
fn probe_msd() {
    let n = 200usize;
    let samples = dlsia_core::data::gen_shapes(n, 64, 0.1, 808).unwrap();
    let batch = dlsia_core::data::stack_samples(&samples).unwrap();
    let masks = dlsia_core::data::split_pixels(&batch.seg, (0.8, 0.2, 0.0), 17, true).unwrap();
    let spec = build_msdnet(&MsdConfig {
        depth: 20, max_dilation: Some(10), custom_dilations: None,
        width: 4, c_in: 1, c_out: 5,
    }).unwrap();
    println!("params: {}", spec.param_count().unwrap().trainable);
    let store: ParamStore<f32> = spec.init_params(3).unwrap();
    let cfg = TrainConfig {
        epochs: 10, batch_size: 8, learning_rate: 2e-3,
        optimizer: Default::default(), scheduler: Default::default(),
        clip_norm: Some(5.0), early_stop: None,
        loss: LossCfg::Dice { smooth: 1.0 }, seed: 4,
    };
    let data = DataSet { images: &batch.images, target: Target::Labels { labels: &batch.seg, mask: Some(&masks.train) } };
    let val = DataSet { images: &batch.images, target: Target::Labels { labels: &batch.seg, mask: Some(&masks.val) } };
    let t0 = std::time::Instant::now();
    let out = train(&spec, store, &data, &val, &cfg, &NullClock).unwrap();
    for r in &out.history.epochs {
        println!("epoch {} train {:.4} val {:.4} macroF1 {:.4} ({:?})", r.epoch, r.train_loss, r.val_loss, r.metric, t0.elapsed());
    }
}
