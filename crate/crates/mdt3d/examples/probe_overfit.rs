use mdt3d::detector::{predict, Detector, DetectorConfig};
use mdt3d::evalkit::{default_thresholds, evaluate};
use mdt3d::synthdata::{generate_frame, k_like, Frame};

fn env_f(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let mut cfg = DetectorConfig::small();
    cfg.epochs = env_f("EPOCHS", 40.0) as usize;
    cfg.steps_per_epoch = 50;
    cfg.batch_size = env_f("BATCH", 4.0) as usize;
    cfg.lr = env_f("LR", 0.02);
    cfg.seed = env_f("SEED", 0.0) as u64;
    let n_train = env_f("NTRAIN", 600.0) as u64;
    let spec = k_like();
    let train: Vec<Frame> =
        (0..n_train).map(|i| generate_frame(&spec, 100 + i).unwrap()).collect();
    let eval: Vec<Frame> = (0..50).map(|i| generate_frame(&spec, 9000 + i).unwrap()).collect();
    let mut det = Detector::new(cfg, std::slice::from_ref(&spec)).unwrap();
    let log = det.train(&[(spec.clone(), train.clone())]).unwrap();
    println!("final det loss {:.4}", log.last().unwrap().det_loss);

    let mut train_results = Vec::new();
    for (i, f) in train.iter().take(50).enumerate() {
        train_results.push(predict(&det, f, &spec, i).unwrap());
    }
    let train_eval: Vec<Frame> = train.iter().take(50).cloned().collect();
    let train_report =
        evaluate(&train_results, &train_eval, &default_thresholds(3), "probe").unwrap();
    println!(
        "TRAIN-SET mAP_BEV {:?} mAP_3D {:?}",
        train_report.datasets[0].map_bev, train_report.datasets[0].map_3d
    );

    let mut results = Vec::new();
    for (i, f) in eval.iter().enumerate() {
        results.push(predict(&det, f, &spec, i).unwrap());
    }
    let report = evaluate(&results, &eval, &default_thresholds(3), "probe").unwrap();
    for d in &report.datasets {
        println!("dataset {} mAP_BEV {:?} mAP_3D {:?}", d.dataset_id, d.map_bev, d.map_3d);
        for c in &d.classes {
            println!(
                "  class {} ap_bev {:?} ap_3d {:?} n_gt {} n_pred {}",
                c.class_id, c.ap_bev, c.ap_3d, c.n_gt, c.n_pred
            );
        }
    }
}
