use mdt3d::detector::{predict, Detector, DetectorConfig};
use mdt3d::evalkit::{default_thresholds, evaluate};
use mdt3d::synthdata::{generate_frame, k_like, w_like, DatasetSpec, Frame};

fn env_f(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn run_stage(label: &str, msbn: bool, mask: bool, ocrl: bool, seed: u64) {
    let mut cfg = DetectorConfig::small();
    cfg.epochs = env_f("EPOCHS", 30.0) as usize;
    cfg.steps_per_epoch = 50;
    cfg.batch_size = 4;
    cfg.lr = env_f("LR", 0.01);
    cfg.seed = seed;
    cfg.msbn_enabled = msbn;
    cfg.mask_enabled = mask;
    cfg.ocrl_enabled = ocrl;
    cfg.n_datasets = 2;
    let specs = [k_like(), w_like()];
    let n_train = env_f("NTRAIN", 200.0) as u64;
    let data: Vec<(DatasetSpec, Vec<Frame>)> = specs
        .iter()
        .map(|s| {
            let frames =
                (0..n_train).map(|i| generate_frame(s, 100 + i).unwrap()).collect();
            (s.clone(), frames)
        })
        .collect();
    let mut det = Detector::new(cfg, &specs).unwrap();
    det.train(&data).unwrap();
    let mut maps = Vec::new();
    for s in &specs {
        let eval: Vec<Frame> =
            (0..30).map(|i| generate_frame(s, 9000 + i).unwrap()).collect();
        let results: Vec<_> = eval
            .iter()
            .enumerate()
            .map(|(i, f)| predict(&det, f, s, i).unwrap())
            .collect();
        let report = evaluate(&results, &eval, &default_thresholds(3), &s.name).unwrap();
        maps.push(report.datasets[0].map_bev.unwrap_or(0.0));
    }
    let mean = (maps[0] + maps[1]) / 2.0;
    println!(
        "{label:10} seed {seed} mAP_BEV k={:.4} w={:.4} mean={:.4}",
        maps[0], maps[1], mean
    );
}

fn main() {
    let seed = env_f("SEED", 0.0) as u64;
    run_stage("baseline", false, false, false, seed);
    run_stage("+msbn", true, false, false, seed);
    run_stage("+mask", true, true, false, seed);
    run_stage("+ocrl", true, true, true, seed);
}
