//! Trains on a synthetic Gaussian MIL dataset and reports test AUCs.
//!
//! cargo run --release -p ins-core --example synthetic_run -- [ratio] [epochs] [warmup] [json overrides]

use std::time::Instant;

use ins_core::data::{generate_gaussian_mil, SyntheticConfig};
use ins_core::eval::evaluate;
use ins_core::trainer::{TrainState, TrainingSet};
use ins_core::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let ratio: f64 = args.get(1).map_or(Ok(0.2), |s| s.parse())?;
    let epochs: usize = args.get(2).map_or(Ok(25), |s| s.parse())?;
    let warmup: usize = args.get(3).map_or(Ok(5), |s| s.parse())?;

    let data_cfg = SyntheticConfig { positive_ratio: ratio, ..SyntheticConfig::default() };
    let train = generate_gaussian_mil(&data_cfg)?;
    let test = generate_gaussian_mil(&SyntheticConfig { seed: data_cfg.seed + 1, ..data_cfg })?;
    let mut cfg = serde_json::to_value(TrainConfig { epochs, warmup_epochs: warmup, ..TrainConfig::default() })?;
    // Optional JSON object of config overrides, e.g. '{"use_iwscl":false}'.
    if let Some(patch) = args.get(4) {
        let patch: serde_json::Map<String, serde_json::Value> = serde_json::from_str(patch)?;
        for (k, v) in patch {
            cfg[k] = v;
        }
    }
    let cfg: TrainConfig = serde_json::from_value(cfg)?;

    let truth = train.instance_truth();
    let set = TrainingSet::from_dataset(&train)?;
    let mut state = TrainState::new(&set, &cfg)?;
    let start = Instant::now();
    while state.epoch < cfg.epochs {
        let m = state.run_epoch(&set, truth.as_deref())?;
        let (report, _) = evaluate(&state, &test, false)?;
        println!(
            "epoch {:>2} warmup={} total={:.4} iwscl={:.4} cls={:.4} bc={:.4} pseudo_auc={:.4} test_inst={:.4} test_bag={:.4} skipped={} ({:.1}s)",
            m.epoch,
            m.warmup,
            m.total,
            m.l_iwscl,
            m.l_cls,
            m.l_bc,
            m.pseudo_auc.unwrap_or(f64::NAN),
            report.instance.as_ref().map_or(f64::NAN, |r| r.auc),
            report.bag.auc,
            m.skipped_anchors,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
