use cdrmt_core::config::RunConfig;
use cdrmt_core::decouple::Lexicon;
use cdrmt_core::model::CdrmtModel;
use cdrmt_core::train::{evaluate_benchmark, toy_benchmark, train_loop};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let track_start: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut config = RunConfig::default();
    config.train.epochs = epochs;
    config.train.lr_core = lr;
    config.train.track_start_epoch = track_start;
    config.train.decay_at = 0.85;
    let dataset = toy_benchmark(config.seed.0);
    let lexicon = Lexicon::default_lexicon();
    let mut model = CdrmtModel::new(config.dims, config.seed.0).unwrap();
    let t0 = Instant::now();
    let outcome = train_loop(&mut model, &dataset, &config, &lexicon).unwrap();
    println!("{} epochs lr={} track_start={}: {:?}", epochs, lr, track_start, t0.elapsed());
    let mut per_epoch: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for line in outcome.loss_log.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let e: usize = cols[0].parse().unwrap();
        let total: f64 = cols[13].parse().unwrap();
        let entry = per_epoch.entry(e).or_insert((0.0, 0));
        entry.0 += total; entry.1 += 1;
    }
    for (e, (sum, n)) in &per_epoch {
        if e % 3 == 0 || *e + 1 == epochs {
            println!("epoch {e}: mean total {:.4}", sum / *n as f64);
        }
    }
    let eval = evaluate_benchmark(&model, &dataset, &config, &lexicon).unwrap();
    println!("eval f1={:.3} hota={:.3}", eval.f1, eval.hota);
    let live: Vec<_> = eval.pairs.iter().filter(|p| !p.vacuous).collect();
    let worst: Vec<String> = live.iter().filter(|p| p.f1 < 0.9)
        .map(|p| format!("s{} `{}` f1={:.2} hota={:.2}", p.scene, p.expression, p.f1, p.hota)).collect();
    println!("{} live pairs, {} below f1 0.9:", live.len(), worst.len());
    for w in worst.iter().take(15) { println!("  {w}"); }
}
