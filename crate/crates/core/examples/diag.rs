use cdrmt_core::config::RunConfig;
use cdrmt_core::decouple::Lexicon;
use cdrmt_core::encode::embed_scene;
use cdrmt_core::model::{encode_expression, CdrmtModel};
use cdrmt_core::tensor::Graph;
use cdrmt_core::train::{toy_benchmark, train_loop};

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut config = RunConfig::default();
    config.train.epochs = epochs;
    config.train.decay_at = 0.9;
    config.train.track_start_epoch = 99;
    let dataset = toy_benchmark(config.seed.0);
    let lexicon = Lexicon::default_lexicon();
    let mut model = CdrmtModel::new(config.dims, config.seed.0).unwrap();
    let outcome = train_loop(&mut model, &dataset, &config, &lexicon).unwrap();
    // component means over last epoch
    let mut sums = [0.0f64; 10];
    let mut n = 0usize;
    for line in outcome.loss_log.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let e: usize = cols[0].parse().unwrap();
        if e + 1 == epochs {
            for k in 0..10 {
                sums[k] += cols[4 + k].parse::<f64>().unwrap();
            }
            n += 1;
        }
    }
    let names = ["det_cls","det_l1","det_giou","det_ref","tra_cls","tra_l1","tra_giou","tra_ref","struct","total"];
    println!("last-epoch component means ({n} steps):");
    for (nm, s) in names.iter().zip(&sums) {
        println!("  {nm}: {:.4}", s / n as f64);
    }
    // inspect one frame's outputs
    let frames = &dataset.scenes[0];
    let expr = encode_expression("cars", &lexicon, &model.dims, config.seed.0).unwrap();
    let visual = embed_scene(&frames[5], 8, 8, 16, config.seed.0).unwrap();
    let mut g = Graph::new();
    let fw = model.forward_frame(&mut g, &visual, &expr, &[], &config.injection).unwrap();
    let cls = g.value(fw.heads.class);
    let rf = g.value(fw.heads.referring);
    let bx = g.value(fw.heads.boxes);
    println!("frame 5 of scene 0, expr `cars` ({} gt objects, cars: {})",
        frames[5].objects.len(),
        frames[5].objects.iter().filter(|o| matches!(o.cat, cdrmt_core::scene::Category::Car)).count());
    for i in 0..cls.rows() {
        println!("  q{i}: cls={:.3} ref={:.3} box=[{:.2},{:.2},{:.2},{:.2}]",
            cls.get(i,0), rf.get(i,0), bx.get(i,0), bx.get(i,1), bx.get(i,2), bx.get(i,3));
    }
    for o in &frames[5].objects {
        println!("  gt {}: {:?} {} box=[{:.2},{:.2},{:.2},{:.2}] state={:?}", o.id, o.cat, o.color, o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3], o.state);
    }
}
