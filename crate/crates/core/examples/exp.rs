use refdense::synth::*;
use refdense::trainer::*;
use std::time::Instant;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let which = &args[3];
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0);
    let ds = generate(&SynthSpec::default()).unwrap().dataset;
    let mut cfg = TrainConfig {
        lr,
        epochs,
        seed,
        ..Default::default()
    };
    match which.as_str() {
        "single" => cfg.flags.single_stream_baseline = true,
        "nosub" => {
            cfg.flags.use_sub_labels_ent = false;
            cfg.flags.use_sub_labels_mot = false;
        }
        "nocolv" => cfg.flags.use_colv = false,
        "nocross" => cfg.flags.use_cross_attention = false,
        _ => {}
    }
    if let Some(h) = args.get(5) {
        cfg.model.hidden = h.parse().unwrap();
    }
    if let Some(p) = args.get(6) {
        cfg.lr_decay_period = p.parse().unwrap();
    }
    let t0 = Instant::now();
    let out = train(&ds, &cfg, &mut ()).unwrap();
    let rb = evaluate(&out.best_model, &ds.test).unwrap();
    let rf = evaluate(&out.final_model, &ds.test).unwrap();
    let vals: Vec<String> = out
        .epochs
        .iter()
        .map(|e| format!("{:.3}", e.val_map.unwrap_or(0.0)))
        .collect();
    println!("{which} lr={lr} ep={epochs} seed={seed}: best(ep {:?}) test mAP {:.4} final {:.4} time {:.1}s", out.best_epoch, rb.map.unwrap(), rf.map.unwrap(), t0.elapsed().as_secs_f64());
    println!("  val: {}", vals.join(" "));
}
