//! Scratch introspection: decoded candidates vs ground truth on one frame.
//! Usage: probe <checkpoint-stem> <scenario-seed> <frame> [--empty]

use mcmot::decoder::{denormalize_point, newborn_queries, sample_multicam};
use mcmot::sim::{ScenarioConfig, SpawnConfig};
use mcmot::tensor::{checkpoint, Tensor};
use mcmot::tracker::train::{init_params, prepare_scenario};
use mcmot::tracker::{forward_frame, TrackerConfig, TrackerState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stem = args.get(1).expect("usage: probe <stem> <seed> <frame>");
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let frame: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
    let empty = args.iter().any(|a| a == "--empty");

    let tracker = TrackerConfig::default();
    let fresh = init_params(&tracker, 0).unwrap();
    let params = init_params(&tracker, 0).unwrap();
    checkpoint::load_into(std::path::Path::new(stem), &params.named()).unwrap();

    let mut cfg = ScenarioConfig { seed, ..ScenarioConfig::default() };
    if empty {
        cfg.spawn = SpawnConfig { count: 0, ..cfg.spawn };
    }
    let sc = prepare_scenario(&cfg).unwrap();
    let ctx = &sc.contexts[frame];

    for (label, p) in [("init", &fresh), ("trained", &params)] {
        let (_, _, ref_logits) = newborn_queries(p);
        println!("{label} anchors (meters):");
        for i in 0..ref_logits.shape()[0] {
            let m = denormalize_point(&ctx.bounds, &ref_logits.row(i).sigmoid()).to_vec();
            print!("  ({:+6.2},{:+6.2},{:+5.2})", m[0], m[1], m[2]);
            if i % 4 == 3 {
                println!();
            }
        }
        println!();
    }

    println!("frame {frame} ground truth:");
    for t in &sc.tracklets {
        if let Some(b) = t.box_at(frame) {
            println!(
                "  gt{} cls{} center ({:+6.2},{:+6.2},{:+5.2}) size ({:.2},{:.2},{:.2}) vel ({:+.2},{:+.2})",
                t.track_id,
                t.class_id,
                b.center.x,
                b.center.y,
                b.center.z,
                b.size.x,
                b.size.y,
                b.size.z,
                b.velocity.x,
                b.velocity.y
            );
        }
    }

    let state = TrackerState::new();
    let outputs = forward_frame(&params, ctx, &state);
    let mut order: Vec<usize> = (0..outputs.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        outputs.candidates[b].score.partial_cmp(&outputs.candidates[a].score).unwrap()
    });
    let (_, _, init_refs) = newborn_queries(&params);
    let ones = Tensor::constant(&[24], vec![1.0; 24]);
    println!("top newborn candidates:");
    for &i in order.iter().take(12) {
        let c = &outputs.candidates[i];
        let anchor =
            denormalize_point(&ctx.bounds, &outputs.ref_logits.row(i).sigmoid()).to_vec();
        let center = c.center.to_vec();
        let size = c.size.to_vec();
        let vel = c.velocity.to_vec();
        let f0 = sample_multicam(ctx, &init_refs.row(i), &ones);
        let fnorm = f0.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "  q{i:02} score {:.3} |f_init| {:5.2} ref ({:+6.2},{:+6.2},{:+5.2}) center ({:+6.2},{:+6.2},{:+5.2}) size ({:.2},{:.2},{:.2}) vel ({:+.2},{:+.2})",
            c.score, fnorm, anchor[0], anchor[1], anchor[2], center[0], center[1], center[2],
            size[0], size[1], size[2], vel[0], vel[1]
        );
    }

    println!("per-gt nearest candidate (BEV):");
    for t in &sc.tracklets {
        if let Some(b) = t.box_at(frame) {
            let mut best = (0usize, f64::MAX);
            for (i, c) in outputs.candidates.iter().enumerate() {
                let cc = c.center.to_vec();
                let d = ((cc[0] - b.center.x).powi(2) + (cc[1] - b.center.y).powi(2)).sqrt();
                if d < best.1 {
                    best = (i, d);
                }
            }
            println!(
                "  gt{}: q{:02} at {:.2} m (score {:.3})",
                t.track_id, best.0, best.1, outputs.candidates[best.0].score
            );
        }
    }
}
