//! Temporary tuning probe. Deleted before the workspace ships.

use std::time::Instant;

use crelab_core::data::{generate_synthetic_stream, SyntheticConfig};
use crelab_core::model::EncoderConfig;
use crelab_core::trainer::{run_stream, DiagnosticsPlan, TrainConfig, Variant};

fn run_cell(train: usize, enc_lr: f64, head_lr: f64, variant: Variant, seed: u64) -> (f64, f64, Option<f64>, f64, f64) {
    let syn = SyntheticConfig {
        seed,
        train_per_relation: train,
        ..SyntheticConfig::default()
    };
    let stream = generate_synthetic_stream(&syn).unwrap();
    let enc = EncoderConfig::for_token_vocab(stream.token_vocab);
    let cfg = TrainConfig {
        variant,
        seed,
        encoder_lr: enc_lr,
        head_lr,
        ..TrainConfig::default()
    };
    let plan = DiagnosticsPlan {
        probe_ubc: true,
        boundary_pairs: syn.planted_pairs(),
        ..DiagnosticsPlan::default()
    };
    let t0 = Instant::now();
    let mut clock = || t0.elapsed().as_secs_f64();
    let (report, _) = run_stream(&stream, enc, &cfg, &plan, &mut clock).unwrap();
    let last = report.tasks.last().unwrap();
    let fresh_skew = report
        .tasks
        .iter()
        .flat_map(|t| t.boundaries.iter())
        .map(|b| b.skew_old_as_new)
        .sum::<f64>()
        / report.tasks.iter().map(|t| t.boundaries.len()).sum::<usize>().max(1) as f64;
    (
        report.final_accuracy(),
        last.taxonomy.latter_share,
        report.mean_bt_grad_norm(),
        report.probes.first().map(|p| p.accuracy).unwrap_or(0.0),
        fresh_skew,
    )
}

#[test]
#[ignore]
fn sweep() {
    for (tag, train, enc_lr, head_lr) in [
        ("R1 tr150", 150usize, 1e-4, 1e-3),
        ("R2 tr200", 200usize, 1e-4, 1e-3),
    ] {
        for variant in [Variant::Fea, Variant::RemoveBt, Variant::RemoveFa] {
            let mut finals = Vec::new();
            let mut latters = Vec::new();
            let mut ubcs = Vec::new();
            let mut grads = Vec::new();
            let mut skews = Vec::new();
            for seed in [0u64, 1] {
                let (fin, latter, grad, ubc, skew) = run_cell(train, enc_lr, head_lr, variant, seed);
                finals.push(fin);
                latters.push(latter);
                ubcs.push(ubc);
                grads.push(grad.unwrap_or(0.0));
                skews.push(skew);
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            println!(
                "{tag} {:<10} final={:.4} {:?} latter={:.2} ubc={:.3} grad={:.2} skew={:.2}",
                variant.label(),
                mean(&finals),
                finals.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                mean(&latters),
                mean(&ubcs),
                mean(&grads),
                mean(&skews),
            );
        }
        println!();
    }
}
