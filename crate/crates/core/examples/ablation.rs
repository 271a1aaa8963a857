//! Desk-scale ablation: frozen baseline vs adapters trained with the
//! proxy loss alone vs the full objective with object views.
//!
//! ```text
//! cargo run --release -p dva-core --example ablation -- [OUT_DIR] [SEEDS]
//! ```
//!
//! `LR`, `EPOCHS` and `CLOSED=1` in the environment override the desk preset.

use std::path::PathBuf;
use std::time::Instant;

use dva::config::RunConfig;
use dva::pipeline;
use dva::retrieval::SplitMode;

fn main() -> dva::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "ablation-out".into()));
    let seeds: u64 = args
        .next()
        .map_or(3, |s| s.parse().expect("SEEDS is an integer"));
    let mut base = RunConfig::desk();
    if let Ok(v) = std::env::var("LR") {
        base.train.lr0 = v.parse().expect("LR is a number");
    }
    if let Ok(v) = std::env::var("EPOCHS") {
        base.train.epochs = v.parse().expect("EPOCHS is an integer");
    }
    if std::env::var_os("CLOSED").is_some() {
        base.eval.mode = SplitMode::Closed;
    }

    let mut rows = Vec::new();
    for seed in 0..seeds {
        let mut cfg = base.clone();
        cfg.set_seed(seed);
        let t = Instant::now();
        let run = pipeline::run_ablation(&cfg, &out.join(format!("seed{seed}")))?;
        println!(
            "seed {seed}: R@1 frozen {:.4}  ica {:.4}  dva {:.4}  ({:.1?})",
            run.frozen[&1],
            run.ica[&1],
            run.dva[&1],
            t.elapsed()
        );
        rows.push([run.frozen[&1], run.ica[&1], run.dva[&1]]);
    }
    let mean = |j: usize| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
    println!(
        "mean R@1 frozen {:.4}  ica {:.4}  dva {:.4}",
        mean(0),
        mean(1),
        mean(2)
    );
    Ok(())
}
