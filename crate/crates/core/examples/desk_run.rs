//! Desk-scale run on the synthetic corpus: pretrain, fine-tune a linear head, compare with a
//! probe on a randomly initialized encoder.
//!
//! ```text
//! cargo run --release -p cmcrl-core --example desk_run -- [seed] [layers]
//! ```

use std::time::Instant;

use cmcrl_core::data::{make_synthetic, split, SplitSpec};
use cmcrl_core::embedding::LayerSet;
use cmcrl_core::metrics::F1Mode;
use cmcrl_core::model::Encoder;
use cmcrl_core::train::{evaluate, finetune, pretrain, FinetuneConfig, PretrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    let layers: LayerSet = args.next().map_or(Ok(LayerSet::all()), |s| s.parse())?;

    let corpus = make_synthetic(4, 64, 32, seed)?;
    let spec = SplitSpec {
        pretrain_fraction: 0.5,
        finetune_fraction: 0.25,
        test_fraction: 0.25,
        seed,
    };
    let (pre, ft, test) = split(&corpus, &spec)?;
    let mut cfg = PretrainConfig::desk().with_layers(layers);
    cfg.train.seed = seed;

    let start = Instant::now();
    let state = pretrain::<f32>(&pre, cfg.clone())?;
    for row in &state.history {
        println!(
            "epoch {} m={} clustered={} loss={:.4} cacc={:.4}",
            row.epoch,
            row.clusters,
            row.clustered,
            row.loss.unwrap_or(f64::NAN),
            row.cacc.unwrap_or(f64::NAN)
        );
    }
    let fcfg = FinetuneConfig::default();
    let (head, _) = finetune(&state.encoder, &ft, &fcfg)?;
    let report = evaluate(&state.encoder, &head, &test, None, F1Mode::default())?;

    let random = Encoder::<f32>::new(cfg.model.clone(), seed)?;
    let (random_head, _) = finetune(&random, &ft, &fcfg)?;
    let baseline = evaluate(&random, &random_head, &test, None, F1Mode::default())?;

    println!(
        "test acc {:.4} (random-init probe {:.4}), {:.1} s",
        report.acc,
        baseline.acc,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
