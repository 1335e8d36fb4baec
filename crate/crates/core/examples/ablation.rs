//! The four fusion variants trained under one small budget.
//!
//! `cargo run --release --example ablation -- 300`

use dsct::commands::{format_table, AblationRow};
use dsct::data::{make_split, SceneConfig, Vocab};
use dsct::train::{evaluate, TrainConfig, Trainer};
use dsct::{Fusion, Model, ModelConfig};

fn main() -> dsct::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let vocab = Vocab::desk();
    let (train, val) = make_split(512, 64, 0, &SceneConfig::default(), &vocab)?;
    let mut rows = Vec::new();
    for fusion in Fusion::ALL {
        let cfg = ModelConfig { fusion, ..ModelConfig::desk(vocab.len()) };
        let mut trainer = Trainer::new(Model::new(cfg, 0)?, TrainConfig { steps, warmup: steps / 2, ..TrainConfig::default() });
        for _ in 0..steps {
            trainer.xe_step(&train)?;
        }
        let (r, _) = evaluate(&trainer.model, &val)?;
        println!("{} done: {} params", fusion.label(), trainer.model.params.numel());
        rows.push(AblationRow { label: fusion.label(), bleu1: r.bleu1, bleu4: r.bleu4, rouge_l: r.rouge_l, cider_d: r.cider_d });
    }
    print!("{}", format_table(&rows));
    Ok(())
}
