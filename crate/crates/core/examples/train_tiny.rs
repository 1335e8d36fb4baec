//! Trains the desk model briefly, then captions a few validation scenes and
//! shows which stream each word was nominated from.
//!
//! `cargo run --release --example train_tiny -- 600`

use dsct::data::{make_split, SceneConfig, Vocab};
use dsct::train::{evaluate, TrainConfig, Trainer};
use dsct::{Model, ModelConfig};

fn main() -> dsct::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let vocab = Vocab::desk();
    let (train, val) = make_split(512, 64, 0, &SceneConfig::default(), &vocab)?;
    let model = Model::new(ModelConfig::desk(vocab.len()), 0)?;
    let mut trainer = Trainer::new(model, TrainConfig { steps, warmup: steps.min(2000) / 2, ..TrainConfig::default() });
    for _ in 0..steps {
        let log = trainer.xe_step(&train)?;
        if log.step % 100 == 0 {
            println!("{}", log.line());
        }
    }
    let (report, hyps) = evaluate(&trainer.model, &val)?;
    print!("{}", report.to_kv());
    for (ex, hyp) in val.examples.iter().zip(&hyps).take(3) {
        println!("\nref: {}", vocab.decode(&ex.refs[0]));
        println!("out: {}", vocab.decode(hyp));
        let mut inputs = vec![dsct::data::BOS];
        inputs.extend(hyp);
        let layers = trainer.model.nominations(&ex.features, &inputs)?;
        for (t, &w) in hyp.iter().enumerate() {
            let tags: Vec<&str> = layers.iter().map(|l| if l[t] == 0 { "R" } else { "S" }).collect();
            println!("  {:<10} {}", vocab.token(w), tags.join(" "));
        }
    }
    Ok(())
}
