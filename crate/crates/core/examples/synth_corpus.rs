//! The synthetic scene corpus: captions, references, features, and which
//! stream carries the spatial relation.

use dsct::data::{generate_scene, linear_probe, make_split, realize_caption, references, relation_rows, SceneConfig, Vocab};
use dsct_tensor::DetRng;

fn main() -> dsct::Result<()> {
    let cfg = SceneConfig::default();
    let mut rng = DetRng::new(0);
    for _ in 0..3 {
        let scene = generate_scene(&mut rng, &cfg);
        println!("{:?}", scene.objects);
        println!("  caption: {}", realize_caption(&scene));
        for r in &references(&scene)[1..] {
            println!("  ref:     {r}");
        }
    }

    let vocab = Vocab::desk();
    let (train, val) = make_split(256, 64, 0, &cfg, &vocab)?;
    let ex = &train.examples[0];
    println!(
        "{} train / {} val scenes, {} tokens; first scene has region {:?} and segmentation {:?} features",
        train.len(),
        val.len(),
        vocab.len(),
        ex.features.region.shape(),
        ex.features.seg.shape()
    );
    println!("encoded: {:?}", ex.refs[0]);

    for (label, seg) in [("region", false), ("segmentation", true)] {
        let mut rng = DetRng::new(1);
        let (tx, ty) = relation_rows(400, cfg.noise_std, seg, &mut rng);
        let (vx, vy) = relation_rows(200, cfg.noise_std, seg, &mut rng);
        println!("relation probe on {label} rows: {:.3}", linear_probe(&tx, &ty, &vx, &vy, 3)?);
    }
    Ok(())
}
