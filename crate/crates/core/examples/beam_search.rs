//! Beam search against greedy decoding and brute-force enumeration on a
//! hand-written next-token distribution.

use dsct::data::{BOS, EOS};
use dsct::decode::{beam_search, emittable, greedy, BeamConfig};

const VOCAB: usize = 7;

/// Log-probabilities that make the greedy first step a trap: token 4 looks
/// best at step one but leads nowhere good.
fn scorer(prefix: &[u32]) -> Vec<f64> {
    let probs: [f64; VOCAB] = match prefix {
        [BOS] => [0.0, 0.0, 0.05, 0.0, 0.5, 0.45, 0.0],
        [BOS, 4] => [0.0, 0.0, 0.3, 0.0, 0.2, 0.25, 0.25],
        [BOS, 5] => [0.0, 0.0, 0.9, 0.0, 0.05, 0.0, 0.05],
        _ => [0.0, 0.0, 0.7, 0.0, 0.1, 0.1, 0.1],
    };
    probs.iter().map(|p| p.max(1e-12).ln()).collect()
}

fn main() -> dsct::Result<()> {
    let g = greedy(VOCAB, 3, |p| Ok(scorer(p)))?;
    let lp: f64 = (0..g.len()).map(|i| {
        let mut prefix = vec![BOS];
        prefix.extend(&g[..i]);
        scorer(&prefix)[g[i] as usize]
    }).sum();
    println!("greedy: {g:?} logp {lp:.4}");
    for k in [1, 2, 4] {
        let cfg = BeamConfig { k, max_len: 3, alpha: 0.0 };
        let hyps = beam_search(VOCAB, &cfg, |ps: &[Vec<u32>]| Ok(ps.iter().map(|p| scorer(p)).collect()))?;
        println!("beam {k}: best {:?} logp {:.4}", hyps[0].tokens, hyps[0].logp);
    }

    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut frontier = vec![(vec![BOS], 0.0)];
    for len in 1..=3 {
        let mut next = Vec::new();
        for (p, lp) in &frontier {
            let row = scorer(p);
            for t in (0..VOCAB as u32).filter(|&t| emittable(t)) {
                let mut s = p.clone();
                s.push(t);
                let v = lp + row[t as usize];
                if t == EOS || len == 3 {
                    if v > best.1 {
                        best = (s[1..].to_vec(), v);
                    }
                } else {
                    next.push((s, v));
                }
            }
        }
        frontier = next;
    }
    println!("exhaustive: {:?} logp {:.4}", best.0, best.1);
    Ok(())
}
