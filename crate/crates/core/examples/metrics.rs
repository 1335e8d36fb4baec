//! BLEU, ROUGE-L and CIDEr-D on a handful of captions.

use dsct::metrics::ScoreReport;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn main() -> dsct::Result<()> {
    let refs = [
        vec!["a red cube left of a blue ball", "a crimson cube beside a blue sphere"],
        vec!["a green cone above a yellow cube", "a green cone above a golden block"],
        vec!["a purple cylinder", "a violet cylinder"],
    ];
    let hyps = ["a red cube left of a blue sphere", "a green cone", "a purple cylinder"];
    let refs: Vec<Vec<Vec<&str>>> = refs.iter().map(|r| r.iter().map(|s| words(s)).collect()).collect();
    let hyps: Vec<Vec<&str>> = hyps.iter().map(|h| words(h)).collect();
    let report = ScoreReport::compute(&hyps, &refs)?;
    print!("{}", report.to_kv());
    let captions: Vec<String> = hyps.iter().map(|h| h.join(" ")).collect();
    print!("{}", report.to_tsv(&captions));
    Ok(())
}
