//! Implementations of the `dsct` subcommands. Each writes its log to `out`
//! and its artifacts under the configured directories; nothing here reads
//! the clock, so identical seeds give identical output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{make_split, read_dataset, write_dataset, Dataset, Vocab};
use crate::error::{Error, Result};
use crate::metrics::ScoreReport;
use crate::model::{Fusion, Model};
use crate::train::{evaluate, CiderReward, StepLog, Trainer};

pub const TRAIN_FILE: &str = "train.bin";
pub const VAL_FILE: &str = "val.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

/// CIDEr of each ablation variant on the full-scale benchmark, with BLEU-1,
/// BLEU-4 and ROUGE-L, in `Fusion::ALL` order. Printed for comparison only.
pub const REFERENCE_ROWS: [(&str, [f64; 4]); 4] = [
    ("baseline", [80.9, 38.7, 58.7, 131.7]),
    ("psmae_add", [81.4, 39.3, 59.3, 134.1]),
    ("psmae_concat", [81.7, 39.6, 59.6, 135.6]),
    ("dsct", [82.7, 40.3, 59.9, 137.6]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Config(format!("unknown split '{s}' (expected train or val)"))),
        }
    }
}

/// Vocabulary and both splits as written by [`gen_data`].
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Dataset,
    pub val: Dataset,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join(VOCAB_FILE);
        let text = fs::read_to_string(&vocab_path).map_err(|e| {
            Error::Config(format!("cannot read {} (run gen-data first): {e}", vocab_path.display()))
        })?;
        let vocab = Vocab::from_text(&text)?;
        let train = read_dataset(&dir.join(TRAIN_FILE))?;
        let val = read_dataset(&dir.join(VAL_FILE))?;
        for ds in [&train, &val] {
            if ds.vocab_size != vocab.len() {
                return Err(Error::Format(format!(
                    "dataset vocabulary ({}) differs from {} ({})",
                    ds.vocab_size,
                    VOCAB_FILE,
                    vocab.len()
                )));
            }
        }
        Ok(Self { vocab, train, val })
    }

    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// Rejects a model whose vocabulary or input width does not fit.
    pub fn check_model(&self, cfg: &crate::ModelConfig) -> Result<()> {
        if cfg.vocab_size != self.vocab.len() {
            return Err(Error::Config(format!(
                "checkpoint vocabulary ({}) does not match the dataset vocabulary ({})",
                cfg.vocab_size,
                self.vocab.len()
            )));
        }
        if cfg.feature_dim_region != self.train.feature_dim || cfg.feature_dim_seg != self.train.feature_dim {
            return Err(Error::Config(format!(
                "model input width {}/{} does not match the dataset feature width {}",
                cfg.feature_dim_region, cfg.feature_dim_seg, self.train.feature_dim
            )));
        }
        Ok(())
    }
}

pub fn gen_data(cfg: &RunConfig, force: bool, out: &mut dyn Write) -> Result<()> {
    let dir = &cfg.data.dir;
    let files = [TRAIN_FILE, VAL_FILE, VOCAB_FILE].map(|f| dir.join(f));
    if !force {
        if let Some(existing) = files.iter().find(|p| p.exists()) {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    let vocab = Vocab::desk();
    let (train, val) = make_split(cfg.data.n_train, cfg.data.n_val, cfg.seed, &cfg.data.scene, &vocab)?;
    write_dataset(&files[0], &train)?;
    write_dataset(&files[1], &val)?;
    fs::write(&files[2], vocab.to_text())?;
    writeln!(
        out,
        "wrote {} train and {} val scenes ({} tokens, feature width {}) to {}",
        train.len(),
        val.len(),
        vocab.len(),
        train.feature_dim,
        dir.display()
    )?;
    Ok(())
}

/// Writes each line to `out` and, when present, to a log file.
struct Log<'a> {
    out: &'a mut dyn Write,
    file: Option<fs::File>,
}

impl Log<'_> {
    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")?;
        if let Some(f) = &mut self.file {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

fn open_log(path: &Path, append: bool) -> Result<fs::File> {
    Ok(fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?)
}

fn report_lines(log: &mut Log<'_>, label: &str, report: &ScoreReport) -> Result<()> {
    for kv in report.to_kv().lines() {
        log.line(&format!("{label} {kv}"))?;
    }
    Ok(())
}

/// Outcome of a training stage.
pub struct StageResult {
    pub checkpoint: PathBuf,
    pub logs: Vec<StepLog>,
    pub report: ScoreReport,
}

/// Cross-entropy training. With `resume`, continues the run stored in that
/// checkpoint up to `train.steps` total steps and appends to the log.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, out: &mut dyn Write) -> Result<StageResult> {
    let corpus = Corpus::load(&cfg.data.dir)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            corpus.check_model(&ck.config)?;
            Trainer::from_checkpoint(ck, cfg.train.clone())?
        }
        None => {
            let mut model_cfg = cfg.model.clone();
            model_cfg.vocab_size = corpus.vocab.len();
            corpus.check_model(&model_cfg)?;
            Trainer::new(Model::new(model_cfg, cfg.seed)?, cfg.train.clone())
        }
    };
    fs::create_dir_all(&cfg.run_dir)?;
    let mut log = Log {
        out,
        file: Some(open_log(&cfg.run_dir.join("train.log"), resume.is_some())?),
    };
    let mut logs = Vec::new();
    while trainer.step < cfg.train.steps {
        let entry = trainer.xe_step(&corpus.train)?;
        log.line(&entry.line())?;
        logs.push(entry);
        if cfg.train.checkpoint_every > 0 && trainer.step % cfg.train.checkpoint_every == 0 {
            trainer
                .checkpoint()
                .save(&cfg.run_dir.join(format!("xe-{:06}.ckpt", trainer.step)))?;
        }
    }
    let checkpoint = cfg.run_dir.join("xe.ckpt");
    trainer.checkpoint().save(&checkpoint)?;
    let (report, _) = evaluate(&trainer.model, &corpus.val)?;
    report_lines(&mut log, "val", &report)?;
    log.line(&format!("saved {}", checkpoint.display()))?;
    Ok(StageResult {
        checkpoint,
        logs,
        report,
    })
}

/// Self-critical finetuning from the cross-entropy checkpoint `init_from`,
/// with CIDEr-D rewards whose document frequencies come from the training
/// split. Optimiser moments start fresh.
pub fn finetune_scst(cfg: &RunConfig, init_from: &Path, out: &mut dyn Write) -> Result<StageResult> {
    let corpus = Corpus::load(&cfg.data.dir)?;
    let ck = Checkpoint::load(init_from)?;
    corpus.check_model(&ck.config)?;
    let mut trainer = Trainer::from_checkpoint(ck, cfg.train.clone())?;
    trainer.reset_optimizer();
    let reward = CiderReward::new(&corpus.train)?;
    fs::create_dir_all(&cfg.run_dir)?;
    let mut log = Log {
        out,
        file: Some(open_log(&cfg.run_dir.join("scst.log"), false)?),
    };
    let mut logs = Vec::new();
    for i in 1..=cfg.train.scst_steps {
        let (entry, _) = trainer.scst_step(&corpus.train, |ex, words| reward.reward(ex, words))?;
        log.line(&entry.line())?;
        logs.push(entry);
        if cfg.train.checkpoint_every > 0 && i % cfg.train.checkpoint_every == 0 {
            trainer.checkpoint().save(&cfg.run_dir.join(format!("scst-{i:06}.ckpt")))?;
        }
    }
    let checkpoint = cfg.run_dir.join("scst.ckpt");
    trainer.checkpoint().save(&checkpoint)?;
    let (report, _) = evaluate(&trainer.model, &corpus.val)?;
    report_lines(&mut log, "val", &report)?;
    log.line(&format!("saved {}", checkpoint.display()))?;
    Ok(StageResult {
        checkpoint,
        logs,
        report,
    })
}

fn load_model(corpus: &Corpus, checkpoint: &Path) -> Result<Model<f32>> {
    let ck = Checkpoint::load(checkpoint)?;
    corpus.check_model(&ck.config)?;
    Model::from_params(ck.config, ck.params)
}

/// Scores the checkpoint on `split`; with `out_dir`, also writes
/// `report.txt` (key=value) and `report.tsv` (per image).
pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    out_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<ScoreReport> {
    let corpus = Corpus::load(&cfg.data.dir)?;
    let model = load_model(&corpus, checkpoint)?;
    let (report, hyps) = evaluate(&model, corpus.split(split))?;
    write!(out, "{}", report.to_kv())?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let captions: Vec<String> = hyps.iter().map(|h| corpus.vocab.decode(h)).collect();
        fs::write(dir.join("report.txt"), report.to_kv())?;
        fs::write(dir.join("report.tsv"), report.to_tsv(&captions))?;
    }
    Ok(report)
}

/// One caption per scene of `split`, tokens space-separated. With
/// `nominations`, also writes for every generated word a line
/// `word<TAB>layer0:R|S<TAB>...`, scenes separated by blank lines.
pub fn caption(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    nominations: Option<&Path>,
    out: &mut dyn Write,
) -> Result<Vec<String>> {
    let corpus = Corpus::load(&cfg.data.dir)?;
    let model = load_model(&corpus, checkpoint)?;
    if nominations.is_some() && model.cfg.fusion != Fusion::Dnm {
        return Err(Error::Config(format!(
            "--dump-nominations needs a dnm model, this checkpoint uses {}",
            model.cfg.fusion
        )));
    }
    let mut captions = Vec::new();
    let mut dump = String::new();
    for ex in &corpus.split(split).examples {
        let hyp = model.caption(&ex.features)?;
        let text = corpus.vocab.decode(hyp.words());
        writeln!(out, "{text}")?;
        if nominations.is_some() {
            let layers = model.nominations(&ex.features, &hyp.teacher_inputs())?;
            for (t, &w) in hyp.words().iter().enumerate() {
                dump.push_str(corpus.vocab.token(w));
                for (l, choice) in layers.iter().enumerate() {
                    let tag = if choice[t] == 0 { 'R' } else { 'S' };
                    dump.push_str(&format!("\tlayer{l}:{tag}"));
                }
                dump.push('\n');
            }
            dump.push('\n');
        }
        captions.push(text);
    }
    if let Some(path) = nominations {
        fs::write(path, dump)?;
    }
    Ok(captions)
}

/// One ablation row: variant label and its validation scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<14}{:>10}{:>10}{:>10}{:>10}\n", "variant", "bleu1", "bleu4", "rougeL", "ciderD");
    for r in rows {
        s.push_str(&format!(
            "{:<14}{:>10.4}{:>10.4}{:>10.4}{:>10.4}\n",
            r.label, r.bleu1, r.bleu4, r.rouge_l, r.cider_d
        ));
    }
    s
}

fn reference_table() -> String {
    let mut s = String::from("reference, full-scale benchmark (x100, not comparable to the rows above):\n");
    s.push_str(&format!("{:<14}{:>10}{:>10}{:>10}{:>10}\n", "variant", "bleu1", "bleu4", "rougeL", "ciderD"));
    for (label, [b1, b4, r, c]) in REFERENCE_ROWS {
        s.push_str(&format!("{label:<14}{b1:>10.1}{b4:>10.1}{r:>10.1}{c:>10.1}\n"));
    }
    s
}

/// Trains every fusion variant from the same seed for `train.steps` steps
/// and scores each on the validation split.
pub fn ablate(cfg: &RunConfig, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<Vec<AblationRow>> {
    let corpus = Corpus::load(&cfg.data.dir)?;
    let mut rows = Vec::new();
    for fusion in Fusion::ALL {
        let mut model_cfg = cfg.model.clone();
        model_cfg.fusion = fusion;
        model_cfg.vocab_size = corpus.vocab.len();
        corpus.check_model(&model_cfg)?;
        let mut trainer = Trainer::new(Model::new(model_cfg, cfg.seed)?, cfg.train.clone());
        let mut last = None;
        while trainer.step < cfg.train.steps {
            last = Some(trainer.xe_step(&corpus.train)?);
        }
        let (report, _) = evaluate(&trainer.model, &corpus.val)?;
        writeln!(
            out,
            "{}: {} params, final loss {}, ciderD {:.4}",
            fusion.label(),
            trainer.model.params.numel(),
            last.map_or_else(|| "n/a".to_string(), |l| format!("{:.6}", l.loss)),
            report.cider_d
        )?;
        rows.push(AblationRow {
            label: fusion.label(),
            bleu1: report.bleu1,
            bleu4: report.bleu4,
            rouge_l: report.rouge_l,
            cider_d: report.cider_d,
        });
    }
    let table = format_table(&rows);
    write!(out, "{table}\n{}", reference_table())?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.txt"), &table)?;
    }
    Ok(rows)
}
