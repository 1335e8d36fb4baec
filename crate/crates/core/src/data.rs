//! Synthetic scenes standing in for images.
//!
//! A scene places one or more coloured objects on a 3×3 grid. Region rows
//! describe each object (category, colour, cell); segmentation rows describe
//! each occupied cell and which other cells around it are occupied, so the
//! spatial relation between objects is a linear function of a segmentation
//! row but not of any single region row.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use dsct_tensor::{DetRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::Features;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const N_CATEGORIES: usize = 6;
pub const N_ATTRIBUTES: usize = 6;
pub const N_CELLS: usize = 9;
/// References per scene.
pub const N_REFS: usize = 5;

/// Canonical word and synonym per attribute.
pub const ATTRIBUTES: [(&str, &str); N_ATTRIBUTES] = [
    ("red", "crimson"),
    ("green", "emerald"),
    ("blue", "azure"),
    ("yellow", "golden"),
    ("purple", "violet"),
    ("orange", "amber"),
];

pub const CATEGORIES: [(&str, &str); N_CATEGORIES] = [
    ("cube", "block"),
    ("sphere", "ball"),
    ("cylinder", "tube"),
    ("ring", "hoop"),
    ("cone", "funnel"),
    ("disk", "plate"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    LeftOf,
    Above,
    NextTo,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::LeftOf, Relation::Above, Relation::NextTo];

    /// Relation of the object in cell `a` to the object in the later cell `b`.
    pub fn between(a: u8, b: u8) -> Self {
        if a / 3 == b / 3 {
            Relation::LeftOf
        } else if a % 3 == b % 3 {
            Relation::Above
        } else {
            Relation::NextTo
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn words(self, synonym: bool) -> &'static [&'static str] {
        match (self, synonym) {
            (Relation::LeftOf, false) => &["left", "of"],
            (Relation::LeftOf, true) => &["beside"],
            (Relation::Above, false) => &["above"],
            (Relation::Above, true) => &["over"],
            (Relation::NextTo, false) => &["next", "to"],
            (Relation::NextTo, true) => &["near"],
        }
    }
}

/// Token list in id order.
pub fn vocabulary_tokens() -> Vec<String> {
    let mut v: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>", "a"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (c, s) in ATTRIBUTES.iter().chain(CATEGORIES.iter()) {
        v.push(c.to_string());
        v.push(s.to_string());
    }
    for w in ["left", "of", "beside", "above", "over", "next", "to", "near"] {
        v.push(w.to_string());
    }
    v
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let reserved = ["<pad>", "<bos>", "<eos>", "<unk>"];
        if tokens.len() < reserved.len() || tokens[..4].iter().zip(reserved).any(|(a, b)| a != b) {
            return Err(Error::Format("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// The grammar's vocabulary.
    pub fn desk() -> Self {
        Self::new(vocabulary_tokens()).expect("static vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    /// Word ids framed by BOS and EOS; unknown words map to UNK.
    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(sentence.split_whitespace().map(|w| self.id(w)));
        ids.push(EOS);
        ids
    }

    /// Space-joined words, skipping PAD, BOS and EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&t| !matches!(t, PAD | BOS | EOS))
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::to_string).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub category: u8,
    pub attribute: u8,
    pub cell: u8,
}

/// Objects in row-major cell order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn new(mut objects: Vec<Object>) -> Result<Self> {
        if objects.is_empty() {
            return contract("a scene needs at least one object");
        }
        objects.sort_by_key(|o| o.cell);
        for o in &objects {
            if o.cell as usize >= N_CELLS
                || o.category as usize >= N_CATEGORIES
                || o.attribute as usize >= N_ATTRIBUTES
            {
                return contract(format!("object {o:?} out of range"));
            }
        }
        if objects.windows(2).any(|w| w[0].cell == w[1].cell) {
            return contract("objects must occupy distinct cells");
        }
        Ok(Self { objects })
    }

    /// Relation between each consecutive pair of objects.
    pub fn relations(&self) -> Vec<Relation> {
        self.objects
            .windows(2)
            .map(|w| Relation::between(w[0].cell, w[1].cell))
            .collect()
    }

    /// FNV-1a over the object codes; decides the train/val partition.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for o in &self.objects {
            for b in [o.category, o.attribute, o.cell] {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 2,
            feature_dim: 32,
            noise_std: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 4 {
            return contract(format!(
                "object count range {}..={} must lie within 1..=4",
                self.min_objects, self.max_objects
            ));
        }
        if self.feature_dim < N_CATEGORIES + N_ATTRIBUTES + N_CELLS {
            return contract(format!(
                "feature_dim {} is too small for the object codes ({} needed)",
                self.feature_dim,
                N_CATEGORIES + N_ATTRIBUTES + N_CELLS
            ));
        }
        if !(self.noise_std >= 0.0) {
            return contract(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// Uniform object count, then distinct uniform cells and uniform codes.
pub fn generate_scene(rng: &mut DetRng, cfg: &SceneConfig) -> Scene {
    let n = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    let mut cells: Vec<u8> = (0..N_CELLS as u8).collect();
    rng.shuffle(&mut cells);
    let objects = cells[..n]
        .iter()
        .map(|&cell| Object {
            category: rng.below(N_CATEGORIES) as u8,
            attribute: rng.below(N_ATTRIBUTES) as u8,
            cell,
        })
        .collect();
    Scene::new(objects).expect("generated scenes are valid")
}

fn noisy_row(code: &[(usize, f32)], dim: usize, noise_std: f64, rng: &mut DetRng) -> Vec<f32> {
    let mut row: Vec<f32> = if noise_std > 0.0 {
        rng.normal_vec(dim, noise_std)
    } else {
        vec![0.0; dim]
    };
    for &(i, v) in code {
        row[i] += v;
    }
    row
}

/// Region rows: category, attribute and cell one-hots. Segmentation rows:
/// cell one-hot plus flags for another occupied cell in the same row, in the
/// same column, and elsewhere.
pub fn render_features(scene: &Scene, feature_dim: usize, noise_std: f64, rng: &mut DetRng) -> Features<f32> {
    let mut region = Vec::new();
    for o in &scene.objects {
        let code = [
            (o.category as usize, 1.0),
            (N_CATEGORIES + o.attribute as usize, 1.0),
            (N_CATEGORIES + N_ATTRIBUTES + o.cell as usize, 1.0),
        ];
        region.extend(noisy_row(&code, feature_dim, noise_std, rng));
    }
    let mut seg = Vec::new();
    for o in &scene.objects {
        let others = scene.objects.iter().filter(|p| p.cell != o.cell);
        let (mut same_row, mut same_col, mut elsewhere) = (0.0, 0.0, 0.0);
        for p in others {
            match Relation::between(o.cell.min(p.cell), o.cell.max(p.cell)) {
                Relation::LeftOf => same_row = 1.0,
                Relation::Above => same_col = 1.0,
                Relation::NextTo => elsewhere = 1.0,
            }
        }
        let code = [
            (o.cell as usize, 1.0),
            (N_CELLS, same_row),
            (N_CELLS + 1, same_col),
            (N_CELLS + 2, elsewhere),
        ];
        seg.extend(noisy_row(&code, feature_dim, noise_std, rng));
    }
    let n = scene.objects.len();
    Features {
        region: Tensor::new(&[n, feature_dim], region).expect("consistent rows"),
        seg: Tensor::new(&[n, feature_dim], seg).expect("consistent rows"),
    }
}

enum Slot {
    Attr(u8),
    Cat(u8),
    Rel(Relation),
}

fn slots(scene: &Scene) -> Vec<Slot> {
    let rels = scene.relations();
    let mut out = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        if i > 0 {
            out.push(Slot::Rel(rels[i - 1]));
        }
        out.push(Slot::Attr(o.attribute));
        out.push(Slot::Cat(o.category));
    }
    out
}

fn realize(scene: &Scene, synonym_slot: Option<usize>) -> String {
    let mut words: Vec<&str> = Vec::new();
    for (i, slot) in slots(scene).into_iter().enumerate() {
        let syn = synonym_slot == Some(i);
        let pick = |p: (&'static str, &'static str)| if syn { p.1 } else { p.0 };
        match slot {
            Slot::Attr(a) => {
                words.push("a");
                words.push(pick(ATTRIBUTES[a as usize]));
            }
            Slot::Cat(c) => words.push(pick(CATEGORIES[c as usize])),
            Slot::Rel(r) => words.extend(r.words(syn)),
        }
    }
    words.join(" ")
}

/// `a ATTR CAT (REL a ATTR CAT)*` with canonical words.
pub fn realize_caption(scene: &Scene) -> String {
    realize(scene, None)
}

/// The canonical caption followed by four variants, variant `k` replacing
/// slot `(k - 1) mod slots` with its synonym.
pub fn references(scene: &Scene) -> Vec<String> {
    let n = slots(scene).len();
    let mut refs = vec![realize(scene, None)];
    refs.extend((1..N_REFS).map(|k| realize(scene, Some((k - 1) % n))));
    refs
}

/// Padded `seq × batch` token matrix with a validity mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionBatch {
    pub seq: usize,
    pub batch: usize,
    /// `ids[t * batch + b]`.
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl CaptionBatch {
    pub fn new(captions: &[Vec<u32>]) -> Result<Self> {
        if captions.is_empty() {
            return contract("empty caption batch");
        }
        for c in captions {
            let eos = c.iter().filter(|&&t| t == EOS).count();
            if c.first() != Some(&BOS) || eos != 1 || c.last() != Some(&EOS) {
                return contract("every caption must start with BOS and end with its only EOS");
            }
        }
        let seq = captions.iter().map(Vec::len).max().expect("nonempty");
        let batch = captions.len();
        let mut ids = vec![PAD; seq * batch];
        let mut mask = vec![false; seq * batch];
        for (b, c) in captions.iter().enumerate() {
            for (t, &tok) in c.iter().enumerate() {
                ids[t * batch + b] = tok;
                mask[t * batch + b] = true;
            }
        }
        Ok(Self { seq, batch, ids, mask })
    }

    /// The valid tokens of caption `b`.
    pub fn caption(&self, b: usize) -> Vec<u32> {
        (0..self.seq)
            .filter(|&t| self.mask[t * self.batch + b])
            .map(|t| self.ids[t * self.batch + b])
            .collect()
    }
}

/// One scene with its rendered features and encoded references.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub scene: Scene,
    pub features: Features<f32>,
    /// BOS/EOS framed reference captions, canonical first.
    pub refs: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Scenes whose hash is divisible by this go to validation.
const VAL_BUCKETS: u64 = 5;

/// Draws scenes from one seeded stream and routes them by scene hash, so no
/// scene can appear in both splits.
pub fn make_split(
    n_train: usize,
    n_val: usize,
    seed: u64,
    cfg: &SceneConfig,
    vocab: &Vocab,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_val == 0 {
        return contract(format!("split sizes must be positive, got {n_train}/{n_val}"));
    }
    cfg.validate()?;
    let mut rng = DetRng::new(seed);
    let (mut train, mut val) = (Vec::with_capacity(n_train), Vec::with_capacity(n_val));
    let budget = 1000 * (n_train + n_val);
    for _ in 0..budget {
        if train.len() == n_train && val.len() == n_val {
            break;
        }
        let scene = generate_scene(&mut rng, cfg);
        let target = if scene.hash() % VAL_BUCKETS == 0 {
            (&mut val, n_val)
        } else {
            (&mut train, n_train)
        };
        if target.0.len() == target.1 {
            continue;
        }
        let features = render_features(&scene, cfg.feature_dim, cfg.noise_std, &mut rng);
        let refs = references(&scene).iter().map(|r| vocab.encode(r)).collect();
        target.0.push(Example { scene, features, refs });
    }
    if train.len() < n_train || val.len() < n_val {
        return contract("scene space too small for the requested split sizes");
    }
    let ds = |examples| Dataset {
        feature_dim: cfg.feature_dim,
        vocab_size: vocab.len(),
        examples,
    };
    Ok((ds(train), ds(val)))
}

const DATA_MAGIC: &[u8; 8] = b"DSCTDATA";
pub const DATA_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little-endian binary form: magic, version, counts, then one record per
/// scene with its objects, feature rows and reference id lists.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    for v in [DATA_VERSION, ds.examples.len() as u32, ds.feature_dim as u32, ds.vocab_size as u32] {
        put_u32(&mut out, v);
    }
    for ex in &ds.examples {
        put_u32(&mut out, ex.scene.objects.len() as u32);
        for o in &ex.scene.objects {
            out.extend_from_slice(&[o.category, o.attribute, o.cell]);
        }
        put_u32(&mut out, ex.features.region.rows() as u32);
        put_u32(&mut out, ex.features.seg.rows() as u32);
        put_f32s(&mut out, ex.features.region.data());
        put_f32s(&mut out, ex.features.seg.data());
        put_u32(&mut out, ex.refs.len() as u32);
        for r in &ex.refs {
            put_u32(&mut out, r.len() as u32);
            for &t in r {
                put_u32(&mut out, t);
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity("dataset file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != DATA_MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = c.u32()?;
    if version != DATA_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATA_VERSION,
        });
    }
    let n = c.u32()? as usize;
    let dim = c.u32()? as usize;
    let vocab_size = c.u32()? as usize;
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let n_obj = c.u32()? as usize;
        let mut objects = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let b = c.take(3)?;
            objects.push(Object {
                category: b[0],
                attribute: b[1],
                cell: b[2],
            });
        }
        let scene = Scene::new(objects).map_err(|e| Error::Format(e.to_string()))?;
        let (nr, ns) = (c.u32()? as usize, c.u32()? as usize);
        if nr == 0 || ns == 0 {
            return Err(Error::Format("scene without feature rows".into()));
        }
        let region = Tensor::new(&[nr, dim], c.f32s(nr * dim)?)?;
        let seg = Tensor::new(&[ns, dim], c.f32s(ns * dim)?)?;
        let n_refs = c.u32()? as usize;
        let mut refs = Vec::with_capacity(n_refs);
        for _ in 0..n_refs {
            let len = c.u32()? as usize;
            let ids = (0..len).map(|_| c.u32()).collect::<Result<Vec<u32>>>()?;
            if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Format(format!("token id {bad} outside vocabulary")));
            }
            refs.push(ids);
        }
        examples.push(Example {
            scene,
            features: Features { region, seg },
            refs,
        });
    }
    if c.pos != buf.len() {
        return Err(Error::Integrity("trailing bytes after the last record".into()));
    }
    Ok(Dataset {
        feature_dim: dim,
        vocab_size,
        examples,
    })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&encode_dataset(ds)))
        .map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::file(path, e))?;
    decode_dataset(&buf)
}

/// Softmax-regression probe trained by full-batch gradient descent; returns
/// accuracy on the held-out rows.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
) -> Result<f64> {
    if train_x.is_empty() || test_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return contract("probe needs matching, nonempty train and test sets");
    }
    let dim = train_x[0].len();
    let mut w = vec![vec![0.0; dim + 1]; classes];
    let scores = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc[dim] + wc[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    let lr = 0.5;
    for _ in 0..400 {
        let mut grad = vec![vec![0.0; dim + 1]; classes];
        for (x, &y) in train_x.iter().zip(train_y) {
            let s = scores(&w, x);
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / z - if c == y { 1.0 } else { 0.0 };
                for (gi, xi) in grad[c][..dim].iter_mut().zip(x) {
                    *gi += g * xi;
                }
                grad[c][dim] += g;
            }
        }
        let n = train_x.len() as f64;
        for (wc, gc) in w.iter_mut().zip(&grad) {
            for (a, g) in wc.iter_mut().zip(gc) {
                *a -= lr * g / n;
            }
        }
    }
    let correct = test_x
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            let s = scores(&w, x);
            let best = (0..classes).fold(0, |b, c| if s[c] > s[b] { c } else { b });
            best == y
        })
        .count();
    Ok(correct as f64 / test_x.len() as f64)
}

/// Feature rows of two-object scenes labelled with the scene's relation.
pub fn relation_rows(
    n_scenes: usize,
    noise_std: f64,
    use_segmentation: bool,
    rng: &mut DetRng,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let cfg = SceneConfig {
        min_objects: 2,
        max_objects: 2,
        noise_std,
        ..SceneConfig::default()
    };
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for _ in 0..n_scenes {
        let scene = generate_scene(rng, &cfg);
        let label = scene.relations()[0].index();
        let f = render_features(&scene, cfg.feature_dim, noise_std, rng);
        let t = if use_segmentation { &f.seg } else { &f.region };
        for i in 0..t.rows() {
            xs.push(t.row(i).iter().map(|&v| v as f64).collect());
            ys.push(label);
        }
    }
    (xs, ys)
}
