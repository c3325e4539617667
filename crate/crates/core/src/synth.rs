//! Seeded synthetic corpus of voice-trigger (VT) and touch-based (TB)
//! invocations.
//!
//! Every phone owns a mean feature vector drawn once from the corpus seed.
//! A frame is its phone's mean plus Gaussian noise plus a per-utterance
//! channel offset. Utterances are phone sequences:
//!
//! * VT directed: keyword motif, then command content.
//! * VT undirected: a confusable motif (the keyword with one phone swapped),
//!   then command content interleaved with short ordered chatter motifs.
//! * TB directed: command content.
//! * TB undirected: command content interleaved with chatter motifs of a
//!   second, disjoint set.
//!
//! Chatter motifs are short sequences of phones reserved for background
//! speech. Keyword and chatter phones never occur in command content. Utterance `i` of cell `c` in split `s` draws from its own stream
//! seeded by `derive_seed(seed, stream(s, c), i)`, so the corpus does not
//! depend on generation order.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FtmError, Result};
use crate::features::{load_ftmf, save_ftmf, stack_and_subsample, FeatureSequence, RAW_FRAME_PERIOD_MS};
use crate::losses::PhoneLabels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Invocation {
    Vt,
    Tb,
}

impl Invocation {
    pub const ALL: [Invocation; 2] = [Invocation::Vt, Invocation::Tb];

    pub fn name(self) -> &'static str {
        match self {
            Invocation::Vt => "vt",
            Invocation::Tb => "tb",
        }
    }
}

impl fmt::Display for Invocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Invocation {
    type Err = FtmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vt" => Ok(Invocation::Vt),
            "tb" => Ok(Invocation::Tb),
            other => Err(FtmError::Config(format!("unknown invocation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl FromStr for Split {
    type Err = FtmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(FtmError::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Utterance counts per (invocation, directedness) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellCounts {
    pub vt_directed: usize,
    pub vt_undirected: usize,
    pub tb_directed: usize,
    pub tb_undirected: usize,
}

impl CellCounts {
    pub fn total(&self) -> usize {
        self.vt_directed + self.vt_undirected + self.tb_directed + self.tb_undirected
    }

    fn cells(&self) -> [(Invocation, bool, usize); 4] {
        [
            (Invocation::Vt, true, self.vt_directed),
            (Invocation::Vt, false, self.vt_undirected),
            (Invocation::Tb, true, self.tb_directed),
            (Invocation::Tb, false, self.tb_undirected),
        ]
    }
}

/// Utterance duration distribution in seconds (normal, truncated to the
/// corpus length bounds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthDist {
    pub mean_s: f64,
    pub std_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub train: CellCounts,
    pub eval: CellCounts,
    pub vt_length: LengthDist,
    pub tb_length: LengthDist,
    /// Shortest utterance in raw frames.
    pub min_raw_frames: usize,
    /// Longest utterance in raw frames.
    pub max_raw_frames: usize,
    /// Raw feature dimension.
    pub raw_dim: usize,
    /// Phone symbols 1..=phone_alphabet.
    pub phone_alphabet: usize,
    pub keyword: Vec<usize>,
    /// Phones making up command content.
    pub command_phones: Vec<usize>,
    /// Ordered chatter motifs of VT-undirected speech.
    pub vt_chatter_motifs: Vec<Vec<usize>>,
    /// Ordered chatter motifs of TB-undirected speech.
    pub tb_chatter_motifs: Vec<Vec<usize>>,
    /// Mean number of content phones between chatter motifs.
    pub chatter_gap_phones: f64,
    /// Raw frames per phone, inclusive range.
    pub phone_frames: (usize, usize),
    /// Spread of the phone mean vectors.
    pub centroid_std: f64,
    /// Per-frame noise.
    pub noise_std: f64,
    /// Per-utterance channel offset.
    pub channel_std: f64,
    /// Frames stacked on each side of a kept frame.
    pub context: usize,
    pub subsample: usize,
}

impl Default for CorpusSpec {
    /// Desk-scale corpus: 2000 training and 400 evaluation utterances, with
    /// VT eval 7:1 and TB eval 3:1 directed-to-undirected.
    fn default() -> Self {
        CorpusSpec {
            seed: 1,
            train: CellCounts {
                vt_directed: 800,
                vt_undirected: 200,
                tb_directed: 700,
                tb_undirected: 300,
            },
            eval: CellCounts {
                vt_directed: 175,
                vt_undirected: 25,
                tb_directed: 150,
                tb_undirected: 50,
            },
            vt_length: LengthDist { mean_s: 5.2, std_s: 2.1 },
            tb_length: LengthDist { mean_s: 4.1, std_s: 3.7 },
            min_raw_frames: 192,
            max_raw_frames: 1000,
            raw_dim: 40,
            phone_alphabet: 32,
            keyword: vec![1, 2, 3, 4],
            command_phones: (5..=24).collect(),
            vt_chatter_motifs: vec![vec![25, 26], vec![27, 28], vec![26, 25, 28]],
            tb_chatter_motifs: vec![vec![29, 30], vec![31, 32], vec![30, 29, 32]],
            chatter_gap_phones: 10.0,
            phone_frames: (6, 15),
            centroid_std: 1.0,
            noise_std: 2.0,
            channel_std: 0.3,
            context: 3,
            subsample: 3,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FtmError::Config(m));
        if self.train.total() + self.eval.total() == 0 {
            return bad("corpus spec requests zero utterances".into());
        }
        if self.raw_dim == 0 || self.subsample == 0 {
            return bad("raw_dim and subsample must be positive".into());
        }
        if self.min_raw_frames == 0 || self.min_raw_frames > self.max_raw_frames {
            return bad(format!(
                "min_raw_frames {} must be in 1..=max_raw_frames {}",
                self.min_raw_frames, self.max_raw_frames
            ));
        }
        let (lo, hi) = self.phone_frames;
        if lo == 0 || lo > hi {
            return bad(format!("phone_frames ({lo}, {hi}) is not a valid range"));
        }
        let in_alphabet = |p: &usize| (1..=self.phone_alphabet).contains(p);
        if self.keyword.len() < 2 || !self.keyword.iter().all(in_alphabet) {
            return bad("keyword needs at least two phones within the alphabet".into());
        }
        if self.command_phones.len() < 2 || !self.command_phones.iter().all(in_alphabet) {
            return bad("command_phones needs at least two phones within the alphabet".into());
        }
        if self.command_phones.iter().any(|p| self.keyword.contains(p)) {
            return bad("command_phones must not include keyword phones".into());
        }
        for m in self.vt_chatter_motifs.iter().chain(&self.tb_chatter_motifs) {
            if m.is_empty() || !m.iter().all(in_alphabet) {
                return bad("chatter motifs must be non-empty sequences of phones within the alphabet".into());
            }
            if m.iter().any(|p| self.command_phones.contains(p) || self.keyword.contains(p)) {
                return bad("chatter motifs must not use keyword or command phones".into());
            }
            if m.windows(2).any(|w| w[0] == w[1]) {
                return bad("chatter motifs must not repeat a phone back to back".into());
            }
        }
        if self.vt_chatter_motifs.iter().any(|m| self.tb_chatter_motifs.contains(m)) {
            return bad("VT and TB chatter motif sets must be disjoint".into());
        }
        for (inv, set) in [(Invocation::Vt, &self.vt_chatter_motifs), (Invocation::Tb, &self.tb_chatter_motifs)] {
            let undirected = match inv {
                Invocation::Vt => self.train.vt_undirected + self.eval.vt_undirected,
                Invocation::Tb => self.train.tb_undirected + self.eval.tb_undirected,
            };
            if set.is_empty() && undirected > 0 {
                return bad(format!("{inv}-undirected utterances need at least one chatter motif"));
            }
        }
        if self.chatter_gap_phones < 1.0 {
            return bad("chatter_gap_phones must be at least 1".into());
        }
        for (name, v) in [
            ("centroid_std", self.centroid_std),
            ("noise_std", self.noise_std),
            ("channel_std", self.channel_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        for (name, d) in [("vt_length", self.vt_length), ("tb_length", self.tb_length)] {
            if !(d.mean_s > 0.0 && d.std_s >= 0.0) {
                return bad(format!("{name} needs a positive mean and non-negative std"));
            }
        }
        Ok(())
    }

    pub fn counts(&self, split: Split) -> &CellCounts {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    /// Period of the stacked model-input frames in milliseconds.
    pub fn chatter_motifs(&self, inv: Invocation) -> &[Vec<usize>] {
        match inv {
            Invocation::Vt => &self.vt_chatter_motifs,
            Invocation::Tb => &self.tb_chatter_motifs,
        }
    }

    pub fn frame_period_ms(&self) -> f64 {
        RAW_FRAME_PERIOD_MS * self.subsample as f64
    }
}

/// One synthetic utterance. Features are raw (`raw_dim`-wide, 10 ms frames);
/// [`Utterance::model_input`] stacks and subsamples them.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    pub invocation: Invocation,
    pub directed: bool,
    pub phones: PhoneLabels,
    pub features: FeatureSequence,
    /// Raw frame where the keyword motif ends (VT-directed only).
    pub keyword_end: Option<usize>,
    /// Phones of the keyword motif at the start of `phones` (VT-directed only).
    pub keyword_phones: usize,
    /// Raw frame where each phone ends.
    pub phone_ends: Vec<usize>,
}

impl Utterance {
    pub fn duration_frames(&self) -> usize {
        self.features.n_frames()
    }

    /// Phone id of every raw frame.
    pub fn frame_phones(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.duration_frames());
        let mut start = 0;
        for (&p, &end) in self.phones.symbols().iter().zip(&self.phone_ends) {
            out.extend(std::iter::repeat_n(p, end - start));
            start = end;
        }
        out
    }

    pub fn label(&self) -> usize {
        usize::from(self.directed)
    }

    pub fn model_input(&self, context: usize, subsample: usize) -> Result<FeatureSequence> {
        stack_and_subsample(&self.features, context, subsample)
    }
}

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of item `index` in stream `stream` under master seed `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_mul(0x1_0000_0001) ^ mix(index)))
}

const CENTROID_STREAM: u64 = 0;

fn cell_stream(split: Split, inv: Invocation, directed: bool) -> u64 {
    1 + (split as u64) * 4 + (inv as u64) * 2 + u64::from(!directed)
}

/// Mean feature vector of every phone id (index 0 is unused).
pub fn phone_means(spec: &CorpusSpec) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, CENTROID_STREAM, 0));
    let n = Normal::new(0.0, spec.centroid_std).expect("validated std");
    (0..=spec.phone_alphabet)
        .map(|_| (0..spec.raw_dim).map(|_| n.sample(&mut rng) as f32).collect())
        .collect()
}

fn draw_length(rng: &mut ChaCha8Rng, d: LengthDist, spec: &CorpusSpec) -> usize {
    let n = Normal::new(d.mean_s, d.std_s.max(1e-9)).expect("validated length");
    let frames_per_s = 1000.0 / RAW_FRAME_PERIOD_MS;
    for _ in 0..1000 {
        let f = (n.sample(rng) * frames_per_s).round();
        if f >= spec.min_raw_frames as f64 && f <= spec.max_raw_frames as f64 {
            return f as usize;
        }
    }
    (d.mean_s * frames_per_s).round().clamp(spec.min_raw_frames as f64, spec.max_raw_frames as f64) as usize
}

/// A content phone differing from `prev`.
fn content_phone(rng: &mut ChaCha8Rng, spec: &CorpusSpec, prev: Option<usize>) -> usize {
    loop {
        let p = spec.command_phones[rng.random_range(0..spec.command_phones.len())];
        if Some(p) != prev {
            return p;
        }
    }
}

/// The keyword with one position replaced by a command phone.
fn confusable(rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> Vec<usize> {
    let mut m = spec.keyword.clone();
    let pos = rng.random_range(0..m.len());
    let neighbours = |m: &Vec<usize>, p: usize| {
        (pos > 0 && m[pos - 1] == p) || (pos + 1 < m.len() && m[pos + 1] == p)
    };
    loop {
        let p = content_phone(rng, spec, None);
        if !neighbours(&m, p) {
            m[pos] = p;
            return m;
        }
    }
}

/// Phone sequence plus the index of the first phone after the leading motif.
fn phone_plan(rng: &mut ChaCha8Rng, spec: &CorpusSpec, inv: Invocation, directed: bool) -> (Vec<usize>, usize) {
    let mut phones = match (inv, directed) {
        (Invocation::Vt, true) => spec.keyword.clone(),
        (Invocation::Vt, false) => confusable(rng, spec),
        (Invocation::Tb, _) => Vec::new(),
    };
    let lead = phones.len();
    // Generous upper bound on the phones the utterance can hold.
    let budget = spec.max_raw_frames / spec.phone_frames.0 + 1;
    let motifs = spec.chatter_motifs(inv);
    let chatter = !directed;
    // The first motif comes early enough to fit the shortest utterance.
    let mut until_motif = if chatter {
        rng.random_range(0.0..spec.chatter_gap_phones / 2.0) as usize
    } else {
        usize::MAX
    };
    while phones.len() < budget {
        if until_motif == 0 {
            let m = &motifs[rng.random_range(0..motifs.len())];
            if phones.last() == m.first() {
                phones.push(content_phone(rng, spec, phones.last().copied()));
            }
            phones.extend_from_slice(m);
            until_motif = 1 + rng.random_range(0.0..2.0 * spec.chatter_gap_phones) as usize;
            continue;
        }
        phones.push(content_phone(rng, spec, phones.last().copied()));
        until_motif = until_motif.saturating_sub(1);
    }
    (phones, lead)
}

fn synthesize(spec: &CorpusSpec, means: &[Vec<f32>], split: Split, inv: Invocation, directed: bool, index: usize) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, cell_stream(split, inv, directed), index as u64));
    let dist = match inv {
        Invocation::Vt => spec.vt_length,
        Invocation::Tb => spec.tb_length,
    };
    let target = draw_length(&mut rng, dist, spec);
    let (plan, lead) = phone_plan(&mut rng, spec, inv, directed);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let chan = Normal::new(0.0, spec.channel_std).expect("validated std");
    let offset: Vec<f32> = (0..spec.raw_dim).map(|_| chan.sample(&mut rng) as f32).collect();
    let mut frames = Vec::with_capacity(target * spec.raw_dim);
    let mut phones = Vec::new();
    let mut phone_ends = Vec::new();
    let mut keyword_end = None;
    let mut t = 0;
    for (i, &p) in plan.iter().enumerate() {
        if t >= target {
            break;
        }
        if i == lead && lead > 0 {
            keyword_end = Some(t);
        }
        let dur = rng.random_range(spec.phone_frames.0..=spec.phone_frames.1).min(target - t);
        for _ in 0..dur {
            for (&m, &o) in means[p].iter().zip(&offset) {
                frames.push(m + o + noise.sample(&mut rng) as f32);
            }
        }
        phones.push(p);
        t += dur;
        phone_ends.push(t);
    }
    if lead > 0 && phones.len() < lead {
        return Err(FtmError::Config("utterance too short to hold the leading motif".into()));
    }
    let id = format!(
        "{}-{}-{}-{index:05}",
        split.name(),
        inv.name(),
        if directed { "dir" } else { "und" }
    );
    Ok(Utterance {
        id,
        split,
        invocation: inv,
        directed,
        phones: PhoneLabels::new(phones, spec.phone_alphabet)?,
        features: FeatureSequence::new(frames, spec.raw_dim, RAW_FRAME_PERIOD_MS)?,
        keyword_end: if inv == Invocation::Vt && directed { keyword_end } else { None },
        keyword_phones: if inv == Invocation::Vt && directed { lead } else { 0 },
        phone_ends,
    })
}

/// Generates the full corpus: training split first, then evaluation, each in
/// cell order VT-directed, VT-undirected, TB-directed, TB-undirected.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let means = phone_means(spec);
    let mut out = Vec::with_capacity(spec.train.total() + spec.eval.total());
    for split in [Split::Train, Split::Eval] {
        for (inv, directed, n) in spec.counts(split).cells() {
            for i in 0..n {
                out.push(synthesize(spec, &means, split, inv, directed, i)?);
            }
        }
    }
    Ok(out)
}

/// Strips the keyword from a VT-directed utterance, leaving its payload as
/// a TB-directed utterance.
pub fn segment_payload(u: &Utterance) -> Result<Utterance> {
    if u.invocation != Invocation::Vt || !u.directed {
        return Err(FtmError::Data(format!("{}: payload segmentation needs a VT-directed utterance", u.id)));
    }
    let cut = u
        .keyword_end
        .ok_or_else(|| FtmError::Data(format!("{}: keyword boundary unknown", u.id)))?;
    if cut >= u.features.n_frames() || u.keyword_phones >= u.phones.len() {
        return Err(FtmError::Data(format!("{}: no payload after the keyword", u.id)));
    }
    let rest = u.phones.symbols()[u.keyword_phones..].to_vec();
    let alphabet = rest.iter().copied().max().unwrap_or(1);
    Ok(Utterance {
        id: format!("{}-payload", u.id),
        split: u.split,
        invocation: Invocation::Tb,
        directed: true,
        phones: PhoneLabels::new(rest, alphabet)?,
        features: u.features.slice(cut, u.features.n_frames())?,
        keyword_end: None,
        keyword_phones: 0,
        phone_ends: u.phone_ends[u.keyword_phones..].iter().map(|e| e - cut).collect(),
    })
}

/// One manifest record per utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub split: Split,
    pub directed: bool,
    pub invocation: Invocation,
    pub phones: Vec<usize>,
    pub frames: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub keyword_end: Option<usize>,
    #[serde(skip_serializing_if = "is_zero", default)]
    pub keyword_phones: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub phone_ends: Vec<usize>,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl ManifestRecord {
    pub fn of(u: &Utterance, path: impl Into<String>) -> Self {
        ManifestRecord {
            id: u.id.clone(),
            path: path.into(),
            split: u.split,
            directed: u.directed,
            invocation: u.invocation,
            phones: u.phones.symbols().to_vec(),
            frames: u.duration_frames(),
            keyword_end: u.keyword_end,
            keyword_phones: u.keyword_phones,
            phone_ends: u.phone_ends.clone(),
        }
    }

    /// Loads the utterance, resolving `path` against `root`.
    pub fn load(&self, root: &Path, alphabet: usize) -> Result<Utterance> {
        let features = load_ftmf(&root.join(&self.path), RAW_FRAME_PERIOD_MS)?;
        if features.n_frames() != self.frames {
            return Err(FtmError::Data(format!(
                "{}: manifest says {} frames, file holds {}",
                self.id,
                self.frames,
                features.n_frames()
            )));
        }
        Ok(Utterance {
            id: self.id.clone(),
            split: self.split,
            invocation: self.invocation,
            directed: self.directed,
            phones: PhoneLabels::new(self.phones.clone(), alphabet)?,
            features,
            keyword_end: self.keyword_end,
            keyword_phones: self.keyword_phones,
            phone_ends: self.phone_ends.clone(),
        })
    }
}

/// Writes every utterance as `<dir>/feats/<id>.ftmf` plus `<dir>/manifest.jsonl`.
pub fn write_corpus(dir: &Path, corpus: &[Utterance]) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(dir.join("feats"))?;
    let mut records = Vec::with_capacity(corpus.len());
    for u in corpus {
        let rel = format!("feats/{}.ftmf", u.id);
        save_ftmf(&dir.join(&rel), &u.features)?;
        records.push(ManifestRecord::of(u, rel));
    }
    let f = std::io::BufWriter::new(std::fs::File::create(dir.join(MANIFEST_FILE))?);
    write_manifest(f, &records)?;
    Ok(records)
}

/// Reads a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &Path, alphabet: usize) -> Result<Vec<Utterance>> {
    let f = std::fs::File::open(dir.join(MANIFEST_FILE))
        .map_err(|e| FtmError::Data(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    read_manifest(std::io::BufReader::new(f))?
        .iter()
        .map(|r| r.load(dir, alphabet))
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes records as JSON lines.
pub fn write_manifest<W: Write>(mut w: W, records: &[ManifestRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| FtmError::Format(format!("manifest line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
