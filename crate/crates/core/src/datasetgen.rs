//! Dataset pipeline: commit records in, labeled function splits out.
//!
//! A changed function contributes its pre-fix body as vulnerable (P1) and its
//! post-fix body as repaired (P2). Functions identical on both sides of a
//! commit are unchanged negatives (P3). Functions are matched across sides by
//! `(file path, function name)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::{FunctionSample, Partition};

pub const COMMITS_SCHEMA: &str = "vulnlab.commits";
pub const COMMITS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionChange {
    pub name: String,
    pub before: Option<String>,
    pub after: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileChange {
    pub path: String,
    pub functions: Vec<FunctionChange>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommitRecord {
    pub commit: String,
    pub project: String,
    #[serde(default)]
    pub cwe: Option<String>,
    pub files: Vec<FileChange>,
}

impl CommitRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::MalformedCommit {
            commit: self.commit.clone(),
            reason,
        };
        if self.commit.is_empty() {
            return Err(bad("empty commit id".into()));
        }
        let mut paths = BTreeSet::new();
        for file in &self.files {
            if !paths.insert(file.path.as_str()) {
                return Err(bad(format!("file `{}` listed twice", file.path)));
            }
            let mut names = BTreeSet::new();
            for f in &file.functions {
                if !names.insert(f.name.as_str()) {
                    return Err(bad(format!("function `{}` appears twice in `{}`", f.name, file.path)));
                }
                if f.before.is_none() && f.after.is_none() {
                    return Err(bad(format!("function `{}` has neither side", f.name)));
                }
            }
        }
        Ok(())
    }

    /// Functions that differ between the two sides, including added and
    /// deleted ones.
    pub fn changed_count(&self) -> usize {
        self.files
            .iter()
            .flat_map(|f| &f.functions)
            .filter(|f| f.before != f.after)
            .count()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommitsHeader {
    schema: String,
    version: u32,
}

/// Parses commit JSONL: a header line followed by one record per line.
pub fn parse_commits(text: &str) -> Result<Vec<CommitRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Ok(Vec::new());
    };
    let header: CommitsHeader = serde_json::from_str(first)
        .map_err(|e| Error::Config(format!("commit file header: {e}")))?;
    if header.schema != COMMITS_SCHEMA || header.version != COMMITS_VERSION {
        return Err(Error::Config(format!(
            "unsupported commit file schema {} v{}",
            header.schema, header.version
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let rec: CommitRecord = serde_json::from_str(line)
            .map_err(|e| Error::Config(format!("commit file line {}: {e}", i + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn commits_to_jsonl(commits: &[CommitRecord]) -> Result<String> {
    let mut out = serde_json::to_string(&CommitsHeader {
        schema: COMMITS_SCHEMA.into(),
        version: COMMITS_VERSION,
    })?;
    out.push('\n');
    for c in commits {
        out.push_str(&serde_json::to_string(c)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_commits(path: &Path) -> Result<Vec<CommitRecord>> {
    parse_commits(&std::fs::read_to_string(path)?)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExtractedPairs {
    pub p1: Vec<FunctionSample>,
    pub p2: Vec<FunctionSample>,
    pub p3: Vec<FunctionSample>,
}

fn tagged(commit: &CommitRecord, id: String, code: &str, partition: Partition) -> FunctionSample {
    FunctionSample {
        cwe: commit.cwe.clone(),
        project: Some(commit.project.clone()),
        commit: Some(commit.commit.clone()),
        ..FunctionSample::new(id, code, partition)
    }
}

/// Splits one commit into P1/P2 pairs and P3 candidates. Added or deleted
/// functions are dropped.
pub fn extract_pairs(commit: &CommitRecord) -> Result<ExtractedPairs> {
    commit.validate()?;
    let mut out = ExtractedPairs::default();
    for file in &commit.files {
        for f in &file.functions {
            let base = format!("{}/{}/{}", commit.commit, file.path, f.name);
            match (&f.before, &f.after) {
                (Some(b), Some(a)) if b == a => {
                    out.p3.push(tagged(commit, format!("{base}#unchanged"), b, Partition::P3));
                }
                (Some(b), Some(a)) => {
                    out.p1.push(tagged(commit, format!("{base}#before"), b, Partition::P1));
                    out.p2.push(tagged(commit, format!("{base}#after"), a, Partition::P2));
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct X1Options {
    pub include_p3: bool,
    pub split_ratios: [f64; 3],
    pub seed: u64,
    /// Keep the two sides of a changed function in the same split.
    pub keep_pairs_together: bool,
    /// Assign whole projects to splits instead of samples.
    pub split_by_project: bool,
}

impl Default for X1Options {
    fn default() -> Self {
        Self {
            include_p3: false,
            split_ratios: [0.6, 0.2, 0.2],
            seed: 0,
            keep_pairs_together: true,
            split_by_project: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub p1: usize,
    pub p2: usize,
    pub p3: usize,
    pub total: usize,
}

impl SplitCounts {
    fn of(samples: &[FunctionSample]) -> Self {
        let n = |p| samples.iter().filter(|s| s.partition == p).count();
        Self {
            p1: n(Partition::P1),
            p2: n(Partition::P2),
            p3: n(Partition::P3),
            total: samples.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub options: X1Options,
    pub commits_total: usize,
    pub commits_kept: usize,
    pub train: SplitCounts,
    pub validation: SplitCounts,
    pub test: SplitCounts,
    pub positives: usize,
    pub negatives: usize,
    /// Negatives per positive; absent without positives.
    pub class_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<FunctionSample>,
    pub validation: Vec<FunctionSample>,
    pub test: Vec<FunctionSample>,
    pub metadata: BundleMetadata,
}

impl DatasetBundle {
    pub fn splits(&self) -> [(&'static str, &[FunctionSample]); 3] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }

    /// Writes `train.jsonl`, `validation.jsonl`, `test.jsonl` and
    /// `metadata.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, samples) in self.splits() {
            std::fs::write(dir.join(format!("{name}.jsonl")), samples_to_jsonl(samples)?)?;
        }
        let mut meta = serde_json::to_string_pretty(&self.metadata)?;
        meta.push('\n');
        std::fs::write(dir.join("metadata.json"), meta)?;
        Ok(())
    }
}

pub fn samples_to_jsonl(samples: &[FunctionSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_samples(text: &str) -> Result<Vec<FunctionSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: FunctionSample = serde_json::from_str(line)
            .map_err(|e| Error::Config(format!("sample line {}: {e}", i + 1)))?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

pub fn read_samples(path: &Path) -> Result<Vec<FunctionSample>> {
    parse_samples(&std::fs::read_to_string(path)?)
}

/// Integer split sizes for `n` units: floors plus largest remainders, ties
/// going to the earlier split.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

fn check_ratios(r: [f64; 3]) -> Result<()> {
    if r.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {r:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

/// Builds the single-changed-function dataset.
///
/// Units (a P1/P2 pair, or a single sample) are split within each stratum
/// so every split keeps the corpus class balance; with `split_by_project`
/// whole projects are assigned greedily to the split furthest below target.
pub fn build_x1(commits: &[CommitRecord], opts: &X1Options) -> Result<DatasetBundle> {
    check_ratios(opts.split_ratios)?;
    let mut units_pairs: Vec<Vec<FunctionSample>> = Vec::new();
    let mut units_p3: Vec<Vec<FunctionSample>> = Vec::new();
    let mut kept = 0;
    for c in commits {
        c.validate()?;
        if c.changed_count() != 1 {
            continue;
        }
        kept += 1;
        let ex = extract_pairs(c)?;
        for (b, a) in ex.p1.into_iter().zip(ex.p2) {
            if opts.keep_pairs_together {
                units_pairs.push(vec![b, a]);
            } else {
                units_pairs.push(vec![b]);
                units_pairs.push(vec![a]);
            }
        }
        if opts.include_p3 {
            units_p3.extend(ex.p3.into_iter().map(|s| vec![s]));
        }
    }
    let n_samples = units_pairs.iter().chain(&units_p3).map(Vec::len).sum::<usize>();
    if n_samples == 0 {
        return Err(Error::Config("no samples left after the single-function filter".into()));
    }
    let unique: BTreeSet<&str> = units_pairs
        .iter()
        .chain(&units_p3)
        .flatten()
        .map(|s| s.id.as_str())
        .collect();
    if unique.len() != n_samples {
        return Err(Error::Config("duplicate sample ids (repeated commit ids?)".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut splits: [Vec<FunctionSample>; 3] = Default::default();
    if opts.split_by_project {
        let mut by_project: BTreeMap<String, Vec<FunctionSample>> = BTreeMap::new();
        for s in units_pairs.into_iter().chain(units_p3).flatten() {
            by_project.entry(s.project.clone().unwrap_or_default()).or_default().push(s);
        }
        let total: usize = by_project.values().map(Vec::len).sum();
        let targets = split_sizes(total, opts.split_ratios);
        let mut groups: Vec<Vec<FunctionSample>> = by_project.into_values().collect();
        groups.shuffle(&mut rng);
        for g in groups {
            let deficit = |i: usize| targets[i] as i64 - splits[i].len() as i64;
            let best = (0..3).max_by(|&a, &b| deficit(a).cmp(&deficit(b)).then(b.cmp(&a))).unwrap();
            splits[best].extend(g);
        }
    } else {
        // split each partition stratum on its own: pairs (or P1 then P2), then P3
        let mut strata: Vec<Vec<Vec<FunctionSample>>> = Vec::new();
        if opts.keep_pairs_together {
            strata.push(units_pairs);
        } else {
            let (p1, p2): (Vec<_>, Vec<_>) =
                units_pairs.into_iter().partition(|u| u[0].partition == Partition::P1);
            strata.push(p1);
            strata.push(p2);
        }
        strata.push(units_p3);
        for mut units in strata {
            units.shuffle(&mut rng);
            let sizes = split_sizes(units.len(), opts.split_ratios);
            let mut it = units.into_iter();
            for (i, &n) in sizes.iter().enumerate() {
                splits[i].extend(it.by_ref().take(n).flatten());
            }
        }
    }

    let [train, validation, test] = splits;
    let positives = [&train, &validation, &test]
        .iter()
        .flat_map(|s| s.iter())
        .filter(|s| s.label == 1)
        .count();
    let negatives = n_samples - positives;
    let metadata = BundleMetadata {
        options: opts.clone(),
        commits_total: commits.len(),
        commits_kept: kept,
        train: SplitCounts::of(&train),
        validation: SplitCounts::of(&validation),
        test: SplitCounts::of(&test),
        positives,
        negatives,
        class_ratio: (positives > 0).then(|| negatives as f64 / positives as f64),
    };
    Ok(DatasetBundle {
        train,
        validation,
        test,
        metadata,
    })
}

/// Length histogram bins, lower bound inclusive; the last bin is open.
pub const LENGTH_BINS: [(usize, usize); 9] = [
    (0, 10),
    (10, 20),
    (20, 50),
    (50, 100),
    (100, 300),
    (300, 500),
    (500, 1000),
    (1000, 2000),
    (2000, usize::MAX),
];

/// Reference bin frequencies of parsed functions, in bin order.
pub const REFERENCE_LENGTH_COUNTS: [u64; 9] = [1976, 31627, 51972, 32194, 35769, 8756, 5515, 2236, 767];

pub fn bin_label(i: usize) -> String {
    let (lo, hi) = LENGTH_BINS[i];
    if hi == usize::MAX {
        format!(">{lo}")
    } else {
        format!("{lo}-{hi}")
    }
}

pub fn length_bin(len: usize) -> usize {
    LENGTH_BINS
        .iter()
        .position(|&(lo, hi)| len >= lo && len < hi)
        .expect("bins cover every length")
}

/// CWE frequencies used when tagging synthetic commits; `None` stands for
/// the aggregated remainder.
pub const REFERENCE_CWE_COUNTS: [(Option<&str>, u32); 19] = [
    (None, 71),
    (Some("CWE-79"), 36),
    (Some("CWE-611"), 23),
    (Some("CWE-20"), 22),
    (Some("CWE-22"), 13),
    (Some("CWE-264"), 10),
    (Some("CWE-502"), 9),
    (Some("CWE-200"), 8),
    (Some("CWE-94"), 8),
    (Some("CWE-863"), 8),
    (Some("CWE-287"), 6),
    (Some("CWE-74"), 6),
    (Some("CWE-78"), 6),
    (Some("CWE-284"), 6),
    (Some("CWE-276"), 4),
    (Some("CWE-755"), 4),
    (Some("CWE-89"), 4),
    (Some("CWE-269"), 4),
    (Some("CWE-352"), 4),
];

pub const CWE_TOP: usize = 19;
pub const OTHER: &str = "Other";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// `(bin label, count)` in bin order.
    pub histogram: Vec<(String, usize)>,
    /// Named categories by descending count (ties by name), then `Other`.
    pub cwe: Vec<(String, usize)>,
}

/// Length histogram over token counts and the CWE table. Untagged samples
/// and anything outside the top categories count as `Other`.
pub fn corpus_stats(samples: &[FunctionSample]) -> CorpusStats {
    let mut hist = [0usize; 9];
    let mut cwe: BTreeMap<&str, usize> = BTreeMap::new();
    let mut other = 0;
    for s in samples {
        hist[length_bin(s.code.len())] += 1;
        match s.cwe.as_deref() {
            Some(c) if c != OTHER => *cwe.entry(c).or_default() += 1,
            _ => other += 1,
        }
    }
    let mut named: Vec<(String, usize)> = cwe.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    named.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if named.len() > CWE_TOP {
        other += named.drain(CWE_TOP..).map(|(_, n)| n).sum::<usize>();
    }
    if other > 0 {
        named.push((OTHER.to_string(), other));
    }
    CorpusStats {
        histogram: (0..9).map(|i| (bin_label(i), hist[i])).collect(),
        cwe: named,
    }
}

impl CorpusStats {
    pub fn to_text(&self) -> String {
        let mut out = String::from("Function length (tokens)  Functions\n");
        for (label, n) in &self.histogram {
            let _ = writeln!(out, "{label:<26}{n}");
        }
        out.push_str("\nCWE                       Count\n");
        for (label, n) in &self.cwe {
            let _ = writeln!(out, "{label:<26}{n}");
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin,count\n");
        for (label, n) in &self.histogram {
            let _ = writeln!(out, "{label},{n}");
        }
        out
    }

    pub fn cwe_csv(&self) -> String {
        let mut out = String::from("cwe,count\n");
        for (label, n) in &self.cwe {
            let _ = writeln!(out, "{label},{n}");
        }
        out
    }
}

/// Weighted length bins for synthetic functions. A length is drawn by
/// picking a bin by weight, then a uniform length inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthProfile {
    /// `(lo, hi_exclusive, weight)`.
    pub bins: Vec<(usize, usize, f64)>,
}

impl Default for LengthProfile {
    /// Reference histogram; the open last bin is drawn from `[2000, 4000)`.
    fn default() -> Self {
        Self {
            bins: LENGTH_BINS
                .iter()
                .zip(REFERENCE_LENGTH_COUNTS)
                .map(|(&(lo, hi), w)| (lo, if hi == usize::MAX { 2 * lo } else { hi }, w as f64))
                .collect(),
        }
    }
}

impl LengthProfile {
    pub fn uniform(lo: usize, hi: usize) -> Self {
        Self {
            bins: vec![(lo, hi, 1.0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.bins.is_empty()
            && self.bins.iter().all(|&(lo, hi, w)| lo < hi && w.is_finite() && w >= 0.0)
            && self.bins.iter().any(|b| b.2 > 0.0);
        if !ok {
            return Err(Error::Config("length profile needs non-empty bins with positive total weight".into()));
        }
        Ok(())
    }

    /// Draws a length of at least `min_len`, staying inside the chosen bin
    /// when the bin allows it.
    pub fn sample<R: Rng>(&self, rng: &mut R, min_len: usize) -> usize {
        let total: f64 = self.bins.iter().map(|b| b.2).sum();
        let mut x = rng.gen::<f64>() * total;
        let mut chosen = self.bins[self.bins.len() - 1];
        for &b in &self.bins {
            if x < b.2 {
                chosen = b;
                break;
            }
            x -= b.2;
        }
        let (lo, hi, _) = chosen;
        let lo = lo.max(min_len).min(hi - 1).max(min_len);
        if lo >= hi {
            return lo;
        }
        rng.gen_range(lo..hi)
    }
}

pub const SENTINEL: &str = "exec($@);";
pub const SENTINEL_FIX: &str = "exec(ok);";
/// Sentinels are placed within this many leading bytes so truncation never
/// removes them.
pub const SENTINEL_WINDOW: usize = 200;

/// Probability that a function body carries the sentinel, by role.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentinelStrength {
    pub vulnerable: f64,
    pub fixed: f64,
}

impl SentinelStrength {
    pub const STRONG: Self = Self {
        vulnerable: 1.0,
        fixed: 0.0,
    };
    pub const WEAK: Self = Self {
        vulnerable: 0.7,
        fixed: 0.3,
    };
}

impl Default for SentinelStrength {
    fn default() -> Self {
        Self::STRONG
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthOptions {
    pub seed: u64,
    /// Single-function fix commits; each yields one P1 and one P2 sample.
    pub n_pos: usize,
    /// Unchanged functions written in the same style as the fixed code.
    pub n_neg_hard: usize,
    /// Unchanged trivial accessors.
    pub n_neg_easy: usize,
    pub length_profile: LengthProfile,
    pub sentinel: SentinelStrength,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pos: 100,
            n_neg_hard: 0,
            n_neg_easy: 0,
            length_profile: LengthProfile::default(),
            sentinel: SentinelStrength::STRONG,
        }
    }
}

const FILLER: [&str; 12] = [
    "x=1;", "y+=x;", "call(a);", "if(a){b();}", "i++;", "s=t;", "log(m);", "n*=2;", "for(;;){}", "v[i]=0;",
    "q=r-1;", "w(x,y);",
];
const PROJECTS: [&str; 6] = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot"];

/// Pseudo-code of exactly `len` bytes. With `marker`, it is spliced in
/// within the leading window.
fn synth_body<R: Rng>(rng: &mut R, len: usize, name: &str, marker: Option<&str>) -> String {
    let mut s = format!("void {name}(){{");
    while s.len() < len + 16 {
        s.push_str(FILLER[rng.gen_range(0..FILLER.len())]);
    }
    s.truncate(len.saturating_sub(1));
    s.push('}');
    s.truncate(len);
    if let Some(m) = marker {
        let room = len.saturating_sub(m.len());
        let at = rng.gen_range(0..=room.min(SENTINEL_WINDOW));
        s.replace_range(at..at + m.len(), m);
    }
    s
}

fn easy_body<R: Rng>(rng: &mut R, len: usize, k: usize) -> String {
    let field = ["id", "name", "size", "count", "owner"][rng.gen_range(0..5)];
    let mut s = format!("int get_{field}{k}(){{return this.{field};}}");
    while s.len() < len {
        s.push(' ');
    }
    s.truncate(len);
    s
}

fn sample_cwe<R: Rng>(rng: &mut R) -> Option<String> {
    let total: u32 = REFERENCE_CWE_COUNTS.iter().map(|c| c.1).sum();
    let mut x = rng.gen_range(0..total);
    for (c, w) in REFERENCE_CWE_COUNTS {
        if x < w {
            return c.map(String::from);
        }
        x -= w;
    }
    None
}

/// Synthetic fix commits. Every commit changes exactly one function; the
/// unchanged negatives are spread round-robin over the commits (or over
/// change-free commits when `n_pos` is zero).
pub fn synth_corpus(opts: &SynthOptions) -> Result<Vec<CommitRecord>> {
    opts.length_profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let marker_len = SENTINEL.len();
    let n_commits = opts.n_pos.max(usize::from(opts.n_neg_hard + opts.n_neg_easy > 0));
    let mut commits: Vec<CommitRecord> = (0..n_commits)
        .map(|i| CommitRecord {
            commit: format!("synth{:06}", i),
            project: PROJECTS[i % PROJECTS.len()].to_string(),
            cwe: None,
            files: vec![FileChange {
                path: format!("src/Mod{i}.java"),
                functions: Vec::new(),
            }],
        })
        .collect();
    for (i, c) in commits.iter_mut().enumerate().take(opts.n_pos) {
        c.cwe = sample_cwe(&mut rng);
        let len = opts.length_profile.sample(&mut rng, marker_len);
        let name = format!("handle{i}");
        let vuln = rng.gen::<f64>() < opts.sentinel.vulnerable;
        let fixed = rng.gen::<f64>() < opts.sentinel.fixed;
        let before = synth_body(&mut rng, len, &name, Some(if vuln { SENTINEL } else { SENTINEL_FIX }));
        // the fix rewrites the marker and touches one filler byte so the
        // sides always differ
        let mut after = before.clone();
        let at = before.find(if vuln { SENTINEL } else { SENTINEL_FIX }).expect("marker present");
        after.replace_range(at..at + marker_len, if fixed { SENTINEL } else { SENTINEL_FIX });
        if after == before {
            after = synth_body(&mut rng, len, &name, Some(if fixed { SENTINEL } else { SENTINEL_FIX }));
            if after == before {
                after.replace_range(0..1, if &before[0..1] == "v" { "V" } else { "v" });
            }
        }
        c.files[0].functions.push(FunctionChange {
            name,
            before: Some(before),
            after: Some(after),
        });
    }
    let n_neg = opts.n_neg_hard + opts.n_neg_easy;
    for j in 0..n_neg {
        let c = &mut commits[j % n_commits];
        let body = if j < opts.n_neg_hard {
            let len = opts.length_profile.sample(&mut rng, marker_len);
            let with = rng.gen::<f64>() < opts.sentinel.fixed;
            synth_body(&mut rng, len, &format!("util{j}"), Some(if with { SENTINEL } else { SENTINEL_FIX }))
        } else {
            let len = opts.length_profile.sample(&mut rng, 1);
            easy_body(&mut rng, len, j)
        };
        c.files[0].functions.push(FunctionChange {
            name: format!("keep{j}"),
            before: Some(body.clone()),
            after: Some(body),
        });
    }
    Ok(commits)
}
