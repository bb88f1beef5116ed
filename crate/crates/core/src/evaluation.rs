//! Event decoding, collar-based event matching and event-based F1 reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::datagen::{read_manifest, ClipLabels, ManifestKind};
use crate::dataset::load_eval_items;
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::training::{score_items, scoring_network, ScoreModel};

/// A timed sound event of class `class_id` active on `[onset, offset)` seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub class_id: usize,
    pub onset: f64,
    pub offset: f64,
}

impl Event {
    pub fn new(class_id: usize, onset: f64, offset: f64) -> Self {
        Self { class_id, onset, offset }
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }

    pub fn is_valid(&self) -> bool {
        self.onset >= 0.0 && self.onset < self.offset
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub threshold: f64,
    /// Odd window length in frames; 1 disables filtering.
    pub median_window: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { threshold: 0.5, median_window: 5 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("decode.threshold must lie in (0, 1)".into()));
        }
        if self.median_window == 0 || self.median_window % 2 == 0 {
            return Err(Error::Config("decode.median_window must be odd and >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub onset_collar: f64,
    pub offset_collar_abs: f64,
    pub offset_collar_rel: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { onset_collar: 0.2, offset_collar_abs: 0.2, offset_collar_rel: 0.2 }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.onset_collar, self.offset_collar_abs, self.offset_collar_rel].iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::Config("match collars must be non-negative".into()));
        }
        Ok(())
    }

    /// Whether `pred` falls inside the collars around `reference`.
    pub fn compatible(&self, reference: &Event, pred: &Event) -> bool {
        const EPS: f64 = 1e-9;
        let offset_collar = self.offset_collar_abs.max(self.offset_collar_rel * reference.duration());
        reference.class_id == pred.class_id
            && (reference.onset - pred.onset).abs() <= self.onset_collar + EPS
            && (reference.offset - pred.offset).abs() <= offset_collar + EPS
    }
}

/// Median filter of a binary sequence with edge replication.
fn median_binary(bits: &[bool], window: usize) -> Vec<bool> {
    let half = window / 2;
    let n = bits.len();
    (0..n)
        .map(|i| {
            let ones = (0..window)
                .filter(|&k| {
                    let j = (i + k).saturating_sub(half).min(n - 1);
                    bits[j]
                })
                .count();
            2 * ones > window
        })
        .collect()
}

/// Thresholds each class column of `strong` (`[frames × classes]`), median
/// filters it, and turns each maximal run of active frames `i..=j` into the
/// event `[i·hop, (j+1)·hop)`. Events are ordered by class then onset.
pub fn decode_events(strong: ArrayView2<'_, f32>, cfg: &DecodeConfig, hop_seconds: f64) -> Result<Vec<Event>> {
    cfg.validate()?;
    if strong.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite frame probability".into()));
    }
    let mut events = Vec::new();
    if strong.nrows() == 0 {
        return Ok(events);
    }
    for (class_id, column) in strong.columns().into_iter().enumerate() {
        let bits: Vec<bool> = column.iter().map(|&p| p as f64 > cfg.threshold).collect();
        let smoothed = if cfg.median_window > 1 { median_binary(&bits, cfg.median_window) } else { bits };
        let mut start = None;
        for (i, &on) in smoothed.iter().chain(std::iter::once(&false)).enumerate() {
            match (on, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    events.push(Event::new(class_id, s as f64 * hop_seconds, i as f64 * hop_seconds));
                    start = None;
                }
                _ => {}
            }
        }
    }
    Ok(events)
}

/// True positive, false positive and false negative counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Per-class counts; merging is an associative reduction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts(pub BTreeMap<usize, Counts>);

impl ClassCounts {
    pub fn merge(&mut self, other: &ClassCounts) {
        for (c, counts) in &other.0 {
            self.0.entry(*c).or_default().merge(counts);
        }
    }

    pub fn get(&self, class_id: usize) -> Counts {
        self.0.get(&class_id).copied().unwrap_or_default()
    }

    /// Makes every class in `0..n_classes` present, possibly with zero counts.
    pub fn with_classes(mut self, n_classes: usize) -> Self {
        for c in 0..n_classes {
            self.0.entry(c).or_default();
        }
        self
    }
}

/// Size of a maximum matching in the bipartite graph `adj` (left → right).
fn maximum_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; n_right];
    let mut size = 0;
    for u in 0..adj.len() {
        let mut seen = vec![false; n_right];
        if augment(u, adj, &mut seen, &mut owner) {
            size += 1;
        }
    }
    size
}

/// Counts one-to-one matches between reference and predicted events of each
/// class. TP is the size of a maximum matching over collar-compatible pairs.
pub fn match_events(reference: &[Event], pred: &[Event], cfg: &MatchConfig) -> ClassCounts {
    let mut classes: Vec<usize> = reference.iter().chain(pred).map(|e| e.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = ClassCounts::default();
    for c in classes {
        let refs: Vec<&Event> = reference.iter().filter(|e| e.class_id == c).collect();
        let preds: Vec<&Event> = pred.iter().filter(|e| e.class_id == c).collect();
        let adj: Vec<Vec<usize>> = refs
            .iter()
            .map(|r| (0..preds.len()).filter(|&j| cfg.compatible(r, preds[j])).collect())
            .collect();
        let tp = maximum_matching(&adj, preds.len());
        out.0.insert(c, Counts { tp, fp: preds.len() - tp, fn_: refs.len() - tp });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Event-based scores of one run on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run: String,
    pub split: String,
    pub classes: Vec<ClassMetrics>,
    /// Mean F1 over classes that have at least one reference event.
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and `F1 = 2TP / (2TP + FP + FN)` per class, 0/0 := 0.
pub fn event_based_f1(counts: &ClassCounts) -> MetricsReport {
    let classes: Vec<ClassMetrics> = counts
        .0
        .iter()
        .map(|(&class_id, c)| ClassMetrics {
            class_id,
            counts: *c,
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        })
        .collect();
    let scored: Vec<f64> = classes.iter().filter(|m| m.counts.tp + m.counts.fn_ > 0).map(|m| m.f1).collect();
    let macro_f1 = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    MetricsReport { run: String::new(), split: String::new(), classes, macro_f1 }
}

impl MetricsReport {
    pub fn named(mut self, run: impl Into<String>, split: impl Into<String>) -> Self {
        self.run = run.into();
        self.split = split.into();
        self
    }

    /// Tab-separated `key=value` records: one summary line, then one line per class.
    pub fn to_records(&self) -> String {
        let mut s = format!("run={}\tsplit={}\tmacro_f1={:.6}\n", self.run, self.split, self.macro_f1);
        for m in &self.classes {
            let _ = writeln!(
                s,
                "class={}\ttp={}\tfp={}\tfn={}\tprecision={:.6}\trecall={:.6}\tf1={:.6}",
                m.class_id, m.counts.tp, m.counts.fp, m.counts.fn_, m.precision, m.recall, m.f1
            );
        }
        s
    }

    pub fn parse_records(text: &str, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Report { path: path.to_path_buf(), msg };
        let fields = |line: &str| -> Result<BTreeMap<String, String>> {
            line.split('\t')
                .map(|kv| {
                    kv.split_once('=')
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .ok_or_else(|| bad(format!("expected key=value, found {kv:?}")))
                })
                .collect()
        };
        let get = |map: &BTreeMap<String, String>, key: &str| -> Result<String> {
            map.get(key).cloned().ok_or_else(|| bad(format!("missing key {key}")))
        };
        let num = |s: String| -> Result<f64> { s.parse().map_err(|_| bad(format!("not a number: {s:?}"))) };
        let int = |s: String| -> Result<usize> { s.parse().map_err(|_| bad(format!("not a count: {s:?}"))) };

        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = fields(lines.next().ok_or_else(|| bad("empty report".into()))?)?;
        let mut report = MetricsReport {
            run: get(&head, "run")?,
            split: get(&head, "split")?,
            classes: Vec::new(),
            macro_f1: num(get(&head, "macro_f1")?)?,
        };
        if !(0.0..=1.0).contains(&report.macro_f1) {
            return Err(bad("macro_f1 outside [0, 1]".into()));
        }
        for line in lines {
            let f = fields(line)?;
            report.classes.push(ClassMetrics {
                class_id: int(get(&f, "class")?)?,
                counts: Counts { tp: int(get(&f, "tp")?)?, fp: int(get(&f, "fp")?)?, fn_: int(get(&f, "fn")?)? },
                precision: num(get(&f, "precision")?)?,
                recall: num(get(&f, "recall")?)?,
                f1: num(get(&f, "f1")?)?,
            });
        }
        Ok(report)
    }
}

/// Formats macro F1 in percent with one decimal.
pub fn percent(macro_f1: f64) -> String {
    format!("{:.1}", macro_f1 * 100.0)
}

/// Fixed-width comparison table: one row per run (first-appearance order),
/// one column per split (first-appearance order), cells are macro F1 in percent.
pub fn compare_table(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to compare".into()));
    }
    let mut runs: Vec<&str> = Vec::new();
    let mut splits: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for r in reports {
        if cells.insert((r.run.as_str(), r.split.as_str()), r.macro_f1).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate run {:?} on split {:?}", r.run, r.split)));
        }
        if !runs.contains(&r.run.as_str()) {
            runs.push(&r.run);
        }
        if !splits.contains(&r.split.as_str()) {
            splits.push(&r.split);
        }
    }
    let name_w = runs.iter().map(|r| r.len()).chain(std::iter::once("Model".len())).max().unwrap_or(5);
    let col_w: Vec<usize> = splits.iter().map(|s| s.len().max(6)).collect();
    let mut out = format!("{:<name_w$}", "Model");
    for (s, w) in splits.iter().zip(&col_w) {
        let _ = write!(out, " | {s:>w$}");
    }
    out.push('\n');
    let rule = name_w + col_w.iter().map(|w| w + 3).sum::<usize>();
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for run in &runs {
        let _ = write!(out, "{run:<name_w$}");
        for (s, w) in splits.iter().zip(&col_w) {
            let cell = cells.get(&(*run, *s)).map(|v| percent(*v)).unwrap_or_else(|| "-".into());
            let _ = write!(out, " | {cell:>w$}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Source of the frame probabilities scored by [`evaluate_run`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    Model(ScoreModel),
    /// The manifest's own labels; a debugging aid that must score 1.
    GroundTruth,
}

/// Scores a checkpoint on a timed-label manifest. The report's split name is
/// the manifest's file stem and its run name the checkpoint's mode label.
pub fn evaluate_run(
    checkpoint: &Checkpoint,
    manifest_path: &Path,
    predictor: Predictor,
    decode: &DecodeConfig,
    matching: &MatchConfig,
) -> Result<MetricsReport> {
    decode.validate()?;
    matching.validate()?;
    let n_classes = checkpoint.model.n_classes;
    let split = manifest_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let run = checkpoint.run.get("label").and_then(|v| v.as_str()).unwrap_or("model").to_string();
    let report = match predictor {
        Predictor::GroundTruth => {
            let manifest = read_manifest(manifest_path, n_classes)?;
            if manifest.kind != ManifestKind::Strong {
                return Err(Error::Manifest { path: manifest.path.clone(), msg: "evaluation needs a manifest with timed labels".into() });
            }
            if manifest.clips.is_empty() {
                return Err(Error::EmptySplit);
            }
            let mut counts = ClassCounts::default();
            for clip in &manifest.clips {
                let audio = manifest.audio_path(clip);
                if !audio.is_file() {
                    return Err(Error::MissingAudio(audio));
                }
                let events = match &clip.labels {
                    ClipLabels::Strong(events) => events.as_slice(),
                    _ => &[],
                };
                counts.merge(&match_events(events, events, matching));
            }
            event_based_f1(&counts.with_classes(n_classes))
        }
        Predictor::Model(score) => {
            let stats = checkpoint.feature_stats.as_ref().ok_or_else(|| Error::Checkpoint {
                path: manifest_path.to_path_buf(),
                msg: "checkpoint carries no feature statistics".into(),
            })?;
            let items = load_eval_items(manifest_path, &checkpoint.features, stats, n_classes)?;
            let student = checkpoint.student()?;
            let teacher = checkpoint.teacher.as_ref().map(|_| checkpoint.teacher()).transpose()?;
            let (net, ensemble) = scoring_network(score, &student, teacher.as_ref());
            score_items(net, &items, ensemble, &checkpoint.features, decode, matching)?
        }
    };
    Ok(report.named(run, split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn column(values: &[f32]) -> Array2<f32> {
        Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap()
    }

    #[test]
    fn decode_examples() {
        let zeros = Array2::<f32>::zeros((10, 3));
        assert!(decode_events(zeros.view(), &DecodeConfig::default(), 0.1).unwrap().is_empty());

        let cfg = DecodeConfig { threshold: 0.5, median_window: 3 };
        let events = decode_events(column(&[0.9, 0.9, 0.1, 0.9, 0.9]).view(), &cfg, 1.0).unwrap();
        assert_eq!(events, vec![Event::new(0, 0.0, 5.0)]);

        let cfg = DecodeConfig { threshold: 0.5, median_window: 1 };
        let events = decode_events(column(&[1.0, 0.0, 1.0]).view(), &cfg, 1.0).unwrap();
        assert_eq!(events, vec![Event::new(0, 0.0, 1.0), Event::new(0, 2.0, 3.0)]);

        assert!(decode_events(column(&[f32::NAN]).view(), &cfg, 1.0).is_err());
        assert!(decode_events(column(&[0.1]).view(), &DecodeConfig { threshold: 0.5, median_window: 2 }, 1.0).is_err());
    }

    #[test]
    fn median_filter_removes_isolated_blips() {
        let cfg = DecodeConfig { threshold: 0.5, median_window: 3 };
        let events = decode_events(column(&[0.0, 0.0, 0.9, 0.0, 0.0]).view(), &cfg, 1.0).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn match_examples() {
        let cfg = MatchConfig::default();
        let r = [Event::new(0, 1.0, 2.0)];
        assert_eq!(match_events(&r, &[Event::new(0, 1.15, 2.05)], &cfg).get(0), Counts { tp: 1, fp: 0, fn_: 0 });
        assert_eq!(match_events(&r, &[Event::new(0, 1.25, 2.0)], &cfg).get(0), Counts { tp: 0, fp: 1, fn_: 1 });
        let many = [Event::new(0, 0.0, 1.0), Event::new(1, 2.0, 4.0), Event::new(1, 5.0, 6.0)];
        let c = match_events(&many, &many, &cfg);
        assert_eq!(c.get(0), Counts { tp: 1, fp: 0, fn_: 0 });
        assert_eq!(c.get(1), Counts { tp: 2, fp: 0, fn_: 0 });
    }

    #[test]
    fn relative_offset_collar_applies_to_long_events() {
        let cfg = MatchConfig::default();
        // 5 s reference: offset tolerance max(0.2, 1.0) = 1.0
        let r = [Event::new(0, 0.0, 5.0)];
        assert_eq!(match_events(&r, &[Event::new(0, 0.1, 5.9)], &cfg).get(0).tp, 1);
        assert_eq!(match_events(&r, &[Event::new(0, 0.1, 6.1)], &cfg).get(0).tp, 0);
    }

    #[test]
    fn greedy_order_would_lose_a_match() {
        // the first prediction is compatible with both references, the
        // second only with the first reference
        let cfg = MatchConfig::default();
        let refs = [Event::new(0, 1.0, 2.0), Event::new(0, 1.3, 2.3)];
        let preds = [Event::new(0, 1.15, 2.15), Event::new(0, 0.9, 1.9)];
        assert_eq!(match_events(&refs, &preds, &cfg).get(0).tp, 2);
    }

    #[test]
    fn f1_examples() {
        let mut counts = ClassCounts::default();
        counts.0.insert(0, Counts { tp: 2, fp: 1, fn_: 1 });
        let report = event_based_f1(&counts);
        assert!((report.classes[0].f1 - 4.0 / 6.0).abs() < 1e-12);

        let mut zero = ClassCounts::default();
        zero.0.insert(0, Counts::default());
        let report = event_based_f1(&zero);
        assert_eq!(report.classes[0].f1, 0.0);
        assert_eq!(report.macro_f1, 0.0);

        let events = [Event::new(0, 0.0, 1.0), Event::new(1, 1.0, 2.0), Event::new(2, 3.0, 3.5)];
        let perfect = event_based_f1(&match_events(&events, &events, &MatchConfig::default()));
        assert_eq!(perfect.macro_f1, 1.0);
    }

    #[test]
    fn classes_without_references_do_not_enter_macro() {
        let mut counts = ClassCounts::default();
        counts.0.insert(0, Counts { tp: 1, fp: 0, fn_: 0 });
        counts.0.insert(1, Counts { tp: 0, fp: 3, fn_: 0 });
        assert_eq!(event_based_f1(&counts).macro_f1, 1.0);
    }

    #[test]
    fn records_round_trip() {
        let events = [Event::new(0, 0.0, 1.0), Event::new(1, 1.0, 2.0)];
        let preds = [Event::new(0, 0.1, 1.0), Event::new(1, 1.6, 2.0)];
        let report = event_based_f1(&match_events(&events, &preds, &MatchConfig::default())).named("PCL w/ DA", "test");
        let text = report.to_records();
        let back = MetricsReport::parse_records(&text, Path::new("r.txt")).unwrap();
        assert_eq!(back.run, "PCL w/ DA");
        assert_eq!(back.classes.len(), 2);
        assert!((back.macro_f1 - report.macro_f1).abs() < 1e-6);
        assert!(MetricsReport::parse_records("garbage", Path::new("r.txt")).is_err());
        assert!(MetricsReport::parse_records("", Path::new("r.txt")).is_err());
    }

    fn report(run: &str, split: &str, f1: f64) -> MetricsReport {
        MetricsReport { run: run.into(), split: split.into(), classes: vec![], macro_f1: f1 }
    }

    #[test]
    fn compare_table_layout() {
        let t = compare_table(&[report("Baseline", "validation", 0.4376)]).unwrap();
        assert!(t.contains("43.8"));
        assert_eq!(t.lines().count(), 3);

        let t = compare_table(&[
            report("Baseline", "validation", 0.259),
            report("Baseline", "test", 0.311),
            report("PCL w/ DA", "validation", 0.438),
            report("PCL w/ DA", "test", 0.442),
        ])
        .unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].contains("validation") && lines[0].contains("test"));
        assert!(lines[2].starts_with("Baseline") && lines[2].contains("25.9") && lines[2].contains("31.1"));
        assert!(lines[3].starts_with("PCL w/ DA") && lines[3].contains("44.2"));

        assert!(compare_table(&[report("A", "test", 0.1), report("A", "test", 0.2)]).is_err());
        assert!(compare_table(&[]).is_err());
    }

    /// Exhaustive maximum matching: tries every assignment of references to
    /// distinct compatible predictions.
    pub(crate) fn brute_force_tp(refs: &[Event], preds: &[Event], cfg: &MatchConfig) -> usize {
        fn go(i: usize, refs: &[Event], preds: &[Event], used: &mut Vec<bool>, cfg: &MatchConfig) -> usize {
            if i == refs.len() {
                return 0;
            }
            let mut best = go(i + 1, refs, preds, used, cfg);
            for j in 0..preds.len() {
                if !used[j] && cfg.compatible(&refs[i], &preds[j]) {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, refs, preds, used, cfg));
                    used[j] = false;
                }
            }
            best
        }
        go(0, refs, preds, &mut vec![false; preds.len()], cfg)
    }

    fn event_strategy() -> impl Strategy<Value = Event> {
        (0usize..3, 0.0f64..5.0, 0.05f64..2.0).prop_map(|(c, on, d)| Event::new(c, on, on + d))
    }

    proptest! {
        #[test]
        fn matching_equals_brute_force(
            refs in proptest::collection::vec(event_strategy(), 0..=6),
            preds in proptest::collection::vec(event_strategy(), 0..=6),
            onset in 0.0f64..0.6, abs in 0.0f64..0.6, rel in 0.0f64..0.5,
        ) {
            let cfg = MatchConfig { onset_collar: onset, offset_collar_abs: abs, offset_collar_rel: rel };
            let counts = match_events(&refs, &preds, &cfg);
            let tp: usize = counts.0.values().map(|c| c.tp).sum();
            prop_assert_eq!(tp, brute_force_tp(&refs, &preds, &cfg));
        }

        #[test]
        fn scores_are_permutation_invariant(
            refs in proptest::collection::vec(event_strategy(), 0..=6),
            preds in proptest::collection::vec(event_strategy(), 0..=6),
            rotate in 0usize..6,
        ) {
            let cfg = MatchConfig::default();
            let a = match_events(&refs, &preds, &cfg);
            let mut r2 = refs.clone();
            r2.reverse();
            let mut p2 = preds.clone();
            if !p2.is_empty() {
                let k = rotate % p2.len();
                p2.rotate_left(k);
            }
            prop_assert_eq!(a, match_events(&r2, &p2, &cfg));
        }

        #[test]
        fn counts_are_scale_invariant(
            refs in proptest::collection::vec(event_strategy(), 0..=6),
            preds in proptest::collection::vec(event_strategy(), 0..=6),
            factor in 0.25f64..4.0,
        ) {
            let cfg = MatchConfig::default();
            let scaled = MatchConfig {
                onset_collar: cfg.onset_collar * factor,
                offset_collar_abs: cfg.offset_collar_abs * factor,
                offset_collar_rel: cfg.offset_collar_rel,
            };
            let sc = |es: &[Event]| es.iter().map(|e| Event::new(e.class_id, e.onset * factor, e.offset * factor)).collect::<Vec<_>>();
            prop_assert_eq!(match_events(&refs, &preds, &cfg), match_events(&sc(&refs), &sc(&preds), &scaled));
        }
    }
}
