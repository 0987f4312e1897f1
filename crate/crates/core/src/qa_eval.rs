//! QA pair generation, yes/no answer extraction and per-axis accuracy.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{validate_annotation, Axis, Taxonomy};

/// Default number of leading characters searched for a yes/no token.
pub const DEFAULT_ANSWER_WINDOW: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub video_id: String,
    pub category_id: String,
    pub question: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
}

/// One annotation line as read from disk, before validation.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawAnnotation {
    pub video_id: Option<String>,
    #[serde(default)]
    pub labels: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub labels: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
    Failure,
}

impl Answer {
    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
            Answer::Failure => "failure",
        }
    }

    /// Failure never matches a label.
    pub fn matches(self, label: bool) -> bool {
        matches!((self, label), (Answer::Yes, true) | (Answer::No, false))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub category_id: String,
    pub raw_answer: String,
    #[serde(default = "failure")]
    pub parsed: Answer,
}

fn failure() -> Answer {
    Answer::Failure
}

impl PredictionRecord {
    pub fn new(video_id: impl Into<String>, category_id: impl Into<String>, raw_answer: impl Into<String>) -> Self {
        let raw_answer = raw_answer.into();
        PredictionRecord {
            video_id: video_id.into(),
            category_id: category_id.into(),
            parsed: parse_answer(&raw_answer),
            raw_answer,
        }
    }
}

/// One question per category, in taxonomy order.
pub fn generate_qa(video_id: &str, tax: &Taxonomy) -> Vec<QaPair> {
    tax.categories
        .iter()
        .map(|c| QaPair {
            video_id: video_id.to_string(),
            category_id: c.id.clone(),
            question: c.render_prompt(),
            label: None,
        })
        .collect()
}

/// As [`generate_qa`] with labels filled from an annotation when present.
pub fn generate_labeled_qa(video_id: &str, tax: &Taxonomy, ann: Option<&AnnotationRecord>) -> Vec<QaPair> {
    let mut pairs = generate_qa(video_id, tax);
    if let Some(ann) = ann {
        for p in &mut pairs {
            p.label = ann.labels.get(&p.category_id).copied();
        }
    }
    pairs
}

fn markup_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[^>]*>").unwrap())
}

fn token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap())
}

pub fn parse_answer(raw: &str) -> Answer {
    parse_answer_window(raw, DEFAULT_ANSWER_WINDOW)
}

/// Strips tags and punctuation, then looks for standalone "yes"/"no" tokens
/// in the first `window` characters. Exactly one kind found gives the
/// answer; both or neither is a failure.
pub fn parse_answer_window(raw: &str, window: usize) -> Answer {
    let no_tags = markup_re().replace_all(raw, " ");
    let cleaned: String = no_tags
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    let collapsed = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");
    let head: String = collapsed.chars().take(window).collect();
    let (mut yes, mut no) = (false, false);
    for m in token_re().find_iter(&head) {
        if m.as_str().eq_ignore_ascii_case("yes") {
            yes = true;
        } else {
            no = true;
        }
    }
    match (yes, no) {
        (true, false) => Answer::Yes,
        (false, true) => Answer::No,
        _ => Answer::Failure,
    }
}

/// Fraction of predictions matching their labels.
pub fn accuracy(pairs: &[(Answer, bool)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let hits = pairs.iter().filter(|(a, l)| a.matches(*l)).count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisCounts {
    pub appearance: usize,
    pub camera: usize,
    pub motion: usize,
    pub all: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisAcc {
    pub appearance: Option<f64>,
    pub camera: Option<f64>,
    pub motion: Option<f64>,
    pub all: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmatchedPrediction {
    pub video_id: String,
    pub category_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: AxisAcc,
    pub counts: AxisCounts,
    pub matches: AxisCounts,
    pub failures: usize,
    /// Annotated pairs with no prediction; excluded from scoring.
    pub unpredicted: usize,
    pub unmatched: Vec<UnmatchedPrediction>,
}

impl EvalReport {
    pub fn axis_acc(&self, axis: Axis) -> Option<f64> {
        match axis {
            Axis::Appearance => self.acc.appearance,
            Axis::Camera => self.acc.camera,
            Axis::Motion => self.acc.motion,
        }
    }

    /// Aligned text table with columns Appearance, Camera, Motion, All.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:>12} {:>8} {:>8} {:>8}", "Appearance", "Camera", "Motion", "All");
        let _ = writeln!(
            out,
            "{:>12} {:>8} {:>8} {:>8}",
            cell(self.acc.appearance),
            cell(self.acc.camera),
            cell(self.acc.motion),
            cell(Some(self.acc.all))
        );
        let _ = writeln!(
            out,
            "{:>12} {:>8} {:>8} {:>8}",
            self.counts.appearance, self.counts.camera, self.counts.motion, self.counts.all
        );
        let _ = writeln!(
            out,
            "failures: {}  unpredicted: {}  unmatched: {}",
            self.failures,
            self.unpredicted,
            self.unmatched.len()
        );
        out
    }
}

/// Scores predictions against annotations, bucketed by category axis.
/// Predictions without a label are listed as unmatched; labels without a
/// prediction are counted in `unpredicted` only.
pub fn evaluate_records(
    predictions: &[PredictionRecord],
    annotations: &[AnnotationRecord],
    tax: &Taxonomy,
) -> Result<EvalReport> {
    let labels: HashMap<(&str, &str), bool> = annotations
        .iter()
        .flat_map(|a| {
            a.labels
                .iter()
                .map(move |(c, &l)| ((a.video_id.as_str(), c.as_str()), l))
        })
        .collect();

    let mut sorted: Vec<&PredictionRecord> = predictions.iter().collect();
    sorted.sort_by(|a, b| (&a.video_id, &a.category_id).cmp(&(&b.video_id, &b.category_id)));

    let mut buckets: BTreeMap<Axis, Vec<(Answer, bool)>> = BTreeMap::new();
    let mut unmatched = Vec::new();
    let mut failures = 0;
    let mut predicted = 0usize;
    for p in sorted {
        let key = (p.video_id.as_str(), p.category_id.as_str());
        let axis = tax.axis_of(&p.category_id);
        match (axis, labels.get(&key)) {
            (Some(axis), Some(&label)) => {
                predicted += 1;
                if p.parsed == Answer::Failure {
                    failures += 1;
                }
                buckets.entry(axis).or_default().push((p.parsed, label));
            }
            (None, _) => unmatched.push(UnmatchedPrediction {
                video_id: p.video_id.clone(),
                category_id: p.category_id.clone(),
                reason: "unknown category".into(),
            }),
            (Some(_), None) => unmatched.push(UnmatchedPrediction {
                video_id: p.video_id.clone(),
                category_id: p.category_id.clone(),
                reason: "no annotation label".into(),
            }),
        }
    }
    for u in &unmatched {
        log::warn!("skipping prediction {}/{}: {}", u.video_id, u.category_id, u.reason);
    }

    let all: Vec<(Answer, bool)> = buckets.values().flatten().copied().collect();
    let total_acc = accuracy(&all).map_err(|_| Error::EmptyEvaluation)?;
    let bucket = |axis| buckets.get(&axis).map(Vec::as_slice).unwrap_or(&[]);
    let hits = |s: &[(Answer, bool)]| s.iter().filter(|(a, l)| a.matches(*l)).count();
    let report = EvalReport {
        acc: AxisAcc {
            appearance: accuracy(bucket(Axis::Appearance)).ok(),
            camera: accuracy(bucket(Axis::Camera)).ok(),
            motion: accuracy(bucket(Axis::Motion)).ok(),
            all: total_acc,
        },
        counts: AxisCounts {
            appearance: bucket(Axis::Appearance).len(),
            camera: bucket(Axis::Camera).len(),
            motion: bucket(Axis::Motion).len(),
            all: all.len(),
        },
        matches: AxisCounts {
            appearance: hits(bucket(Axis::Appearance)),
            camera: hits(bucket(Axis::Camera)),
            motion: hits(bucket(Axis::Motion)),
            all: hits(&all),
        },
        failures,
        unpredicted: labels.len().saturating_sub(predicted),
        unmatched,
    };
    Ok(report)
}

fn read_jsonl<T>(path: &Path, mut parse: impl FnMut(usize, &str) -> Result<T>) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(i + 1, line)?);
    }
    Ok(out)
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::MalformedRecord {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Reads and validates an annotations JSONL file.
pub fn load_annotations(path: &Path, tax: &Taxonomy) -> Result<Vec<AnnotationRecord>> {
    let mut seen = std::collections::HashSet::new();
    read_jsonl(path, |line, text| {
        let raw: RawAnnotation =
            serde_json::from_str(text).map_err(|e| malformed(path, line, e.to_string()))?;
        let rec = validate_annotation(&raw, tax).map_err(|violations| {
            let msgs: Vec<String> = violations.iter().map(ToString::to_string).collect();
            malformed(path, line, msgs.join("; "))
        })?;
        if !seen.insert(rec.video_id.clone()) {
            return Err(malformed(path, line, format!("duplicate video_id \"{}\"", rec.video_id)));
        }
        Ok(rec)
    })
}

#[derive(Deserialize)]
struct RawPrediction {
    video_id: String,
    category_id: String,
    raw_answer: String,
}

/// Reads a predictions JSONL file; answers are re-parsed from `raw_answer`.
pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut seen = std::collections::HashSet::new();
    read_jsonl(path, |line, text| {
        let raw: RawPrediction =
            serde_json::from_str(text).map_err(|e| malformed(path, line, e.to_string()))?;
        if !seen.insert((raw.video_id.clone(), raw.category_id.clone())) {
            return Err(malformed(
                path,
                line,
                format!("duplicate prediction for {}/{}", raw.video_id, raw.category_id),
            ));
        }
        Ok(PredictionRecord::new(raw.video_id, raw.category_id, raw.raw_answer))
    })
}

pub fn evaluate(predictions: &Path, annotations: &Path, tax: &Taxonomy) -> Result<EvalReport> {
    let preds = load_predictions(predictions)?;
    let anns = load_annotations(annotations, tax)?;
    evaluate_records(&preds, &anns, tax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn generate_default_questions() {
        let tax = Taxonomy::default_six();
        let qa = generate_qa("v1", &tax);
        assert_eq!(qa.len(), 6);
        assert_eq!(qa[0].question, "Does this video exhibit texture corruption?");
        assert!(qa.iter().zip(&tax.categories).all(|(q, c)| q.category_id == c.id));
    }

    #[test]
    fn template_without_placeholder_is_verbatim() {
        let tax = Taxonomy::from_json_str(
            r#"{"version":"t","categories":[{"id":"flicker","axis":"Motion","display_name":"flicker","prompt_template":"Is there flicker?"}]}"#,
        )
        .unwrap();
        assert_eq!(generate_qa("v", &tax)[0].question, "Is there flicker?");
    }

    #[test]
    fn ten_categories_give_ten_pairs() {
        let cats: Vec<String> = (0..10)
            .map(|i| {
                let axis = ["Appearance", "Motion", "Camera"][i % 3];
                format!(r#"{{"id":"c{i}","axis":"{axis}","display_name":"artifact {i}"}}"#)
            })
            .collect();
        let tax = Taxonomy::from_json_str(&format!(r#"{{"version":"10","categories":[{}]}}"#, cats.join(","))).unwrap();
        assert_eq!(generate_qa("v", &tax).len(), 10);
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_answer("Yes, the video flickers."), Answer::Yes);
        assert_eq!(parse_answer("NO"), Answer::No);
        assert_eq!(parse_answer("The video depicts a cat playing piano..."), Answer::Failure);
        assert_eq!(parse_answer("**No.** There is nothing wrong."), Answer::No);
        assert_eq!(parse_answer("<answer>yes</answer>"), Answer::Yes);
        assert_eq!(parse_answer("yes no yes"), Answer::Failure);
        assert_eq!(parse_answer("Nothing notable; nobody knows"), Answer::Failure);
        assert_eq!(parse_answer(""), Answer::Failure);
        let late = format!("{} yes", "blah ".repeat(20));
        assert_eq!(parse_answer(&late), Answer::Failure);
        assert_eq!(parse_answer_window(&late, 200), Answer::Yes);
    }

    #[test]
    fn accuracy_examples() {
        use Answer::*;
        assert_eq!(
            accuracy(&[(Yes, true), (No, false), (Yes, false), (Yes, true)]).unwrap(),
            0.75
        );
        assert_eq!(accuracy(&[(Yes, true), (No, false)]).unwrap(), 1.0);
        assert_eq!(accuracy(&[(Failure, false)]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[]), Err(Error::EmptyEvaluation)));
    }

    fn ann(video: &str, labels: &[(&str, bool)]) -> AnnotationRecord {
        AnnotationRecord {
            video_id: video.into(),
            labels: labels.iter().map(|&(c, l)| (c.to_string(), l)).collect(),
        }
    }

    #[test]
    fn four_pair_example() {
        let tax = Taxonomy::default_six();
        let anns = [ann(
            "v",
            &[
                ("texture_corruption", true),
                ("object_deformation", false),
                ("unstable_trajectory", true),
                ("flicker", false),
            ],
        )];
        let preds = [
            PredictionRecord::new("v", "texture_corruption", "yes"),
            PredictionRecord::new("v", "object_deformation", "no"),
            PredictionRecord::new("v", "unstable_trajectory", "no"),
            PredictionRecord::new("v", "flicker", "no"),
        ];
        let r = evaluate_records(&preds, &anns, &tax).unwrap();
        assert_eq!(r.acc.appearance, Some(1.0));
        assert_eq!(r.acc.camera, Some(0.0));
        assert_eq!(r.acc.motion, Some(1.0));
        assert_eq!(r.acc.all, 0.75);
        let table = r.to_table();
        let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, vec!["Appearance", "Camera", "Motion", "All"]);
    }

    #[test]
    fn unmatched_and_unpredicted_are_reported() {
        let tax = Taxonomy::default_six();
        let anns = [ann("v", &[("flicker", true), ("texture_corruption", false)])];
        let preds = [
            PredictionRecord::new("v", "flicker", "yes"),
            PredictionRecord::new("w", "flicker", "yes"),
            PredictionRecord::new("v", "ghosting", "yes"),
        ];
        let r = evaluate_records(&preds, &anns, &tax).unwrap();
        assert_eq!(r.counts.all, 1);
        assert_eq!(r.unmatched.len(), 2);
        assert_eq!(r.unpredicted, 1);
        assert_eq!(r.acc.appearance, None);
    }

    #[test]
    fn zero_scoreable_pairs_is_error() {
        let tax = Taxonomy::default_six();
        let preds = [PredictionRecord::new("v", "flicker", "yes")];
        assert!(matches!(evaluate_records(&preds, &[], &tax), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn malformed_line_number_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        std::fs::write(&p, "{\"video_id\":\"v\",\"category_id\":\"flicker\",\"raw_answer\":\"yes\"}\n\n{oops\n").unwrap();
        let err = load_predictions(&p).unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { line: 3, .. }), "{err}");
        let a = dir.path().join("a.jsonl");
        std::fs::write(&a, "{\"video_id\":\"v\",\"labels\":{\"ghosting\":true}}\n").unwrap();
        let err = load_annotations(&a, &Taxonomy::default_six()).unwrap_err();
        assert!(err.to_string().contains("ghosting") && err.to_string().contains(":1:"), "{err}");
    }

    fn arb_answer() -> impl Strategy<Value = Answer> {
        prop_oneof![Just(Answer::Yes), Just(Answer::No), Just(Answer::Failure)]
    }

    proptest! {
        #[test]
        fn accuracy_is_permutation_invariant(
            pairs in proptest::collection::vec((arb_answer(), any::<bool>()), 1..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(accuracy(&pairs).unwrap(), accuracy(&shuffled).unwrap());
        }

        #[test]
        fn failure_drops_exactly_one_over_n(
            pairs in proptest::collection::vec((arb_answer(), any::<bool>()), 1..40),
            pick in any::<proptest::sample::Index>(),
        ) {
            let correct: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].0.matches(pairs[i].1)).collect();
            prop_assume!(!correct.is_empty());
            let i = correct[pick.index(correct.len())];
            let mut degraded = pairs.clone();
            degraded[i].0 = Answer::Failure;
            let before = accuracy(&pairs).unwrap();
            let after = accuracy(&degraded).unwrap();
            prop_assert!((before - after - 1.0 / pairs.len() as f64).abs() < 1e-12);
        }
    }
}
