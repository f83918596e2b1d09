//! Answer and supporting-fact metrics, CNA detection, and stratified reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerLabel, AnswerTarget, Example};
use crate::dataset_builder::AbsentClass;
use crate::error::{IrcError, Result};

/// Answer string that stands for the CNA label in prediction files.
pub const CNA_ANSWER: &str = "noanswer";

/// Official HotpotQA answer normalization: lowercase, drop ASCII
/// punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    // Articles are removed at regex word boundaries, i.e. as whole runs of word characters.
    let mut out = String::with_capacity(no_punct.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if matches!(word.as_str(), "a" | "an" | "the") {
            out.push(' ');
        } else {
            out.push_str(word);
        }
        word.clear();
    };
    for c in no_punct.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c);
        }
    }
    flush(&mut word, &mut out);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Official string-level answer F1 with the yes/no/noanswer special case.
pub fn answer_f1_strings(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let special = ["yes", "no", CNA_ANSWER];
    if (special.contains(&p.as_str()) || special.contains(&g.as_str())) && p != g {
        return 0.0;
    }
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut same = 0;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return 0.0;
    }
    let precision = same as f64 / pt.len() as f64;
    let recall = same as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn answer_em_strings(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) { 1.0 } else { 0.0 }
}

/// Reads a prediction string back into a label and optional span.
pub fn target_from_answer_string(s: &str) -> AnswerTarget {
    match normalize_answer(s).as_str() {
        "yes" => AnswerTarget::label(AnswerLabel::Yes),
        "no" => AnswerTarget::label(AnswerLabel::No),
        CNA_ANSWER => AnswerTarget::cna(),
        _ => AnswerTarget::span(s),
    }
}

/// `(em, f1)` in `[0, 1]`. CNA only matches CNA, Yes/No only match the same
/// label, and two spans are compared with the official string metrics.
pub fn answer_metrics(pred: &AnswerTarget, gold: &AnswerTarget) -> (f64, f64) {
    use AnswerLabel::*;
    match (pred.label, gold.label) {
        (Span, Span) => {
            let p = pred.span_text.as_deref().unwrap_or("");
            let g = gold.span_text.as_deref().unwrap_or("");
            (answer_em_strings(p, g), answer_f1_strings(p, g))
        }
        (a, b) if a == b => (1.0, 1.0),
        _ => (0.0, 0.0),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetScores {
    pub em: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set precision/recall/F1/EM. Both empty scores 1 everywhere; exactly one
/// empty scores 0 everywhere.
pub fn sf_metrics<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> SetScores {
    if pred.is_empty() && gold.is_empty() {
        return SetScores { em: 1.0, precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    let tp = pred.intersection(gold).count() as f64;
    let precision = if pred.is_empty() { 0.0 } else { tp / pred.len() as f64 };
    let recall = if gold.is_empty() { 0.0 } else { tp / gold.len() as f64 };
    let f1 = if tp == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    SetScores { em: if pred == gold { 1.0 } else { 0.0 }, precision, recall, f1 }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Binary metrics with "answer is CNA" as the positive class. Undefined
/// ratios (no predicted or no gold positives) are reported as 0.
pub fn cna_detection_metrics(preds: &[bool], golds: &[bool]) -> Result<DetectionScores> {
    if preds.len() != golds.len() {
        return Err(IrcError::InvalidInput(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Ok(DetectionScores::default());
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p, g) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => {}
        }
        if p == g {
            correct += 1.0;
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(DetectionScores { accuracy: correct / preds.len() as f64, precision, recall, f1 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub count: usize,
    pub cna_predicted: usize,
}

impl Stratum {
    /// CNA prediction ratio in percent, `None` for an empty stratum.
    pub fn cna_ratio(&self) -> Option<f64> {
        (self.count > 0).then(|| 100.0 * self.cna_predicted as f64 / self.count as f64)
    }

    fn add(&mut self, cna: bool) {
        self.count += 1;
        self.cna_predicted += usize::from(cna);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub by_absent_class: BTreeMap<AbsentClass, Stratum>,
    /// Class-0 examples whose predicted SFs include every gold SF.
    pub covered: Stratum,
    /// Class-0 examples missing at least one gold SF in the prediction.
    pub not_covered: Stratum,
}

/// One evaluated example, as consumed by [`stratify`].
#[derive(Clone, Debug)]
pub struct StratifyItem<'a, T: Ord> {
    pub absent_gold_count: usize,
    pub gold_sf: &'a BTreeSet<T>,
    pub pred_sf: &'a BTreeSet<T>,
    pub predicted_cna: bool,
}

pub fn stratify<T: Ord>(items: &[StratifyItem<'_, T>]) -> Strata {
    let mut strata = Strata::default();
    for item in items {
        let class = AbsentClass::from_count(item.absent_gold_count);
        strata.by_absent_class.entry(class).or_default().add(item.predicted_cna);
        if class == AbsentClass::Zero {
            if item.pred_sf.is_superset(item.gold_sf) {
                strata.covered.add(item.predicted_cna);
            } else {
                strata.not_covered.add(item.predicted_cna);
            }
        }
    }
    strata
}

/// Prediction file in the official HotpotQA schema.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OfficialPredictions {
    pub answer: BTreeMap<String, String>,
    pub sp: BTreeMap<String, Vec<(String, usize)>>,
}

impl OfficialPredictions {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| IrcError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| IrcError::json(path.display().to_string(), e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| IrcError::json("predictions", e))?;
        std::fs::write(path, text).map_err(|e| IrcError::io(path, e))
    }
}

/// Gold supporting facts of an example as `(title, sentence index)` pairs.
pub fn gold_fact_pairs(example: &Example) -> BTreeSet<(String, usize)> {
    example
        .gold_rationale
        .iter()
        .filter_map(|&id| example.passage.sentence(id))
        .map(|s| (s.paragraph_title.clone(), s.source_index))
        .collect()
}

/// All metrics in percent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub missing_predictions: usize,
    pub answer_em: f64,
    pub answer_f1: f64,
    pub sf_em: f64,
    pub sf_precision: f64,
    pub sf_recall: f64,
    pub sf_f1: f64,
    pub cna: DetectionScores,
    pub strata: Strata,
}

pub fn evaluate(golds: &[Example], preds: &OfficialPredictions) -> Result<MetricReport> {
    if golds.is_empty() {
        return Err(IrcError::EmptyDataset("no gold examples to evaluate".into()));
    }
    let mut report = MetricReport { count: golds.len(), ..Default::default() };
    let empty: Vec<(String, usize)> = Vec::new();
    let mut sums = [0.0; 6];
    let mut pred_cna = Vec::new();
    let mut gold_cna = Vec::new();
    let mut sf_sets = Vec::new();
    for ex in golds {
        let answer = preds.answer.get(&ex.id);
        if answer.is_none() {
            report.missing_predictions += 1;
        }
        let pred = answer.map(|a| target_from_answer_string(a)).unwrap_or_else(|| AnswerTarget::span(""));
        let (em, f1) = answer_metrics(&pred, &ex.gold_answer);
        let pred_sf: BTreeSet<(String, usize)> = preds.sp.get(&ex.id).unwrap_or(&empty).iter().cloned().collect();
        let gold_sf = gold_fact_pairs(ex);
        let sf = sf_metrics(&pred_sf, &gold_sf);
        for (s, v) in sums.iter_mut().zip([em, f1, sf.em, sf.precision, sf.recall, sf.f1]) {
            *s += v;
        }
        pred_cna.push(pred.label == AnswerLabel::Cna);
        gold_cna.push(ex.gold_answer.label == AnswerLabel::Cna);
        sf_sets.push((ex.absent_gold_count, gold_sf, pred_sf));
    }
    let n = golds.len() as f64;
    let pct = |x: f64| 100.0 * x / n;
    report.answer_em = pct(sums[0]);
    report.answer_f1 = pct(sums[1]);
    report.sf_em = pct(sums[2]);
    report.sf_precision = pct(sums[3]);
    report.sf_recall = pct(sums[4]);
    report.sf_f1 = pct(sums[5]);
    let d = cna_detection_metrics(&pred_cna, &gold_cna)?;
    report.cna = DetectionScores {
        accuracy: 100.0 * d.accuracy,
        precision: 100.0 * d.precision,
        recall: 100.0 * d.recall,
        f1: 100.0 * d.f1,
    };
    let items: Vec<StratifyItem<'_, (String, usize)>> = sf_sets
        .iter()
        .zip(&pred_cna)
        .map(|((absent, gold, pred), &cna)| StratifyItem {
            absent_gold_count: *absent,
            gold_sf: gold,
            pred_sf: pred,
            predicted_cna: cna,
        })
        .collect();
    report.strata = stratify(&items);
    Ok(report)
}

fn ratio_cell(s: Option<&Stratum>) -> String {
    match s.and_then(Stratum::cna_ratio) {
        Some(r) => format!("{r:.1}"),
        None => "-".into(),
    }
}

/// Plain-text tables: answer/SF scores, CNA detection, CNA ratio per
/// absent-SF class, and the class-0 sufficiency split.
pub fn format_report(report: &MetricReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "examples: {} (missing predictions: {})", report.count, report.missing_predictions);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "", "Ans EM", "Ans F1", "SF EM", "SF P", "SF R", "SF F1");
    let _ = writeln!(
        s,
        "{:<10} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1}",
        "model", report.answer_em, report.answer_f1, report.sf_em, report.sf_precision, report.sf_recall, report.sf_f1
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>7} {:>7}", "CNA", "Acc", "P", "R", "F1");
    let c = &report.cna;
    let _ = writeln!(s, "{:<10} {:>7.1} {:>7.1} {:>7.1} {:>7.1}", "model", c.accuracy, c.precision, c.recall, c.f1);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<22} {:>7} {:>7}", "# absent gold SFs", "count", "CNA %");
    for class in AbsentClass::ALL {
        let st = report.strata.by_absent_class.get(&class);
        let _ = writeln!(s, "{:<22} {:>7} {:>7}", class.as_str(), st.map_or(0, |x| x.count), ratio_cell(st));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<22} {:>7} {:>7}", "class 0, pred SFs", "count", "CNA %");
    for (name, st) in [("include all gold", &report.strata.covered), ("miss a gold SF", &report.strata.not_covered)] {
        let _ = writeln!(s, "{:<22} {:>7} {:>7}", name, st.count, ratio_cell(Some(st)));
    }
    s
}
