//! Brute-force reference implementations used as test oracles. They are
//! written independently of the library code and favour obviousness over speed.

#![allow(dead_code)]

use std::collections::BTreeSet;

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Regex-free reading of `re.sub(r'\b(a|an|the)\b', ' ', s)`: at each
/// position try the alternatives in order and require word boundaries.
fn remove_articles(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::new();
    let mut i = 0;
    'scan: while i < chars.len() {
        let left_ok = i == 0 || !is_word(chars[i - 1]);
        if left_ok {
            for art in ["a", "an", "the"] {
                let a: Vec<char> = art.chars().collect();
                let end = i + a.len();
                if end <= chars.len() && chars[i..end] == a[..] && (end == chars.len() || !is_word(chars[end])) {
                    out.push(' ');
                    i = end;
                    continue 'scan;
                }
            }
        }
        out.push(chars[i]);
        i += 1;
    }
    out
}

pub fn normalize(s: &str) -> String {
    const PUNCT: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
    let lower = s.to_lowercase();
    let stripped: String = lower.chars().filter(|c| !PUNCT.contains(*c)).collect();
    remove_articles(&stripped).split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Official token F1, counting overlaps by pairing sorted token lists.
pub fn answer_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize(pred);
    let g = normalize(gold);
    for special in ["yes", "no", "noanswer"] {
        if (p == special || g == special) && p != g {
            return 0.0;
        }
    }
    let mut pt: Vec<&str> = p.split_whitespace().collect();
    let mut gt: Vec<&str> = g.split_whitespace().collect();
    pt.sort_unstable();
    gt.sort_unstable();
    let (mut i, mut j, mut same) = (0, 0, 0usize);
    while i < pt.len() && j < gt.len() {
        match pt[i].cmp(gt[j]) {
            std::cmp::Ordering::Equal => {
                same += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    if same == 0 {
        return 0.0;
    }
    let precision = same as f64 / pt.len() as f64;
    let recall = same as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn answer_em(pred: &str, gold: &str) -> f64 {
    f64::from(u8::from(normalize(pred) == normalize(gold)))
}

/// `(em, precision, recall, f1)` over plain vectors of ids.
pub fn set_scores(pred: &[usize], gold: &[usize]) -> (f64, f64, f64, f64) {
    let pred: Vec<usize> = pred.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let gold: Vec<usize> = gold.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if pred.is_empty() && gold.is_empty() {
        return (1.0, 1.0, 1.0, 1.0);
    }
    let tp = pred.iter().filter(|p| gold.contains(p)).count() as f64;
    let precision = if pred.is_empty() { 0.0 } else { tp / pred.len() as f64 };
    let recall = if gold.is_empty() { 0.0 } else { tp / gold.len() as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    (f64::from(u8::from(pred == gold)), precision, recall, f1)
}

/// `(accuracy, precision, recall, f1)` with `true` as the positive class.
pub fn detection(preds: &[bool], golds: &[bool]) -> (f64, f64, f64, f64) {
    if preds.is_empty() {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let count = |p: bool, g: bool| preds.iter().zip(golds).filter(|&(&a, &b)| a == p && b == g).count() as f64;
    let (tp, fp, fn_) = (count(true, true), count(true, false), count(false, true));
    let acc = preds.iter().zip(golds).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64;
    let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    (acc, precision, recall, f1)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean clamped binary cross-entropy.
pub fn bce(logits: &[f64], gold: &[bool]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (&l, &y) in logits.iter().zip(gold) {
        let p = sigmoid(l).clamp(1e-7, 1.0 - 1e-7);
        total += if y { -p.ln() } else { -(1.0 - p).ln() };
    }
    total / logits.len() as f64
}

/// `max(0, max over extracted - max over answer sentences)`, 0 when either set is empty.
pub fn hinge(logits: &[f64], extracted: &[usize], answers: &[usize]) -> f64 {
    let top = |set: &[usize]| set.iter().map(|&i| logits[i]).fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
    match (top(extracted), top(answers)) {
        (Some(r), Some(a)) => (r - a).max(0.0),
        _ => 0.0,
    }
}

/// Relative error used by the gradient checks: `|a - b| / max(|a|, |b|)`,
/// with an absolute floor for values that are numerically zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}
