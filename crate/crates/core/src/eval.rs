//! Automated metrics (RPA, F1, perplexity), per-turn analysis and the
//! CSV / SVG exports.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use charkeeper_neural::{Graph, Real};
use serde::Serialize;

use crate::classifier::{classifier_context, RpaClassifier};
use crate::corpus::PovContext;
use crate::decoding::CostLedger;
use crate::error::{CoreError, Result};
use crate::model::{Encoded, GenInput, Seq2Seq};
use crate::tokenizer::Vocabulary;

/// One generated (or gold) response to be judged.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub context_id: usize,
    /// 1-based turn index of the response within its dialogue.
    pub turn: usize,
    pub ctx: PovContext,
    pub response: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RpaRecord {
    pub context_id: usize,
    pub turn: usize,
    pub predicted: String,
    pub p_self: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RpaReport {
    pub records: Vec<RpaRecord>,
    /// Percentage of in-character responses.
    pub rpa: f64,
    /// Accuracy per turn, index 0 being turn 1. Turns without examples are NaN.
    pub per_turn: Vec<f64>,
    pub per_turn_counts: Vec<usize>,
    pub cost: CostLedger,
}

impl RpaReport {
    fn assemble(records: Vec<RpaRecord>) -> Self {
        let max_turn = records.iter().map(|r| r.turn).max().unwrap_or(0);
        let mut hits = vec![0usize; max_turn];
        let mut counts = vec![0usize; max_turn];
        for r in &records {
            counts[r.turn - 1] += 1;
            hits[r.turn - 1] += r.correct as usize;
        }
        let per_turn = hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| if c == 0 { f64::NAN } else { h as f64 / c as f64 })
            .collect();
        let correct = records.iter().filter(|r| r.correct).count();
        let rpa = if records.is_empty() {
            0.0
        } else {
            100.0 * correct as f64 / records.len() as f64
        };
        Self {
            records,
            rpa,
            per_turn,
            per_turn_counts: counts,
            cost: CostLedger::default(),
        }
    }

    pub fn with_cost(mut self, cost: CostLedger) -> Self {
        self.cost = cost;
        self
    }
}

/// Judges each response against its participant pair; a response is in
/// character when the self character strictly outranks the partner.
pub fn rpa_metric(items: &[EvalItem], clf: &RpaClassifier, vocab: &Vocabulary) -> Result<RpaReport> {
    if clf.vocab.hash() != vocab.hash() {
        return Err(CoreError::VocabMismatch {
            expected: vocab.hash(),
            found: clf.vocab.hash(),
        });
    }
    if items.is_empty() {
        return Err(CoreError::Input("no responses to evaluate".into()));
    }
    let mut records = Vec::with_capacity(items.len());
    for it in items {
        if it.turn == 0 {
            return Err(CoreError::Input("turn indices start at 1".into()));
        }
        let mut context = classifier_context(&it.ctx, vocab, clf.config.n_prior);
        context.extend_from_slice(&it.response);
        let pool = [it.ctx.self_name.clone(), it.ctx.partner_name.clone()];
        let scored = clf.score_candidates(&context, &pool)?;
        let correct = scored.scores[0] > scored.scores[1];
        records.push(RpaRecord {
            context_id: it.context_id,
            turn: it.turn,
            predicted: pool[scored.argmax()].clone(),
            p_self: scored.probs[0] as f64,
            correct,
        });
    }
    Ok(RpaReport::assemble(records))
}

/// Unigram F1 after lowercasing and whitespace tokenization.
pub fn f1_metric(hyp: &str, reference: &str) -> f64 {
    let h: Vec<String> = hyp.split_whitespace().map(str::to_lowercase).collect();
    let r: Vec<String> = reference.split_whitespace().map(str::to_lowercase).collect();
    if h.is_empty() && r.is_empty() {
        return 1.0;
    }
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut pool: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for w in &r {
        *pool.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &h {
        if let Some(c) = pool.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / h.len() as f64;
    let rc = common as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// exp of the mean per-token negative log-likelihood (EOS included).
pub fn perplexity<T: Real>(model: &Seq2Seq<T>, set: &[(GenInput, Vec<usize>)]) -> Result<f64> {
    if set.is_empty() {
        return Err(CoreError::Input("empty evaluation set".into()));
    }
    let mut total = 0f64;
    let mut tokens = 0usize;
    for (input, target) in set {
        let mut g = Graph::new(&model.params);
        let (nll, n) = model.nll(&mut g, input, target)?;
        total += g.value(nll).data()[0].as_f64();
        tokens += n;
    }
    Ok((total / tokens as f64).exp())
}

/// Per-turn model and gold accuracy with their difference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerTurnRow {
    pub turn: usize,
    pub model: f64,
    pub gold: f64,
    pub delta: f64,
}

pub fn per_turn_report(model: &RpaReport, gold: &RpaReport) -> Result<Vec<PerTurnRow>> {
    if model.per_turn_counts != gold.per_turn_counts {
        return Err(CoreError::Input("model and gold reports cover different turns".into()));
    }
    Ok(model
        .per_turn
        .iter()
        .zip(&gold.per_turn)
        .enumerate()
        .map(|(i, (&m, &g))| PerTurnRow {
            turn: i + 1,
            model: m,
            gold: g,
            delta: m - g,
        })
        .collect())
}

pub fn write_per_turn_csv(mut w: impl Write, rows: &[PerTurnRow]) -> Result<()> {
    writeln!(w, "turn,model,gold,delta")?;
    for r in rows {
        writeln!(w, "{},{:.6},{:.6},{:.6}", r.turn, r.model, r.gold, r.delta)?;
    }
    Ok(())
}

/// Line chart of model and gold accuracy per turn.
pub fn per_turn_svg(rows: &[PerTurnRow]) -> String {
    let (w, h, pad) = (480.0, 300.0, 40.0);
    let n = rows.len().max(2) as f64;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1.0);
    let y = |v: f64| h - pad - (h - 2.0 * pad) * if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#, h - pad);
    for (label, v) in [("0", 0.0), ("1", 1.0)] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10">{label}</text>"#, pad - 14.0, y(v) + 3.0);
    }
    for (series, color) in [("model", "steelblue"), ("gold", "gray")] {
        let pts: Vec<String> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{:.1},{:.1}", x(i), y(if series == "model" { r.model } else { r.gold })))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#, x(i) - 3.0, h - pad + 14.0, r.turn);
    }
    s.push_str("</svg>\n");
    s
}

/// Context-position × response-token attention.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `[rows × cols]`.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Share of the total weight on the given rows.
    pub fn mass_on_rows(&self, rows: &[usize]) -> f64 {
        let total: f64 = self.values.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let picked: f64 = rows.iter().map(|&r| (0..self.cols).map(|c| self.get(r, c)).sum::<f64>()).sum();
        picked / total
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        for r in 0..self.rows {
            let line: Vec<String> = (0..self.cols).map(|c| format!("{:.6}", self.get(r, c))).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn to_svg(&self, row_labels: &[String], col_labels: &[String]) -> String {
        let cell = 14.0;
        let left = 90.0;
        let top = 70.0;
        let w = left + cell * self.cols as f64 + 10.0;
        let h = top + cell * self.rows as f64 + 10.0;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
        for c in 0..self.cols {
            let label = col_labels.get(c).map(String::as_str).unwrap_or("");
            let _ = writeln!(
                s,
                r#"<text transform="translate({:.1},{:.1}) rotate(-60)" font-size="9">{}</text>"#,
                left + cell * c as f64 + 9.0,
                top - 4.0,
                xml_escape(label)
            );
        }
        for r in 0..self.rows {
            let label = row_labels.get(r).map(String::as_str).unwrap_or("");
            let _ = writeln!(
                s,
                r#"<text x="2" y="{:.1}" font-size="9">{}</text>"#,
                top + cell * r as f64 + 10.0,
                xml_escape(label)
            );
            for c in 0..self.cols {
                let shade = 255 - (self.get(r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)"/>"#,
                    left + cell * c as f64,
                    top + cell * r as f64
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapKind {
    /// Standard cross-attention over the full context.
    Cross,
    /// Expanded attention over the grounding subset.
    Expanded,
}

/// Attention of each response token over context positions: maximum over
/// heads, then over decoder layers (and rounds for expanded attention).
pub fn export_attention_heatmap<T: Real>(
    model: &Seq2Seq<T>,
    encoded: &Encoded<T>,
    response: &[usize],
    kind: HeatmapKind,
) -> Result<Heatmap> {
    if response.is_empty() {
        return Err(CoreError::Input("empty response".into()));
    }
    let traces = model.attention_traces(encoded, response)?;
    let tensors: Vec<&charkeeper_neural::Tensor<T>> = match kind {
        HeatmapKind::Cross => traces.cross.iter().collect(),
        HeatmapKind::Expanded => {
            if traces.expanded.iter().all(Vec::is_empty) {
                return Err(CoreError::Config("the model has no expanded attention".into()));
            }
            traces.expanded.iter().flatten().collect()
        }
    };
    let shape = tensors[0].shape();
    let (heads, nk) = (shape[0], shape[2]);
    let nq = shape[1];
    let cols = response.len();
    let mut values = vec![0f64; nk * cols];
    for t in tensors {
        let d = t.data();
        for hd in 0..heads {
            for q in 0..cols.min(nq) {
                for k in 0..nk {
                    let v = d[(hd * nq + q) * nk + k].as_f64();
                    let cell = &mut values[k * cols + q];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
    }
    Ok(Heatmap { rows: nk, cols, values })
}

/// One row of the automatic-metric table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub model: String,
    pub ppl: f64,
    /// Reported ×100.
    pub f1: f64,
    pub rpa: f64,
    pub decode: String,
}

pub fn write_metric_csv(mut w: impl Write, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "model,ppl,f1,rpa,decode")?;
    for r in rows {
        writeln!(w, "{},{:.3},{:.2},{:.2},{}", r.model, r.ppl, r.f1, r.rpa, r.decode)?;
    }
    Ok(())
}

pub fn save_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    Ok(std::fs::write(path, text)?)
}
