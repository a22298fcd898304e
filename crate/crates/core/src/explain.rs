//! Per-token attention traces and heatmap rendering.

use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::textprep::clean_text;
use crate::train::{PredictError, Predictor};

/// Attention over the cleaned, possibly truncated token sequence the model
/// actually saw.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionTrace {
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
    pub predicted_class: usize,
    pub class_probabilities: [f64; 2],
    /// Tokens beyond the model's sequence length were dropped.
    pub truncated: bool,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Position of the largest weight; the first one on ties.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &w) in self.weights.iter().enumerate() {
            if best.is_none_or(|b| w > self.weights[b]) {
                best = Some(i);
            }
        }
        best
    }

    /// Tint intensity in `[0, 1]` per token: weight divided by the largest
    /// weight.
    pub fn intensities(&self) -> Vec<f64> {
        let max = self.weights.iter().copied().fold(0.0, f64::max);
        self.weights
            .iter()
            .map(|&w| if max > 0.0 { (w / max).clamp(0.0, 1.0) } else { 0.0 })
            .collect()
    }
}

pub fn attention_trace(predictor: &Predictor, raw_text: &str) -> Result<AttentionTrace, PredictError> {
    let cleaned = clean_text(raw_text);
    let example = predictor.encode(raw_text)?;
    let out = predictor.forward(std::slice::from_ref(&example))?;
    let n = example.length;
    let valid = &out.attention_weights[0][..n];
    let total: f64 = valid.iter().sum();
    let weights = valid.iter().map(|w| w / total).collect();
    let probs = out.class_probabilities[0];
    Ok(AttentionTrace {
        tokens: cleaned.tokens().take(n).map(str::to_string).collect(),
        weights,
        predicted_class: usize::from(probs[1] > probs[0]),
        class_probabilities: probs,
        truncated: example.truncated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Html,
    Csv,
}

impl HeatmapFormat {
    pub fn extension(self) -> &'static str {
        match self {
            HeatmapFormat::Html => "html",
            HeatmapFormat::Csv => "csv",
        }
    }
}

impl FromStr for HeatmapFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "html" => Ok(HeatmapFormat::Html),
            "csv" => Ok(HeatmapFormat::Csv),
            other => Err(format!("unknown heatmap format `{other}` (expected html or csv)")),
        }
    }
}

impl fmt::Display for HeatmapFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

/// Nine significant digits.
pub fn format_weight(w: f64) -> String {
    format!("{w:.8e}")
}

const CLASS_LABELS: [&str; 2] = ["negative", "positive"];

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

pub fn render_heatmap(trace: &AttentionTrace, format: HeatmapFormat) -> String {
    match format {
        HeatmapFormat::Csv => render_csv(trace),
        HeatmapFormat::Html => render_html(trace),
    }
}

fn render_csv(trace: &AttentionTrace) -> String {
    let mut out = String::from("token,weight\n");
    for (t, &w) in trace.tokens.iter().zip(&trace.weights) {
        writeln!(out, "{t},{}", format_weight(w)).unwrap();
    }
    out
}

fn render_html(trace: &AttentionTrace) -> String {
    let mut body = String::new();
    for ((t, &w), a) in trace.tokens.iter().zip(&trace.weights).zip(trace.intensities()) {
        writeln!(
            body,
            r#"<span class="tok" data-intensity="{a:.6}" title="{}" style="background-color: rgba(214, 39, 40, {a:.6})">{}</span>"#,
            format_weight(w),
            escape_html(t)
        )
        .unwrap();
    }
    let p = trace.class_probabilities;
    let notice = if trace.truncated {
        format!(
            "<p class=\"notice\">Input was truncated to the first {} tokens; later tokens were not seen by the model.</p>\n",
            trace.len()
        )
    } else {
        String::new()
    };
    format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Attention heatmap</title>\n<style>\n\
         body {{ font-family: sans-serif; max-width: 50em; margin: 2em auto; line-height: 2.2; }}\n\
         .tok {{ padding: 0.15em 0.25em; margin: 0 0.05em; border-radius: 3px; }}\n\
         .notice {{ color: #8a6d3b; }}\n</style>\n</head>\n<body>\n\
         <p>Predicted: <b>{}</b> (negative {:.4}, positive {:.4})</p>\n{notice}<div>\n{body}</div>\n</body>\n</html>\n",
        CLASS_LABELS[trace.predicted_class.min(1)],
        p[0],
        p[1],
    )
}

pub fn write_heatmap(trace: &AttentionTrace, format: HeatmapFormat, path: &Path) -> io::Result<()> {
    fs::write(path, render_heatmap(trace, format))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BiLstmAttention, ModelConfig};
    use crate::vocab::Vocabulary;

    fn trace(weights: &[f64]) -> AttentionTrace {
        AttentionTrace {
            tokens: (0..weights.len()).map(|i| format!("t{i}")).collect(),
            weights: weights.to_vec(),
            predicted_class: 1,
            class_probabilities: [0.2, 0.8],
            truncated: false,
        }
    }

    fn predictor(zero_attention: bool) -> Predictor {
        let texts = [clean_text("great game love it"), clean_text("awful broken mess")];
        let vocab = Vocabulary::build(&texts, 100);
        let config = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 5,
            hidden_dim: 4,
            max_len: 6,
            dropout_rate: 0.5,
            num_layers: 1,
            num_classes: 2,
            seed: 3,
        };
        let mut model = BiLstmAttention::init(config).unwrap();
        if zero_attention {
            for name in ["attention.w", "attention.b"] {
                let id = model.params().find(name).unwrap();
                model.params_mut().get_mut(id).values_mut().fill(0.0);
            }
        }
        Predictor::new(model, vocab, None).unwrap()
    }

    fn parse_csv(s: &str) -> Vec<(String, String)> {
        let mut r = csv::Reader::from_reader(s.as_bytes());
        r.records().map(|x| {
            let x = x.unwrap();
            (x[0].to_string(), x[1].to_string())
        }).collect()
    }

    #[test]
    fn single_token_gets_full_weight() {
        let t = attention_trace(&predictor(false), "Love!").unwrap();
        assert_eq!(t.tokens, vec!["love"]);
        assert_eq!(t.weights, vec![1.0]);
    }

    #[test]
    fn zero_attention_parameters_give_uniform_weights() {
        let t = attention_trace(&predictor(true), "great game and love").unwrap();
        assert_eq!(t.len(), 4);
        for w in &t.weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_sums_to_one_and_reports_truncation() {
        let p = predictor(false);
        let t = attention_trace(&p, "great game love it awful broken mess again and again").unwrap();
        assert!(t.truncated);
        assert_eq!(t.tokens.len(), 6);
        assert_eq!(t.tokens[5], "broken");
        assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(t.weights.iter().all(|&w| w >= 0.0));
        assert!(render_heatmap(&t, HeatmapFormat::Html).contains("truncated"));
    }

    #[test]
    fn junk_does_not_change_the_trace() {
        let p = predictor(false);
        let a = attention_trace(&p, "great game, love it").unwrap();
        let b = attention_trace(&p, "  great game,   love it  https://x.y/z @someone www.spam.com ").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_text_is_an_error() {
        assert_eq!(attention_trace(&predictor(false), "12 !! http://a.b"), Err(PredictError::EmptyText));
    }

    #[test]
    fn uniform_csv() {
        let csv = render_heatmap(&trace(&[0.25; 4]), HeatmapFormat::Csv);
        let rows = parse_csv(&csv);
        assert_eq!(rows.len(), 4);
        for (_, w) in rows {
            assert_eq!(w.parse::<f64>().unwrap(), 0.25);
        }
    }

    #[test]
    fn csv_roundtrip_nine_digits() {
        let weights = [0.123456789123, 0.5, 1.0 / 3.0, 0.376543210877];
        let rows = parse_csv(&render_heatmap(&trace(&weights), HeatmapFormat::Csv));
        for ((tok, w), (i, &orig)) in rows.iter().zip(weights.iter().enumerate()) {
            assert_eq!(tok, &format!("t{i}"));
            assert_eq!(w, &format_weight(orig));
            let back: f64 = w.parse().unwrap();
            assert_eq!(format_weight(back), *w);
            assert!((back - orig).abs() <= orig * 1e-8);
        }
    }

    #[test]
    fn darkest_token_has_the_largest_weight() {
        let t = trace(&[0.7, 0.1, 0.1, 0.1]);
        let a = t.intensities();
        assert_eq!(a[0], 1.0);
        assert!(a[1..].iter().all(|&x| (x - 1.0 / 7.0).abs() < 1e-15));
        let html = render_heatmap(&t, HeatmapFormat::Html);
        assert!(html.starts_with("<!DOCTYPE html>"));
        assert_eq!(html.matches("rgba(214, 39, 40, 1.000000)").count(), 1);
        assert!(html.contains(r#"title="7.00000000e-1""#));
    }

    #[test]
    fn zero_weight_has_no_tint() {
        let t = trace(&[0.0, 1.0]);
        assert_eq!(t.intensities(), vec![0.0, 1.0]);
        assert_eq!(t.argmax(), Some(1));
    }

    #[test]
    fn format_parse() {
        assert_eq!("HTML".parse::<HeatmapFormat>(), Ok(HeatmapFormat::Html));
        assert_eq!("csv".parse::<HeatmapFormat>(), Ok(HeatmapFormat::Csv));
        assert!("png".parse::<HeatmapFormat>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn intensity_is_monotone(ws in proptest::collection::vec(0.0f64..1.0, 1..30)) {
            let total: f64 = ws.iter().sum::<f64>() + 1e-9;
            let t = trace(&ws.iter().map(|w| w / total).collect::<Vec<_>>());
            let a = t.intensities();
            for i in 0..a.len() {
                for j in 0..a.len() {
                    if t.weights[i] <= t.weights[j] {
                        proptest::prop_assert!(a[i] <= a[j]);
                    }
                }
            }
        }
    }
}
