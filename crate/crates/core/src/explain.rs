//! Attention heatmaps: background intensity per token proportional to the
//! skill's attention weight.
//!
//! Only non-template tokens are shown, and their weights are renormalized to
//! sum to one over the shown tokens. Intensity is weight divided by the
//! largest shown weight.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::encoder::{embed_skill, Encoder};
use crate::error::{Error, Result};
use crate::matching::context_match;

/// Full-intensity highlight colour.
const HIGHLIGHT: (u8, u8, u8) = (255, 140, 0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Ansi,
    Html,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ansi" => Ok(Format::Ansi),
            "html" => Ok(Format::Html),
            other => Err(Error::Config(format!("unknown heatmap format {other:?}"))),
        }
    }
}

/// One shown token.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatCell {
    pub token: String,
    pub alpha: f64,
    pub intensity: f64,
}

/// Renormalizes `alpha` over the non-template positions.
pub fn heat_cells(surface: &[String], alpha: &[f64], template: &[bool]) -> Result<Vec<HeatCell>> {
    if surface.len() != alpha.len() || alpha.len() != template.len() {
        return Err(Error::Shape("tokens, weights and template mask differ in length".into()));
    }
    let shown: Vec<usize> = (0..alpha.len()).filter(|&j| !template[j]).collect();
    let total: f64 = shown.iter().map(|&j| alpha[j]).sum();
    if shown.is_empty() || total <= 0.0 {
        return Err(Error::Invalid("nothing to display".into()));
    }
    let weights: Vec<f64> = shown.iter().map(|&j| alpha[j] / total).collect();
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(shown
        .iter()
        .zip(&weights)
        .map(|(&j, &w)| HeatCell {
            token: surface[j].clone(),
            alpha: w,
            intensity: w / max,
        })
        .collect())
}

fn blend(intensity: f64) -> (u8, u8, u8) {
    let mix = |hi: u8| (255.0 - (255.0 - hi as f64) * intensity).round() as u8;
    (mix(HIGHLIGHT.0), mix(HIGHLIGHT.1), mix(HIGHLIGHT.2))
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
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

pub fn render(cells: &[HeatCell], skill: &str, format: Format) -> String {
    match format {
        Format::Ansi => {
            let mut out = String::new();
            for (i, c) in cells.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let (r, g, b) = blend(c.intensity);
                let _ = write!(out, "\x1b[48;2;{r};{g};{b}m\x1b[38;2;0;0;0m{}\x1b[0m", c.token);
            }
            out.push('\n');
            out
        }
        Format::Html => {
            let mut out = String::new();
            out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\"/>\n");
            let _ = writeln!(out, "<title>{}</title>", escape_html(skill));
            out.push_str("</head>\n<body style=\"font-family: monospace;\">\n");
            let _ = writeln!(out, "<p data-skill=\"{}\">", escape_html(skill));
            for c in cells {
                let (r, g, b) = blend(c.intensity);
                let _ = writeln!(
                    out,
                    "<span style=\"background-color: rgb({r}, {g}, {b}); padding: 0 2px;\" data-alpha=\"{}\" data-intensity=\"{}\">{}</span>",
                    c.alpha,
                    c.intensity,
                    escape_html(&c.token)
                );
            }
            out.push_str("</p>\n</body>\n</html>\n");
            out
        }
    }
}

/// Heatmap of `skill`'s attention over `sentence`.
pub fn explain(sentence: &str, skill: &str, encoder: &Encoder, format: Format) -> Result<String> {
    let seq = encoder.tokenize(sentence)?;
    let rows = encoder.encode(&seq)?;
    let m = context_match(&rows, &embed_skill(encoder, skill)?)?;
    let cells = heat_cells(&seq.surface, &m.alpha, &seq.template)?;
    Ok(render(&cells, skill, format))
}
