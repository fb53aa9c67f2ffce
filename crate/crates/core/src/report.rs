//! Run records and file exports: canonical JSON, CSV flattening, PGM
//! saliency maps and HTML/CSV token heat maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

/// Everything needed to rerun a command and compare its output bytewise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    /// Subcommand and arguments as given.
    pub command: Vec<String>,
    pub seed: u64,
    pub config: Value,
    pub results: Value,
    /// Wall-clock seconds per phase; only present when requested, since it
    /// differs between otherwise identical runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Value>,
}

impl RunRecord {
    pub fn new(command: Vec<String>, seed: u64, config: &impl Serialize, results: &impl Serialize) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            command,
            seed,
            config: serde_json::to_value(config)?,
            results: serde_json::to_value(results)?,
            timing: None,
        })
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(&serde_json::to_value(self)?)
    }
}

/// Formats a float with 17 significant digits, enough to round-trip any
/// `f64`.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        // Keeps -0.0 and 0.0 distinct, like every other value.
        return if v.is_sign_negative() {
            "-0.0".into()
        } else {
            "0.0".into()
        };
    }
    format!("{v:.16e}")
}

/// JSON with object keys sorted, floats in [`format_float`] form, two-space
/// indentation and a trailing newline. Non-finite numbers are rejected.
pub fn canonical_json(v: &Value) -> Result<String> {
    let mut out = String::new();
    write_value(&mut out, v, 0)?;
    out.push('\n');
    Ok(out)
}

fn write_value(out: &mut String, v: &Value, depth: usize) -> Result<()> {
    let pad = |out: &mut String, d: usize| out.extend(std::iter::repeat_n("  ", d));
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_u64() {
                write!(out, "{i}").expect("string write");
            } else if let Some(i) = n.as_i64() {
                write!(out, "{i}").expect("string write");
            } else {
                let f = n.as_f64().expect("json number");
                if !f.is_finite() {
                    return Err(Error::Format(format!("non-finite number {f} in record")));
                }
                out.push_str(&format_float(f));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s)?),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return Ok(());
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, depth + 1);
                write_value(out, item, depth + 1)?;
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return Ok(());
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                pad(out, depth + 1);
                out.push_str(&serde_json::to_string(k)?);
                out.push_str(": ");
                write_value(out, &map[*k], depth + 1)?;
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push('}');
        }
    }
    Ok(())
}

/// One `path,value` row per scalar leaf, in canonical key order. Paths use
/// `.key` and `[index]` steps from the root, e.g.
/// `results.stages[1].layer`.
pub fn flatten_csv(v: &Value) -> Result<String> {
    let mut rows = Vec::new();
    flatten_into(v, String::new(), &mut rows)?;
    write_csv(["path", "value"], rows)
}

fn flatten_into(v: &Value, path: String, rows: &mut Vec<[String; 2]>) -> Result<()> {
    match v {
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                flatten_into(item, format!("{path}[{i}]"), rows)?;
            }
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            for k in keys {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                flatten_into(&map[k], p, rows)?;
            }
        }
        Value::String(s) => rows.push([path, s.clone()]),
        scalar => rows.push([path, canonical_json(scalar)?.trim_end().to_string()]),
    }
    Ok(())
}

fn write_csv(header: [&str; 2], rows: Vec<[String; 2]>) -> Result<String> {
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(format!("csv: {e}")))
}

/// Parses rows written by [`flatten_csv`] back into `(path, value)` pairs.
pub fn parse_flat_csv(text: &str) -> Result<Vec<(String, String)>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("csv: {e}"))))
        .collect()
}

/// Binary PGM (`P5`, maxval 255) bytes for a map with values in `[0, 1]`;
/// each pixel is `round(v * 255)` with halves rounded up.
pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::InvalidArgument(format!("PGM needs an [H, W] map, got {s:?}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    for &v in map.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("map value {v} outside [0, 1]")));
        }
        out.push((v * 255.0 + 0.5).floor() as u8);
    }
    Ok(out)
}

pub fn export_saliency_pgm(map: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, pgm_bytes(map)?)?;
    Ok(())
}

/// Background for a score in `[-1, 1]`: red at -1, white at 0, green at 1.
pub fn heat_color(score: f64) -> Result<(u8, u8, u8)> {
    if !(-1.0..=1.0).contains(&score) {
        return Err(Error::InvalidArgument(format!("score {score} outside [-1, 1]")));
    }
    let fade = |t: f64| (255.0 * (1.0 - t) + 0.5).floor() as u8;
    Ok(if score >= 0.0 {
        (fade(score), 255, fade(score))
    } else {
        (255, fade(-score), fade(-score))
    })
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// HTML fragment with one colored `<span>` per token.
pub fn text_heat_html(tokens: &[String], scores: &[f64]) -> Result<String> {
    check_lengths(tokens, scores)?;
    let mut out = String::from("<div class=\"saliency\">");
    for (t, &s) in tokens.iter().zip(scores) {
        let (r, g, b) = heat_color(s)?;
        write!(
            out,
            "<span style=\"background-color: rgb({r}, {g}, {b})\" title=\"{}\">{}</span> ",
            format_float(s),
            escape_html(t)
        )
        .expect("string write");
    }
    out.push_str("</div>\n");
    Ok(out)
}

pub fn text_heat_csv(tokens: &[String], scores: &[f64]) -> Result<String> {
    check_lengths(tokens, scores)?;
    let rows = tokens
        .iter()
        .zip(scores)
        .map(|(t, &s)| [t.clone(), format_float(s)])
        .collect();
    write_csv(["token", "score"], rows)
}

fn check_lengths(tokens: &[String], scores: &[f64]) -> Result<()> {
    if tokens.len() != scores.len() {
        return Err(Error::InvalidArgument(format!(
            "{} tokens but {} scores",
            tokens.len(),
            scores.len()
        )));
    }
    Ok(())
}

/// Writes the HTML fragment to `path` and the `(token, score)` table next to
/// it with a `.csv` extension.
pub fn export_text_heat(tokens: &[String], scores: &[f64], path: &Path) -> Result<()> {
    let html = text_heat_html(tokens, scores)?;
    let csv = text_heat_csv(tokens, scores)?;
    fs::write(path, html)?;
    fs::write(path.with_extension("csv"), csv)?;
    Ok(())
}
