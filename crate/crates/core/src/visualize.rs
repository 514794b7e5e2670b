//! Static renderings of induce records: a height bar chart above an
//! attention matrix (rows are targets, columns are tokens), as SVG and text.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::induce::SentenceRecord;

const CELL: f64 = 44.0;
const LEFT: f64 = 90.0;
const TOP: f64 = 20.0;
const BAR_AREA: f64 = 120.0;
const LABEL_GAP: f64 = 36.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grey level for a weight: white at 0, black at the matrix maximum.
pub fn shade(alpha: f64, max_alpha: f64) -> u8 {
    if !(max_alpha > 0.0) {
        return 255;
    }
    let t = (alpha / max_alpha).clamp(0.0, 1.0);
    (255.0 * (1.0 - t)).round() as u8
}

fn max_alpha(r: &SentenceRecord) -> f64 {
    r.phrases.iter().flat_map(|p| p.alpha.iter().copied()).fold(0.0, f64::max)
}

pub fn render_svg(r: &SentenceRecord) -> String {
    let n = r.tokens.len();
    let rows = r.phrases.len();
    let width = LEFT + CELL * n as f64 + 20.0;
    let matrix_top = TOP + BAR_AREA + LABEL_GAP;
    let height = matrix_top + CELL * rows as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width:.0}" height="{height:.0}" fill="white"/>"#);

    // height bars around a zero baseline
    let hi = r.heights.iter().copied().fold(0.0, f64::max);
    let lo = r.heights.iter().copied().fold(0.0, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let scale = BAR_AREA / span;
    let baseline = TOP + hi * scale;
    let _ = writeln!(s, r#"<g class="heights">"#);
    for (i, h) in r.heights.iter().enumerate() {
        let x = LEFT + CELL * i as f64 + 8.0;
        let (y, bh) = if *h >= 0.0 { (baseline - h * scale, h * scale) } else { (baseline, -h * scale) };
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{bh:.2}" fill="#c0392b"><title>{:.4}</title></rect>"##,
            CELL - 16.0,
            h
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT:.2}" y1="{baseline:.2}" x2="{:.2}" y2="{baseline:.2}" stroke="#444"/>"##,
        LEFT + CELL * n as f64
    );
    for (i, tok) in r.tokens.iter().enumerate() {
        let x = LEFT + CELL * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + BAR_AREA + 16.0,
            escape(tok)
        );
    }
    let _ = writeln!(s, "</g>");

    // attention matrix
    let top_alpha = max_alpha(r);
    let _ = writeln!(s, r#"<g class="attention">"#);
    for (row, p) in r.phrases.iter().enumerate() {
        let y = matrix_top + CELL * row as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + CELL / 2.0 + 4.0,
            escape(&r.tokens[p.target])
        );
        for (k, &j) in p.candidates.iter().enumerate() {
            let x = LEFT + CELL * j as f64;
            let g = shade(p.alpha[k], top_alpha);
            let stroke = if j <= p.span_end { "#2c3e50" } else { "#bbbbbb" };
            let text = if g < 128 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{CELL:.2}" height="{CELL:.2}" fill="rgb({g},{g},{g})" stroke="{stroke}"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" fill="{text}">{:.2}</text>"#,
                x + CELL / 2.0,
                y + CELL / 2.0 + 4.0,
                p.alpha[k]
            );
        }
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

pub fn render_text(r: &SentenceRecord) -> String {
    let w = r.tokens.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let hi = r.heights.iter().copied().fold(0.0, |a: f64, b| a.max(b.abs()));
    for (tok, h) in r.tokens.iter().zip(&r.heights) {
        let bars = if hi > 0.0 { ((h.abs() / hi) * 30.0).round() as usize } else { 0 };
        let sign = if *h < 0.0 { '-' } else { '#' };
        let _ = writeln!(s, "{tok:>w$} {h:>9.4} {}", sign.to_string().repeat(bars));
    }
    if !r.phrases.is_empty() {
        s.push('\n');
        let _ = write!(s, "{:>w$} ", "");
        for tok in &r.tokens {
            let _ = write!(s, "{:>w$} ", tok);
        }
        s.push('\n');
        for p in &r.phrases {
            let _ = write!(s, "{:>w$} ", r.tokens[p.target]);
            for j in 0..r.tokens.len() {
                match p.candidates.iter().position(|&c| c == j) {
                    Some(k) if j <= p.span_end => {
                        let _ = write!(s, "{:>w$.2} ", p.alpha[k]);
                    }
                    Some(k) => {
                        let _ = write!(s, "{:>w$} ", format!("({:.2})", p.alpha[k]));
                    }
                    None => {
                        let _ = write!(s, "{:>w$} ", ".");
                    }
                }
            }
            s.push('\n');
        }
    }
    s
}

/// Writes `sentence_NNNN.svg` and `.txt` per record; returns the SVG paths.
pub fn write_all(records: &[SentenceRecord], outdir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut written = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        r.check()?;
        let svg = outdir.join(format!("sentence_{i:04}.svg"));
        fs::write(&svg, render_svg(r)).map_err(|e| Error::io(&svg, e))?;
        let txt = outdir.join(format!("sentence_{i:04}.txt"));
        fs::write(&txt, render_text(r)).map_err(|e| Error::io(&txt, e))?;
        written.push(svg);
    }
    Ok(written)
}
