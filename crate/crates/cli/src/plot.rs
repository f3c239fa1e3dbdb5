//! Dependency-free SVG charts. Each chart embeds its source numbers as an
//! escaped CSV table inside a `<metadata>` element, so the data rides along
//! with the picture.

use std::fmt::Write as _;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 168.0;
const TOP: f64 = 44.0;
const BOTTOM: f64 = 64.0;

const PALETTE: [&str; 6] =
    ["#1f6feb", "#d1242f", "#2da44e", "#bf8700", "#8250df", "#57606a"];

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    /// Half-width of the whisker drawn around the value (0 for none).
    pub spread: f64,
}

pub fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(ch),
        }
    }
    out
}

/// Short decimal with trailing zeros trimmed; scientific for extremes.
fn fmt_num(v: f64) -> String {
    if !v.is_finite() {
        return "-".into();
    }
    let a = v.abs();
    if a != 0.0 && (a >= 1e5 || a < 1e-3) {
        return format!("{v:.2e}");
    }
    let mut s = format!("{v:.3}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Finite min/max padded by 5%, with fallbacks for empty or flat inputs.
fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(svg: &mut String, title: &str, table: &str) {
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="monospace" font-size="12">"#
    );
    let _ = writeln!(svg, "<title>{}</title>", xml_escape(title));
    let _ = writeln!(svg, "<metadata id=\"data-table\">{}</metadata>", xml_escape(table));
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="24" font-size="15">{}</text>"#,
        LEFT,
        xml_escape(title)
    );
}

fn axes(svg: &mut String, x_label: &str, y_label: &str) {
    let x1 = LEFT;
    let x2 = WIDTH - RIGHT;
    let y1 = TOP;
    let y2 = HEIGHT - BOTTOM;
    let _ = writeln!(
        svg,
        r#"<path d="M {x1:.1} {y1:.1} L {x1:.1} {y2:.1} L {x2:.1} {y2:.1}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x1 + x2) / 2.0,
        HEIGHT - 14.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        (y1 + y2) / 2.0,
        (y1 + y2) / 2.0,
        xml_escape(y_label)
    );
}

fn y_ticks(svg: &mut String, lo: f64, hi: f64) {
    let x1 = LEFT;
    let x2 = WIDTH - RIGHT;
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let v = lo + f * (hi - lo);
        let y = HEIGHT - BOTTOM - f * (HEIGHT - TOP - BOTTOM);
        let _ = writeln!(
            svg,
            r##"<line x1="{x1:.1}" y1="{y:.1}" x2="{x2:.1}" y2="{y:.1}" stroke="#dddddd" stroke-width="1"/>"##
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x1 - 6.0,
            y + 4.0,
            fmt_num(v)
        );
    }
}

fn scale(lo: f64, hi: f64, v: f64, out_lo: f64, out_hi: f64) -> f64 {
    out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)
}

/// Line chart: one polyline per series, points marked, legend on the right.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut table = String::from("series,x,y\n");
    for s in series {
        for (x, y) in &s.points {
            let _ = writeln!(table, "{},{x},{y}", s.label);
        }
    }
    let mut svg = String::new();
    header(&mut svg, title, &table);
    let finite =
        |pts: &[(f64, f64)]| -> Vec<(f64, f64)> {
            pts.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect()
        };
    let (x_lo, x_hi) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_lo, y_hi) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    y_ticks(&mut svg, y_lo, y_hi);
    // X tick labels under the axis.
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let v = x_lo + f * (x_hi - x_lo);
        let x = scale(x_lo, x_hi, v, LEFT, WIDTH - RIGHT);
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 18.0,
            fmt_num(v)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts = finite(&s.points);
        if pts.len() >= 2 {
            let mut d = String::new();
            for (x, y) in &pts {
                let px = scale(x_lo, x_hi, *x, LEFT, WIDTH - RIGHT);
                let py = scale(y_lo, y_hi, *y, HEIGHT - BOTTOM, TOP);
                let _ = write!(d, "{px:.1},{py:.1} ");
            }
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                d.trim_end()
            );
        }
        for (x, y) in &pts {
            let px = scale(x_lo, x_hi, *x, LEFT, WIDTH - RIGHT);
            let py = scale(y_lo, y_hi, *y, HEIGHT - BOTTOM, TOP);
            let _ = writeln!(svg, r#"<circle cx="{px:.1}" cy="{py:.1}" r="2.5" fill="{color}"/>"#);
        }
        // Legend entry.
        let ly = TOP + 14.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#,
            ly - 9.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#,
            lx + 14.0,
            xml_escape(&s.label)
        );
    }
    axes(&mut svg, x_label, y_label);
    svg.push_str("</svg>\n");
    svg
}

/// Bar chart with optional whiskers; labels sit under each bar.
pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    let mut table = String::from("label,value,spread\n");
    for b in bars {
        let _ = writeln!(table, "{},{},{}", b.label, b.value, b.spread);
    }
    let mut svg = String::new();
    header(&mut svg, title, &table);
    let (mut y_lo, mut y_hi) = bounds(
        bars.iter()
            .flat_map(|b| [b.value - b.spread.abs(), b.value + b.spread.abs()]),
    );
    // Anchor bars at zero when everything sits on one side of it.
    y_lo = y_lo.min(0.0);
    y_hi = y_hi.max(0.0);
    y_ticks(&mut svg, y_lo, y_hi);
    let span = WIDTH - LEFT - RIGHT;
    let n = bars.len().max(1) as f64;
    let slot = span / n;
    let bw = (slot * 0.6).min(60.0);
    let y_of = |v: f64| scale(y_lo, y_hi, v, HEIGHT - BOTTOM, TOP);
    for (i, b) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = LEFT + slot * (i as f64 + 0.5);
        let (y0, y1) = (y_of(0.0), y_of(b.value));
        let (top, bot) = if y1 < y0 { (y1, y0) } else { (y0, y1) };
        let _ = writeln!(
            svg,
            r#"<rect x="{:.1}" y="{top:.1}" width="{bw:.1}" height="{:.1}" fill="{color}"/>"#,
            cx - bw / 2.0,
            (bot - top).max(0.5)
        );
        if b.spread.abs() > 0.0 && b.spread.is_finite() {
            let (wy1, wy2) = (y_of(b.value - b.spread.abs()), y_of(b.value + b.spread.abs()));
            let _ = writeln!(
                svg,
                r#"<line x1="{cx:.1}" y1="{wy1:.1}" x2="{cx:.1}" y2="{wy2:.1}" stroke="black" stroke-width="1"/>"#
            );
            for wy in [wy1, wy2] {
                let _ = writeln!(
                    svg,
                    r#"<line x1="{:.1}" y1="{wy:.1}" x2="{:.1}" y2="{wy:.1}" stroke="black" stroke-width="1"/>"#,
                    cx - 5.0,
                    cx + 5.0
                );
            }
        }
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 18.0,
            xml_escape(&b.label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
            top - 4.0,
            fmt_num(b.value)
        );
    }
    axes(&mut svg, "", y_label);
    svg.push_str("</svg>\n");
    svg
}

/// Minimal XML well-formedness check used by tests and the report command:
/// tags balance, attributes are quoted, and text is properly escaped.
pub fn check_well_formed(xml: &str) -> Result<(), String> {
    let mut stack: Vec<String> = Vec::new();
    let bytes = xml.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'<' => {
                let end = xml[i..]
                    .find('>')
                    .map(|j| i + j)
                    .ok_or_else(|| "unterminated tag".to_string())?;
                let body = &xml[i + 1..end];
                if body.starts_with('?') || body.starts_with('!') {
                    // Declaration or comment; no balancing needed.
                } else if let Some(name) = body.strip_prefix('/') {
                    let open = stack.pop().ok_or(format!("stray closing tag </{name}>"))?;
                    if open != name.trim() {
                        return Err(format!("mismatched </{name}>, expected </{open}>"));
                    }
                } else {
                    let name: String = body
                        .chars()
                        .take_while(|c| !c.is_whitespace() && *c != '/')
                        .collect();
                    if name.is_empty() {
                        return Err("empty tag name".into());
                    }
                    let quotes = body.matches('"').count();
                    if quotes % 2 != 0 {
                        return Err(format!("unbalanced attribute quotes in <{name}>"));
                    }
                    if !body.ends_with('/') {
                        stack.push(name);
                    }
                }
                i = end + 1;
            }
            b'>' => return Err("stray '>' outside a tag".into()),
            b'&' => {
                let rest = &xml[i..];
                let ok = ["&amp;", "&lt;", "&gt;", "&quot;", "&apos;"]
                    .iter()
                    .any(|e| rest.starts_with(e));
                if !ok {
                    return Err("unescaped '&'".into());
                }
                i += 1;
            }
            _ => i += 1,
        }
    }
    if stack.is_empty() {
        Ok(())
    } else {
        Err(format!("unclosed tags: {stack:?}"))
    }
}
