//! SVG line charts from the metric CSVs.
//!
//! Any CSV with a header works: the last two columns are x and y, and the
//! columns before them name the series (`iou_threshold` for PR curves,
//! `layer,group` for score CDFs). Each series becomes one `<path>`; axes and
//! ticks are `<line>`/`<text>` only.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart {
    pub series: Vec<Series>,
    pub x_label: String,
    pub y_label: String,
}

/// Parses one CSV into series in order of first appearance. `prefix` is
/// prepended to every series name (used to tell overlaid files apart).
/// Rows and columns in errors are 1-based; the header is row 1.
pub fn parse_series(text: &str, prefix: &str) -> Result<(Vec<Series>, String, String)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok((Vec::new(), "x".into(), "y".into()));
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            column: 1,
            msg: "need at least two columns".into(),
        });
    }
    let n = cols.len();
    let mut series: Vec<Series> = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n {
            return Err(Error::Parse {
                row,
                column: fields.len().min(n) + 1,
                msg: format!("expected {n} fields, found {}", fields.len()),
            });
        }
        let num = |c: usize| {
            fields[c].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                column: c + 1,
                msg: format!("`{}` is not a finite number", fields[c]),
            })
        };
        let (x, y) = (num(n - 2)?, num(n - 1)?);
        let key = fields[..n - 2].join(" ");
        let name = match (prefix.is_empty(), key.is_empty()) {
            (true, _) => key,
            (false, true) => prefix.to_string(),
            (false, false) => format!("{prefix} {key}"),
        };
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((x, y)),
            None => series.push(Series {
                name,
                points: vec![(x, y)],
            }),
        }
    }
    Ok((series, cols[n - 2].to_string(), cols[n - 1].to_string()))
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Fixed-size chart; the ranges cover `[0, 1]` and every point.
pub fn render_svg(chart: &Chart) -> String {
    let (w, h, left, right, top, bottom) = (560.0, 400.0, 60.0, 160.0, 20.0, 50.0);
    let pts = chart.series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 1.0f64, 0.0f64, 1.0f64);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<g stroke="black" stroke-width="1">"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}"/>"#, top + ph, left + pw, top + ph);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}"/>"#, top + ph);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (tx, ty) = (left + f * pw, top + ph - f * ph);
        let _ = writeln!(s, r#"<line x1="{tx:.2}" y1="{}" x2="{tx:.2}" y2="{}"/>"#, top + ph, top + ph + 4.0);
        let _ = writeln!(s, r#"<line x1="{}" y1="{ty:.2}" x2="{left}" y2="{ty:.2}"/>"#, left - 4.0);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="11">"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{:.2}</text>"#,
            left + f * pw,
            top + ph + 16.0,
            x0 + f * (x1 - x0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{:.2}</text>"#,
            left - 6.0,
            top + ph - f * ph + 4.0,
            y0 + f * (y1 - y0)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(&chart.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(&chart.y_label)
    );
    for (i, series) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            left + pw + 10.0,
            top + 12.0 + 14.0 * i as f64,
            escape(&series.name)
        );
    }
    let _ = writeln!(s, "</g>");
    for (i, series) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        for (j, &(x, y)) in series.points.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2}", if j == 0 { "M" } else { " L" }, sx(x), sy(y));
        }
        let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Overlays every `(name, csv text)` input in one chart. With more than one
/// input, series names are prefixed by the input name.
pub fn plot_csvs(inputs: &[(String, String)]) -> Result<String> {
    let mut chart = Chart {
        series: Vec::new(),
        x_label: "x".into(),
        y_label: "y".into(),
    };
    for (i, (name, text)) in inputs.iter().enumerate() {
        let prefix = if inputs.len() > 1 { name.as_str() } else { "" };
        let (series, xl, yl) = parse_series(text, prefix)?;
        if i == 0 {
            chart.x_label = xl;
            chart.y_label = yl;
        }
        chart.series.extend(series);
    }
    Ok(render_svg(&chart))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paths(svg: &str) -> usize {
        svg.matches("<path").count()
    }

    #[test]
    fn empty_input_gives_bare_axes() {
        let svg = plot_csvs(&[("a".into(), String::new())]).unwrap();
        assert_eq!(paths(&svg), 0);
        assert!(svg.contains("<line"));
        let header_only = plot_csvs(&[("a".into(), "iou_threshold,recall,precision\n".into())]).unwrap();
        assert_eq!(paths(&header_only), 0);
    }

    #[test]
    fn two_curves_give_two_paths() {
        let csv = "layer,iou,cdf\n1,0.1,0.5\n1,0.3,1\n2,0.2,1\n";
        let svg = plot_csvs(&[("x".into(), csv.into())]).unwrap();
        assert_eq!(paths(&svg), 2);
        let overlay = plot_csvs(&[("with".into(), "iou,cdf\n0.1,1\n".into()), ("without".into(), "iou,cdf\n0.2,1\n".into())]).unwrap();
        assert_eq!(paths(&overlay), 2);
        assert!(overlay.contains(">with<") && overlay.contains(">without<"));
        assert_eq!(svg, plot_csvs(&[("x".into(), csv.into())]).unwrap());
    }

    #[test]
    fn parse_errors_name_row_and_column() {
        let e = parse_series("a,b,c\n1,0.5,0.5\n2,oops,0.1\n", "").unwrap_err();
        assert!(matches!(e, Error::Parse { row: 3, column: 2, .. }), "{e}");
        let e = parse_series("a,b,c\n1,0.5\n", "").unwrap_err();
        assert!(matches!(e, Error::Parse { row: 2, .. }), "{e}");
        assert!(parse_series("single\n", "").is_err());
    }
}
