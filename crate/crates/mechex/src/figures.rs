//! Dependency-free SVG rendering: score curves, matrix heatmaps, accuracy
//! curves with reference lines, and image strips drawn as per-pixel rects.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::tensor::{Real, Tensor};

const CURVE_COLORS: [&str; 16] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94",
];

/// Trailing moving average with the given window; output has
/// `n - window + 1` points (or a single overall mean when `n < window`).
pub fn moving_average(values: &[Real], window: usize) -> Vec<Real> {
    let window = window.max(1);
    if values.is_empty() {
        return Vec::new();
    }
    if values.len() < window {
        return vec![values.iter().sum::<Real>() / values.len() as Real];
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: Real = values[..window].iter().sum();
    out.push(sum / window as Real);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as Real);
    }
    out
}

pub struct Series {
    pub name: String,
    /// (x, y) points, already smoothed if desired.
    pub points: Vec<(Real, Real)>,
}

pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Dashed horizontal reference lines with labels.
    pub reference_lines: Vec<(Real, String)>,
    /// Fixed y range; autoscaled when `None`.
    pub y_range: Option<(Real, Real)>,
}

const W: f64 = 760.0;
const H: f64 = 420.0;
const ML: f64 = 58.0;
const MR: f64 = 140.0;
const MT: f64 = 38.0;
const MB: f64 = 48.0;

fn svg_open(out: &mut String, width: f64, height: f64, comment: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    if !comment.is_empty() {
        let _ = writeln!(out, "<!-- {comment} -->");
    }
    let _ = writeln!(
        out,
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>"
    );
}

impl LineChart {
    pub fn render(&self) -> String {
        let (px, py) = (W - ML - MR, H - MT - MB);
        let mut xs: Vec<Real> = Vec::new();
        let mut ys: Vec<Real> = Vec::new();
        for s in &self.series {
            for &(x, y) in &s.points {
                xs.push(x);
                ys.push(y);
            }
        }
        for &(y, _) in &self.reference_lines {
            ys.push(y);
        }
        let (x0, x1) = span(&xs);
        let (y0, y1) = match self.y_range {
            Some((a, b)) => (a, b),
            None => pad_span(span(&ys)),
        };
        let sx = |x: Real| ML + px * ((x - x0) / (x1 - x0).max(1e-12)) as f64;
        let sy = |y: Real| MT + py * (1.0 - ((y - y0) / (y1 - y0).max(1e-12)) as f64);

        let mut out = String::new();
        svg_open(&mut out, W, H, "");
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
            ML + px / 2.0,
            xml_escape(&self.title)
        );
        // axes
        let _ = writeln!(
            out,
            "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"#333\"/>",
            MT + py
        );
        let _ = writeln!(
            out,
            "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>",
            MT + py,
            ML + px,
            MT + py
        );
        // ticks
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as Real / 4.0;
            let fy = y0 + (y1 - y0) * i as Real / 4.0;
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\" fill=\"#333\">{}</text>",
                sx(fx),
                MT + py + 16.0,
                format_tick(fx)
            );
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\" fill=\"#333\">{}</text>",
                ML - 6.0,
                sy(fy) + 3.0,
                format_tick(fy)
            );
            let _ = writeln!(
                out,
                "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#eee\"/>",
                sy(fy),
                ML + px,
                sy(fy)
            );
        }
        // axis labels
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
            ML + px / 2.0,
            H - 10.0,
            xml_escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            "<text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
            MT + py / 2.0,
            MT + py / 2.0,
            xml_escape(&self.y_label)
        );
        // reference lines
        for (y, label) in &self.reference_lines {
            let yy = sy(*y);
            let _ = writeln!(
                out,
                "<line x1=\"{ML}\" y1=\"{yy}\" x2=\"{}\" y2=\"{yy}\" stroke=\"#555\" stroke-dasharray=\"6 4\"/>",
                ML + px
            );
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"#555\">{}</text>",
                ML + px + 4.0,
                yy + 3.0,
                xml_escape(label)
            );
        }
        // series
        for (i, s) in self.series.iter().enumerate() {
            let color = CURVE_COLORS[i % CURVE_COLORS.len()];
            let mut path = String::new();
            for (k, &(x, y)) in s.points.iter().enumerate() {
                let _ = write!(path, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, sx(x), sy(y));
            }
            let _ = writeln!(
                out,
                "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                path.trim_end()
            );
            let ly = MT + 14.0 * i as f64;
            let _ = writeln!(
                out,
                "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>",
                ML + px + 4.0,
                ML + px + 22.0
            );
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
                ML + px + 26.0,
                ly + 3.0,
                xml_escape(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn span(xs: &[Real]) -> (Real, Real) {
    let lo = xs.iter().cloned().fold(Real::INFINITY, Real::min);
    let hi = xs.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    if lo.is_finite() && hi.is_finite() && lo < hi {
        (lo, hi)
    } else if lo.is_finite() {
        (lo - 0.5, lo + 0.5)
    } else {
        (0.0, 1.0)
    }
}

fn pad_span((lo, hi): (Real, Real)) -> (Real, Real) {
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn format_tick(v: Real) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Heatmap of a row-major matrix with labelled axes; dark = 1, light = 0.
pub fn heatmap(
    title: &str,
    row_labels: &[String],
    col_labels: &[String],
    rows: &[Vec<Real>],
    comment: &str,
) -> String {
    let cell = 30.0;
    let ml = 64.0;
    let mt = 56.0;
    let width = ml + cell * col_labels.len() as f64 + 20.0;
    let height = mt + cell * row_labels.len() as f64 + 20.0;
    let mut out = String::new();
    svg_open(&mut out, width, height, comment);
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>",
        width / 2.0,
        xml_escape(title)
    );
    for (j, label) in col_labels.iter().enumerate() {
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            ml + cell * (j as f64 + 0.5),
            mt - 8.0,
            xml_escape(label)
        );
    }
    for (i, label) in row_labels.iter().enumerate() {
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            ml - 6.0,
            mt + cell * (i as f64 + 0.65),
            xml_escape(label)
        );
    }
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0) as f64 * 0.92)) as u8;
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#ccc\" stroke-width=\"0.5\"><title>{v:.3}</title></rect>",
                ml + cell * j as f64,
                mt + cell * i as f64
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Grid of grayscale images (rows of labelled strips) rendered as raw SVG
/// rects, one per pixel run.
pub fn image_strip(
    title: &str,
    rows: &[(String, Vec<Tensor>)],
    comment: &str,
) -> String {
    let scale = 2.0;
    let side = rows
        .first()
        .and_then(|(_, imgs)| imgs.first())
        .map(|t| {
            let s = t.shape();
            (s[s.len() - 2], s[s.len() - 1])
        })
        .unwrap_or((1, 1));
    let (h, w) = side;
    let label_w = 120.0;
    let gap = 6.0;
    let cols = rows.iter().map(|(_, i)| i.len()).max().unwrap_or(0);
    let width = label_w + cols as f64 * (w as f64 * scale + gap) + 10.0;
    let height = 34.0 + rows.len() as f64 * (h as f64 * scale + gap);
    let mut out = String::new();
    svg_open(&mut out, width, height, comment);
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>",
        width / 2.0,
        xml_escape(title)
    );
    for (r, (label, images)) in rows.iter().enumerate() {
        let y0 = 30.0 + r as f64 * (h as f64 * scale + gap);
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            label_w - 6.0,
            y0 + h as f64 * scale / 2.0,
            xml_escape(label)
        );
        for (c, img) in images.iter().enumerate() {
            let x0 = label_w + c as f64 * (w as f64 * scale + gap);
            render_image(&mut out, img, x0, y0, scale);
        }
    }
    out.push_str("</svg>\n");
    out
}

/// One grayscale image as horizontal runs of equal-valued pixels.
fn render_image(out: &mut String, img: &Tensor, x0: f64, y0: f64, scale: f64) {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let data = img.data();
    let _ = writeln!(
        out,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{}\" height=\"{}\" fill=\"black\"/>",
        w as f64 * scale,
        h as f64 * scale
    );
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        let mut x = 0;
        while x < w {
            let q = quantize(row[x]);
            let mut run = 1;
            while x + run < w && quantize(row[x + run]) == q {
                run += 1;
            }
            if q > 0 {
                let shade = q;
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{scale}\" fill=\"rgb({shade},{shade},{shade})\"/>",
                    x0 + x as f64 * scale,
                    y0 + y as f64 * scale,
                    run as f64 * scale
                );
            }
            x += run;
        }
    }
}

fn quantize(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_svg(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_window_arithmetic() {
        // 100 points with window 50 -> 51 smoothed points
        let xs: Vec<Real> = (0..100).map(|i| i as Real).collect();
        let sm = moving_average(&xs, 50);
        assert_eq!(sm.len(), 51);
        // first point is the mean of 0..50
        assert!((sm[0] - 24.5).abs() < 1e-4);
        assert!((sm[50] - 74.5).abs() < 1e-4);

        // shorter input collapses to a single mean
        assert_eq!(moving_average(&[1.0, 3.0], 50), vec![2.0]);
        assert!(moving_average(&[], 10).is_empty());
    }

    #[test]
    fn heatmap_encodes_identity_diagonal_darkest() {
        let labels: Vec<String> = (0..3).map(|i| format!("m{i}")).collect();
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let svg = heatmap("t", &labels, &labels, &rows, "hash=x");
        // 3 dark cells (value 1.0 -> shade 20), 6 light (shade 255)
        assert_eq!(svg.matches("rgb(20,20,255)").count(), 3);
        assert_eq!(svg.matches("rgb(255,255,255)").count(), 6);
        assert!(svg.contains("hash=x"));
    }

    #[test]
    fn line_chart_renders_all_series_and_references() {
        let chart = LineChart {
            title: "scores".into(),
            x_label: "iteration".into(),
            y_label: "score".into(),
            series: vec![
                Series {
                    name: "expert 0".into(),
                    points: (0..10).map(|i| (i as Real, 0.1 * i as Real)).collect(),
                },
                Series {
                    name: "expert 1".into(),
                    points: (0..10).map(|i| (i as Real, 1.0 - 0.05 * i as Real)).collect(),
                },
            ],
            reference_lines: vec![(0.99, "original".into()), (0.4, "transformed".into())],
            y_range: Some((0.0, 1.0)),
        };
        let svg = chart.render();
        assert_eq!(svg.matches("<path").count(), 2);
        assert_eq!(svg.matches("stroke-dasharray").count(), 2);
        assert!(svg.contains("expert 1"));
    }

    #[test]
    fn image_strip_draws_pixels() {
        let img = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.0]).unwrap();
        let svg = image_strip("strip", &[("row".into(), vec![img])], "");
        assert!(svg.contains("rgb(255,255,255)"));
        assert!(svg.contains("rgb(128,128,128)"));
    }
}
