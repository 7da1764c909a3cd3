//! Minimal static SVG charts.

use std::fmt::Write;

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(lo, hi): (f64, f64)| {
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        };
        Frame {
            x: widen(x),
            y: widen(y),
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{:.3}", v)
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

fn header(
    out: &mut String,
    title: &str,
    frame: &Frame,
    x_label: &str,
    y_label: &str,
    y_tick: impl Fn(f64) -> String,
) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = write!(
        out,
        r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y1 - y0
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let xv = frame.x.0 + f * (frame.x.1 - frame.x.0);
        let yv = frame.y.0 + f * (frame.y.1 - frame.y.0);
        let (px, py) = (frame.px(xv), frame.py(yv));
        let _ = write!(
            out,
            r#"<line x1="{px}" y1="{y1}" x2="{px}" y2="{}" stroke="black"/>"#,
            y1 + 5.0
        );
        let _ = write!(
            out,
            r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#,
            y1 + 19.0,
            fmt_tick(xv)
        );
        let _ = write!(
            out,
            r##"<line x1="{x0}" y1="{py}" x2="{x1}" y2="{py}" stroke="#dddddd"/>"##
        );
        let _ = write!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            py + 4.0,
            y_tick(yv)
        );
    }
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = write!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let c = PALETTE[i % PALETTE.len()];
        let _ = write!(
            out,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{c}" stroke-width="2"/>"#,
            x + 20.0
        );
        let _ = write!(
            out,
            r#"<text x="{}" y="{}">{}</text>"#,
            x + 26.0,
            y + 4.0,
            escape(name)
        );
    }
}

/// Line chart; y values are clipped to `y_clip` when given.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    y_clip: Option<(f64, f64)>,
) -> String {
    let clip = |y: f64| y_clip.map_or(y, |(lo, hi)| y.clamp(lo, hi));
    let pts = || {
        series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|p| p.0.is_finite() && p.1.is_finite())
    };
    let fold =
        |f: fn(f64, f64) -> f64, init: f64, v: &mut dyn Iterator<Item = f64>| v.fold(init, f);
    let x = (
        fold(f64::min, f64::INFINITY, &mut pts().map(|p| p.0)),
        fold(f64::max, f64::NEG_INFINITY, &mut pts().map(|p| p.0)),
    );
    let y = (
        fold(f64::min, f64::INFINITY, &mut pts().map(|p| clip(p.1))),
        fold(f64::max, f64::NEG_INFINITY, &mut pts().map(|p| clip(p.1))),
    );
    let frame = if x.0.is_finite() {
        Frame::new(x, y)
    } else {
        Frame::new((0.0, 1.0), (0.0, 1.0))
    };
    let mut out = String::new();
    header(&mut out, title, &frame, x_label, y_label, fmt_tick);
    for (i, s) in series.iter().enumerate() {
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(clip(y))))
            .collect();
        let c = PALETTE[i % PALETTE.len()];
        let _ = write!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
            path.join(" ")
        );
    }
    legend(
        &mut out,
        &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(),
    );
    out.push_str("</svg>\n");
    out
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

/// Box-and-whisker chart (quartiles, min/max whiskers) on a log10 axis.
pub fn box_chart(title: &str, y_label: &str, groups: &[(String, Vec<f64>)]) -> String {
    let stats: Vec<Option<[f64; 5]>> = groups
        .iter()
        .map(|(_, v)| {
            let mut s: Vec<f64> = v
                .iter()
                .copied()
                .filter(|x| x.is_finite() && *x > 0.0)
                .map(f64::log10)
                .collect();
            if s.is_empty() {
                return None;
            }
            s.sort_by(f64::total_cmp);
            Some([
                s[0],
                quantile(&s, 0.25),
                quantile(&s, 0.5),
                quantile(&s, 0.75),
                s[s.len() - 1],
            ])
        })
        .collect();
    let lo = stats
        .iter()
        .flatten()
        .map(|s| s[0])
        .fold(f64::INFINITY, f64::min);
    let hi = stats
        .iter()
        .flatten()
        .map(|s| s[4])
        .fold(f64::NEG_INFINITY, f64::max);
    let y = if lo.is_finite() {
        (lo.floor(), hi.ceil())
    } else {
        (0.0, 1.0)
    };
    let frame = Frame::new((-0.5, groups.len() as f64 - 0.5), y);
    let mut out = String::new();
    header(&mut out, title, &frame, "", y_label, |v| {
        fmt_tick(10f64.powf(v))
    });
    for (i, ((name, _), st)) in groups.iter().zip(&stats).enumerate() {
        let cx = frame.px(i as f64);
        let _ = write!(
            out,
            r#"<text x="{cx}" y="{}" text-anchor="end" transform="rotate(-30 {cx} {})" font-size="10">{}</text>"#,
            H - BOTTOM + 32.0,
            H - BOTTOM + 32.0,
            escape(name)
        );
        let Some([mn, q1, md, q3, mx]) = *st else {
            continue;
        };
        let half = 0.3 * (frame.px(1.0) - frame.px(0.0)) / 2.0;
        let c = PALETTE[0];
        let _ = write!(
            out,
            r#"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/>"#,
            frame.py(mn),
            frame.py(mx)
        );
        let _ = write!(
            out,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{c}" fill-opacity="0.35" stroke="{c}"/>"#,
            cx - half,
            frame.py(q3),
            2.0 * half,
            (frame.py(q1) - frame.py(q3)).max(0.5)
        );
        let _ = write!(
            out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            frame.py(md),
            cx + half,
            frame.py(md)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_well_formed() {
        let s = vec![
            Series {
                name: "a<b".into(),
                points: vec![(1.0, 0.2), (2.0, 0.5), (3.0, f64::NAN)],
            },
            Series {
                name: "c".into(),
                points: vec![(1.0, -100.0), (2.0, 1.0)],
            },
        ];
        let svg = line_chart("t", "x", "y", &s, Some((-1.0, 1.1)));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("NaN"));
        assert_eq!(svg, line_chart("t", "x", "y", &s, Some((-1.0, 1.1))));
    }

    #[test]
    fn box_chart_handles_empty_groups() {
        let g = vec![
            ("a".to_string(), vec![1.0, 10.0, 100.0]),
            ("b".to_string(), vec![]),
        ];
        let svg = box_chart("m", "mse", &g);
        assert_eq!(svg.matches("<rect").count(), 3);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[7.0], 0.25), 7.0);
    }
}
