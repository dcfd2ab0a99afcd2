//! Minimal SVG chart writer: axes, grouped bars and polylines.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const PALETTE: [&str; 8] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Rounds the axis maximum up to 1, 2 or 5 times a power of ten.
fn nice_max(v: f64) -> f64 {
    if !(v.is_finite() && v > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|&m| m >= v).unwrap_or(10.0 * mag)
}

fn tick_label(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e5) {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

struct Frame {
    out: String,
    y_max: f64,
}

impl Frame {
    fn new(title: &str, x_label: &str, y_label: &str, y_max: f64) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
        let (x1, y1) = (WIDTH - RIGHT, HEIGHT - BOTTOM);
        let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#);
        let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{y1}" stroke="black"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (LEFT + x1) / 2.0, HEIGHT - 20.0, escape(x_label));
        let _ = writeln!(
            out,
            r#"<text x="20" y="{0}" text-anchor="middle" transform="rotate(-90 20 {0})">{1}</text>"#,
            (TOP + y1) / 2.0,
            escape(y_label)
        );
        let mut f = Self { out, y_max };
        for i in 0..=5 {
            let v = y_max * i as f64 / 5.0;
            let y = f.y(v);
            let _ = writeln!(f.out, r##"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"##, LEFT - 4.0);
            let _ = writeln!(f.out, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 7.0, y + 4.0, tick_label(v));
        }
        f
    }

    fn y(&self, v: f64) -> f64 {
        let h = HEIGHT - BOTTOM - TOP;
        HEIGHT - BOTTOM - (v / self.y_max).clamp(0.0, 1.0) * h
    }

    fn legend(&mut self, names: &[&str]) {
        for (i, name) in names.iter().enumerate() {
            let y = TOP + 18.0 * i as f64;
            let x = WIDTH - RIGHT + 15.0;
            let _ = writeln!(self.out, r#"<rect x="{x}" y="{y}" width="12" height="12" fill="{}"/>"#, color(i));
            let _ = writeln!(self.out, r#"<text x="{}" y="{}">{}</text>"#, x + 18.0, y + 10.0, escape(name));
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Grouped bar chart: one group per category, one bar per series.
#[derive(Debug, Clone, Default)]
pub struct BarChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub categories: Vec<String>,
    /// Series name and one value per category. Non-finite values draw no bar.
    pub series: Vec<(String, Vec<f64>)>,
}

impl BarChart {
    pub fn render(&self) -> String {
        let max = self.series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).fold(0.0, f64::max);
        let mut f = Frame::new(&self.title, &self.x_label, &self.y_label, nice_max(max));
        let groups = self.categories.len().max(1) as f64;
        let group_w = (WIDTH - LEFT - RIGHT) / groups;
        let bar_w = group_w * 0.8 / self.series.len().max(1) as f64;
        for (g, cat) in self.categories.iter().enumerate() {
            let gx = LEFT + group_w * g as f64;
            for (s, (_, values)) in self.series.iter().enumerate() {
                let Some(v) = values.get(g).copied().filter(|v| v.is_finite()) else { continue };
                let x = gx + group_w * 0.1 + bar_w * s as f64;
                let y = f.y(v);
                let _ = writeln!(
                    f.out,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{bar_w:.2}" height="{:.2}" fill="{}"/>"#,
                    HEIGHT - BOTTOM - y,
                    color(s)
                );
            }
            let _ = writeln!(
                f.out,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                gx + group_w / 2.0,
                HEIGHT - BOTTOM + 16.0,
                escape(cat)
            );
        }
        let names: Vec<&str> = self.series.iter().map(|(n, _)| n.as_str()).collect();
        f.legend(&names);
        f.finish()
    }
}

/// Line chart over `[0, x_max] x [0, y_max]`.
#[derive(Debug, Clone, Default)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_max: f64,
    pub y_max: f64,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

impl LineChart {
    pub fn render(&self) -> String {
        let x_max = if self.x_max > 0.0 { self.x_max } else { 1.0 };
        let mut f = Frame::new(&self.title, &self.x_label, &self.y_label, if self.y_max > 0.0 { self.y_max } else { 1.0 });
        let w = WIDTH - LEFT - RIGHT;
        for i in 0..=5 {
            let v = x_max * i as f64 / 5.0;
            let x = LEFT + w * i as f64 / 5.0;
            let y = HEIGHT - BOTTOM;
            let _ = writeln!(f.out, r#"<line x1="{x:.2}" y1="{y}" x2="{x:.2}" y2="{}" stroke="black"/>"#, y + 4.0);
            let _ = writeln!(f.out, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, y + 16.0, tick_label(v));
        }
        for (s, (_, points)) in self.series.iter().enumerate() {
            let mut pts = String::new();
            for &(px, py) in points.iter().filter(|(a, b)| a.is_finite() && b.is_finite()) {
                let x = LEFT + (px / x_max).clamp(0.0, 1.0) * w;
                let _ = write!(pts, "{x:.2},{:.2} ", f.y(py));
            }
            let _ = writeln!(f.out, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#, pts.trim_end(), color(s));
        }
        let names: Vec<&str> = self.series.iter().map(|(n, _)| n.as_str()).collect();
        f.legend(&names);
        f.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nice_axis_maxima() {
        assert_eq!(nice_max(0.0), 1.0);
        assert_eq!(nice_max(0.73), 1.0);
        assert_eq!(nice_max(130.0), 200.0);
        assert_eq!(nice_max(4100.0), 5000.0);
    }

    #[test]
    fn bar_chart_has_one_rect_per_finite_value() {
        let c = BarChart {
            title: "JCT <p>".into(),
            categories: vec!["a".into(), "b".into()],
            series: vec![("p50".into(), vec![1.0, 2.0]), ("p90".into(), vec![3.0, f64::NAN])],
            ..Default::default()
        };
        let svg = c.render();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("JCT &lt;p&gt;"));
        // Three bars, two legend swatches and the background.
        assert_eq!(svg.matches("<rect").count(), 3 + 2 + 1);
    }

    #[test]
    fn line_chart_is_deterministic() {
        let c = LineChart {
            title: "cdf".into(),
            x_max: 1.0,
            y_max: 1.0,
            series: vec![("x".into(), vec![(0.0, 0.0), (0.5, 0.25), (1.0, 1.0)])],
            ..Default::default()
        };
        assert_eq!(c.render(), c.render());
        assert_eq!(c.render().matches("<polyline").count(), 1);
    }
}
