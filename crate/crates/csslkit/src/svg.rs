//! Dependency-free SVG line and bar charts for run reports. Output is a
//! pure function of the data, so re-rendered plots are byte-identical.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt(v: f64) -> String {
    // Fixed-precision keeps coordinates compact; 0.01 px is invisible.
    format!("{v:.2}")
}

/// Shortened tick label for arbitrary magnitudes.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1e4 || a < 1e-3 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    }
}

struct Frame {
    svg: String,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    /// Opens the document and draws title, axes, and y tick labels.
    fn new(title: &str, y_label: &str, y0: f64, y1: f64) -> Frame {
        let mut svg = String::new();
        let _ = write!(
            svg,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
             viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
            W / 2.0,
            esc(title)
        );
        let mut f = Frame { svg, x0: 0.0, x1: 1.0, y0, y1 };
        if f.y1 <= f.y0 {
            f.y1 = f.y0 + 1.0;
        }
        let plot_bottom = H - MARGIN_B;
        let _ = write!(
            f.svg,
            "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <text x=\"16\" y=\"{my}\" text-anchor=\"middle\" \
             transform=\"rotate(-90 16 {my})\">{lab}</text>\n",
            l = fmt(MARGIN_L),
            t = fmt(MARGIN_T),
            b = fmt(plot_bottom),
            r = fmt(W - MARGIN_R),
            my = fmt((MARGIN_T + plot_bottom) / 2.0),
            lab = esc(y_label),
        );
        for i in 0..=4 {
            let v = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
            let y = f.py(v);
            let _ = write!(
                f.svg,
                "<line x1=\"{l}\" y1=\"{y}\" x2=\"{r}\" y2=\"{y}\" stroke=\"#ddd\"/>\n\
                 <text x=\"{lx}\" y=\"{ty}\" text-anchor=\"end\">{lab}</text>\n",
                l = fmt(MARGIN_L),
                r = fmt(W - MARGIN_R),
                y = fmt(y),
                lx = fmt(MARGIN_L - 6.0),
                ty = fmt(y + 4.0),
                lab = tick_label(v),
            );
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        let span = (self.x1 - self.x0).max(f64::MIN_POSITIVE);
        MARGIN_L + (x - self.x0) / span * (W - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y1 - self.y0).max(f64::MIN_POSITIVE);
        let bottom = H - MARGIN_B;
        bottom - (y - self.y0) / span * (bottom - MARGIN_T)
    }

    fn close(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

/// A line chart of one or more `(x, y)` series sharing both axes.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let points = series.iter().flat_map(|(_, pts)| pts.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if y0 > 0.0 && y0 / (y1.abs() + f64::MIN_POSITIVE) < 0.5 {
        y0 = 0.0; // anchor at zero unless the data hugs a narrow band
    }
    let mut f = Frame::new(title, y_label, y0, y1.max(y0 + 1e-12));
    f.x0 = x0;
    f.x1 = if x1 > x0 { x1 } else { x0 + 1.0 };

    let _ = write!(
        f.svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        fmt((MARGIN_L + W - MARGIN_R) / 2.0),
        fmt(H - 18.0),
        esc(x_label)
    );
    for i in 0..=4 {
        let v = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let _ = write!(
            f.svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            fmt(f.px(v)),
            fmt(H - MARGIN_B + 18.0),
            tick_label(v)
        );
    }
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{},{}", fmt(f.px(x)), fmt(f.py(y)))).collect();
        let _ = write!(
            f.svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            coords.join(" ")
        );
        let ly = MARGIN_T + 16.0 * si as f64;
        let _ = write!(
            f.svg,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"4\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\">{}</text>\n",
            fmt(W - MARGIN_R - 150.0),
            fmt(ly),
            fmt(W - MARGIN_R - 132.0),
            fmt(ly + 6.0),
            esc(name)
        );
    }
    f.close()
}

/// A labeled vertical bar chart.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let top = bars.iter().map(|&(_, v)| v).fold(0.0f64, f64::max);
    let f = Frame::new(title, y_label, 0.0, if top > 0.0 { top } else { 1.0 });
    let mut svg = f.svg.clone();
    let n = bars.len().max(1) as f64;
    let span = W - MARGIN_L - MARGIN_R;
    let slot = span / n;
    let bar_w = slot * 0.6;
    for (i, (label, v)) in bars.iter().enumerate() {
        let cx = MARGIN_L + slot * (i as f64 + 0.5);
        let y = f.py(v.max(0.0));
        let _ = write!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n\
             <text x=\"{cx:.2}\" y=\"{}\" text-anchor=\"end\" \
             transform=\"rotate(-45 {cx:.2} {ly})\" font-size=\"10\">{}</text>\n",
            fmt(cx - bar_w / 2.0),
            fmt(y),
            fmt(bar_w),
            fmt((H - MARGIN_B - y).max(0.0)),
            PALETTE[0],
            fmt(H - MARGIN_B + 14.0),
            esc(label),
            ly = fmt(H - MARGIN_B + 14.0),
        );
    }
    svg.push_str("</svg>\n");
    svg
}
