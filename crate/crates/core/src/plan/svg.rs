//! Minimal SVG line and grouped-bar charts.

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 340.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_top(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.fold(0.0f64, f64::max);
    if m <= 1.0 {
        1.0
    } else {
        m.ceil()
    }
}

struct Frame {
    out: String,
    x0: f64,
    x1: f64,
    ymax: f64,
}

impl Frame {
    fn new(title: &str, x_label: &str, y_label: &str, ymax: f64) -> Self {
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
            (LEFT + WIDTH - RIGHT) / 2.0,
            escape(title)
        );
        let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
        out += &format!("<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n");
        out += &format!("<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n");
        for i in 0..=4 {
            let v = ymax * i as f64 / 4.0;
            let y = y0 - (y0 - y1) * i as f64 / 4.0;
            out += &format!(
                "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{x0}\" y2=\"{y:.1}\" stroke=\"black\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>\n",
                x0 - 4.0,
                x0 - 6.0,
                y + 4.0
            );
        }
        out += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            (x0 + x1) / 2.0,
            HEIGHT - 8.0,
            escape(x_label)
        );
        out += &format!(
            "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>\n",
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        Self { out, x0, x1, ymax }
    }

    fn y(&self, v: f64) -> f64 {
        let (y0, y1) = (HEIGHT - BOTTOM, TOP);
        y0 - (y0 - y1) * (v / self.ymax).clamp(0.0, 1.0)
    }

    fn x_tick(&mut self, x: f64, label: &str) {
        let y0 = HEIGHT - BOTTOM;
        self.out += &format!(
            "<line x1=\"{x:.1}\" y1=\"{y0}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/><text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            y0 + 4.0,
            y0 + 16.0,
            escape(label)
        );
    }

    fn legend(&mut self, names: impl Iterator<Item = String>) {
        for (i, name) in names.enumerate() {
            let y = TOP + 14.0 * i as f64;
            let x = WIDTH - RIGHT + 12.0;
            self.out += &format!(
                "<rect x=\"{x}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
                y - 9.0,
                COLORS[i % COLORS.len()],
                x + 14.0,
                y,
                escape(&name)
            );
        }
    }

    fn finish(mut self) -> String {
        self.out += "</svg>\n";
        self.out
    }
}

/// One polyline per series over numeric x positions.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let ymax = y_top(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let mut f = Frame::new(title, x_label, y_label, ymax);
    let xs: Vec<f64> = {
        let mut v: Vec<f64> = series.iter().flat_map(|s| s.1.iter().map(|p| p.0)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let (lo, hi) = (xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(1.0));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |x: f64| f.x0 + 20.0 + (f.x1 - f.x0 - 40.0) * (x - lo) / span;
    let ticks: Vec<(f64, String)> = xs.iter().map(|&x| (px(x), format!("{x}"))).collect();
    let paths: Vec<String> = series
        .iter()
        .enumerate()
        .map(|(i, (_, pts))| {
            let c = COLORS[i % COLORS.len()];
            let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), f.y(y))).collect();
            let dots: String = pts
                .iter()
                .map(|&(x, y)| format!("<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{c}\"/>", px(x), f.y(y)))
                .collect();
            format!("<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>{dots}\n", d.join(" "))
        })
        .collect();
    for (x, l) in ticks {
        f.x_tick(x, &l);
    }
    for p in paths {
        f.out += &p;
    }
    f.legend(series.iter().map(|s| s.0.clone()));
    f.finish()
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_plot(title: &str, x_label: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let ymax = y_top(series.iter().flat_map(|s| s.1.iter().copied()));
    let mut f = Frame::new(title, x_label, y_label, ymax);
    let groups = categories.len().max(1) as f64;
    let gw = (f.x1 - f.x0) / groups;
    let bw = gw * 0.8 / series.len().max(1) as f64;
    for (g, cat) in categories.iter().enumerate() {
        let gx = f.x0 + gw * g as f64;
        f.x_tick(gx + gw / 2.0, cat);
        for (i, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(g).copied().unwrap_or(0.0);
            let (x, y) = (gx + gw * 0.1 + bw * i as f64, f.y(v));
            f.out += &format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bw:.1}\" height=\"{:.1}\" fill=\"{}\"/>\n",
                HEIGHT - BOTTOM - y,
                COLORS[i % COLORS.len()]
            );
        }
    }
    f.legend(series.iter().map(|s| s.0.clone()));
    f.finish()
}
